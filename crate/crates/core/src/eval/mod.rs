//! One-pass evaluation: metrics, groundtruth ingestion and reports.

mod dataset;
mod metrics;
mod ope;
mod report;

pub use dataset::{
    format_boxes, load_sequence, parse_box_line, parse_boxes, read_boxes, write_boxes, write_sequence,
    SequenceDataset, ABSENCE_FLAGS, FRAME_DIR, GROUNDTRUTH_FILE, LANGUAGE_FILE,
};
pub use metrics::{
    ao_sr, center_error, compute_metrics, iou, normalized_center_error, normalized_precision,
    normalized_precision_curve, np_thresholds, precision_at, success_curve, success_thresholds, Metrics,
    NUM_THRESHOLDS, PRECISION_RADIUS,
};
pub use ope::{evaluate, run_ope, run_ope_with, OpeRun, SessionTracker, Tracker};
pub use report::{aggregate, EvaluationReport, MetricReport};
