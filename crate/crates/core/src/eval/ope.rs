use super::dataset::SequenceDataset;
use super::report::{EvaluationReport, MetricReport};
use crate::bag::BagOfDescriptions;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fusion::TrackingSession;
use crate::geometry::BBox;
use crate::image::ImagePatch;

/// Anything that can be run under one-pass evaluation.
pub trait Tracker {
    fn init(&mut self, frame: &ImagePatch, bbox: BBox) -> Result<()>;
    fn track(&mut self, frame: &ImagePatch) -> Result<BBox>;
}

/// The language-guided tracker bound to a bag of descriptions.
pub struct SessionTracker<'a> {
    pub session: TrackingSession<'a>,
    pub bag: &'a BagOfDescriptions,
}

impl Tracker for SessionTracker<'_> {
    fn init(&mut self, frame: &ImagePatch, bbox: BBox) -> Result<()> {
        self.session.initialize(frame, bbox, self.bag)
    }

    fn track(&mut self, frame: &ImagePatch) -> Result<BBox> {
        self.session.track_frame(frame)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpeRun {
    /// One entry per frame; frame 1 holds the initialization box.
    pub predictions: Vec<Option<BBox>>,
    pub report: MetricReport,
}

/// Initialize on the first frame's ground truth and track every later
/// frame once, loading frames from disk.
pub fn run_ope<T: Tracker + ?Sized>(tracker: &mut T, dataset: &SequenceDataset) -> Result<OpeRun> {
    run_ope_with(tracker, dataset, |i| dataset.load_frame(i))
}

/// [`run_ope`] with a caller-supplied frame source. Frame loading errors
/// propagate; tracker errors end the run with an invalid report.
pub fn run_ope_with<T, F>(tracker: &mut T, dataset: &SequenceDataset, mut frame: F) -> Result<OpeRun>
where
    T: Tracker + ?Sized,
    F: FnMut(usize) -> Result<ImagePatch>,
{
    let init_box = dataset
        .boxes
        .first()
        .copied()
        .flatten()
        .ok_or_else(|| Error::Data(format!("sequence `{}` has no target on its first frame", dataset.name)))?;
    let mut predictions = vec![None; dataset.len()];
    let mut failure = None;
    match tracker.init(&frame(0)?, init_box) {
        Ok(()) => {
            predictions[0] = Some(init_box);
            for (i, slot) in predictions.iter_mut().enumerate().skip(1) {
                let img = frame(i)?;
                match tracker.track(&img) {
                    Ok(b) => *slot = Some(b),
                    Err(e) => {
                        failure = Some(Error::Frame {
                            frame: i + 1,
                            source: Box::new(e),
                        });
                        break;
                    }
                }
            }
        }
        Err(e) => {
            failure = Some(Error::Frame {
                frame: 1,
                source: Box::new(e),
            })
        }
    }
    let mut report = MetricReport::from_predictions(dataset, &predictions)?;
    if let Some(e) = failure {
        log::warn!("sequence `{}`: {e}", dataset.name);
        report.valid = false;
        report.failure = Some(e.to_string());
    }
    Ok(OpeRun { predictions, report })
}

/// Run every sequence with a fresh tracker from `factory`. Sequences may run
/// in parallel; results keep dataset order.
pub fn evaluate<T, F>(datasets: &[SequenceDataset], factory: F, exec: Exec) -> Result<(Vec<OpeRun>, EvaluationReport)>
where
    T: Tracker,
    F: Fn(&SequenceDataset) -> Result<T> + Sync + Send,
{
    let runs = exec.try_map(datasets, |d| {
        let mut t = factory(d)?;
        run_ope(&mut t, d)
    })?;
    let report = EvaluationReport::new(runs.iter().map(|r| r.report.clone()).collect())?;
    Ok((runs, report))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::eval::metrics::iou;

    struct Oracle {
        boxes: Vec<Option<BBox>>,
        i: usize,
    }

    impl Tracker for Oracle {
        fn init(&mut self, _: &ImagePatch, _: BBox) -> Result<()> {
            self.i = 0;
            Ok(())
        }
        fn track(&mut self, _: &ImagePatch) -> Result<BBox> {
            self.i += 1;
            Ok(self.boxes[self.i].unwrap_or(BBox::new_unchecked(0.0, 0.0, 1.0, 1.0)))
        }
    }

    struct Constant(BBox, usize, Option<usize>);

    impl Tracker for Constant {
        fn init(&mut self, _: &ImagePatch, b: BBox) -> Result<()> {
            self.0 = b;
            Ok(())
        }
        fn track(&mut self, _: &ImagePatch) -> Result<BBox> {
            self.1 += 1;
            if Some(self.1) == self.2 {
                return Err(Error::Degenerate("lost".into()));
            }
            Ok(self.0)
        }
    }

    fn moving(n: usize) -> SequenceDataset {
        SequenceDataset {
            name: "moving".into(),
            frames: Vec::new(),
            boxes: (0..n).map(|i| Some(BBox::new_unchecked(3.0 * i as f64, 1.0, 20.0, 16.0))).collect(),
            language: None,
            flags: BTreeMap::new(),
        }
    }

    fn blank(_: usize) -> Result<ImagePatch> {
        ImagePatch::filled(4, 4, 3, 0.0)
    }

    #[test]
    fn oracle_tracker_is_perfect() {
        let d = moving(12);
        let mut t = Oracle { boxes: d.boxes.clone(), i: 0 };
        let run = run_ope_with(&mut t, &d, blank).unwrap();
        let m = &run.report.metrics;
        assert_eq!(m.s, 20.0 / 21.0);
        assert_eq!(m.p, 1.0);
        assert_eq!(m.ao, 1.0);
        assert!(run.report.valid);
    }

    #[test]
    fn constant_tracker_replay() {
        let d = moving(10);
        let mut t = Constant(BBox::new_unchecked(0.0, 0.0, 1.0, 1.0), 0, None);
        let run = run_ope_with(&mut t, &d, blank).unwrap();
        let first = d.boxes[0].unwrap();
        let ious: Vec<f64> = d.boxes.iter().map(|g| iou(&first, &g.unwrap()).unwrap()).collect();
        let ao = ious.iter().sum::<f64>() / ious.len() as f64;
        assert!((run.report.metrics.ao - ao).abs() < 1e-15);
        let sr = ious.iter().filter(|v| **v > 0.5).count() as f64 / 10.0;
        assert_eq!(run.report.metrics.sr_050, sr);
    }

    #[test]
    fn failure_gives_partial_invalid_report() {
        let d = moving(8);
        let mut t = Constant(BBox::new_unchecked(0.0, 0.0, 1.0, 1.0), 0, Some(4));
        let run = run_ope_with(&mut t, &d, blank).unwrap();
        assert!(!run.report.valid);
        assert!(run.report.failure.as_deref().unwrap().contains("frame 5"));
        assert_eq!(run.predictions.iter().filter(|p| p.is_some()).count(), 4);
    }

    #[test]
    fn evaluate_keeps_order_across_modes() {
        let dir = tempfile::tempdir().unwrap();
        let mut sets = Vec::new();
        for k in 0..3 {
            let p = dir.path().join(format!("seq{k}"));
            let boxes: Vec<Option<BBox>> =
                (0..4).map(|i| Some(BBox::new_unchecked((k + i) as f64, 0.0, 4.0, 4.0))).collect();
            let frames = vec![ImagePatch::filled(8, 8, 3, 0.1).unwrap(); 4];
            crate::eval::write_sequence(&p, &frames, &boxes, None, &BTreeMap::new()).unwrap();
            sets.push(crate::eval::load_sequence(&p).unwrap());
        }
        let factory = |_: &SequenceDataset| Ok(Constant(BBox::new_unchecked(0.0, 0.0, 1.0, 1.0), 0, None));
        let (_, a) = evaluate(&sets, factory, Exec::Sequential).unwrap();
        let (_, b) = evaluate(&sets, factory, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sequences[2].sequence, "seq2");
    }
}
