//! Tracking loss, analytic gradients, a finite-difference oracle and a toy
//! gradient-descent trainer.

mod gradcheck;
mod losses;
mod model;
mod trainer;

pub use gradcheck::{
    finite_diff_grad, random_problem, relative_error, run_grad_check, GradCheckConfig, GradCheckReport,
    PointReport, REL_ERROR_FLOOR,
};
pub use losses::{
    focal_loss, gaussian_target, giou_loss, l1_loss, total_loss, LossConfig, LossParts, P_CLAMP,
};
pub use model::{batch_grad, batch_loss, TrainSample, Trainable};
pub use trainer::{train_toy, write_trace_csv, TraceRow, TrainConfig, TrainOutcome};
