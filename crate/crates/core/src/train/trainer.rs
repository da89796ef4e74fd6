use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{LossConfig, LossParts};
use super::model::{batch_grad, batch_loss, TrainSample, Trainable};
use crate::adapter::MIN_TAU;
use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Samples per step; 0 means the whole dataset (full-batch descent).
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.05,
            seed: 0,
            batch: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Trainable,
    /// Batch loss measured before each update.
    pub trace: Vec<TraceRow>,
    pub initial: LossParts,
    pub final_loss: LossParts,
}

impl TrainOutcome {
    /// Running minimum of the per-step total loss.
    pub fn smoothed(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.trace
            .iter()
            .map(|r| {
                best = best.min(r.total);
                best
            })
            .collect()
    }
}

/// Plain gradient descent on the adapter and head parameters. With
/// `batch = 0` every step uses the full dataset; otherwise minibatches are
/// drawn from a seeded reshuffle each epoch. The temperature is kept at or
/// above `MIN_TAU`.
pub fn train_toy(
    init: Trainable,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    exec: Exec,
) -> Result<TrainOutcome> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    if !(cfg.lr >= 0.0) || !cfg.lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate {} must be non-negative", cfg.lr)));
    }
    if samples.is_empty() {
        return Err(Error::Empty("training samples"));
    }
    loss_cfg.validate()?;
    let full = cfg.batch == 0 || cfg.batch >= samples.len();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cursor = samples.len();

    let initial = batch_loss(&init, samples, loss_cfg, exec)?;
    let mut params = init;
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut batch_buf: Vec<TrainSample> = Vec::new();
    for step in 0..cfg.steps {
        let batch: &[TrainSample] = if full {
            samples
        } else {
            batch_buf.clear();
            for _ in 0..cfg.batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch_buf.push(samples[order[cursor]].clone());
                cursor += 1;
            }
            &batch_buf
        };
        let (loss, grad) = batch_grad(&params, batch, loss_cfg, exec)?;
        let mut finite = loss.total.is_finite();
        grad.visit(|b| finite &= b.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Diverged { step });
        }
        trace.push(TraceRow {
            step,
            total: loss.total,
            cls: loss.cls,
            iou: loss.iou,
            l1: loss.l1,
        });
        params.add_scaled(&grad, -cfg.lr);
        params.adapter.tau_temp = params.adapter.tau_temp.max(MIN_TAU);
    }
    let final_loss = batch_loss(&params, samples, loss_cfg, exec)?;
    if !final_loss.total.is_finite() {
        return Err(Error::Diverged { step: cfg.steps });
    }
    Ok(TrainOutcome {
        params,
        trace,
        initial,
        final_loss,
    })
}

/// CSV with columns `step,total,cls,iou,l1`.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "total", "cls", "iou", "l1"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.total.to_string(),
            r.cls.to_string(),
            r.iou.to_string(),
            r.l1.to_string(),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
