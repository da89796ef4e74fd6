use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::losses::LossConfig;
use super::model::{batch_grad, batch_loss, TrainSample, Trainable};
use crate::adapter::AdapterState;
use crate::embedding::{l2_normalize, FeatureVec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fusion::{FeatureMap, HeadConfig, HeadParams};
use crate::geometry::BBox;
use crate::hashing::derive_seed;

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is essentially zero are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub points: usize,
    pub tolerance: f64,
    pub seed: u64,
    pub dim: usize,
    pub grid: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stages: usize,
    pub num_context: usize,
    pub bag_size: usize,
    pub samples: usize,
    /// Test hook: perturb one analytic coordinate to prove the check can fail.
    #[serde(skip)]
    pub corrupt_gradient: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            points: 5,
            tolerance: 1e-4,
            seed: 0,
            dim: 5,
            grid: 4,
            channels: 3,
            kernel: 3,
            stages: 4,
            num_context: 2,
            bag_size: 5,
            samples: 2,
            corrupt_gradient: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointReport {
    pub point: usize,
    pub num_params: usize,
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub points: Vec<PointReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Central differences `(f(p + εe_i) − f(p − εe_i)) / 2ε` per coordinate.
pub fn finite_diff_grad<F>(f: F, params: &[f64], epsilon: f64, exec: Exec) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(exec.map_range(params.len(), |i| {
        let mut p = params.to_vec();
        p[i] = params[i] + epsilon;
        let hi = f(&p);
        p[i] = params[i] - epsilon;
        let lo = f(&p);
        (hi - lo) / (2.0 * epsilon)
    }))
}

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

fn unit(rng: &mut ChaCha8Rng, q: usize) -> FeatureVec {
    let v: Vec<f64> = (0..q).map(|_| normal(rng, 1.0)).collect();
    l2_normalize(&v).expect("non-zero gaussian vector")
}

/// A random small model and batch for one check point.
pub fn random_problem(cfg: &GradCheckConfig, point: usize) -> Result<(Trainable, Vec<TrainSample>)> {
    let seed = derive_seed(cfg.seed, &format!("gradcheck-point-{point}"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = cfg.dim;
    let mut adapter = AdapterState::init(q, cfg.num_context, seed)?;
    adapter.context_vectors.iter_mut().for_each(|v| *v = normal(&mut rng, 0.5));
    adapter.meta_weight.iter_mut().for_each(|v| *v = normal(&mut rng, 0.5));
    adapter.meta_bias.iter_mut().for_each(|v| *v = normal(&mut rng, 0.3));
    adapter.proj.iter_mut().for_each(|v| *v += normal(&mut rng, 1.0));
    adapter.tau_temp = rng.random_range(0.2..1.0);

    let head_cfg = HeadConfig {
        grid: cfg.grid,
        channels: cfg.channels,
        kernel: cfg.kernel,
        stages: cfg.stages,
    };
    let mut head = HeadParams::init(q, &head_cfg, seed)?;
    for st in &mut head.stages {
        st.scale.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        st.shift.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
    }
    for p in [&mut head.cls, &mut head.offset, &mut head.size] {
        p.weight.iter_mut().for_each(|v| *v = normal(&mut rng, 0.5));
        p.bias.iter_mut().for_each(|v| *v = normal(&mut rng, 0.3));
    }

    let g = cfg.grid;
    let samples = (0..cfg.samples)
        .map(|_| {
            let features = FeatureMap::new(q, g, g, (0..q * g * g).map(|_| normal(&mut rng, 1.0)).collect())?;
            let entries = Arc::new((0..cfg.bag_size).map(|_| unit(&mut rng, q)).collect::<Vec<_>>());
            let (w, h) = (rng.random_range(0.2..0.5), rng.random_range(0.2..0.5));
            let (cx, cy) = (rng.random_range(0.25..0.75), rng.random_range(0.25..0.75));
            Ok(TrainSample {
                features,
                exemplar_feat: unit(&mut rng, q),
                search_feat: unit(&mut rng, q),
                entries,
                gt: BBox::from_center(cx, cy, w, h),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Trainable { adapter, head }, samples))
}

/// Compare analytic gradients of the tracking loss with central finite
/// differences over every trainable parameter at `cfg.points` random points.
pub fn run_grad_check(cfg: &GradCheckConfig, loss_cfg: &LossConfig, exec: Exec) -> Result<GradCheckReport> {
    if cfg.points == 0 {
        return Err(Error::InvalidArgument("grad check needs at least one point".into()));
    }
    let mut points = Vec::with_capacity(cfg.points);
    for point in 0..cfg.points {
        let (params, samples) = random_problem(cfg, point)?;
        let (_, grad) = batch_grad(&params, &samples, loss_cfg, Exec::Sequential)?;
        let mut analytic = grad.to_flat();
        if cfg.corrupt_gradient {
            analytic[0] = analytic[0] * 1.5 + 1e-3;
        }
        let flat = params.to_flat();
        let f = |p: &[f64]| -> f64 {
            let mut probe = params.clone();
            probe.set_flat(p).expect("same layout");
            batch_loss(&probe, &samples, loss_cfg, Exec::Sequential)
                .map(|l| l.total)
                .unwrap_or(f64::NAN)
        };
        let numeric = finite_diff_grad(f, &flat, cfg.epsilon, exec)?;
        let mut worst = (0, 0.0);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let e = relative_error(*a, *n);
            if !(e <= worst.1) {
                worst = (i, e);
            }
        }
        points.push(PointReport {
            point,
            num_params: flat.len(),
            max_rel_error: worst.1,
            worst_param: worst.0,
            analytic: analytic[worst.0],
            numeric: numeric[worst.0],
        });
    }
    let max_rel_error = points.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error <= cfg.tolerance,
        max_rel_error,
        tolerance: cfg.tolerance,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_and_constant() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-5, Exec::Sequential).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, 2.0, 3.0], 1e-5, Exec::Sequential).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        assert!(finite_diff_grad(|_| 0.0, &[1.0], 0.0, Exec::Sequential).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn default_check_passes_and_corruption_fails() {
        let cfg = GradCheckConfig::default();
        let report = run_grad_check(&cfg, &LossConfig::default(), Exec::default()).unwrap();
        assert!(report.passed, "{report:?}");
        let bad = GradCheckConfig {
            corrupt_gradient: true,
            points: 1,
            ..cfg
        };
        let report = run_grad_check(&bad, &LossConfig::default(), Exec::default()).unwrap();
        assert!(!report.passed);
    }
}
