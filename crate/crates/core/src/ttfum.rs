//! Temporal text feature update: a sliding window of past search-text
//! features reweights the exemplar text feature.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::embedding::{softmax, FeatureVec, ProbVector, NORM_TOL};
use crate::error::{ensure_dim, Error, Result};

pub const DEFAULT_WINDOW: usize = 5;
pub const DEFAULT_DECAY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Average,
    Last,
    Max,
    Weighted,
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "last" => Ok(Self::Last),
            "max" => Ok(Self::Max),
            "weighted" => Ok(Self::Weighted),
            other => Err(Error::Config(format!(
                "unknown aggregation strategy `{other}` (expected average, last, max or weighted)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AggregationStrategy {
    Average,
    Last,
    Max,
    /// One weight per buffered element, oldest first; positive, summing to 1.
    Weighted(Vec<f64>),
}

impl AggregationStrategy {
    /// `w_i ∝ decay^(t−i)` over `n` elements, oldest first, normalized.
    pub fn decaying(n: usize, decay: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("decay weights"));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::InvalidArgument(format!("decay must be in (0, 1], got {decay}")));
        }
        let raw: Vec<f64> = (0..n).map(|i| decay.powi((n - 1 - i) as i32)).collect();
        let z: f64 = raw.iter().sum();
        Ok(Self::Weighted(raw.iter().map(|w| w / z).collect()))
    }

    pub fn for_kind(kind: StrategyKind, n: usize, decay: f64) -> Result<Self> {
        Ok(match kind {
            StrategyKind::Average => Self::Average,
            StrategyKind::Last => Self::Last,
            StrategyKind::Max => Self::Max,
            StrategyKind::Weighted => Self::decaying(n, decay)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtfumConfig {
    pub window_size: usize,
    pub strategy: StrategyKind,
    pub update_interval: usize,
    /// Per-frame decay for the weighted strategy.
    pub decay: f64,
}

impl Default for TtfumConfig {
    fn default() -> Self {
        Self {
            window_size: DEFAULT_WINDOW,
            strategy: StrategyKind::Average,
            update_interval: 1,
            decay: DEFAULT_DECAY,
        }
    }
}

/// Ring buffer of the last `capacity` projected search-text features.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalTextWindow {
    capacity: usize,
    buffer: VecDeque<ProbVector>,
    frame_counter: u64,
    update_interval: usize,
    cached_weights: Option<ProbVector>,
}

impl TemporalTextWindow {
    pub fn new(capacity: usize, update_interval: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("window size must be at least 1".into()));
        }
        if update_interval == 0 {
            return Err(Error::InvalidArgument("update interval must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            buffer: VecDeque::with_capacity(capacity),
            frame_counter: 0,
            update_interval,
            cached_weights: None,
        })
    }

    pub fn from_config(cfg: &TtfumConfig) -> Result<Self> {
        Self::new(cfg.window_size, cfg.update_interval)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn frame_counter(&self) -> u64 {
        self.frame_counter
    }

    pub fn cached_weights(&self) -> Option<&ProbVector> {
        self.cached_weights.as_ref()
    }

    /// Buffered features, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &ProbVector> {
        self.buffer.iter()
    }

    pub fn push(&mut self, t_s: ProbVector) -> Result<()> {
        if let Some(first) = self.buffer.front() {
            ensure_dim(first.dim(), t_s.dim())?;
        }
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(t_s);
        self.frame_counter += 1;
        Ok(())
    }
}

/// Combine the buffered features according to `strategy`.
pub fn aggregate(window: &TemporalTextWindow, strategy: &AggregationStrategy) -> Result<Vec<f64>> {
    let first = window.buffer.front().ok_or(Error::Empty("temporal window"))?;
    let q = first.dim();
    let n = window.buffer.len();
    Ok(match strategy {
        AggregationStrategy::Average => {
            let mut out = vec![0.0; q];
            for v in &window.buffer {
                for (o, x) in out.iter_mut().zip(v.iter()) {
                    *o += x;
                }
            }
            out.iter().map(|s| s / n as f64).collect()
        }
        AggregationStrategy::Last => window.buffer.back().expect("non-empty").to_vec(),
        AggregationStrategy::Max => {
            let mut out = first.to_vec();
            for v in window.buffer.iter().skip(1) {
                for (o, x) in out.iter_mut().zip(v.iter()) {
                    *o = o.max(*x);
                }
            }
            out
        }
        AggregationStrategy::Weighted(w) => {
            if w.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "{} decay weights for a window of {n}",
                    w.len()
                )));
            }
            if w.iter().any(|x| !(*x > 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(
                    "decay weights must be positive and sum to 1".into(),
                ));
            }
            let mut out = vec![0.0; q];
            for (v, wi) in window.buffer.iter().zip(w) {
                for (o, x) in out.iter_mut().zip(v.iter()) {
                    *o += wi * x;
                }
            }
            out
        }
    })
}

/// `softmax(−|t_e − agg|)`, per dimension.
pub fn attention_weights(t_e: &[f64], agg: &[f64]) -> Result<ProbVector> {
    ensure_dim(t_e.len(), agg.len())?;
    let neg: Vec<f64> = t_e.iter().zip(agg).map(|(a, b)| -(a - b).abs()).collect();
    softmax(&neg, 1.0)
}

/// The exemplar-text reweighting. Kept in one place so the product rule can
/// be swapped: here the element-wise product `W_att ⊙ T̃_e`.
pub fn modulate(weights: &[f64], t_e: &[f64]) -> Result<FeatureVec> {
    ensure_dim(t_e.len(), weights.len())?;
    FeatureVec::new(weights.iter().zip(t_e).map(|(w, t)| w * t).collect())
}

/// Produce `T_att`. Attention weights are recomputed when the frame counter
/// is a multiple of the update interval (or nothing is cached yet) and
/// reused otherwise. With an empty buffer and no cache the weights are
/// uniform.
pub fn update(t_e: &ProbVector, window: &mut TemporalTextWindow, strategy: &AggregationStrategy) -> Result<FeatureVec> {
    let q = t_e.dim();
    if let Some(first) = window.buffer.front() {
        ensure_dim(q, first.dim())?;
    }
    let due = window.frame_counter % window.update_interval as u64 == 0;
    let weights = match (&window.cached_weights, window.buffer.is_empty()) {
        (None, true) => ProbVector::uniform(q),
        (Some(w), true) => w.clone(),
        (Some(w), false) if !due => w.clone(),
        _ => {
            let w = attention_weights(t_e, &aggregate(window, strategy)?)?;
            window.cached_weights = Some(w.clone());
            w
        }
    };
    if (weights.iter().sum::<f64>() - 1.0).abs() > NORM_TOL {
        return Err(Error::Degenerate("attention weights do not sum to 1".into()));
    }
    modulate(&weights, t_e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prob(rng: &mut ChaCha8Rng, q: usize) -> ProbVector {
        let raw: Vec<f64> = (0..q).map(|_| rng.random_range(-3.0..3.0)).collect();
        softmax(&raw, 1.0).unwrap()
    }

    fn window_of(items: &[ProbVector], cap: usize) -> TemporalTextWindow {
        let mut w = TemporalTextWindow::new(cap, 1).unwrap();
        for v in items {
            w.push(v.clone()).unwrap();
        }
        w
    }

    #[test]
    fn eviction_and_partial_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b, c) = (prob(&mut rng, 4), prob(&mut rng, 4), prob(&mut rng, 4));
        let w = window_of(&[a, b.clone(), c.clone()], 2);
        assert_eq!(w.iter().cloned().collect::<Vec<_>>(), vec![b, c]);
        assert_eq!(w.frame_counter(), 3);
        let w = window_of(&(0..3).map(|_| prob(&mut rng, 4)).collect::<Vec<_>>(), 5);
        assert_eq!(w.len(), 3);
    }

    #[test]
    fn buffer_is_trailing_slice_of_push_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut w = TemporalTextWindow::new(5, 1).unwrap();
        let mut log = Vec::new();
        for _ in 0..10_000 {
            let v = prob(&mut rng, 3);
            log.push(v.clone());
            w.push(v).unwrap();
            let start = log.len().saturating_sub(5);
            assert!(w.iter().eq(log[start..].iter()));
        }
    }

    #[test]
    fn push_checks_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = TemporalTextWindow::new(3, 1).unwrap();
        w.push(prob(&mut rng, 4)).unwrap();
        assert!(matches!(w.push(prob(&mut rng, 5)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn single_element_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = prob(&mut rng, 6);
        let w = window_of(&[a.clone()], 5);
        for s in [
            AggregationStrategy::Average,
            AggregationStrategy::Last,
            AggregationStrategy::Max,
            AggregationStrategy::Weighted(vec![1.0]),
        ] {
            assert_eq!(aggregate(&w, &s).unwrap(), a.to_vec());
        }
    }

    #[test]
    fn aggregation_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = prob(&mut rng, 6);
        let w = window_of(&[a.clone(), a.clone(), a.clone()], 5);
        for (x, y) in aggregate(&w, &AggregationStrategy::Average).unwrap().iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-15);
        }

        let items: Vec<ProbVector> = (0..5).map(|_| prob(&mut rng, 6)).collect();
        let w = window_of(&items, 5);
        let avg = aggregate(&w, &AggregationStrategy::Average).unwrap();
        let max = aggregate(&w, &AggregationStrategy::Max).unwrap();
        for d in 0..6 {
            let col: Vec<f64> = items.iter().map(|v| v[d]).collect();
            let mean = col.iter().sum::<f64>() / 5.0;
            assert!((avg[d] - mean).abs() < 1e-12);
            let mut best = col[0];
            for &x in &col {
                if x > best {
                    best = x;
                }
            }
            assert_eq!(max[d], best);
        }
        assert_eq!(aggregate(&w, &AggregationStrategy::Last).unwrap(), items[4].to_vec());
        let weighted = aggregate(&w, &AggregationStrategy::decaying(5, 0.5).unwrap()).unwrap();
        for d in 0..6 {
            let want: f64 = items
                .iter()
                .enumerate()
                .map(|(i, v)| v[d] * 0.5f64.powi(4 - i as i32))
                .sum::<f64>()
                / (1.0 + 0.5 + 0.25 + 0.125 + 0.0625);
            assert!((weighted[d] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = window_of(&[prob(&mut rng, 3), prob(&mut rng, 3)], 5);
        assert!(aggregate(&w, &AggregationStrategy::Weighted(vec![1.0])).is_err());
        assert!(aggregate(&w, &AggregationStrategy::Weighted(vec![0.7, 0.7])).is_err());
        let empty = TemporalTextWindow::new(3, 1).unwrap();
        assert!(matches!(aggregate(&empty, &AggregationStrategy::Average), Err(Error::Empty(_))));
    }

    #[test]
    fn decay_weights_are_newest_heaviest() {
        let AggregationStrategy::Weighted(w) = AggregationStrategy::decaying(4, 0.5).unwrap() else {
            unreachable!()
        };
        assert!(w.windows(2).all(|p| p[0] < p[1]));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((w[3] / w[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn average_is_permutation_invariant_last_is_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let items: Vec<ProbVector> = (0..4).map(|_| prob(&mut rng, 5)).collect();
        let mut rev = items.clone();
        rev.reverse();
        let (a, b) = (window_of(&items, 4), window_of(&rev, 4));
        let (x, y) = (
            aggregate(&a, &AggregationStrategy::Average).unwrap(),
            aggregate(&b, &AggregationStrategy::Average).unwrap(),
        );
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-15);
        }
        assert_ne!(
            aggregate(&a, &AggregationStrategy::Last).unwrap(),
            aggregate(&b, &AggregationStrategy::Last).unwrap()
        );
    }

    #[test]
    fn attention_weight_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = prob(&mut rng, 8);
        let w = attention_weights(&t, &t).unwrap();
        assert!(w.iter().all(|x| (x - 0.125).abs() < 1e-12));

        let mut agg = t.to_vec();
        agg[3] += 50.0;
        let w = attention_weights(&t, &agg).unwrap();
        assert_eq!(crate::embedding::argmax(&w.iter().map(|x| -x).collect::<Vec<_>>()).unwrap(), 3);

        let agg = prob(&mut rng, 8);
        let w = attention_weights(&t, &agg).unwrap();
        let e: Vec<f64> = (0..8).map(|i| (-(t[i] - agg[i]).abs()).exp()).collect();
        let z: f64 = e.iter().sum();
        for i in 0..8 {
            assert!((w[i] - e[i] / z).abs() < 1e-12);
        }
    }

    #[test]
    fn window_of_one_is_last_frame_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t_e = prob(&mut rng, 6);
        for kind in [StrategyKind::Average, StrategyKind::Last, StrategyKind::Max, StrategyKind::Weighted] {
            let mut w = TemporalTextWindow::new(1, 1).unwrap();
            for _ in 0..5 {
                let t_s = prob(&mut rng, 6);
                w.push(t_s.clone()).unwrap();
                let strat = AggregationStrategy::for_kind(kind, w.len(), 0.5).unwrap();
                let got = update(&t_e, &mut w, &strat).unwrap();
                let a: Vec<f64> = (0..6).map(|i| (-(t_e[i] - t_s[i]).abs()).exp()).collect();
                let z: f64 = a.iter().sum();
                let want: Vec<f64> = (0..6).map(|i| a[i] / z * t_e[i]).collect();
                let direct = modulate(&attention_weights(&t_e, &t_s).unwrap(), &t_e).unwrap();
                assert_eq!(got, direct);
                for i in 0..6 {
                    assert!((got[i] - want[i]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn cold_start_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t_e = prob(&mut rng, 4);
        let mut w = TemporalTextWindow::new(5, 1).unwrap();
        let out = update(&t_e, &mut w, &AggregationStrategy::Average).unwrap();
        for i in 0..4 {
            assert_eq!(out[i], 0.25 * t_e[i]);
        }
    }

    #[test]
    fn interval_reuses_cache_and_agrees_on_constant_buffer() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t_e = prob(&mut rng, 5);
        let c = prob(&mut rng, 5);
        let mut every = TemporalTextWindow::new(3, 1).unwrap();
        let mut sparse = TemporalTextWindow::new(3, 4).unwrap();
        for _ in 0..12 {
            every.push(c.clone()).unwrap();
            sparse.push(c.clone()).unwrap();
            let a = update(&t_e, &mut every, &AggregationStrategy::Average).unwrap();
            let b = update(&t_e, &mut sparse, &AggregationStrategy::Average).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-15);
            }
        }

        // With changing inputs the sparse window keeps the stale weights.
        let mut w = TemporalTextWindow::new(2, 3).unwrap();
        w.push(prob(&mut rng, 5)).unwrap();
        update(&t_e, &mut w, &AggregationStrategy::Last).unwrap();
        let cached = w.cached_weights().unwrap().clone();
        w.push(prob(&mut rng, 5)).unwrap();
        update(&t_e, &mut w, &AggregationStrategy::Last).unwrap();
        assert_eq!(w.cached_weights().unwrap(), &cached);
        w.push(prob(&mut rng, 5)).unwrap();
        update(&t_e, &mut w, &AggregationStrategy::Last).unwrap();
        assert_ne!(w.cached_weights().unwrap(), &cached);
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..500 {
            let a: Vec<f64> = (0..7).map(|_| rng.random_range(-1e3..1e3)).collect();
            let b: Vec<f64> = (0..7).map(|_| rng.random_range(-1e3..1e3)).collect();
            let w = attention_weights(&a, &b).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
