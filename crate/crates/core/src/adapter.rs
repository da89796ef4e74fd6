//! Instance-conditioned selection of a bag entry and projection of the
//! selected text feature onto the probability simplex.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bag::BagOfDescriptions;
use crate::embedding::{
    argmax, cosine_sim, dot, l2_normalize, norm, softmax, softmax_backward, softmax_unchecked,
    FeatureVec, ProbVector,
};
use crate::error::{ensure_dim, Error, Result};
use crate::hashing::derive_seed;

pub const DEFAULT_TAU: f64 = 0.07;
pub const INIT_STD: f64 = 0.02;
/// Lower bound applied to the temperature after each training update.
pub const MIN_TAU: f64 = 1e-3;

/// Learnable adapter parameters. Matrices are row-major `q × q`.
///
/// The same layout doubles as a gradient accumulator (see [`zeros_like`]),
/// in which case `tau_temp` holds dL/dτ and may be any sign.
///
/// [`zeros_like`]: AdapterState::zeros_like
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterState {
    pub dim: usize,
    pub num_context: usize,
    /// `num_context × dim`, one context vector per row.
    pub context_vectors: Vec<f64>,
    pub meta_weight: Vec<f64>,
    pub meta_bias: Vec<f64>,
    pub proj: Vec<f64>,
    pub tau_temp: f64,
}

impl AdapterState {
    /// Seeded initialization: context vectors and meta-net weights drawn
    /// from N(0, 0.02²), zero meta bias, projection = identity + N(0, 0.02²).
    pub fn init(dim: usize, num_context: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("adapter dimension must be positive".into()));
        }
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let draw = |label: &str, n: usize| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label));
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        let context_vectors = draw("adapter-context", num_context * dim);
        let meta_weight = draw("adapter-meta", dim * dim);
        let mut proj = draw("adapter-proj", dim * dim);
        for i in 0..dim {
            proj[i * dim + i] += 1.0;
        }
        Ok(Self {
            dim,
            num_context,
            context_vectors,
            meta_weight,
            meta_bias: vec![0.0; dim],
            proj,
            tau_temp: DEFAULT_TAU,
        })
    }

    /// No context, zero meta-net, identity projection: selection reduces to
    /// plain cosine matching.
    pub fn plain(dim: usize) -> Self {
        let mut proj = vec![0.0; dim * dim];
        for i in 0..dim {
            proj[i * dim + i] = 1.0;
        }
        Self {
            dim,
            num_context: 0,
            context_vectors: Vec::new(),
            meta_weight: vec![0.0; dim * dim],
            meta_bias: vec![0.0; dim],
            proj,
            tau_temp: DEFAULT_TAU,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dim: self.dim,
            num_context: self.num_context,
            context_vectors: vec![0.0; self.context_vectors.len()],
            meta_weight: vec![0.0; self.meta_weight.len()],
            meta_bias: vec![0.0; self.meta_bias.len()],
            proj: vec![0.0; self.proj.len()],
            tau_temp: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.dim;
        let shapes = [
            ("context_vectors", self.context_vectors.len(), self.num_context * q),
            ("meta_weight", self.meta_weight.len(), q * q),
            ("meta_bias", self.meta_bias.len(), q),
            ("proj", self.proj.len(), q * q),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::ShapeMismatch(format!("{name}: {got} values, expected {want}")));
            }
        }
        if !(self.tau_temp > 0.0) || !self.tau_temp.is_finite() {
            return Err(Error::InvalidArgument(format!("tau_temp must be positive, got {}", self.tau_temp)));
        }
        let mut finite = true;
        self.visit(|s| finite &= s.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Degenerate("non-finite adapter parameter".into()));
        }
        Ok(())
    }

    /// Visit parameter blocks in a fixed order (context, meta weight, meta
    /// bias, projection, temperature).
    pub fn visit(&self, mut f: impl FnMut(&[f64])) {
        f(&self.context_vectors);
        f(&self.meta_weight);
        f(&self.meta_bias);
        f(&self.proj);
        f(std::slice::from_ref(&self.tau_temp));
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(&mut self.context_vectors);
        f(&mut self.meta_weight);
        f(&mut self.meta_bias);
        f(&mut self.proj);
        f(std::slice::from_mut(&mut self.tau_temp));
    }

    /// Meta-net output for a unit-norm image feature.
    fn meta(&self, image_unit: &[f64]) -> Vec<f64> {
        let q = self.dim;
        (0..q)
            .map(|r| dot(&self.meta_weight[r * q..(r + 1) * q], image_unit) + self.meta_bias[r])
            .collect()
    }

    /// `Σ_j υ_j + L · meta(F / |F|)`: the part of every conditioned prompt
    /// that does not depend on the entry. The meta-net sees the normalized
    /// feature so selection stays invariant to rescaling the image feature.
    fn shared_context(&self, image_feat: &[f64]) -> Vec<f64> {
        let q = self.dim;
        let mut s = vec![0.0; q];
        if self.num_context == 0 {
            return s;
        }
        for row in self.context_vectors.chunks(q) {
            for (a, b) in s.iter_mut().zip(row) {
                *a += b;
            }
        }
        let n = norm(image_feat);
        let unit: Vec<f64> = image_feat.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect();
        let l = self.num_context as f64;
        for (a, m) in s.iter_mut().zip(self.meta(&unit)) {
            *a += l * m;
        }
        s
    }
}

/// The entry chosen for an image and its projected form.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedDescription {
    pub index: usize,
    pub raw: FeatureVec,
    pub projected: ProbVector,
}

fn check(image_feat: &[f64], state: &AdapterState) -> Result<()> {
    ensure_dim(state.dim, image_feat.len())
}

/// Conditioned prompt embedding for entry `d_i`: the mean of the L
/// image-conditioned context vectors `υ_j + meta(F̂)` together with `d_i`,
/// renormalized. With `L = 0` this is `d_i / |d_i|`.
pub fn condition_tokens(image_feat: &[f64], state: &AdapterState, d_i: &[f64]) -> Result<FeatureVec> {
    check(image_feat, state)?;
    ensure_dim(state.dim, d_i.len())?;
    let shared = state.shared_context(image_feat);
    conditioned(&shared, d_i)
}

fn conditioned(shared: &[f64], d_i: &[f64]) -> Result<FeatureVec> {
    let u: Vec<f64> = shared.iter().zip(d_i).map(|(s, d)| s + d).collect();
    l2_normalize(&u)
}

/// Selection probabilities over raw entry embeddings.
pub fn score_embeddings(image_feat: &[f64], entries: &[FeatureVec], state: &AdapterState) -> Result<ProbVector> {
    if entries.is_empty() {
        return Err(Error::Empty("bag"));
    }
    check(image_feat, state)?;
    let shared = state.shared_context(image_feat);
    let sims = entries
        .iter()
        .map(|d| {
            ensure_dim(state.dim, d.dim())?;
            cosine_sim(image_feat, &conditioned(&shared, d)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    softmax(&sims, state.tau_temp)
}

/// `p(d_i | F) = softmax_i(cos(F, conditioned(d_i)) / τ)`.
pub fn score_descriptions(image_feat: &[f64], bag: &BagOfDescriptions, state: &AdapterState) -> Result<ProbVector> {
    let entries: Vec<FeatureVec> = bag.entries.iter().map(|e| e.embedding.clone()).collect();
    score_embeddings(image_feat, &entries, state)
}

pub fn select_from(image_feat: &[f64], entries: &[FeatureVec], state: &AdapterState) -> Result<SelectedDescription> {
    let p = score_embeddings(image_feat, entries, state)?;
    let index = argmax(&p)?;
    let raw = entries[index].clone();
    let projected = project_normalize(&raw, state)?;
    Ok(SelectedDescription { index, raw, projected })
}

/// Highest-probability entry (lowest index on ties) and its projection.
pub fn select_description(image_feat: &[f64], bag: &BagOfDescriptions, state: &AdapterState) -> Result<SelectedDescription> {
    let entries: Vec<FeatureVec> = bag.entries.iter().map(|e| e.embedding.clone()).collect();
    select_from(image_feat, &entries, state)
}

/// `softmax(W_proj · raw)`.
pub fn project_normalize(raw: &[f64], state: &AdapterState) -> Result<ProbVector> {
    ensure_dim(state.dim, raw.len())?;
    let q = state.dim;
    let logits: Vec<f64> = (0..q).map(|r| dot(&state.proj[r * q..(r + 1) * q], raw)).collect();
    softmax(&logits, 1.0)
}

/// Intermediate values of the soft (training-time) selection path.
#[derive(Debug, Clone)]
pub(crate) struct SoftCache {
    image_feat: Vec<f64>,
    image_norm: f64,
    cond: Vec<Vec<f64>>,
    cond_norm: Vec<f64>,
    cos: Vec<f64>,
    probs: Vec<f64>,
    mixed: Vec<f64>,
    pub(crate) projected: Vec<f64>,
}

/// Differentiable selection used in training: the hard argmax is replaced
/// by the probability-weighted mix `Σ p_i d_i`, then projected.
pub(crate) fn soft_forward(image_feat: &[f64], entries: &[FeatureVec], state: &AdapterState) -> Result<SoftCache> {
    if entries.is_empty() {
        return Err(Error::Empty("bag"));
    }
    check(image_feat, state)?;
    let q = state.dim;
    let image_norm = norm(image_feat);
    if image_norm == 0.0 {
        return Err(Error::Degenerate("zero image feature".into()));
    }
    let shared = state.shared_context(image_feat);
    let mut cond = Vec::with_capacity(entries.len());
    let mut cond_norm = Vec::with_capacity(entries.len());
    let mut cos = Vec::with_capacity(entries.len());
    for d in entries {
        ensure_dim(q, d.dim())?;
        let u: Vec<f64> = shared.iter().zip(d.iter()).map(|(s, x)| s + x).collect();
        let n = norm(&u);
        if n == 0.0 {
            return Err(Error::Degenerate("zero conditioned prompt".into()));
        }
        let c: Vec<f64> = u.iter().map(|x| x / n).collect();
        cos.push(dot(&c, image_feat) / image_norm);
        cond.push(c);
        cond_norm.push(n);
    }
    let probs = softmax_unchecked(&cos, state.tau_temp);
    let mut mixed = vec![0.0; q];
    for (p, d) in probs.iter().zip(entries) {
        for (m, x) in mixed.iter_mut().zip(d.iter()) {
            *m += p * x;
        }
    }
    let logits: Vec<f64> = (0..q).map(|r| dot(&state.proj[r * q..(r + 1) * q], &mixed)).collect();
    let projected = softmax_unchecked(&logits, 1.0);
    Ok(SoftCache {
        image_feat: image_feat.to_vec(),
        image_norm,
        cond,
        cond_norm,
        cos,
        probs,
        mixed,
        projected,
    })
}

/// Accumulate dL/dθ into `grad` given dL/d(projected).
pub(crate) fn soft_backward(
    cache: &SoftCache,
    d_projected: &[f64],
    entries: &[FeatureVec],
    state: &AdapterState,
    grad: &mut AdapterState,
) {
    let q = state.dim;
    let g_logits = softmax_backward(&cache.projected, d_projected, 1.0);
    let mut d_mixed = vec![0.0; q];
    for r in 0..q {
        let g = g_logits[r];
        let row = &state.proj[r * q..(r + 1) * q];
        let grow = &mut grad.proj[r * q..(r + 1) * q];
        for c in 0..q {
            grow[c] += g * cache.mixed[c];
            d_mixed[c] += g * row[c];
        }
    }
    let d_probs: Vec<f64> = entries.iter().map(|d| dot(&d_mixed, d)).collect();
    let d_cos = softmax_backward(&cache.probs, &d_probs, state.tau_temp);
    grad.tau_temp -= d_cos.iter().zip(&cache.cos).map(|(g, z)| g * z).sum::<f64>() / state.tau_temp;

    if state.num_context == 0 {
        return;
    }
    let mut d_shared = vec![0.0; q];
    for i in 0..entries.len() {
        let c = &cache.cond[i];
        // dc = d_cos_i * F / |F|; du = (dc - c (c·dc)) / |u|
        let scale = d_cos[i] / cache.image_norm;
        let c_dot_dc = scale * dot(c, &cache.image_feat);
        for k in 0..q {
            let dc = scale * cache.image_feat[k];
            d_shared[k] += (dc - c[k] * c_dot_dc) / cache.cond_norm[i];
        }
    }
    for row in grad.context_vectors.chunks_mut(q) {
        for (g, d) in row.iter_mut().zip(&d_shared) {
            *g += d;
        }
    }
    let l = state.num_context as f64;
    for r in 0..q {
        let dm = l * d_shared[r];
        grad.meta_bias[r] += dm;
        for c in 0..q {
            grad.meta_weight[r * q + c] += dm * cache.image_feat[c] / cache.image_norm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bag::match_dictionary;
    use crate::bag::{DictKind, Dictionary};
    use rand::Rng;

    fn unit(rng: &mut ChaCha8Rng, q: usize) -> FeatureVec {
        let v: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
        l2_normalize(&v).unwrap()
    }

    #[test]
    fn no_context_conditioning_is_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = AdapterState::plain(8);
        let f = unit(&mut rng, 8);
        let d: Vec<f64> = unit(&mut rng, 8).iter().map(|x| 3.0 * x).collect();
        let c = condition_tokens(&f, &s, &d).unwrap();
        let want = l2_normalize(&d).unwrap();
        for (a, b) in c.iter().zip(want.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_meta_net_ignores_the_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = AdapterState::init(8, 3, 5).unwrap();
        s.meta_weight.iter_mut().for_each(|w| *w = 0.0);
        let d = unit(&mut rng, 8);
        let a = condition_tokens(&unit(&mut rng, 8), &s, &d).unwrap();
        let b = condition_tokens(&unit(&mut rng, 8), &s, &d).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conditioning_depends_on_the_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = AdapterState::init(8, 2, 9).unwrap();
        s.meta_weight.iter_mut().for_each(|w| *w *= 20.0);
        let d = unit(&mut rng, 8);
        let a = condition_tokens(&unit(&mut rng, 8), &s, &d).unwrap();
        let b = condition_tokens(&unit(&mut rng, 8), &s, &d).unwrap();
        assert!(cosine_sim(&a, &b).unwrap() < 1.0 - 1e-9);
    }

    #[test]
    fn conditioning_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = AdapterState::init(6, 3, 1).unwrap();
        let f = unit(&mut rng, 6);
        let d = unit(&mut rng, 6);
        // mean over {υ_j + W f + b} ∪ {d}, by explicit loops
        let mut acc = d.to_vec();
        for j in 0..3 {
            for r in 0..6 {
                let mut m = s.meta_bias[r];
                for c in 0..6 {
                    m += s.meta_weight[r * 6 + c] * f[c];
                }
                acc[r] += s.context_vectors[j * 6 + r] + m;
            }
        }
        let mean: Vec<f64> = acc.iter().map(|x| x / 4.0).collect();
        let want = l2_normalize(&mean).unwrap();
        let got = condition_tokens(&f, &s, &d).unwrap();
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_and_symmetric_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = AdapterState::init(8, 2, 1).unwrap();
        let f = unit(&mut rng, 8);
        let d = unit(&mut rng, 8);
        assert_eq!(score_embeddings(&f, &[d.clone()], &s).unwrap().as_slice(), &[1.0]);
        let p = score_embeddings(&f, &vec![d; 4], &s).unwrap();
        assert!(p.iter().all(|x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn scores_match_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = AdapterState::init(16, 4, 2).unwrap();
        let f = unit(&mut rng, 16);
        let entries: Vec<FeatureVec> = (0..8).map(|_| unit(&mut rng, 16)).collect();
        let p = score_embeddings(&f, &entries, &s).unwrap();
        let logits: Vec<f64> = entries
            .iter()
            .map(|d| cosine_sim(&f, &condition_tokens(&f, &s, d).unwrap()).unwrap() / s.tau_temp)
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (a, l) in p.iter().zip(&logits) {
            assert!((a - l.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn plain_state_reduces_to_dictionary_matching() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = AdapterState::plain(12);
        for _ in 0..200 {
            let k = rng.random_range(1..20);
            let entries: Vec<FeatureVec> = (0..k).map(|_| unit(&mut rng, 12)).collect();
            let f = unit(&mut rng, 12);
            let dict = Dictionary::from_parts(
                DictKind::Class,
                (0..k).map(|i| format!("e{i}")).collect(),
                entries.clone(),
            )
            .unwrap();
            let (want, _) = match_dictionary(&f, &dict).unwrap();
            assert_eq!(select_from(&f, &entries, &s).unwrap().index, want);
        }
    }

    #[test]
    fn dominant_entry_and_ties() {
        let s = AdapterState::plain(4);
        let e = |i: usize| {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            FeatureVec::new(v).unwrap()
        };
        let f = e(2);
        assert_eq!(select_from(&f, &[e(0), e(1), e(2), e(3)], &s).unwrap().index, 2);
        let entries = vec![e(0), e(1), e(2), e(3), e(1), e(2)];
        let f = FeatureVec::new(vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(select_from(&f, &entries, &s).unwrap().index, 1);
    }

    #[test]
    fn selection_is_scale_invariant_and_text_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = AdapterState::init(10, 2, 3).unwrap();
        for _ in 0..50 {
            let entries: Vec<FeatureVec> = (0..6).map(|_| unit(&mut rng, 10)).collect();
            let f = unit(&mut rng, 10);
            let scaled = FeatureVec::new(f.iter().map(|x| x * 7.5).collect()).unwrap();
            let a = select_from(&f, &entries, &s).unwrap();
            assert_eq!(a.index, select_from(&scaled, &entries, &s).unwrap().index);
            let mut rev = entries.clone();
            rev.reverse();
            let b = select_from(&f, &rev, &s).unwrap();
            assert_eq!(a.raw, b.raw);
        }
    }

    #[test]
    fn projection_cases() {
        let s = AdapterState::plain(5);
        let p = project_normalize(&[0.0; 5], &s).unwrap();
        assert!(p.iter().all(|x| (x - 0.2).abs() < 1e-15));
        let p = project_normalize(&[0.0, 100.0, 0.0, 0.0, 0.0], &s).unwrap();
        assert!(p[1] > 1.0 - 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = AdapterState::init(7, 1, 4).unwrap();
        let raw: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = project_normalize(&raw, &s).unwrap();
        let mut logits = [0.0; 7];
        for r in 0..7 {
            for c in 0..7 {
                logits[r] += s.proj[r * 7 + c] * raw[c];
            }
        }
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for r in 0..7 {
            assert!((p[r] - logits[r].exp() / z).abs() < 1e-12);
        }
        assert!(project_normalize(&raw[..3], &s).is_err());
    }

    #[test]
    fn empty_bag_errors() {
        let s = AdapterState::plain(3);
        assert!(matches!(score_embeddings(&[1.0, 0.0, 0.0], &[], &s), Err(Error::Empty(_))));
    }

    #[test]
    fn soft_forward_matches_public_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = AdapterState::init(8, 2, 6).unwrap();
        let f = unit(&mut rng, 8);
        let entries: Vec<FeatureVec> = (0..5).map(|_| unit(&mut rng, 8)).collect();
        let cache = soft_forward(&f, &entries, &s).unwrap();
        let p = score_embeddings(&f, &entries, &s).unwrap();
        for (a, b) in cache.probs.iter().zip(p.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = AdapterState::init(5, 2, 8).unwrap();
        let f = unit(&mut rng, 5);
        let entries: Vec<FeatureVec> = (0..4).map(|_| unit(&mut rng, 5)).collect();
        let w: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |st: &AdapterState| dot(&soft_forward(&f, &entries, st).unwrap().projected, &w);
        let mut grad = s.zeros_like();
        soft_backward(&soft_forward(&f, &entries, &s).unwrap(), &w, &entries, &s, &mut grad);

        let mut flat_g = Vec::new();
        grad.visit(|b| flat_g.extend_from_slice(b));
        for k in 0..flat_g.len() {
            let eps = 1e-6;
            let bump = |delta: f64| {
                let mut p = s.clone();
                let mut n = 0;
                p.visit_mut(|b| {
                    for v in b.iter_mut() {
                        if n == k {
                            *v += delta;
                        }
                        n += 1;
                    }
                });
                loss(&p)
            };
            let numeric = (bump(eps) - bump(-eps)) / (2.0 * eps);
            assert!(
                (numeric - flat_g[k]).abs() < 1e-7,
                "coordinate {k}: numeric {numeric} analytic {}",
                flat_g[k]
            );
        }
    }
}
