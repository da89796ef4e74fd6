use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FeatureMap, PredictionMaps, ScoreMap};
use crate::error::{Error, Result};
use crate::hashing::derive_seed;

/// Initial bias of the classification logit (sigmoid ≈ 0.12).
pub const CLS_BIAS_INIT: f64 = -2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Cells per side of the score map.
    pub grid: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stages: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            channels: 16,
            kernel: 3,
            stages: 4,
        }
    }
}

/// Convolution (no bias, same padding) followed by a per-channel affine
/// normalization and a rectifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out × in × k × k`
    pub weight: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

/// 1×1 output projection with bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out × in`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub kernel: usize,
    pub stages: Vec<Stage>,
    pub cls: Projection,
    pub offset: Projection,
    pub size: Projection,
}

fn gaussian(seed: u64, label: &str, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("valid normal");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label));
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}

impl Projection {
    fn init(seed: u64, label: &str, cin: usize, cout: usize, bias: f64) -> Self {
        Self {
            in_channels: cin,
            out_channels: cout,
            weight: gaussian(seed, label, cin * cout, 0.1 / (cin as f64).sqrt()),
            bias: vec![bias; cout],
        }
    }

    fn apply(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.out_channels * n];
        for o in 0..self.out_channels {
            let dst = &mut out[o * n..(o + 1) * n];
            dst.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.in_channels {
                let w = self.weight[o * self.in_channels + i];
                for (d, s) in dst.iter_mut().zip(&x[i * n..(i + 1) * n]) {
                    *d += w * s;
                }
            }
        }
        out
    }

    fn backward(&self, x: &[f64], d_out: &[f64], n: usize, grad: &mut Projection, d_x: &mut [f64]) {
        for o in 0..self.out_channels {
            let g = &d_out[o * n..(o + 1) * n];
            grad.bias[o] += g.iter().sum::<f64>();
            for i in 0..self.in_channels {
                let xi = &x[i * n..(i + 1) * n];
                grad.weight[o * self.in_channels + i] += g.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                let w = self.weight[o * self.in_channels + i];
                for (d, gv) in d_x[i * n..(i + 1) * n].iter_mut().zip(g) {
                    *d += w * gv;
                }
            }
        }
    }
}

impl HeadParams {
    /// He-initialized convolutions, unit scale, zero shift; small output
    /// projections, classification bias −2.
    pub fn init(in_channels: usize, cfg: &HeadConfig, seed: u64) -> Result<Self> {
        if in_channels == 0 || cfg.channels == 0 || cfg.stages == 0 {
            return Err(Error::InvalidArgument("head channels and stages must be positive".into()));
        }
        if cfg.kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size {} must be odd", cfg.kernel)));
        }
        let k2 = cfg.kernel * cfg.kernel;
        let stages = (0..cfg.stages)
            .map(|s| {
                let cin = if s == 0 { in_channels } else { cfg.channels };
                Stage {
                    in_channels: cin,
                    out_channels: cfg.channels,
                    weight: gaussian(
                        seed,
                        &format!("head-stage-{s}"),
                        cfg.channels * cin * k2,
                        (2.0 / (cin * k2) as f64).sqrt(),
                    ),
                    scale: vec![1.0; cfg.channels],
                    shift: vec![0.0; cfg.channels],
                }
            })
            .collect();
        let c = cfg.channels;
        Ok(Self {
            kernel: cfg.kernel,
            stages,
            cls: Projection::init(seed, "head-cls", c, 1, CLS_BIAS_INIT),
            offset: Projection::init(seed, "head-offset", c, 2, 0.0),
            size: Projection::init(seed, "head-size", c, 2, 0.0),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.stages[0].in_channels
    }

    pub fn validate(&self) -> Result<()> {
        let k2 = self.kernel * self.kernel;
        if self.stages.is_empty() {
            return Err(Error::ShapeMismatch("head has no stages".into()));
        }
        for (s, st) in self.stages.iter().enumerate() {
            if s > 0 && st.in_channels != self.stages[s - 1].out_channels {
                return Err(Error::ShapeMismatch(format!("stage {s} input does not match stage {}", s - 1)));
            }
            if st.weight.len() != st.in_channels * st.out_channels * k2
                || st.scale.len() != st.out_channels
                || st.shift.len() != st.out_channels
            {
                return Err(Error::ShapeMismatch(format!("stage {s} parameter shapes")));
            }
        }
        let c = self.stages.last().expect("non-empty").out_channels;
        for (name, p, o) in [("cls", &self.cls, 1), ("offset", &self.offset, 2), ("size", &self.size, 2)] {
            if p.in_channels != c || p.out_channels != o || p.weight.len() != c * o || p.bias.len() != o {
                return Err(Error::ShapeMismatch(format!("{name} projection shapes")));
            }
        }
        let mut finite = true;
        self.visit(|b| finite &= b.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Degenerate("non-finite head parameter".into()));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|b| b.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    /// Visit parameter blocks in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&[f64])) {
        for st in &self.stages {
            f(&st.weight);
            f(&st.scale);
            f(&st.shift);
        }
        for p in [&self.cls, &self.offset, &self.size] {
            f(&p.weight);
            f(&p.bias);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for st in &mut self.stages {
            f(&mut st.weight);
            f(&mut st.scale);
            f(&mut st.shift);
        }
        for p in [&mut self.cls, &mut self.offset, &mut self.size] {
            f(&mut p.weight);
            f(&mut p.bias);
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(|b| n += b.len());
        n
    }
}

fn conv_forward(x: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], cout: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let n = h * w;
    let mut out = vec![0.0; cout * n];
    for o in 0..cout {
        let dst = &mut out[o * n..(o + 1) * n];
        for i in 0..cin {
            let src = &x[i * n..(i + 1) * n];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let wv = weight[((o * cin + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = (h as isize - dy).min(h as isize).max(0) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for y in y_lo..y_hi {
                        let sy = (y as isize + dy) as usize;
                        let drow = &mut dst[y * w + x_lo..y * w + x_hi];
                        let srow = &src[sy * w + (x_lo as isize + dx) as usize..sy * w + (x_hi as isize + dx) as usize];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    k: usize,
    d_out: &[f64],
    d_weight: &mut [f64],
    d_x: Option<&mut [f64]>,
) {
    let pad = (k / 2) as isize;
    let n = h * w;
    let mut d_x = d_x;
    for o in 0..cout {
        let g = &d_out[o * n..(o + 1) * n];
        for i in 0..cin {
            let src = &x[i * n..(i + 1) * n];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let widx = ((o * cin + i) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = (h as isize - dy).min(h as isize).max(0) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let sy = (y as isize + dy) as usize;
                        let s0 = sy * w + (x_lo as isize + dx) as usize;
                        let len = x_hi - x_lo;
                        let grow = &g[y * w + x_lo..y * w + x_hi];
                        acc += grow.iter().zip(&src[s0..s0 + len]).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(dx_buf) = d_x.as_deref_mut() {
                            let drow = &mut dx_buf[i * n + s0..i * n + s0 + len];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                    d_weight[widx] += acc;
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    height: usize,
    width: usize,
    /// Input of each stage, then the final features.
    acts: Vec<Vec<f64>>,
    /// Convolution outputs (before normalization) per stage.
    conv: Vec<Vec<f64>>,
    /// Pre-rectifier values per stage.
    pre: Vec<Vec<f64>>,
    pub(crate) maps: PredictionMaps,
}

impl HeadCache {
    pub fn maps(&self) -> &PredictionMaps {
        &self.maps
    }
}

impl HeadParams {
    pub(crate) fn forward(&self, input: &FeatureMap) -> Result<HeadCache> {
        if input.channels != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "head expects {} input channels, got {}",
                self.in_channels(),
                input.channels
            )));
        }
        let (h, w) = (input.height, input.width);
        let n = h * w;
        let mut acts = vec![input.data.clone()];
        let mut conv = Vec::with_capacity(self.stages.len());
        let mut pre = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let x = acts.last().expect("input present");
            let y = conv_forward(x, st.in_channels, h, w, &st.weight, st.out_channels, self.kernel);
            let mut z = y.clone();
            for o in 0..st.out_channels {
                for v in &mut z[o * n..(o + 1) * n] {
                    *v = *v * st.scale[o] + st.shift[o];
                }
            }
            let a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            conv.push(y);
            pre.push(z);
            acts.push(a);
        }
        let feat = acts.last().expect("stages ran");
        let cls: Vec<f64> = self.cls.apply(feat, n).into_iter().map(sigmoid).collect();
        let offset: Vec<f64> = self.offset.apply(feat, n).into_iter().map(sigmoid).collect();
        let size: Vec<f64> = self.size.apply(feat, n).into_iter().map(sigmoid).collect();
        Ok(HeadCache {
            height: h,
            width: w,
            acts,
            conv,
            pre,
            maps: PredictionMaps {
                cls: ScoreMap::new(h, w, cls)?,
                offset,
                size,
            },
        })
    }

    /// Accumulate parameter gradients into `grad` given gradients with
    /// respect to the (post-sigmoid) output maps; returns dL/d(input).
    pub(crate) fn backward(
        &self,
        cache: &HeadCache,
        d_cls: &[f64],
        d_offset: &[f64],
        d_size: &[f64],
        grad: &mut HeadParams,
    ) -> Vec<f64> {
        let n = cache.height * cache.width;
        let feat = cache.acts.last().expect("stages ran");
        let through = |out: &[f64], d: &[f64]| -> Vec<f64> {
            out.iter().zip(d).map(|(s, g)| g * s * (1.0 - s)).collect()
        };
        let c_last = self.cls.in_channels;
        let mut d_feat = vec![0.0; c_last * n];
        self.cls
            .backward(feat, &through(&cache.maps.cls.data, d_cls), n, &mut grad.cls, &mut d_feat);
        self.offset
            .backward(feat, &through(&cache.maps.offset, d_offset), n, &mut grad.offset, &mut d_feat);
        self.size
            .backward(feat, &through(&cache.maps.size, d_size), n, &mut grad.size, &mut d_feat);

        let mut d_a = d_feat;
        for s in (0..self.stages.len()).rev() {
            let st = &self.stages[s];
            let gs = &mut grad.stages[s];
            let mut d_y = vec![0.0; st.out_channels * n];
            for o in 0..st.out_channels {
                let mut d_scale = 0.0;
                let mut d_shift = 0.0;
                for p in o * n..(o + 1) * n {
                    let dz = if cache.pre[s][p] > 0.0 { d_a[p] } else { 0.0 };
                    d_scale += dz * cache.conv[s][p];
                    d_shift += dz;
                    d_y[p] = dz * st.scale[o];
                }
                gs.scale[o] += d_scale;
                gs.shift[o] += d_shift;
            }
            let mut d_x = vec![0.0; st.in_channels * n];
            conv_backward(
                &cache.acts[s],
                st.in_channels,
                cache.height,
                cache.width,
                &st.weight,
                st.out_channels,
                self.kernel,
                &d_y,
                &mut gs.weight,
                Some(&mut d_x),
            );
            d_a = d_x;
        }
        d_a
    }
}

/// Run the stacked stages and the three output heads.
pub fn predict_maps(corr: &FeatureMap, params: &HeadParams) -> Result<PredictionMaps> {
    Ok(params.forward(corr)?.maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny() -> HeadConfig {
        HeadConfig {
            grid: 4,
            channels: 3,
            kernel: 3,
            stages: 2,
        }
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_everything_gives_half() {
        let mut p = HeadParams::init(4, &tiny(), 1).unwrap();
        p.visit_mut(|b| b.iter_mut().for_each(|v| *v = 0.0));
        let m = predict_maps(&FeatureMap::zeros(4, 4, 4), &p).unwrap();
        assert!(m.cls.data.iter().all(|v| *v == 0.5));
        assert_eq!(m.cls.data.len(), 16);
        assert_eq!(m.offset.len(), 32);
        assert_eq!(m.size.len(), 32);
    }

    /// Dense-matrix oracle: a single 3×3 stage with unit scale and positive
    /// inputs/weights (so the rectifier is inactive) is a linear map; build
    /// its matrix entry by entry from the convolution definition.
    #[test]
    fn single_stage_matches_dense_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = HeadConfig {
            grid: 5,
            channels: 2,
            kernel: 3,
            stages: 1,
        };
        let mut p = HeadParams::init(3, &cfg, 3).unwrap();
        p.stages[0].weight.iter_mut().for_each(|w| *w = rng.random_range(0.0..1.0));
        let (h, w) = (5usize, 4usize);
        let x = FeatureMap::new(3, h, w, (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let cache = p.forward(&x).unwrap();
        let n = h * w;
        let mut dense = vec![vec![0.0; 3 * n]; 2 * n];
        for o in 0..2 {
            for y in 0..h {
                for xx in 0..w {
                    for i in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                dense[o * n + y * w + xx][i * n + sy as usize * w + sx as usize] +=
                                    p.stages[0].weight[((o * 3 + i) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
        for r in 0..2 * n {
            let want: f64 = dense[r].iter().zip(&x.data).map(|(a, b)| a * b).sum();
            assert!((cache.acts[1][r] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = HeadParams::init(3, &tiny(), 5).unwrap();
        let x = random_map(&mut rng, 3, 4, 4);
        let wc: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wo: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ws: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |p: &HeadParams, x: &FeatureMap| {
            let m = predict_maps(x, p).unwrap();
            let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            d(&m.cls.data, &wc) + d(&m.offset, &wo) + d(&m.size, &ws)
        };
        let mut g = p.zeros_like();
        let cache = p.forward(&x).unwrap();
        let dx = p.backward(&cache, &wc, &wo, &ws, &mut g);
        let mut analytic = Vec::new();
        g.visit(|b| analytic.extend_from_slice(b));
        let eps = 1e-6;
        for k in 0..analytic.len() {
            let bump = |delta: f64| {
                let mut q = p.clone();
                let mut idx = 0;
                q.visit_mut(|b| {
                    for v in b.iter_mut() {
                        if idx == k {
                            *v += delta;
                        }
                        idx += 1;
                    }
                });
                loss(&q, &x)
            };
            let num = (bump(eps) - bump(-eps)) / (2.0 * eps);
            assert!((num - analytic[k]).abs() < 1e-6, "param {k}: {num} vs {}", analytic[k]);
        }
        for k in 0..x.data.len() {
            let mut a = x.clone();
            a.data[k] += eps;
            let mut b = x.clone();
            b.data[k] -= eps;
            let num = (loss(&p, &a) - loss(&p, &b)) / (2.0 * eps);
            assert!((num - dx[k]).abs() < 1e-6, "input {k}: {num} vs {}", dx[k]);
        }
    }

    #[test]
    fn rejects_wrong_channels() {
        let p = HeadParams::init(3, &tiny(), 1).unwrap();
        assert!(predict_maps(&FeatureMap::zeros(4, 4, 4), &p).is_err());
        assert!(p.validate().is_ok());
    }
}
