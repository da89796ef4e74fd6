use std::sync::Arc;

use super::losses::{focal_loss_grad, gaussian_target, giou_loss_grad, l1_loss_grad, LossConfig, LossParts};
use crate::adapter::{soft_backward, soft_forward, AdapterState};
use crate::embedding::{softmax_backward, softmax_unchecked, FeatureVec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fusion::{correlate, FeatureMap, HeadParams};
use crate::geometry::BBox;

/// One supervised example. The feature map and the image features come
/// from frozen encoders, so they are computed once up front.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub features: FeatureMap,
    /// Embedding of the exemplar crop.
    pub exemplar_feat: FeatureVec,
    /// Embedding of the search crop.
    pub search_feat: FeatureVec,
    /// Bag embeddings of the sample's target.
    pub entries: Arc<Vec<FeatureVec>>,
    /// Ground truth in search-crop fractions (`[0, 1]` covers the crop).
    pub gt: BBox,
}

impl TrainSample {
    /// Score-map cell containing the ground-truth centre.
    pub fn gt_cell(&self) -> (usize, usize) {
        let (cx, cy) = self.gt.center();
        let g = self.features.height;
        let cell = |v: f64| ((v * g as f64).floor().max(0.0) as usize).min(g - 1);
        (cell(cy), cell(cx))
    }
}

/// Parameters optimized by the trainer; the same layout holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable {
    pub adapter: AdapterState,
    pub head: HeadParams,
}

impl Trainable {
    pub fn zeros_like(&self) -> Self {
        Self {
            adapter: self.adapter.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn visit(&self, mut f: impl FnMut(&[f64])) {
        self.adapter.visit(&mut f);
        self.head.visit(&mut f);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        self.adapter.visit_mut(&mut f);
        self.head.visit_mut(&mut f);
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.visit(|b| v.extend_from_slice(b));
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut n = 0;
        self.visit(|b| n += b.len());
        if n != flat.len() {
            return Err(Error::ShapeMismatch(format!("{} values for {n} parameters", flat.len())));
        }
        let mut i = 0;
        self.visit_mut(|b| {
            b.copy_from_slice(&flat[i..i + b.len()]);
            i += b.len();
        });
        Ok(())
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &Trainable, s: f64) {
        let flat = other.to_flat();
        let mut i = 0;
        self.visit_mut(|b| {
            for v in b.iter_mut() {
                *v += s * flat[i];
                i += 1;
            }
        });
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(|b| n += b.len());
        n
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss of one sample and, when `grad` is given, its gradient accumulated
/// into it.
///
/// Training differs from inference in two documented ways: the hard bag
/// selection is replaced by its probability-weighted mix so the adapter
/// receives gradient, and the box is regressed at the ground-truth cell
/// rather than at the predicted peak. The temporal window holds just the
/// sample's own search-text feature.
pub(crate) fn sample_loss(
    params: &Trainable,
    sample: &TrainSample,
    cfg: &LossConfig,
    grad: Option<&mut Trainable>,
) -> Result<LossParts> {
    let entries = sample.entries.as_slice();
    let ce = soft_forward(&sample.exemplar_feat, entries, &params.adapter)?;
    let cs = soft_forward(&sample.search_feat, entries, &params.adapter)?;
    let (t_e, t_s) = (&ce.projected, &cs.projected);
    let q = t_e.len();
    let diff: Vec<f64> = t_e.iter().zip(t_s).map(|(a, b)| a - b).collect();
    let neg: Vec<f64> = diff.iter().map(|d| -d.abs()).collect();
    let w_att = softmax_unchecked(&neg, 1.0);
    let t_att: Vec<f64> = w_att.iter().zip(t_e).map(|(w, t)| w * t).collect();

    let corr = correlate(&sample.features, &t_att)?;
    let cache = params.head.forward(&corr)?;
    let maps = &cache.maps;
    let (g, n) = (maps.height(), maps.height() * maps.width());

    let (row, col) = sample.gt_cell();
    let target = gaussian_target(maps.height(), maps.width(), row, col, cfg.target_sigma);
    let (cls_loss, d_cls) = focal_loss_grad(&maps.cls.data, &target, cfg);

    let cell = row * maps.width() + col;
    let (ox, oy) = (maps.offset[cell], maps.offset[n + cell]);
    let (sw, sh) = (maps.size[cell], maps.size[n + cell]);
    let cx = (col as f64 + ox) / g as f64;
    let cy = (row as f64 + oy) / g as f64;
    let pred = BBox::new_unchecked(cx - sw / 2.0, cy - sh / 2.0, sw, sh);
    let (iou_loss, d_iou) = giou_loss_grad(&pred, &sample.gt);
    let (l1, d_l1) = l1_loss_grad(&pred, &sample.gt);
    let parts = LossParts::new(cls_loss, iou_loss, l1, cfg);

    let Some(grad) = grad else {
        return Ok(parts);
    };

    let d_box: Vec<f64> = (0..4).map(|k| cfg.lambda_iou * d_iou[k] + cfg.lambda_l1 * d_l1[k]).collect();
    // (x, y, w, h) = (cx − w/2, cy − h/2, w, h)
    let mut d_offset = vec![0.0; 2 * n];
    let mut d_size = vec![0.0; 2 * n];
    d_offset[cell] = d_box[0] / g as f64;
    d_offset[n + cell] = d_box[1] / g as f64;
    d_size[cell] = d_box[2] - d_box[0] / 2.0;
    d_size[n + cell] = d_box[3] - d_box[1] / 2.0;
    let d_corr = params.head.backward(&cache, &d_cls, &d_offset, &d_size, &mut grad.head);

    let f = &sample.features;
    let cells = f.cells();
    let d_t_att: Vec<f64> = (0..q)
        .map(|c| {
            d_corr[c * cells..(c + 1) * cells]
                .iter()
                .zip(f.plane(c))
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    let d_w: Vec<f64> = d_t_att.iter().zip(t_e).map(|(d, t)| d * t).collect();
    let mut d_t_e: Vec<f64> = d_t_att.iter().zip(&w_att).map(|(d, w)| d * w).collect();
    let d_neg = softmax_backward(&w_att, &d_w, 1.0);
    let mut d_t_s = vec![0.0; q];
    for k in 0..q {
        let d_diff = -sign(diff[k]) * d_neg[k];
        d_t_e[k] += d_diff;
        d_t_s[k] -= d_diff;
    }
    soft_backward(&ce, &d_t_e, entries, &params.adapter, &mut grad.adapter);
    soft_backward(&cs, &d_t_s, entries, &params.adapter, &mut grad.adapter);
    Ok(parts)
}

/// Mean loss over `samples`, summed in sample order.
pub fn batch_loss(params: &Trainable, samples: &[TrainSample], cfg: &LossConfig, exec: Exec) -> Result<LossParts> {
    if samples.is_empty() {
        return Err(Error::Empty("training samples"));
    }
    let parts = exec.try_map(samples, |s| sample_loss(params, s, cfg, None))?;
    Ok(mean_parts(&parts))
}

/// Mean loss and mean gradient over `samples`. Per-sample work may run in
/// parallel; the reduction is always in sample order.
pub fn batch_grad(
    params: &Trainable,
    samples: &[TrainSample],
    cfg: &LossConfig,
    exec: Exec,
) -> Result<(LossParts, Trainable)> {
    if samples.is_empty() {
        return Err(Error::Empty("training samples"));
    }
    let results = exec.try_map(samples, |s| -> Result<(LossParts, Trainable)> {
        let mut g = params.zeros_like();
        let parts = sample_loss(params, s, cfg, Some(&mut g))?;
        Ok((parts, g))
    })?;
    let mut total = params.zeros_like();
    let scale = 1.0 / samples.len() as f64;
    let mut parts = Vec::with_capacity(results.len());
    for (p, g) in &results {
        total.add_scaled(g, scale);
        parts.push(*p);
    }
    Ok((mean_parts(&parts), total))
}

fn mean_parts(parts: &[LossParts]) -> LossParts {
    let n = parts.len() as f64;
    let mut m = LossParts::default();
    for p in parts {
        m.total += p.total;
        m.cls += p.cls;
        m.iou += p.iou;
        m.l1 += p.l1;
    }
    LossParts {
        total: m.total / n,
        cls: m.cls / n,
        iou: m.iou / n,
        l1: m.l1 / n,
    }
}
