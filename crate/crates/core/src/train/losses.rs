use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Probabilities are clamped to `[P_CLAMP, 1 − P_CLAMP]` inside the focal loss.
pub const P_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    /// Focal exponent on the prediction term.
    pub focal_alpha: f64,
    /// Exponent of the penalty reduction around the peak.
    pub focal_beta: f64,
    /// Gaussian radius of the classification target, in cells.
    pub target_sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_iou: 2.0,
            lambda_l1: 5.0,
            focal_alpha: 2.0,
            focal_beta: 4.0,
            target_sigma: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_iou >= 0.0) || !(self.lambda_l1 >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.target_sigma > 0.0) {
            return Err(Error::Config("target_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
}

impl LossParts {
    pub fn new(cls: f64, iou: f64, l1: f64, cfg: &LossConfig) -> Self {
        Self {
            total: total_loss(cls, iou, l1, cfg),
            cls,
            iou,
            l1,
        }
    }
}

/// `cls + λ_iou·iou + λ_L1·l1`.
pub fn total_loss(cls: f64, iou: f64, l1: f64, cfg: &LossConfig) -> f64 {
    cls + cfg.lambda_iou * iou + cfg.lambda_l1 * l1
}

/// `1 − GIoU`, in [0, 2].
pub fn giou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    pred.validate()?;
    gt.validate()?;
    Ok(giou_loss_grad(pred, gt).0)
}

/// Loss and its gradient with respect to `pred`'s `(x, y, w, h)`.
pub(crate) fn giou_loss_grad(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let (px1, py1, px2, py2) = (pred.x, pred.y, pred.x2(), pred.y2());
    let (gx1, gy1, gx2, gy2) = (gt.x, gt.y, gt.x2(), gt.y2());

    let iw_raw = px2.min(gx2) - px1.max(gx1);
    let ih_raw = py2.min(gy2) - py1.max(gy1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let area_p = pred.w * pred.h;
    let union = area_p + gt.w * gt.h - inter;
    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let hull = cw * ch;
    let loss = 2.0 - inter / union - union / hull;

    let d_inter = -(union + inter) / (union * union) + 1.0 / hull;
    let d_area_p = inter / (union * union) - 1.0 / hull;
    let d_hull = union / (hull * hull);

    // corner gradients: [x1, y1, x2, y2]
    let mut g = [0.0; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        let (di_dx1, di_dx2) = (if px1 > gx1 { -1.0 } else { 0.0 }, if px2 < gx2 { 1.0 } else { 0.0 });
        let (di_dy1, di_dy2) = (if py1 > gy1 { -1.0 } else { 0.0 }, if py2 < gy2 { 1.0 } else { 0.0 });
        g[0] += d_inter * ih * di_dx1;
        g[2] += d_inter * ih * di_dx2;
        g[1] += d_inter * iw * di_dy1;
        g[3] += d_inter * iw * di_dy2;
    }
    g[0] -= d_area_p * pred.h;
    g[2] += d_area_p * pred.h;
    g[1] -= d_area_p * pred.w;
    g[3] += d_area_p * pred.w;
    let (dc_dx1, dc_dx2) = (if px1 < gx1 { -1.0 } else { 0.0 }, if px2 > gx2 { 1.0 } else { 0.0 });
    let (dc_dy1, dc_dy2) = (if py1 < gy1 { -1.0 } else { 0.0 }, if py2 > gy2 { 1.0 } else { 0.0 });
    g[0] += d_hull * ch * dc_dx1;
    g[2] += d_hull * ch * dc_dx2;
    g[1] += d_hull * cw * dc_dy1;
    g[3] += d_hull * cw * dc_dy2;

    // (x1, x2) = (x, x + w)
    (loss, [g[0] + g[2], g[1] + g[3], g[2], g[3]])
}

/// Mean absolute difference over `(x, y, w, h)`. Boxes are expected in
/// normalized (crop-fraction) coordinates.
pub fn l1_loss(pred: &BBox, gt: &BBox) -> f64 {
    l1_loss_grad(pred, gt).0
}

pub(crate) fn l1_loss_grad(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let (p, t) = (pred.as_array(), gt.as_array());
    let mut g = [0.0; 4];
    let mut sum = 0.0;
    for i in 0..4 {
        let d = p[i] - t[i];
        sum += d.abs();
        g[i] = if d > 0.0 {
            0.25
        } else if d < 0.0 {
            -0.25
        } else {
            0.0
        };
    }
    (sum / 4.0, g)
}

/// Gaussian splat with value exactly 1 at `(row, col)`.
pub fn gaussian_target(height: usize, width: usize, row: usize, col: usize, sigma: f64) -> Vec<f64> {
    let mut t = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let (dy, dx) = (y as f64 - row as f64, x as f64 - col as f64);
            t.push((-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp());
        }
    }
    t
}

fn check_unit_interval(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::InvalidArgument(format!("{name} values must lie in [0, 1]")));
    }
    Ok(())
}

/// Penalty-reduced focal loss, averaged over the positive cells (those
/// whose target is exactly 1).
pub fn focal_loss(pred: &[f64], target: &[f64], cfg: &LossConfig) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    check_unit_interval("prediction", pred)?;
    check_unit_interval("target", target)?;
    Ok(focal_loss_grad(pred, target, cfg).0)
}

pub(crate) fn focal_loss_grad(pred: &[f64], target: &[f64], cfg: &LossConfig) -> (f64, Vec<f64>) {
    let (a, b) = (cfg.focal_alpha, cfg.focal_beta);
    let num_pos = target.iter().filter(|t| **t == 1.0).count().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&raw, &t) in pred.iter().zip(target) {
        let p = raw.clamp(P_CLAMP, 1.0 - P_CLAMP);
        let inside = raw > P_CLAMP && raw < 1.0 - P_CLAMP;
        let (l, g) = if t == 1.0 {
            let q = 1.0 - p;
            (
                -q.powf(a) * p.ln(),
                a * q.powf(a - 1.0) * p.ln() - q.powf(a) / p,
            )
        } else {
            let w = (1.0 - t).powf(b);
            let q = 1.0 - p;
            (
                -w * p.powf(a) * q.ln(),
                -w * (a * p.powf(a - 1.0) * q.ln() - p.powf(a) / q),
            )
        };
        loss += l;
        grad.push(if inside { g / num_pos } else { 0.0 });
    }
    (loss / num_pos, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    /// Count unit cells on an integer grid.
    fn grid_areas(p: &BBox, g: &BBox) -> (f64, f64, f64) {
        let (mut inter, mut union, mut hull) = (0.0, 0.0, 0.0);
        let lo = p.x.min(g.x).min(p.y).min(g.y) as i64 - 1;
        let hi = p.x2().max(g.x2()).max(p.y2()).max(g.y2()) as i64 + 1;
        let hx = (p.x.min(g.x), p.x2().max(g.x2()));
        let hy = (p.y.min(g.y), p.y2().max(g.y2()));
        for y in lo..hi {
            for x in lo..hi {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                let inp = cx > p.x && cx < p.x2() && cy > p.y && cy < p.y2();
                let ing = cx > g.x && cx < g.x2() && cy > g.y && cy < g.y2();
                if inp && ing {
                    inter += 1.0;
                }
                if inp || ing {
                    union += 1.0;
                }
                if cx > hx.0 && cx < hx.1 && cy > hy.0 && cy < hy.1 {
                    hull += 1.0;
                }
            }
        }
        (inter, union, hull)
    }

    #[test]
    fn giou_documented_example_and_grid_oracle() {
        let (p, g) = (b(0.0, 0.0, 2.0, 2.0), b(1.0, 1.0, 2.0, 2.0));
        let (i, u, c) = grid_areas(&p, &g);
        assert_eq!((i, u, c), (1.0, 7.0, 9.0));
        let want = 1.0 - (i / u - (c - u) / c);
        let got = giou_loss(&p, &g).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 1.079365079365).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let r = |rng: &mut ChaCha8Rng| rng.random_range(0..12) as f64;
            let s = |rng: &mut ChaCha8Rng| rng.random_range(1..8) as f64;
            let p = b(r(&mut rng), r(&mut rng), s(&mut rng), s(&mut rng));
            let g = b(r(&mut rng), r(&mut rng), s(&mut rng), s(&mut rng));
            let (i, u, c) = grid_areas(&p, &g);
            let want = 1.0 - (i / u - (c - u) / c);
            assert!((giou_loss(&p, &g).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn giou_identity_symmetry_and_limit() {
        let a = b(1.0, 2.0, 3.0, 4.0);
        assert_eq!(giou_loss(&a, &a).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p = b(rng.random(), rng.random(), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0));
            let g = b(rng.random(), rng.random(), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0));
            let (x, y) = (giou_loss(&p, &g).unwrap(), giou_loss(&g, &p).unwrap());
            assert!((x - y).abs() < 1e-15);
            assert!((0.0..=2.0).contains(&x));
        }
        let far = giou_loss(&b(0.0, 0.0, 1.0, 1.0), &b(1e6, 1e6, 1.0, 1.0)).unwrap();
        assert!(far > 2.0 - 1e-5);
        assert!(giou_loss(&BBox::new_unchecked(0.0, 0.0, 0.0, 1.0), &a).is_err());
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = b(rng.random(), rng.random(), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0));
            let g = b(rng.random(), rng.random(), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0));
            let (_, grad) = giou_loss_grad(&p, &g);
            let eps = 1e-7;
            for k in 0..4 {
                let mut hi = p.as_array();
                let mut lo = p.as_array();
                hi[k] += eps;
                lo[k] -= eps;
                let f = |a: [f64; 4]| giou_loss_grad(&BBox::new_unchecked(a[0], a[1], a[2], a[3]), &g).0;
                let num = (f(hi) - f(lo)) / (2.0 * eps);
                assert!((num - grad[k]).abs() < 1e-5, "{k}: {num} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn l1_cases() {
        let a = b(0.1, 0.2, 0.3, 0.4);
        assert_eq!(l1_loss(&a, &a), 0.0);
        let c = b(0.2, 0.3, 0.4, 0.5);
        assert!((l1_loss(&c, &a) - 0.1).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let p: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.01..1.0));
            let t: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.01..1.0));
            let want = ((p[0] - t[0]).abs() + (p[1] - t[1]).abs() + (p[2] - t[2]).abs() + (p[3] - t[3]).abs()) / 4.0;
            let got = l1_loss(&b(p[0], p[1], p[2], p[3]), &b(t[0], t[1], t[2], t[3]));
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn total_is_weighted_sum() {
        let cfg = LossConfig::default();
        assert!((total_loss(0.5, 0.1, 0.02, &cfg) - 0.8).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &cfg), 0.0);
        assert!(total_loss(0.5, 0.2, 0.02, &cfg) >= total_loss(0.5, 0.1, 0.02, &cfg));
    }

    #[test]
    fn focal_near_zero_at_optimum() {
        let cfg = LossConfig::default();
        let target = gaussian_target(5, 5, 2, 2, 1.0);
        let mut pred = vec![0.0; 25];
        pred[12] = 1.0;
        assert!(focal_loss(&pred, &target, &cfg).unwrap() < 1e-5);
    }

    #[test]
    fn focal_uniform_half_matches_closed_form() {
        let cfg = LossConfig::default();
        let mut target = vec![0.0; 9];
        target[4] = 1.0;
        let pred = vec![0.5; 9];
        let want = 0.25 * 2f64.ln() + 8.0 * 0.25 * 2f64.ln();
        let got = focal_loss(&pred, &target, &cfg).unwrap();
        assert!(got > 0.0);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn focal_decreases_toward_target() {
        let cfg = LossConfig::default();
        let target = gaussian_target(4, 4, 1, 2, 1.0);
        let start = vec![0.5; 16];
        let goal: Vec<f64> = target.iter().map(|t| if *t == 1.0 { 1.0 } else { 0.0 }).collect();
        let mut last = f64::INFINITY;
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let p: Vec<f64> = start.iter().zip(&goal).map(|(s, g)| s + t * (g - s)).collect();
            let l = focal_loss(&p, &target, &cfg).unwrap();
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = gaussian_target(4, 5, 2, 3, 1.0);
        let pred: Vec<f64> = (0..20).map(|_| rng.random_range(0.05..0.95)).collect();
        let (_, g) = focal_loss_grad(&pred, &target, &cfg);
        for k in 0..20 {
            let eps = 1e-6;
            let mut hi = pred.clone();
            hi[k] += eps;
            let mut lo = pred.clone();
            lo[k] -= eps;
            let num = (focal_loss(&hi, &target, &cfg).unwrap() - focal_loss(&lo, &target, &cfg).unwrap()) / (2.0 * eps);
            assert!((num - g[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn focal_errors() {
        let cfg = LossConfig::default();
        assert!(focal_loss(&[0.5], &[1.0, 0.0], &cfg).is_err());
        assert!(focal_loss(&[1.5], &[1.0], &cfg).is_err());
    }

    #[test]
    fn target_has_single_unit_peak() {
        let t = gaussian_target(6, 7, 2, 5, 1.0);
        assert_eq!(t.iter().filter(|v| **v == 1.0).count(), 1);
        assert_eq!(t[2 * 7 + 5], 1.0);
        assert!((t[2 * 7 + 4] - (-0.5f64).exp()).abs() < 1e-15);
    }
}
