use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const NUM_THRESHOLDS: usize = 21;
/// Center-error radius, in pixels, for precision.
pub const PRECISION_RADIUS: f64 = 20.0;

/// IoU thresholds `0, 0.05, …, 1`.
pub fn success_thresholds() -> [f64; NUM_THRESHOLDS] {
    std::array::from_fn(|k| k as f64 / 20.0)
}

/// Normalized-error thresholds `0, 0.025, …, 0.5`.
pub fn np_thresholds() -> [f64; NUM_THRESHOLDS] {
    std::array::from_fn(|k| k as f64 * 0.025)
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = a.intersection_area(b);
    // Rounding in the corner arithmetic can push identical boxes past 1.
    Ok((inter / (a.area() + b.area() - inter)).min(1.0))
}

pub fn center_error(pred: &BBox, gt: &BBox) -> f64 {
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    (px - gx).hypot(py - gy)
}

/// Center error with each axis divided by the ground-truth extent.
pub fn normalized_center_error(pred: &BBox, gt: &BBox) -> Result<f64> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::Degenerate(format!("ground-truth box {gt:?} has no extent")));
    }
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    Ok(((px - gx) / gt.w).hypot((py - gy) / gt.h))
}

fn fraction<F: Fn(f64) -> bool>(values: &[f64], pred: F) -> f64 {
    values.iter().filter(|v| pred(**v)).count() as f64 / values.len() as f64
}

fn mean_of_points(points: &[f64]) -> f64 {
    points.iter().sum::<f64>() / points.len() as f64
}

/// Fraction of frames with IoU strictly above each threshold, and their mean.
pub fn success_curve(ious: &[f64]) -> Result<(Vec<f64>, f64)> {
    if ious.is_empty() {
        return Err(Error::Empty("IoU list"));
    }
    let curve: Vec<f64> = success_thresholds().iter().map(|t| fraction(ious, |v| v > *t)).collect();
    let s = mean_of_points(&curve);
    Ok((curve, s))
}

/// Fraction of frames with center error at most `radius`.
pub fn precision_at(center_errors: &[f64], radius: f64) -> Result<f64> {
    if center_errors.is_empty() {
        return Err(Error::Empty("center-error list"));
    }
    Ok(fraction(center_errors, |e| e <= radius))
}

/// Fraction of frames with normalized error strictly below each threshold,
/// and their mean.
pub fn normalized_precision_curve(errors: &[f64]) -> Result<(Vec<f64>, f64)> {
    if errors.is_empty() {
        return Err(Error::Empty("normalized-error list"));
    }
    let curve: Vec<f64> = np_thresholds().iter().map(|t| fraction(errors, |e| e < *t)).collect();
    let np = mean_of_points(&curve);
    Ok((curve, np))
}

pub fn normalized_precision(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!("{} predictions for {} boxes", pred.len(), gt.len())));
    }
    let errors = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| normalized_center_error(p, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(normalized_precision_curve(&errors)?.1)
}

/// Mean IoU and the fractions above 0.5 and 0.75.
pub fn ao_sr(ious: &[f64]) -> Result<(f64, f64, f64)> {
    if ious.is_empty() {
        return Err(Error::Empty("IoU list"));
    }
    let ao = ious.iter().sum::<f64>() / ious.len() as f64;
    Ok((ao, fraction(ious, |v| v > 0.5), fraction(ious, |v| v > 0.75)))
}

/// Every metric for one set of evaluated frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub frames: usize,
    pub success_curve: Vec<f64>,
    pub s: f64,
    pub p: f64,
    pub np_curve: Vec<f64>,
    pub np: f64,
    pub ao: f64,
    pub sr_050: f64,
    pub sr_075: f64,
}

/// Metrics over frame pairs; a missing prediction counts as IoU 0 and an
/// unbounded center error.
pub fn compute_metrics(pred: &[Option<BBox>], gt: &[BBox]) -> Result<Metrics> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!("{} predictions for {} boxes", pred.len(), gt.len())));
    }
    if gt.is_empty() {
        return Err(Error::Empty("evaluated frames"));
    }
    let mut ious = Vec::with_capacity(gt.len());
    let mut errs = Vec::with_capacity(gt.len());
    let mut nerrs = Vec::with_capacity(gt.len());
    for (p, g) in pred.iter().zip(gt) {
        match p {
            Some(p) => {
                ious.push(iou(p, g)?);
                errs.push(center_error(p, g));
                nerrs.push(normalized_center_error(p, g)?);
            }
            None => {
                g.validate()?;
                ious.push(0.0);
                errs.push(f64::INFINITY);
                nerrs.push(f64::INFINITY);
            }
        }
    }
    let (success_curve, s) = success_curve(&ious)?;
    let (np_curve, np) = normalized_precision_curve(&nerrs)?;
    let (ao, sr_050, sr_075) = ao_sr(&ious)?;
    Ok(Metrics {
        frames: gt.len(),
        success_curve,
        s,
        p: precision_at(&errs, PRECISION_RADIUS)?,
        np_curve,
        np,
        ao,
        sr_050,
        sr_075,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let odd = b(35.72210637668231, 100.38806967582188, 24.0, 24.0);
        assert_eq!(iou(&odd, &odd).unwrap(), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 1.0, 1.0)).unwrap(), 0.0);
        assert!((iou(&a, &b(1.0, 1.0, 2.0, 2.0)).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        assert!(iou(&a, &BBox::new_unchecked(0.0, 0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn success_boundaries() {
        let (curve, s) = success_curve(&[1.0; 10]).unwrap();
        assert_eq!(curve[20], 0.0);
        assert!(curve[..20].iter().all(|v| *v == 1.0));
        assert_eq!(s, 20.0 / 21.0);
        assert_eq!(success_curve(&[0.0; 4]).unwrap().1, 0.0);
        assert!(success_curve(&[]).is_err());
    }

    #[test]
    fn success_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ious: Vec<f64> = (0..50).map(|_| rng.random_range(0..=20) as f64 / 20.0).collect();
        let (curve, s) = success_curve(&ious).unwrap();
        let mut points = Vec::new();
        for k in 0..21 {
            let t = k as f64 / 20.0;
            let mut c = 0;
            for v in &ious {
                if *v > t {
                    c += 1;
                }
            }
            points.push(c as f64 / 50.0);
        }
        assert_eq!(curve, points);
        let mut sum = 0.0;
        for p in &points {
            sum += p;
        }
        assert_eq!(s, sum / 21.0);
    }

    #[test]
    fn precision_cases() {
        assert_eq!(precision_at(&[0.0; 5], 20.0).unwrap(), 1.0);
        assert_eq!(precision_at(&[21.0; 5], 20.0).unwrap(), 0.0);
        assert_eq!(precision_at(&[20.0, 19.0, 25.0, 3.0], 20.0).unwrap(), 0.75);
    }

    #[test]
    fn np_cases() {
        let g = vec![b(0.0, 0.0, 10.0, 20.0); 3];
        assert_eq!(normalized_precision(&g, &g).unwrap(), 20.0 / 21.0);
        let far = vec![b(100.0, 100.0, 10.0, 20.0); 3];
        assert_eq!(normalized_precision(&far, &g).unwrap(), 0.0);
        let e = normalized_center_error(&b(3.0, 4.0, 10.0, 20.0), &g[0]).unwrap();
        assert!((e - (0.09f64 + 0.04).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ao_sr_cases() {
        assert_eq!(ao_sr(&[0.6; 4]).unwrap(), (0.6, 1.0, 0.0));
        assert_eq!(ao_sr(&[1.0; 4]).unwrap(), (1.0, 1.0, 1.0));
        let v = [0.1, 0.5, 0.75, 0.9];
        let (ao, s5, s7) = ao_sr(&v).unwrap();
        assert!((ao - 2.25 / 4.0).abs() < 1e-15);
        assert_eq!((s5, s7), (0.5, 0.25));
    }

    #[test]
    fn metrics_are_permutation_invariant_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt: Vec<BBox> = (0..30)
            .map(|_| b(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0), rng.random_range(5.0..40.0), rng.random_range(5.0..40.0)))
            .collect();
        let pred: Vec<Option<BBox>> = gt
            .iter()
            .map(|g| Some(b(g.x + rng.random_range(-15.0..15.0), g.y + rng.random_range(-15.0..15.0), g.w, g.h * rng.random_range(0.7..1.3))))
            .collect();
        let m = compute_metrics(&pred, &gt).unwrap();
        let mut idx: Vec<usize> = (0..30).collect();
        idx.reverse();
        idx.swap(3, 17);
        let (p2, g2): (Vec<_>, Vec<_>) = idx.iter().map(|&i| (pred[i], gt[i])).unzip();
        let m2 = compute_metrics(&p2, &g2).unwrap();
        assert_eq!(m.success_curve, m2.success_curve);
        assert_eq!((m.p, m.np_curve.clone(), m.sr_050, m.sr_075), (m2.p, m2.np_curve.clone(), m2.sr_050, m2.sr_075));
        assert!((m.ao - m2.ao).abs() < 1e-12);

        for i in 0..30 {
            let mut better = pred.clone();
            better[i] = Some(gt[i]);
            let mb = compute_metrics(&better, &gt).unwrap();
            assert!(mb.s >= m.s && mb.p >= m.p && mb.np >= m.np && mb.ao >= m.ao - 1e-15);
            assert!(mb.sr_050 >= m.sr_050 && mb.sr_075 >= m.sr_075);
        }
    }

    #[test]
    fn missing_prediction_counts_as_failure() {
        let g = vec![b(0.0, 0.0, 10.0, 10.0); 2];
        let m = compute_metrics(&[None, Some(g[1])], &g).unwrap();
        assert_eq!(m.ao, 0.5);
        assert_eq!(m.p, 0.5);
    }
}
