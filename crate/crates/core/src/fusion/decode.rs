use std::f64::consts::PI;

use super::{PredictionMaps, ScoreMap};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Pixel size of the search crop and the score-map resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchGeometry {
    pub size: f64,
    pub grid: usize,
}

impl SearchGeometry {
    pub fn stride(&self) -> f64 {
        self.size / self.grid as f64
    }
}

/// Row and column of the largest score; ties go to the lowest row-major
/// index.
pub fn peak_cell(cls: &ScoreMap) -> (usize, usize) {
    let mut best = 0;
    for (i, v) in cls.data.iter().enumerate().skip(1) {
        if *v > cls.data[best] {
            best = i;
        }
    }
    (best / cls.width, best % cls.width)
}

/// Box in search-crop pixels: center `((col + O_x)·stride, (row + O_y)·stride)`
/// at the peak cell, size `(S_w·size, S_h·size)`.
pub fn decode_state(maps: &PredictionMaps, geom: SearchGeometry) -> Result<BBox> {
    maps.validate()?;
    let (row, col) = peak_cell(&maps.cls);
    Ok(decode_at(maps, geom, row, col))
}

pub(crate) fn decode_at(maps: &PredictionMaps, geom: SearchGeometry, row: usize, col: usize) -> BBox {
    let n = maps.height() * maps.width();
    let cell = row * maps.width() + col;
    let stride = geom.stride();
    let cx = (col as f64 + maps.offset[cell]) * stride;
    let cy = (row as f64 + maps.offset[n + cell]) * stride;
    BBox::from_center(cx, cy, maps.size[cell] * geom.size, maps.size[n + cell] * geom.size)
}

fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    // Evaluate the first half and mirror it so the window is exactly
    // symmetric.
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let v = 0.5 * (1.0 - (2.0 * PI * i as f64 / (n - 1) as f64).cos());
        w[i] = v;
        w[n - 1 - i] = v;
    }
    w
}

/// Outer product of 1-D Hann windows.
pub fn hanning_window(h: usize, w: usize) -> Result<ScoreMap> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("window dimensions must be at least 1".into()));
    }
    let (a, b) = (hann(h), hann(w));
    let mut data = Vec::with_capacity(h * w);
    for y in &a {
        for x in &b {
            data.push(y * x);
        }
    }
    ScoreMap::new(h, w, data)
}

/// `(1 − w_mix)·score + w_mix·window`, element-wise.
pub fn apply_window_penalty(cls: &ScoreMap, window: &ScoreMap, w_mix: f64) -> Result<ScoreMap> {
    if cls.height != window.height || cls.width != window.width {
        return Err(Error::ShapeMismatch(format!(
            "score map {}×{} vs window {}×{}",
            cls.height, cls.width, window.height, window.width
        )));
    }
    if !(0.0..=1.0).contains(&w_mix) {
        return Err(Error::InvalidArgument(format!("window weight {w_mix} outside [0, 1]")));
    }
    let data = cls
        .data
        .iter()
        .zip(&window.data)
        .map(|(s, h)| (1.0 - w_mix) * s + w_mix * h)
        .collect();
    ScoreMap::new(cls.height, cls.width, data)
}
