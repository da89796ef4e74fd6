//! Visual feature maps, text-conditioned correlation, the prediction head,
//! box decoding and windowed inference.

mod decode;
mod features;
mod head;
mod session;

pub use decode::{apply_window_penalty, decode_state, hanning_window, peak_cell, SearchGeometry};
pub use features::{extract_features, FeatureExtractor};
pub use head::{predict_maps, HeadCache, HeadConfig, HeadParams, Projection, Stage};
pub use session::{
    crop_region, CropConfig, SessionConfig, TrackerModel, TrackingSession, MIN_BOX_SIZE,
};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

/// A `channels × height × width` tensor, channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels * height * width == 0 {
            return Err(Error::ShapeMismatch("feature map with an empty dimension".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}×{height}×{width} map",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite feature value".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.cells();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Single-channel score grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width || data.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}×{width} score map",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Head outputs: classification scores, cell offsets (x plane then y
/// plane) and normalized sizes (w plane then h plane).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMaps {
    pub cls: ScoreMap,
    pub offset: Vec<f64>,
    pub size: Vec<f64>,
}

impl PredictionMaps {
    pub fn height(&self) -> usize {
        self.cls.height
    }

    pub fn width(&self) -> usize {
        self.cls.width
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.cls.height * self.cls.width;
        if self.cls.data.len() != n || self.offset.len() != 2 * n || self.size.len() != 2 * n {
            return Err(Error::ShapeMismatch("prediction maps disagree in shape".into()));
        }
        if self.cls.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("cls scores must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Text-conditioned modulation `out[c, ·] = (1 + t_att[c]) · map[c, ·]`,
/// a 1×1 depthwise convolution with the text vector as kernel.
pub fn correlate(map: &FeatureMap, t_att: &[f64]) -> Result<FeatureMap> {
    ensure_dim(map.channels, t_att.len())?;
    let n = map.cells();
    let mut data = Vec::with_capacity(map.data.len());
    for (c, t) in t_att.iter().enumerate() {
        let k = 1.0 + t;
        data.extend(map.data[c * n..(c + 1) * n].iter().map(|v| k * v));
    }
    Ok(FeatureMap {
        channels: map.channels,
        height: map.height,
        width: map.width,
        data,
    })
}
