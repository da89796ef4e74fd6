use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box: top-left corner plus extents, in pixels unless a caller
/// says otherwise (the trainer works in crop-normalized units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new_unchecked(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    /// Checked constructor: extents must be positive and all fields finite.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite box {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "box extents must be positive, got w={} h={}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = (self.x2().min(other.x2()) - self.x.max(other.x)).max(0.0);
        let ih = (self.y2().min(other.y2()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    /// Smallest box enclosing both.
    pub fn hull(&self, other: &BBox) -> BBox {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        BBox {
            x,
            y,
            w: self.x2().max(other.x2()) - x,
            h: self.y2().max(other.y2()) - y,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox {
            x: self.x * s,
            y: self.y * s,
            w: self.w * s,
            h: self.h * s,
        }
    }

    /// Clamp into a `width`×`height` frame keeping at least `min_size` extent.
    pub fn clamp_to(&self, width: f64, height: f64, min_size: f64) -> BBox {
        let w = self.w.clamp(min_size, width);
        let h = self.h.clamp(min_size, height);
        let (cx, cy) = self.center();
        let cx = cx.clamp(0.0, width);
        let cy = cy.clamp(0.0, height);
        BBox::from_center(cx, cy, w, h)
    }
}
