//! Minimal raster type for frames and crops.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::hashing;

/// An H×W×Ch image with intensities in [0, 1], stored row-major, channels
/// interleaved. The optional box marks the target.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
    bbox: Option<BBox>,
}

/// Maps crop pixel coordinates back into the source frame:
/// `frame = origin + crop * scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub scale: f64,
}

impl CropTransform {
    pub fn to_frame(&self, b: &BBox) -> BBox {
        BBox {
            x: self.origin_x + b.x * self.scale,
            y: self.origin_y + b.y * self.scale,
            w: b.w * self.scale,
            h: b.h * self.scale,
        }
    }

    pub fn to_crop(&self, b: &BBox) -> BBox {
        BBox {
            x: (b.x - self.origin_x) / self.scale,
            y: (b.y - self.origin_y) / self.scale,
            w: b.w / self.scale,
            h: b.h / self.scale,
        }
    }
}

impl ImagePatch {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Empty("image patch"));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
            bbox: None,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn with_bbox(mut self, bbox: BBox) -> Result<Self> {
        bbox.validate()?;
        let eps = 1e-9;
        if bbox.x < -eps
            || bbox.y < -eps
            || bbox.x2() > self.width as f64 + eps
            || bbox.y2() > self.height as f64 + eps
        {
            return Err(Error::InvalidArgument(format!(
                "bbox {bbox:?} outside {}x{} image",
                self.width, self.height
            )));
        }
        self.bbox = Some(bbox);
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn bbox(&self) -> Option<BBox> {
        self.bbox
    }
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// 64-bit digest of the pixel buffer and its shape.
    pub fn digest(&self) -> u64 {
        let dims = [self.height as f64, self.width as f64, self.channels as f64];
        hashing::hash_f64s(hashing::hash_f64s(0, &dims), &self.pixels)
    }

    pub fn channel_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.channels];
        for px in self.pixels.chunks(self.channels) {
            for (a, v) in m.iter_mut().zip(px) {
                *a += v;
            }
        }
        let n = (self.height * self.width) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Integer-aligned sub-image covering `b` (at least one pixel).
    pub fn crop_box(&self, b: &BBox) -> Result<ImagePatch> {
        b.validate()?;
        let x0 = (b.x.floor().max(0.0) as usize).min(self.width - 1);
        let y0 = (b.y.floor().max(0.0) as usize).min(self.height - 1);
        let x1 = (b.x2().ceil() as usize).clamp(x0 + 1, self.width);
        let y1 = (b.y2().ceil() as usize).clamp(y0 + 1, self.height);
        let mut px = Vec::with_capacity((y1 - y0) * (x1 - x0) * self.channels);
        for y in y0..y1 {
            let row = (y * self.width + x0) * self.channels;
            px.extend_from_slice(&self.pixels[row..row + (x1 - x0) * self.channels]);
        }
        ImagePatch::new(y1 - y0, x1 - x0, self.channels, px)
    }

    /// Integer sub-image `[y0, y0+h) × [x0, x0+w)`; bounds must fit.
    pub fn sub_image(&self, y0: usize, x0: usize, h: usize, w: usize) -> ImagePatch {
        debug_assert!(y0 + h <= self.height && x0 + w <= self.width);
        let mut px = Vec::with_capacity(h * w * self.channels);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * self.channels;
            px.extend_from_slice(&self.pixels[row..row + w * self.channels]);
        }
        ImagePatch {
            height: h,
            width: w,
            channels: self.channels,
            pixels: px,
            bbox: None,
        }
    }

    /// Square crop of side `side` (frame pixels) centred at (`cx`, `cy`),
    /// bilinearly resampled to `out`×`out`. Outside the frame the crop is
    /// padded with the frame's channel means.
    pub fn crop_square(&self, cx: f64, cy: f64, side: f64, out: usize) -> Result<(ImagePatch, CropTransform)> {
        if !(side > 0.0) || out == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop side {side} and output size {out} must be positive"
            )));
        }
        let scale = side / out as f64;
        let origin_x = cx - side / 2.0;
        let origin_y = cy - side / 2.0;
        let pad = self.channel_means();
        let ch = self.channels;
        let mut px = vec![0.0; out * out * ch];
        for oy in 0..out {
            let sy = origin_y + (oy as f64 + 0.5) * scale - 0.5;
            for ox in 0..out {
                let sx = origin_x + (ox as f64 + 0.5) * scale - 0.5;
                let base = (oy * out + ox) * ch;
                self.sample_bilinear(sx, sy, &pad, &mut px[base..base + ch]);
            }
        }
        let patch = ImagePatch {
            height: out,
            width: out,
            channels: ch,
            pixels: px,
            bbox: None,
        };
        Ok((
            patch,
            CropTransform {
                origin_x,
                origin_y,
                scale,
            },
        ))
    }

    fn sample_bilinear(&self, sx: f64, sy: f64, pad: &[f64], out: &mut [f64]) {
        let x0 = sx.floor();
        let y0 = sy.floor();
        let fx = sx - x0;
        let fy = sy - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                let (x, y) = (x0 + dx, y0 + dy);
                let inside = x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height;
                for c in 0..self.channels {
                    let v = if inside {
                        self.at(y as usize, x as usize, c)
                    } else {
                        pad[c]
                    };
                    out[c] += w * v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Copy with a one-pixel rectangle outline of `color` drawn around `b`.
    pub fn with_rectangle(&self, b: &BBox, color: &[f64]) -> ImagePatch {
        let mut img = self.clone();
        let x0 = (b.x.round().max(0.0) as usize).min(self.width - 1);
        let y0 = (b.y.round().max(0.0) as usize).min(self.height - 1);
        let x1 = ((b.x2().round() as usize).saturating_sub(1)).clamp(x0, self.width - 1);
        let y1 = ((b.y2().round() as usize).saturating_sub(1)).clamp(y0, self.height - 1);
        let paint = |img: &mut ImagePatch, y: usize, x: usize| {
            for c in 0..img.channels {
                let v = color.get(c).copied().unwrap_or(0.0);
                img.set(y, x, c, v);
            }
        };
        for x in x0..=x1 {
            paint(&mut img, y0, x);
            paint(&mut img, y1, x);
        }
        for y in y0..=y1 {
            paint(&mut img, y, x0);
            paint(&mut img, y, x1);
        }
        img
    }

    /// 8-bit PNG encoding (gray, or RGB for three channels).
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            n => return Err(Error::Image(format!("cannot encode {n}-channel image as PNG"))),
        };
        let mut buf = Vec::new();
        image::ImageEncoder::write_image(
            image::codecs::png::PngEncoder::new(&mut buf),
            &bytes,
            self.width as u32,
            self.height as u32,
            color,
        )
        .map_err(|e| Error::Image(e.to_string()))?;
        Ok(buf)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<ImagePatch> {
        let img = image::ImageReader::with_format(Cursor::new(bytes), image::ImageFormat::Png)
            .decode()
            .map_err(|e| Error::Image(e.to_string()))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, raw) = match img.color().channel_count() {
            1 | 2 => (1, img.into_luma8().into_raw()),
            _ => (3, img.into_rgb8().into_raw()),
        };
        let px = raw.into_iter().map(|b| b as f64 / 255.0).collect();
        ImagePatch::new(h, w, channels, px)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<ImagePatch> {
        ImagePatch::from_png_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(ImagePatch::new(0, 2, 1, vec![]).is_err());
        assert!(ImagePatch::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImagePatch::new(1, 1, 1, vec![1.5]).is_err());
    }

    #[test]
    fn bbox_must_lie_inside() {
        let img = ImagePatch::filled(10, 10, 3, 0.5).unwrap();
        assert!(img.clone().with_bbox(BBox::new_unchecked(2.0, 2.0, 4.0, 4.0)).is_ok());
        assert!(img.with_bbox(BBox::new_unchecked(8.0, 2.0, 4.0, 4.0)).is_err());
    }

    #[test]
    fn crop_of_constant_image_is_constant() {
        let img = ImagePatch::filled(20, 30, 3, 0.25).unwrap();
        let (c, t) = img.crop_square(15.0, 10.0, 40.0, 16).unwrap();
        assert!(c.pixels().iter().all(|v| (v - 0.25).abs() < 1e-12));
        assert_eq!(t.scale, 2.5);
        let b = BBox::new_unchecked(3.0, 4.0, 5.0, 6.0);
        let rt = t.to_crop(&t.to_frame(&b));
        assert!((rt.x - b.x).abs() < 1e-12 && (rt.h - b.h).abs() < 1e-12);
    }

    #[test]
    fn identity_crop_reproduces_pixels() {
        let px: Vec<f64> = (0..64).map(|i| i as f64 / 63.0).collect();
        let img = ImagePatch::new(8, 8, 1, px).unwrap();
        let (c, _) = img.crop_square(4.0, 4.0, 8.0, 8).unwrap();
        for (a, b) in c.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn png_round_trip_preserves_8bit_values() {
        let px: Vec<f64> = (0..48).map(|i| (i * 5) as f64 / 255.0).collect();
        let img = ImagePatch::new(4, 4, 3, px).unwrap();
        let back = ImagePatch::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn digest_tracks_content() {
        let a = ImagePatch::filled(4, 4, 1, 0.0).unwrap();
        let b = ImagePatch::filled(4, 4, 1, 1.0).unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), a.clone().digest());
    }
}
