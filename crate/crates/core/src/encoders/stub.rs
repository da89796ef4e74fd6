use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{BackendKind, EncoderBackend};
use crate::embedding::{l2_normalize, FeatureVec};
use crate::error::{Error, Result};
use crate::hashing;
use crate::image::ImagePatch;

const POOL_GRID: usize = 4;
const MAX_CHANNELS: usize = 4;

/// Parameters of the deterministic stub encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StubConfig {
    pub dim: usize,
    pub seed: u64,
    /// Basis directions mixed into each token vector.
    pub basis_per_token: usize,
    /// Weight of the caption-anchored text component of image embeddings.
    pub caption_weight: f64,
    /// Weight of the pooled-statistics projection of image embeddings.
    pub pooled_weight: f64,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            seed: 0,
            basis_per_token: 4,
            caption_weight: 1.0,
            pooled_weight: 0.3,
        }
    }
}

/// Hash-mixture text encoder plus pooled-statistics image encoder.
///
/// Text: each lowercase alphanumeric token maps, through a seeded hash, to a
/// sparse signed mixture of basis vectors; the sentence embedding is the
/// renormalized mean. Shared tokens therefore raise similarity.
///
/// Image: means and variances per channel over a 4×4 grid (plus a constant
/// term) are projected by a seeded Gaussian matrix. The image embedding
/// blends that projection with the text embedding of a coarse colour /
/// brightness / texture caption computed from the same statistics, which
/// gives the stub a shared image–text space. The box on a patch is ignored.
#[derive(Debug, Clone)]
pub struct StubBackend {
    cfg: StubConfig,
    projections: Vec<Vec<f64>>,
}

impl StubBackend {
    pub fn new(cfg: StubConfig) -> Result<Self> {
        if cfg.dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        if cfg.basis_per_token == 0 {
            return Err(Error::InvalidArgument("basis_per_token must be positive".into()));
        }
        if cfg.caption_weight < 0.0
            || cfg.pooled_weight < 0.0
            || cfg.caption_weight + cfg.pooled_weight == 0.0
        {
            return Err(Error::InvalidArgument(
                "image weights must be non-negative and not both zero".into(),
            ));
        }
        let projections = (1..=MAX_CHANNELS)
            .map(|ch| {
                let len = pooled_len(ch);
                let mut rng = ChaCha8Rng::seed_from_u64(hashing::derive_seed(
                    cfg.seed,
                    &format!("stub-image-projection-{ch}"),
                ));
                let scale = 1.0 / (len as f64).sqrt();
                (0..cfg.dim * len)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * scale
                    })
                    .collect()
            })
            .collect();
        Ok(Self { cfg, projections })
    }

    pub fn with_dim(dim: usize, seed: u64) -> Result<Self> {
        Self::new(StubConfig {
            dim,
            seed,
            ..StubConfig::default()
        })
    }

    pub fn config(&self) -> &StubConfig {
        &self.cfg
    }

    fn token_mixture(&self, token: &str, acc: &mut [f64]) {
        let h = hashing::fnv1a64(self.cfg.seed, token.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let m = self.cfg.basis_per_token.min(self.cfg.dim);
        let w = 1.0 / (m as f64).sqrt();
        let mut picked: Vec<usize> = Vec::with_capacity(m);
        while picked.len() < m {
            let idx = rng.random_range(0..self.cfg.dim);
            if !picked.contains(&idx) {
                picked.push(idx);
            }
        }
        for idx in picked {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            acc[idx] += sign * w;
        }
    }

    /// Unnormalized pooled-statistics projection.
    fn pooled_projection(&self, patch: &ImagePatch) -> Vec<f64> {
        let ch = patch.channels().min(MAX_CHANNELS);
        let stats = pooled_stats(patch, ch);
        let proj = &self.projections[ch - 1];
        let len = stats.len();
        (0..self.cfg.dim)
            .map(|r| {
                proj[r * len..(r + 1) * len]
                    .iter()
                    .zip(&stats)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }
}

fn pooled_len(channels: usize) -> usize {
    1 + 2 * POOL_GRID * POOL_GRID * channels
}

/// Bounds of grid cell `i` of `POOL_GRID` over `n` pixels; never empty.
fn cell_bounds(i: usize, n: usize) -> (usize, usize) {
    let lo = (i * n / POOL_GRID).min(n - 1);
    let hi = ((i + 1) * n / POOL_GRID).max(lo + 1).min(n);
    (lo, hi)
}

/// `[1, means..., variances...]` over a 4×4 grid for the first `ch` channels.
fn pooled_stats(patch: &ImagePatch, ch: usize) -> Vec<f64> {
    let cells = POOL_GRID * POOL_GRID;
    let mut out = vec![0.0; pooled_len(ch)];
    out[0] = 1.0;
    for gy in 0..POOL_GRID {
        let (y0, y1) = cell_bounds(gy, patch.height());
        for gx in 0..POOL_GRID {
            let (x0, x1) = cell_bounds(gx, patch.width());
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..ch {
                let (mut s, mut s2) = (0.0, 0.0);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let v = patch.at(y, x, c);
                        s += v;
                        s2 += v * v;
                    }
                }
                let mean = s / n;
                let var = (s2 / n - mean * mean).max(0.0);
                let cell = gy * POOL_GRID + gx;
                out[1 + c * cells + cell] = mean;
                out[1 + ch * cells + c * cells + cell] = var;
            }
        }
    }
    out
}

const PALETTE: [(&str, [f64; 3]); 12] = [
    ("black", [0.0, 0.0, 0.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("gray", [0.5, 0.5, 0.5]),
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.7, 0.2]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("orange", [1.0, 0.55, 0.0]),
    ("purple", [0.5, 0.1, 0.6]),
    ("brown", [0.55, 0.3, 0.1]),
    ("pink", [1.0, 0.6, 0.75]),
    ("cyan", [0.1, 0.85, 0.9]),
];

/// Coarse three-word caption of a patch: colour, brightness, texture.
pub fn caption_for(patch: &ImagePatch) -> String {
    let means = patch.channel_means();
    let rgb = match means.len() {
        1 | 2 => [means[0]; 3],
        _ => [means[0], means[1], means[2]],
    };
    let color = PALETTE
        .iter()
        .map(|(name, c)| {
            let d: f64 = c.iter().zip(&rgb).map(|(a, b)| (a - b).powi(2)).sum();
            (name, d)
        })
        .fold((&"black", f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
        .0;
    let luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
    let brightness = if luma < 0.35 {
        "dark"
    } else if luma > 0.65 {
        "bright"
    } else {
        "medium"
    };
    let n = (patch.height() * patch.width()) as f64;
    let mut var = 0.0;
    for px in patch.pixels().chunks(patch.channels()) {
        for (v, m) in px.iter().zip(&means) {
            var += (v - m).powi(2);
        }
    }
    var /= n * patch.channels() as f64;
    let texture = if var < 0.01 { "plain" } else { "textured" };
    format!("{color} {brightness} {texture}")
}

/// Lowercase alphanumeric tokens; everything else separates.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

impl EncoderBackend for StubBackend {
    fn embed_dim(&self) -> usize {
        self.cfg.dim
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Stub
    }

    fn encode_text(&self, text: &str) -> Result<FeatureVec> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::Empty("text to encode"));
        }
        let mut acc = vec![0.0; self.cfg.dim];
        for t in &tokens {
            self.token_mixture(t, &mut acc);
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|v| *v /= n);
        l2_normalize(&acc)
    }

    fn encode_image(&self, patch: &ImagePatch) -> Result<FeatureVec> {
        let mut acc = vec![0.0; self.cfg.dim];
        if self.cfg.pooled_weight > 0.0 {
            let p = l2_normalize(&self.pooled_projection(patch))?;
            for (a, v) in acc.iter_mut().zip(p.iter()) {
                *a += self.cfg.pooled_weight * v;
            }
        }
        if self.cfg.caption_weight > 0.0 {
            let c = self.encode_text(&caption_for(patch))?;
            for (a, v) in acc.iter_mut().zip(c.iter()) {
                *a += self.cfg.caption_weight * v;
            }
        }
        l2_normalize(&acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine_sim;
    use crate::geometry::BBox;

    fn backend() -> StubBackend {
        StubBackend::with_dim(512, 7).unwrap()
    }

    #[test]
    fn text_is_deterministic_and_unit() {
        let b = backend();
        let a = b.encode_text("red bike").unwrap();
        assert_eq!(a, b.encode_text("red bike").unwrap());
        assert!(a.is_unit());
        assert_eq!(a, b.encode_text("  Red,  BIKE! ").unwrap());
    }

    #[test]
    fn shared_tokens_raise_similarity() {
        let b = backend();
        let rb = b.encode_text("red bike").unwrap();
        let rc = b.encode_text("red car").unwrap();
        let gb = b.encode_text("green boat").unwrap();
        // Token-overlap oracle: near-orthogonal token vectors put "red bike"
        // vs "red car" near 1/2 and "green boat" near 0.
        let s1 = cosine_sim(&rb, &rc).unwrap();
        let s2 = cosine_sim(&rb, &gb).unwrap();
        assert!(s1 > s2, "{s1} <= {s2}");
        assert!((s1 - 0.5).abs() < 0.2 && s2.abs() < 0.2);
    }

    #[test]
    fn empty_text_is_an_error() {
        let b = backend();
        assert!(matches!(b.encode_text(""), Err(Error::Empty(_))));
        assert!(matches!(b.encode_text("  ...  "), Err(Error::Empty(_))));
    }

    #[test]
    fn image_encoding_basics() {
        let b = backend();
        let black = ImagePatch::filled(16, 16, 3, 0.0).unwrap();
        let white = ImagePatch::filled(16, 16, 3, 1.0).unwrap();
        let eb = b.encode_image(&black).unwrap();
        let ew = b.encode_image(&white).unwrap();
        assert_eq!(eb, b.encode_image(&black.clone()).unwrap());
        assert!(eb.is_unit() && ew.is_unit());
        assert!(cosine_sim(&eb, &ew).unwrap() < 0.99);
        // Pooling ignores the box.
        let boxed = white.clone().with_bbox(BBox::new_unchecked(1.0, 1.0, 4.0, 4.0)).unwrap();
        let moved = white.clone().with_bbox(BBox::new_unchecked(9.0, 5.0, 4.0, 4.0)).unwrap();
        assert_eq!(b.encode_image(&boxed).unwrap(), b.encode_image(&moved).unwrap());
    }

    #[test]
    fn tiny_patches_are_supported() {
        let b = backend();
        let p = ImagePatch::filled(1, 2, 1, 0.3).unwrap();
        assert!(b.encode_image(&p).unwrap().is_unit());
    }

    #[test]
    fn captions() {
        assert_eq!(caption_for(&ImagePatch::filled(4, 4, 3, 0.0).unwrap()), "black dark plain");
        assert_eq!(caption_for(&ImagePatch::filled(4, 4, 3, 1.0).unwrap()), "white bright plain");
        let red = ImagePatch::new(1, 1, 3, vec![0.9, 0.1, 0.1]).unwrap();
        assert!(caption_for(&red).starts_with("red"));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(StubBackend::with_dim(0, 1).is_err());
        assert!(StubBackend::new(StubConfig {
            caption_weight: 0.0,
            pooled_weight: 0.0,
            ..StubConfig::default()
        })
        .is_err());
    }
}
