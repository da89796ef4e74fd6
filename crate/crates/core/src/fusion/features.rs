use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FeatureMap;
use crate::embedding::dot;
use crate::encoders::EncoderBackend;
use crate::error::{ensure_dim, Error, Result};
use crate::exec::Exec;
use crate::hashing::derive_seed;
use crate::image::ImagePatch;

/// Patch-grid stand-in for the joint exemplar/search backbone. Each grid
/// cell of the search crop is embedded with the image encoder and mixed
/// with the exemplar embedding by a fixed random projection `P (q × 2q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub dim: usize,
    pub grid: usize,
    pub search_size: usize,
    pub exemplar_size: usize,
    pub seed: u64,
    #[serde(skip)]
    projection: Vec<f64>,
}

impl FeatureExtractor {
    pub fn new(dim: usize, grid: usize, search_size: usize, exemplar_size: usize, seed: u64) -> Result<Self> {
        if dim == 0 || grid == 0 {
            return Err(Error::InvalidArgument("feature dim and grid must be positive".into()));
        }
        if grid > search_size {
            return Err(Error::InvalidArgument(format!(
                "grid {grid} is finer than the {search_size}-pixel search crop"
            )));
        }
        if exemplar_size == 0 {
            return Err(Error::InvalidArgument("exemplar size must be positive".into()));
        }
        let mut me = Self {
            dim,
            grid,
            search_size,
            exemplar_size,
            seed,
            projection: Vec::new(),
        };
        me.rebuild();
        Ok(me)
    }

    /// Regenerate the fixed projection from `seed` (used after
    /// deserializing, since the matrix itself is not stored).
    pub fn rebuild(&mut self) {
        let normal = Normal::new(0.0, 0.5f64.sqrt()).expect("valid normal");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "feature-projection"));
        self.projection = (0..self.dim * 2 * self.dim).map(|_| normal.sample(&mut rng)).collect();
    }

    /// Cell boundaries along one axis.
    fn span(&self, i: usize) -> (usize, usize) {
        let s = self.search_size;
        (i * s / self.grid, (i + 1) * s / self.grid)
    }

    pub fn extract(
        &self,
        backend: &dyn EncoderBackend,
        exemplar: &ImagePatch,
        search: &ImagePatch,
        exec: Exec,
    ) -> Result<FeatureMap> {
        ensure_dim(self.dim, backend.embed_dim())?;
        if search.height() != self.search_size || search.width() != self.search_size {
            return Err(Error::ShapeMismatch(format!(
                "search crop is {}×{}, expected {}×{}",
                search.height(),
                search.width(),
                self.search_size,
                self.search_size
            )));
        }
        if exemplar.height() != self.exemplar_size || exemplar.width() != self.exemplar_size {
            return Err(Error::ShapeMismatch(format!(
                "exemplar crop is {}×{}, expected {}×{}",
                exemplar.height(),
                exemplar.width(),
                self.exemplar_size,
                self.exemplar_size
            )));
        }
        let q = self.dim;
        let ex = backend.encode_image(exemplar)?;
        // Exemplar half of the projection is the same for every cell.
        let ex_part: Vec<f64> = (0..q)
            .map(|r| dot(&self.projection[r * 2 * q + q..(r + 1) * 2 * q], &ex))
            .collect();
        let g = self.grid;
        let cells = exec.try_map(&(0..g * g).collect::<Vec<_>>(), |&cell| -> Result<Vec<f64>> {
            let (y0, y1) = self.span(cell / g);
            let (x0, x1) = self.span(cell % g);
            let p = backend.encode_image(&search.sub_image(y0, x0, y1 - y0, x1 - x0))?;
            Ok((0..q)
                .map(|r| dot(&self.projection[r * 2 * q..r * 2 * q + q], &p) + ex_part[r])
                .collect())
        })?;
        let mut data = vec![0.0; q * g * g];
        for (cell, feat) in cells.iter().enumerate() {
            for (c, v) in feat.iter().enumerate() {
                data[c * g * g + cell] = *v;
            }
        }
        FeatureMap::new(q, g, g, data)
    }
}

/// Feature map for `search` conditioned on `exemplar`.
pub fn extract_features(
    backend: &dyn EncoderBackend,
    extractor: &FeatureExtractor,
    exemplar: &ImagePatch,
    search: &ImagePatch,
) -> Result<FeatureMap> {
    extractor.extract(backend, exemplar, search, Exec::default())
}
