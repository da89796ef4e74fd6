use std::path::Path;

use serde::{Deserialize, Serialize};

use super::decode::decode_at;
use super::{
    apply_window_penalty, correlate, hanning_window, peak_cell, predict_maps, FeatureExtractor, HeadParams,
    ScoreMap, SearchGeometry,
};
use crate::adapter::{select_from, AdapterState};
use crate::bag::BagOfDescriptions;
use crate::container::{read_container, write_container};
use crate::embedding::{FeatureVec, ProbVector};
use crate::encoders::EncoderBackend;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::BBox;
use crate::image::{CropTransform, ImagePatch};
use crate::ttfum::{update, AggregationStrategy, TemporalTextWindow, TtfumConfig};

/// Smallest box extent (pixels) a tracked box is clamped to.
pub const MIN_BOX_SIZE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    /// Output side in pixels.
    pub size: usize,
    /// Crop area as a multiple of the box area.
    pub area_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    pub search: CropConfig,
    pub exemplar: CropConfig,
    pub hanning_weight: f64,
    pub ttfum: TtfumConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            search: CropConfig {
                size: 384,
                area_factor: 4.0,
            },
            exemplar: CropConfig {
                size: 192,
                area_factor: 2.0,
            },
            hanning_weight: 0.49,
            ttfum: TtfumConfig::default(),
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, c) in [("search", &self.search), ("exemplar", &self.exemplar)] {
            if c.size == 0 || !(c.area_factor > 0.0) {
                return Err(Error::Config(format!("{name} size and area_factor must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.hanning_weight) {
            return Err(Error::Config(format!(
                "hanning_weight {} outside [0, 1]",
                self.hanning_weight
            )));
        }
        TemporalTextWindow::from_config(&self.ttfum)?;
        Ok(())
    }
}

/// Square crop around `b` covering `area_factor` times its area, resampled
/// to the configured size.
pub fn crop_region(frame: &ImagePatch, b: &BBox, crop: &CropConfig) -> Result<(ImagePatch, CropTransform)> {
    b.validate()?;
    let side = (crop.area_factor * b.w * b.h).sqrt();
    let (cx, cy) = b.center();
    frame.crop_square(cx, cy, side, crop.size)
}

/// Everything learned or fixed that a tracking session needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerModel {
    pub extractor: FeatureExtractor,
    pub adapter: AdapterState,
    pub head: HeadParams,
}

impl TrackerModel {
    pub fn validate(&self) -> Result<()> {
        self.adapter.validate()?;
        self.head.validate()?;
        let q = self.extractor.dim;
        if self.adapter.dim != q || self.head.in_channels() != q {
            return Err(Error::ShapeMismatch(format!(
                "feature dim {q}, adapter dim {}, head input {} must agree",
                self.adapter.dim,
                self.head.in_channels()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = read_container(path)?;
        let mut m: TrackerModel = serde_json::from_value(serde_json::Value::Object(body))
            .map_err(|e| Error::Integrity(format!("bad model file: {e}")))?;
        m.extractor.rebuild();
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone)]
struct Active {
    entries: Vec<FeatureVec>,
    exemplar: ImagePatch,
    t_e: ProbVector,
    window: TemporalTextWindow,
    prev: BBox,
    hann: ScoreMap,
    last_selection: usize,
}

/// Single-target tracking state. Frame `t` depends on frame `t − 1`, so a
/// session is used sequentially; independent sessions share nothing mutable.
pub struct TrackingSession<'a> {
    model: &'a TrackerModel,
    backend: &'a dyn EncoderBackend,
    cfg: SessionConfig,
    exec: Exec,
    active: Option<Active>,
}

impl<'a> TrackingSession<'a> {
    pub fn new(model: &'a TrackerModel, backend: &'a dyn EncoderBackend, cfg: SessionConfig) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        if cfg.search.size != model.extractor.search_size || cfg.exemplar.size != model.extractor.exemplar_size {
            return Err(Error::Config(format!(
                "crop sizes {}/{} do not match the model's {}/{}",
                cfg.search.size, cfg.exemplar.size, model.extractor.search_size, model.extractor.exemplar_size
            )));
        }
        Ok(Self {
            model,
            backend,
            cfg,
            exec: Exec::default(),
            active: None,
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    /// Fix the exemplar and its text feature from the first frame.
    pub fn initialize(&mut self, first_frame: &ImagePatch, init_box: BBox, bag: &BagOfDescriptions) -> Result<()> {
        if bag.is_empty() {
            return Err(Error::Empty("bag"));
        }
        let (exemplar, _) = crop_region(first_frame, &init_box, &self.cfg.exemplar)?;
        let f_e = self.backend.encode_image(&exemplar)?;
        let entries: Vec<FeatureVec> = bag.entries.iter().map(|e| e.embedding.clone()).collect();
        let sel = select_from(&f_e, &entries, &self.model.adapter)?;
        let g = self.model.extractor.grid;
        self.active = Some(Active {
            entries,
            exemplar,
            t_e: sel.projected,
            window: TemporalTextWindow::from_config(&self.cfg.ttfum)?,
            prev: init_box,
            hann: hanning_window(g, g)?,
            last_selection: sel.index,
        });
        Ok(())
    }

    pub fn previous_box(&self) -> Option<BBox> {
        self.active.as_ref().map(|a| a.prev)
    }

    /// Bag index chosen for the most recent frame.
    pub fn last_selection(&self) -> Option<usize> {
        self.active.as_ref().map(|a| a.last_selection)
    }

    /// Locate the target in `frame` and advance the session.
    pub fn track_frame(&mut self, frame: &ImagePatch) -> Result<BBox> {
        let model = self.model;
        let backend = self.backend;
        let cfg = &self.cfg;
        let exec = self.exec;
        let a = self.active.as_mut().ok_or(Error::Uninitialized)?;

        let (search, tf) = crop_region(frame, &a.prev, &cfg.search)?;
        let f_s = backend.encode_image(&search)?;
        let sel = select_from(&f_s, &a.entries, &model.adapter)?;
        a.last_selection = sel.index;
        a.window.push(sel.projected)?;
        let strategy = AggregationStrategy::for_kind(cfg.ttfum.strategy, a.window.len(), cfg.ttfum.decay)?;
        let t_att = update(&a.t_e, &mut a.window, &strategy)?;

        let fmap = model.extractor.extract(backend, &a.exemplar, &search, exec)?;
        let corr = correlate(&fmap, &t_att)?;
        let maps = predict_maps(&corr, &model.head)?;
        let scored = apply_window_penalty(&maps.cls, &a.hann, cfg.hanning_weight)?;
        let (row, col) = peak_cell(&scored);
        let geom = SearchGeometry {
            size: cfg.search.size as f64,
            grid: model.extractor.grid,
        };
        let in_crop = decode_at(&maps, geom, row, col);
        let b = tf
            .to_frame(&in_crop)
            .clamp_to(frame.width() as f64, frame.height() as f64, MIN_BOX_SIZE);
        a.prev = b;
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::encoders::StubBackend;
    use crate::synthetic::{bag_for_sequence, generate_sequence, initial_model, SyntheticSequence};

    fn setup() -> (RunConfig, StubBackend, SyntheticSequence, TrackerModel, BagOfDescriptions) {
        let mut cfg = RunConfig::demo();
        cfg.synthetic.frames = 6;
        let backend = StubBackend::new(cfg.stub_config().unwrap()).unwrap();
        let seq = generate_sequence(&cfg.synthetic, 1).unwrap();
        let model = initial_model(&cfg).unwrap();
        let bag = bag_for_sequence(&seq, &cfg, &backend, Exec::Sequential).unwrap().bag;
        (cfg, backend, seq, model, bag)
    }

    #[test]
    fn tracking_before_initialize_fails() {
        let (cfg, backend, seq, model, _) = setup();
        let mut s = TrackingSession::new(&model, &backend, cfg.session_config().unwrap()).unwrap();
        assert!(matches!(s.track_frame(&seq.frames[1]), Err(Error::Uninitialized)));
        assert_eq!(s.previous_box(), None);
    }

    #[test]
    fn crop_sizes_must_match_the_model() {
        let (cfg, backend, _, model, _) = setup();
        let mut sc = cfg.session_config().unwrap();
        sc.search.size += 8;
        assert!(matches!(TrackingSession::new(&model, &backend, sc), Err(Error::Config(_))));
    }

    #[test]
    fn empty_bag_is_rejected() {
        let (cfg, backend, seq, model, mut bag) = setup();
        bag.entries.clear();
        let mut s = TrackingSession::new(&model, &backend, cfg.session_config().unwrap()).unwrap();
        assert!(matches!(s.initialize(&seq.frames[0], seq.boxes[0], &bag), Err(Error::Empty(_))));
    }

    #[test]
    fn boxes_stay_inside_the_frame_and_modes_agree() {
        let (cfg, backend, seq, model, bag) = setup();
        let run = |exec: Exec| {
            let mut s = TrackingSession::new(&model, &backend, cfg.session_config().unwrap())
                .unwrap()
                .with_exec(exec);
            s.initialize(&seq.frames[0], seq.boxes[0], &bag).unwrap();
            let mut out = Vec::new();
            for f in &seq.frames[1..] {
                let b = s.track_frame(f).unwrap();
                assert_eq!(s.previous_box(), Some(b));
                assert!(s.last_selection().unwrap() < bag.len());
                out.push(b);
            }
            out
        };
        let seq_boxes = run(Exec::Sequential);
        for b in &seq_boxes {
            let side = cfg.synthetic.size as f64;
            assert!(b.x >= 0.0 && b.y >= 0.0 && b.x2() <= side && b.y2() <= side, "{b:?}");
            assert!(b.w >= MIN_BOX_SIZE && b.h >= MIN_BOX_SIZE);
        }
        assert_eq!(run(Exec::Parallel), seq_boxes);
    }

    #[test]
    fn model_file_round_trip() {
        let (_, _, _, model, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        assert_eq!(TrackerModel::load(&path).unwrap(), model);
    }

    #[test]
    fn crop_region_covers_the_requested_area() {
        let frame = ImagePatch::filled(100, 100, 3, 0.5).unwrap();
        let b = BBox::new(40.0, 40.0, 10.0, 10.0).unwrap();
        let crop = CropConfig {
            size: 16,
            area_factor: 4.0,
        };
        let (patch, tf) = crop_region(&frame, &b, &crop).unwrap();
        assert_eq!((patch.height(), patch.width()), (16, 16));
        let back = tf.to_frame(&tf.to_crop(&b));
        assert!((back.x - b.x).abs() < 1e-9 && (back.w - b.w).abs() < 1e-9);
        // A 20 px square side maps onto 16 output pixels.
        assert!((tf.to_crop(&b).w - 8.0).abs() < 1e-9);
    }
}
