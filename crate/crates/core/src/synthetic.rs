//! Moving-square sequences and the end-to-end desk-scale demo: generate a
//! sequence, build its bag, train the adapter and head on jittered crops of
//! other sequences, then track and score.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterState;
use crate::bag::{build_bag, BagOfDescriptions, BuildOutcome, DictKind, Dictionaries, Dictionary, MapLexicon};
use crate::config::RunConfig;
use crate::embedding::FeatureVec;
use crate::encoders::{EncoderBackend, GenerativeClient, MockTransport, StubBackend};
use crate::error::{Error, Result};
use crate::eval::{iou, run_ope_with, MetricReport, SequenceDataset, SessionTracker};
use crate::exec::Exec;
use crate::fusion::{crop_region, FeatureExtractor, HeadParams, TrackerModel, TrackingSession};
use crate::geometry::BBox;
use crate::image::ImagePatch;
use crate::train::{train_toy, TrainOutcome, TrainSample, Trainable};

pub const SQUARE_COLOR: [f64; 3] = [0.95, 0.85, 0.15];
pub const LANGUAGE: &str = "a bright yellow square gliding over a dark noisy background";

pub const DEMO_CLASSES: [&str; 8] = [
    "yellow square",
    "red circle",
    "blue triangle",
    "green car",
    "gray person",
    "white bird",
    "orange ball",
    "black dog",
];
pub const DEMO_ATTRIBUTES: [&str; 12] = [
    "yellow", "red", "blue", "green", "white", "black", "bright", "dark", "plain", "textured", "small", "angular",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub frames: usize,
    /// Frame side in pixels.
    pub size: usize,
    /// Square side in pixels.
    pub square: f64,
    /// Pixels per frame.
    pub speed: f64,
    pub background: f64,
    /// Standard deviation of per-pixel noise.
    pub noise: f64,
    /// Sequences the training crops are drawn from (never the evaluated one).
    pub train_sequences: usize,
    pub train_samples: usize,
    /// Maximum centre shift of the previous box, as a fraction of its side.
    pub jitter_center: f64,
    /// Maximum relative change of the previous box's size.
    pub jitter_scale: f64,
    pub seed: u64,
    pub min_mean_iou: f64,
    /// Final loss must be below this multiple of the initial loss.
    pub max_loss_ratio: f64,
    pub time_limit_secs: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            frames: 64,
            size: 128,
            square: 24.0,
            speed: 2.0,
            background: 0.12,
            noise: 0.04,
            train_sequences: 4,
            train_samples: 64,
            jitter_center: 0.3,
            jitter_scale: 0.25,
            seed: 0,
            min_mean_iou: 0.5,
            max_loss_ratio: 0.5,
            time_limit_secs: 300,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.size == 0 {
            return Err(Error::Config("synthetic sequences need at least 2 frames and a positive size".into()));
        }
        if !(self.square >= 4.0 && self.square + 8.0 < self.size as f64) {
            return Err(Error::Config(format!(
                "synthetic.square {} must be at least 4 and fit in a {}-pixel frame",
                self.square, self.size
            )));
        }
        if !(self.speed >= 0.0 && self.noise >= 0.0 && (0.0..=1.0).contains(&self.background)) {
            return Err(Error::Config("synthetic speed, noise and background out of range".into()));
        }
        if !(0.0..0.5).contains(&self.jitter_center) || !(0.0..0.5).contains(&self.jitter_scale) {
            return Err(Error::Config("synthetic jitter must be in [0, 0.5)".into()));
        }
        if self.train_sequences == 0 || self.train_samples == 0 {
            return Err(Error::Config("synthetic training set must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub frames: Vec<ImagePatch>,
    pub boxes: Vec<BBox>,
}

impl SyntheticSequence {
    pub fn dataset(&self, name: &str) -> SequenceDataset {
        SequenceDataset {
            name: name.to_string(),
            frames: Vec::new(),
            boxes: self.boxes.iter().copied().map(Some).collect(),
            language: Some(LANGUAGE.to_string()),
            flags: BTreeMap::new(),
        }
    }
}

/// A square moving in a straight line at constant speed, bouncing off the
/// frame edges, on a noisy dark background.
pub fn generate_sequence(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n = cfg.size;
    let half = cfg.square / 2.0;
    let (lo, hi) = (half + 2.0, n as f64 - half - 2.0);
    let mut cx = rng.random_range(lo..hi);
    let mut cy = rng.random_range(lo..hi);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (mut vx, mut vy) = (cfg.speed * angle.cos(), cfg.speed * angle.sin());

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut boxes = Vec::with_capacity(cfg.frames);
    for _ in 0..cfg.frames {
        let b = BBox::from_center(cx, cy, cfg.square, cfg.square);
        let mut px = Vec::with_capacity(n * n * 3);
        for y in 0..n {
            let py = y as f64 + 0.5;
            for x in 0..n {
                let pxc = x as f64 + 0.5;
                let inside = pxc >= b.x && pxc < b.x2() && py >= b.y && py < b.y2();
                for c in 0..3 {
                    let base = if inside { SQUARE_COLOR[c] } else { cfg.background };
                    let v = (base + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    // 8-bit levels, so frames survive a PNG round trip unchanged.
                    px.push((v * 255.0).round() / 255.0);
                }
            }
        }
        frames.push(ImagePatch::new(n, n, 3, px)?);
        boxes.push(b);

        cx += vx;
        cy += vy;
        if cx < lo || cx > hi {
            vx = -vx;
            cx = cx.clamp(lo, hi);
        }
        if cy < lo || cy > hi {
            vy = -vy;
            cy = cy.clamp(lo, hi);
        }
    }
    Ok(SyntheticSequence { frames, boxes })
}

/// Small lexicon covering the words the demo descriptions use.
pub fn demo_lexicon() -> MapLexicon {
    let mut lex = MapLexicon::default();
    lex.insert("square", &[("block", 0.8), ("tile", 0.7), ("box", 0.6), ("plaza", 0.3)]);
    lex.insert("yellow", &[("golden", 0.7), ("amber", 0.6)]);
    lex.insert("bright", &[("vivid", 0.7), ("luminous", 0.6)]);
    lex.insert("object", &[("item", 0.6), ("thing", 0.55)]);
    lex.insert("dark", &[("dim", 0.7)]);
    lex
}

pub fn demo_dictionaries(backend: &dyn EncoderBackend, exec: Exec) -> Result<(Dictionary, Dictionary)> {
    let class = Dictionary::encode(DictKind::Class, DEMO_CLASSES.map(String::from).to_vec(), backend, exec)?;
    let attr = Dictionary::encode(DictKind::Attribute, DEMO_ATTRIBUTES.map(String::from).to_vec(), backend, exec)?;
    Ok((class, attr))
}

fn demo_client(cfg: &RunConfig) -> GenerativeClient {
    let transport = if cfg.client.canned_dir.is_empty() {
        MockTransport::default()
    } else {
        MockTransport::with_dir(&cfg.client.canned_dir)
    };
    GenerativeClient::new(cfg.client_config(), Arc::new(transport))
}

/// Build the bag for the target boxed in frame 1 of `seq`.
pub fn bag_for_sequence(seq: &SyntheticSequence, cfg: &RunConfig, backend: &dyn EncoderBackend, exec: Exec) -> Result<BuildOutcome> {
    let (class, attribute) = demo_dictionaries(backend, exec)?;
    let first = seq.frames[0].clone().with_bbox(seq.boxes[0])?;
    build_bag(
        &first,
        Dictionaries {
            class: &class,
            attribute: &attribute,
        },
        &demo_client(cfg),
        &demo_lexicon(),
        backend,
        &cfg.bag_config(),
        &[],
    )
}

/// Uniform jitter of a box's centre and size.
fn jitter<R: Rng + ?Sized>(b: &BBox, cfg: &SyntheticConfig, rng: &mut R) -> BBox {
    let (cx, cy) = b.center();
    let dx = rng.random_range(-1.0..=1.0) * cfg.jitter_center * b.w;
    let dy = rng.random_range(-1.0..=1.0) * cfg.jitter_center * b.h;
    let s = 1.0 + rng.random_range(-1.0..=1.0) * cfg.jitter_scale;
    BBox::from_center(cx + dx, cy + dy, b.w * s, b.h * s)
}

/// Training crops: for each sample, a frame of one of the training
/// sequences is cropped around a jittered copy of its box, as the tracker
/// would crop around its previous estimate.
pub fn training_samples(
    cfg: &RunConfig,
    backend: &dyn EncoderBackend,
    extractor: &FeatureExtractor,
    exec: Exec,
) -> Result<Vec<TrainSample>> {
    let syn = &cfg.synthetic;
    let session = cfg.session_config()?;
    let mut seqs = Vec::with_capacity(syn.train_sequences);
    for j in 0..syn.train_sequences {
        let seq = generate_sequence(syn, cfg.stream_seed("synthetic-train", syn.seed.wrapping_add(j as u64)))?;
        let bag = bag_for_sequence(&seq, cfg, backend, exec)?.bag;
        let entries: Arc<Vec<FeatureVec>> = Arc::new(bag.entries.iter().map(|e| e.embedding.clone()).collect());
        let (exemplar, _) = crop_region(&seq.frames[0], &seq.boxes[0], &session.exemplar)?;
        let exemplar_feat = backend.encode_image(&exemplar)?;
        seqs.push((seq, entries, exemplar, exemplar_feat));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stream_seed("synthetic-samples", syn.seed));
    let specs: Vec<(usize, usize, BBox)> = (0..syn.train_samples)
        .map(|s| {
            let j = s % seqs.len();
            let t = rng.random_range(1..syn.frames);
            let prev = jitter(&seqs[j].0.boxes[t], syn, &mut rng);
            (j, t, prev)
        })
        .collect();

    let size = session.search.size as f64;
    exec.try_map(&specs, |&(j, t, prev)| -> Result<TrainSample> {
        let (seq, entries, exemplar, exemplar_feat) = &seqs[j];
        let (search, tf) = crop_region(&seq.frames[t], &prev, &session.search)?;
        let features = extractor.extract(backend, exemplar, &search, Exec::Sequential)?;
        let g = tf.to_crop(&seq.boxes[t]);
        Ok(TrainSample {
            features,
            exemplar_feat: exemplar_feat.clone(),
            search_feat: backend.encode_image(&search)?,
            entries: Arc::clone(entries),
            gt: BBox::new_unchecked(g.x / size, g.y / size, g.w / size, g.h / size),
        })
    })
}

/// Untrained model for `cfg`.
pub fn initial_model(cfg: &RunConfig) -> Result<TrackerModel> {
    let q = cfg.encoder.dim;
    Ok(TrackerModel {
        extractor: FeatureExtractor::new(
            q,
            cfg.head.grid,
            cfg.search.size,
            cfg.exemplar.size,
            cfg.stream_seed("extractor", cfg.head.seed),
        )?,
        adapter: AdapterState::init(q, cfg.adapter.num_context, cfg.stream_seed("adapter", cfg.adapter.seed))?,
        head: HeadParams::init(q, &cfg.head_config(), cfg.stream_seed("head", cfg.head.seed))?,
    })
}

#[derive(Debug, Clone)]
pub struct DemoOutcome {
    pub sequence: SyntheticSequence,
    pub bag: BagOfDescriptions,
    pub model: TrackerModel,
    /// `None` when run with zero training steps.
    pub training: Option<TrainOutcome>,
    pub predictions: Vec<Option<BBox>>,
    pub report: MetricReport,
    /// Mean IoU over the tracked frames (frame 1 excluded).
    pub mean_iou: f64,
    pub elapsed: Duration,
}

impl DemoOutcome {
    pub fn loss_ratio(&self) -> Option<f64> {
        self.training.as_ref().map(|t| t.final_loss.total / t.initial.total)
    }

    /// Acceptance checks as `(name, passed, detail)`. A run without training
    /// fails the loss check.
    pub fn checks(&self, cfg: &SyntheticConfig) -> Vec<(&'static str, bool, String)> {
        let secs = self.elapsed.as_secs_f64();
        vec![
            (
                "mean_iou",
                self.mean_iou >= cfg.min_mean_iou,
                format!("{:.4} >= {}", self.mean_iou, cfg.min_mean_iou),
            ),
            match self.loss_ratio() {
                Some(ratio) => (
                    "loss_ratio",
                    ratio < cfg.max_loss_ratio,
                    format!("{ratio:.4} < {}", cfg.max_loss_ratio),
                ),
                None => ("loss_ratio", false, "training skipped".into()),
            },
            (
                "runtime",
                secs < cfg.time_limit_secs as f64,
                format!("{secs:.1}s < {}s", cfg.time_limit_secs),
            ),
        ]
    }

    pub fn passed(&self, cfg: &SyntheticConfig) -> bool {
        self.checks(cfg).iter().all(|c| c.1)
    }
}

/// Generate, build the bag, train, track and score.
pub fn run_demo(cfg: &RunConfig, exec: Exec) -> Result<DemoOutcome> {
    let start = Instant::now();
    cfg.validate()?;
    let backend = StubBackend::new(cfg.stub_config()?)?;
    let syn = &cfg.synthetic;
    let sequence = generate_sequence(syn, cfg.stream_seed("synthetic", syn.seed))?;
    let bag = bag_for_sequence(&sequence, cfg, &backend, exec)?.bag;

    let mut model = initial_model(cfg)?;
    let training = if cfg.train.steps > 0 {
        let samples = training_samples(cfg, &backend, &model.extractor, exec)?;
        let init = Trainable {
            adapter: model.adapter.clone(),
            head: model.head.clone(),
        };
        let out = train_toy(init, &samples, &cfg.train_config(), &cfg.loss, exec)?;
        model.adapter = out.params.adapter.clone();
        model.head = out.params.head.clone();
        Some(out)
    } else {
        None
    };

    let dataset = sequence.dataset("synthetic");
    let session = TrackingSession::new(&model, &backend, cfg.session_config()?)?.with_exec(exec);
    let mut tracker = SessionTracker { session, bag: &bag };
    let run = run_ope_with(&mut tracker, &dataset, |i| Ok(sequence.frames[i].clone()))?;

    let tracked: Vec<f64> = run.predictions[1..]
        .iter()
        .zip(&sequence.boxes[1..])
        .map(|(p, g)| p.map_or(Ok(0.0), |p| iou(&p, g)))
        .collect::<Result<_>>()?;
    let mean_iou = tracked.iter().sum::<f64>() / tracked.len() as f64;

    Ok(DemoOutcome {
        bag,
        model,
        training,
        predictions: run.predictions,
        report: run.report,
        mean_iou,
        elapsed: start.elapsed(),
        sequence,
    })
}
