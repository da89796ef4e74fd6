//! Run configuration: one TOML document with a section per pipeline stage.
//!
//! Values are layered: a base profile, then a config file, then
//! `CLDTRACK_<SECTION>_<KEY>` environment variables, then explicit
//! `section.key` overrides (the CLI's `--section-key` flags). Every layer
//! is merged into the fully populated base before deserializing, so unknown
//! keys anywhere are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::bag::BagConfig;
use crate::encoders::{ClientConfig, StubConfig};
use crate::error::{Error, Result};
use crate::fusion::{CropConfig, HeadConfig, SessionConfig};
use crate::hashing::derive_seed;
use crate::synthetic::SyntheticConfig;
use crate::train::{GradCheckConfig, LossConfig, TrainConfig};
use crate::ttfum::TtfumConfig;

pub const ENV_PREFIX: &str = "CLDTRACK_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub dim: usize,
    pub basis_per_token: usize,
    pub caption_weight: f64,
    pub pooled_weight: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientMode {
    Mock,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSection {
    pub mode: ClientMode,
    /// Directory of canned replies for the mock client; empty for none.
    pub canned_dir: String,
    pub endpoint: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub concurrency: usize,
    pub backoff_ms: u64,
    pub draw_bbox: bool,
    pub send_pixels: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BagSection {
    pub tau_val: f64,
    pub tau_syn: f64,
    pub n_synonyms: usize,
    pub alpha: f64,
    pub top_k_attributes: usize,
    pub regeneration_rounds: usize,
    pub max_concept_words: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSection {
    /// Number of learnable context vectors.
    pub num_context: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSection {
    pub grid: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stages: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    pub hanning_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    /// Samples per step; 0 for full-batch descent.
    pub batch: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckSection {
    pub epsilon: f64,
    pub points: usize,
    pub tolerance: f64,
    pub seed: u64,
}

/// Every tunable of the pipeline. Section `seed` keys pick an independent
/// stream under the top-level `seed`; they never replace it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderSection,
    pub client: ClientSection,
    pub bag: BagSection,
    pub adapter: AdapterSection,
    pub ttfum: TtfumConfig,
    pub search: CropConfig,
    pub exemplar: CropConfig,
    pub head: HeadSection,
    pub inference: InferenceSection,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub gradcheck: GradCheckSection,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let stub = StubConfig::default();
        let client = ClientConfig::default();
        let bag = BagConfig::default();
        let session = SessionConfig::default();
        let head = HeadConfig::default();
        let train = TrainConfig::default();
        let gc = GradCheckConfig::default();
        Self {
            seed: 0,
            encoder: EncoderSection {
                dim: stub.dim,
                basis_per_token: stub.basis_per_token,
                caption_weight: stub.caption_weight,
                pooled_weight: stub.pooled_weight,
                seed: 0,
            },
            client: ClientSection {
                mode: ClientMode::Mock,
                canned_dir: String::new(),
                endpoint: client.endpoint,
                timeout_ms: client.timeout_ms,
                max_retries: client.max_retries,
                concurrency: client.concurrency,
                backoff_ms: client.backoff_ms,
                draw_bbox: client.draw_bbox,
                send_pixels: client.send_pixels,
            },
            bag: BagSection {
                tau_val: bag.tau_val,
                tau_syn: bag.tau_syn,
                n_synonyms: bag.n_synonyms,
                alpha: bag.alpha,
                top_k_attributes: bag.top_k_attributes,
                regeneration_rounds: bag.regeneration_rounds,
                max_concept_words: bag.max_concept_words,
                seed: 0,
            },
            adapter: AdapterSection { num_context: 4, seed: 0 },
            ttfum: session.ttfum,
            search: session.search,
            exemplar: session.exemplar,
            head: HeadSection {
                grid: head.grid,
                channels: head.channels,
                kernel: head.kernel,
                stages: head.stages,
                seed: 0,
            },
            inference: InferenceSection {
                hanning_weight: session.hanning_weight,
            },
            loss: LossConfig::default(),
            train: TrainSection {
                steps: train.steps,
                lr: train.lr,
                batch: train.batch,
                seed: 0,
            },
            gradcheck: GradCheckSection {
                epsilon: gc.epsilon,
                points: gc.points,
                tolerance: gc.tolerance,
                seed: 0,
            },
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale profile used by the synthetic demo: small crops, a coarse
    /// grid and a validation threshold matched to the stub encoder's
    /// similarity range.
    pub fn demo() -> Self {
        let mut c = Self::default();
        c.encoder.dim = 32;
        c.bag.tau_val = 0.25;
        c.adapter.num_context = 2;
        c.search = CropConfig {
            size: 64,
            area_factor: 4.0,
        };
        c.exemplar = CropConfig {
            size: 32,
            area_factor: 2.0,
        };
        c.head.grid = 8;
        c.head.channels = 8;
        c.head.stages = 2;
        c.train.steps = 1500;
        c.train.lr = 0.02;
        c
    }

    pub fn to_table(&self) -> Result<Table> {
        Table::try_from(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn from_table(t: Table) -> Result<Self> {
        let c: Self = t.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Overlay the TOML document `text` on `self`.
    pub fn merged_str(&self, text: &str) -> Result<Self> {
        let overlay: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut base = self.to_table()?;
        merge(&mut base, overlay, "")?;
        Self::from_table(base)
    }

    pub fn merged_file(&self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        self.merged_str(&text)
    }

    /// Every settable key as `section.key` (or `key` at top level), in
    /// document order.
    pub fn keys(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for (k, v) in self.to_table()? {
            match v {
                Value::Table(t) => out.extend(t.keys().map(|sub| format!("{k}.{sub}"))),
                _ => out.push(k),
            }
        }
        Ok(out)
    }

    /// Apply `(key, raw value)` pairs, parsing each value as the type the
    /// key already holds.
    pub fn with_overrides<'a, I>(&self, overrides: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut base = self.to_table()?;
        for (key, raw) in overrides {
            let slot = lookup(&mut base, key).ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
            *slot = parse_like(slot, raw).map_err(|m| Error::Config(format!("`{key}`: {m}")))?;
        }
        Self::from_table(base)
    }

    /// Apply `CLDTRACK_<SECTION>_<KEY>` variables from `vars`.
    pub fn with_env<I>(&self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let keys = self.keys()?;
        let vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        let mut pairs = Vec::new();
        for key in &keys {
            let name = env_name(key);
            if let Some((_, v)) = vars.iter().find(|(k, _)| *k == name) {
                pairs.push((key.as_str(), v.as_str()));
            }
        }
        self.with_overrides(pairs)
    }

    pub fn validate(&self) -> Result<()> {
        self.session_config()?.validate()?;
        self.loss.validate()?;
        self.stub_config().and_then(crate::encoders::StubBackend::new)?;
        self.synthetic.validate()?;
        if self.head.grid == 0 || self.head.grid > self.search.size {
            return Err(Error::Config(format!(
                "head.grid {} must be in 1..={}",
                self.head.grid, self.search.size
            )));
        }
        if !(self.train.lr >= 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr {} must be non-negative", self.train.lr)));
        }
        if !(self.gradcheck.epsilon > 0.0) || !(self.gradcheck.tolerance > 0.0) {
            return Err(Error::Config("gradcheck epsilon and tolerance must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bag.alpha) {
            return Err(Error::Config(format!("bag.alpha {} outside [0, 1]", self.bag.alpha)));
        }
        for (key, tau) in [("bag.tau_val", self.bag.tau_val), ("bag.tau_syn", self.bag.tau_syn)] {
            if !(-1.0..=1.0).contains(&tau) {
                return Err(Error::Config(format!("{key} {tau} outside the cosine range [-1, 1]")));
            }
        }
        Ok(())
    }

    /// Seed for the named stream of a section.
    pub fn stream_seed(&self, label: &str, local: u64) -> u64 {
        derive_seed(self.seed, &format!("{label}/{local}"))
    }

    pub fn stub_config(&self) -> Result<StubConfig> {
        Ok(StubConfig {
            dim: self.encoder.dim,
            seed: self.stream_seed("encoder", self.encoder.seed),
            basis_per_token: self.encoder.basis_per_token,
            caption_weight: self.encoder.caption_weight,
            pooled_weight: self.encoder.pooled_weight,
        })
    }

    pub fn client_config(&self) -> ClientConfig {
        let c = &self.client;
        ClientConfig {
            endpoint: c.endpoint.clone(),
            timeout_ms: c.timeout_ms,
            max_retries: c.max_retries,
            concurrency: c.concurrency,
            backoff_ms: c.backoff_ms,
            draw_bbox: c.draw_bbox,
            send_pixels: c.send_pixels,
        }
    }

    pub fn bag_config(&self) -> BagConfig {
        let b = &self.bag;
        BagConfig {
            tau_val: b.tau_val,
            tau_syn: b.tau_syn,
            n_synonyms: b.n_synonyms,
            alpha: b.alpha,
            top_k_attributes: b.top_k_attributes,
            regeneration_rounds: b.regeneration_rounds,
            max_concept_words: b.max_concept_words,
            seed: self.stream_seed("bag", b.seed),
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            grid: self.head.grid,
            channels: self.head.channels,
            kernel: self.head.kernel,
            stages: self.head.stages,
        }
    }

    pub fn session_config(&self) -> Result<SessionConfig> {
        Ok(SessionConfig {
            search: self.search,
            exemplar: self.exemplar,
            hanning_weight: self.inference.hanning_weight,
            ttfum: self.ttfum.clone(),
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            lr: self.train.lr,
            seed: self.stream_seed("train", self.train.seed),
            batch: self.train.batch,
        }
    }

    pub fn gradcheck_config(&self) -> GradCheckConfig {
        GradCheckConfig {
            epsilon: self.gradcheck.epsilon,
            points: self.gradcheck.points,
            tolerance: self.gradcheck.tolerance,
            seed: self.stream_seed("gradcheck", self.gradcheck.seed),
            ..GradCheckConfig::default()
        }
    }
}

/// Environment variable for `key`: `bag.tau_val` → `CLDTRACK_BAG_TAU_VAL`.
pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "_").to_uppercase())
}

/// Flag spelling for `key`: `bag.tau_val` → `bag-tau-val`.
pub fn flag_name(key: &str) -> String {
    key.replace(['.', '_'], "-")
}

fn merge(base: &mut Table, overlay: Table, prefix: &str) -> Result<()> {
    for (k, v) in overlay {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o, &path)?,
            (Some(Value::Table(_)), _) => return Err(Error::Config(format!("`{path}` must be a section"))),
            (Some(slot), v) => *slot = v,
            (None, _) => return Err(Error::Config(format!("unknown key `{path}`"))),
        }
    }
    Ok(())
}

fn lookup<'a>(t: &'a mut Table, key: &str) -> Option<&'a mut Value> {
    match key.split_once('.') {
        Some((section, rest)) => match t.get_mut(section)? {
            Value::Table(inner) => lookup(inner, rest),
            _ => None,
        },
        None => match t.get_mut(key)? {
            Value::Table(_) => None,
            v => Some(v),
        },
    }
}

fn parse_like(current: &Value, raw: &str) -> std::result::Result<Value, String> {
    let raw = raw.trim();
    Ok(match current {
        Value::Integer(_) => Value::Integer(raw.parse().map_err(|e| format!("`{raw}`: {e}"))?),
        Value::Float(_) => Value::Float(raw.parse().map_err(|e| format!("`{raw}`: {e}"))?),
        Value::Boolean(_) => Value::Boolean(raw.parse().map_err(|e| format!("`{raw}`: {e}"))?),
        Value::String(_) => Value::String(raw.to_string()),
        other => return Err(format!("cannot override a {} value", other.type_str())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::default().merged_str(&text).unwrap(), c);
        let d = RunConfig::demo();
        assert_eq!(RunConfig::default().merged_str(&d.to_toml_string().unwrap()).unwrap(), d);
    }

    #[test]
    fn documented_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.bag.tau_val, 0.8);
        assert_eq!(c.search.size, 384);
        assert_eq!(c.exemplar.size, 192);
        assert_eq!(c.search.area_factor, 4.0);
        assert_eq!(c.exemplar.area_factor, 2.0);
        assert_eq!(c.head.grid, 16);
        assert_eq!(c.inference.hanning_weight, 0.49);
        assert_eq!(c.loss.lambda_iou, 2.0);
        assert_eq!(c.loss.lambda_l1, 5.0);
        assert_eq!(c.ttfum.window_size, 5);
        assert_eq!(c.gradcheck.epsilon, 1e-5);
    }

    #[test]
    fn partial_file_and_unknown_keys() {
        let base = RunConfig::default();
        let c = base.merged_str("seed = 9\n[train]\nsteps = 12\n[search]\narea_factor = 3\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.steps, 12);
        assert_eq!(c.search.area_factor, 3.0);
        assert_eq!(c.train.lr, base.train.lr);
        for bad in ["[train]\nstep = 1\n", "bogus = 1\n", "train = 3\n", "[train]\nsteps = \"many\"\n"] {
            assert!(matches!(base.merged_str(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn overrides_and_env() {
        let base = RunConfig::default();
        let c = base
            .with_overrides([("bag.tau_val", "0.5"), ("ttfum.strategy", "last"), ("client.draw_bbox", "false")])
            .unwrap();
        assert_eq!(c.bag.tau_val, 0.5);
        assert_eq!(c.ttfum.strategy, crate::ttfum::StrategyKind::Last);
        assert!(!c.client.draw_bbox);
        assert!(base.with_overrides([("bag.nope", "1")]).is_err());
        assert!(base.with_overrides([("ttfum.strategy", "median")]).is_err());
        assert!(base.with_overrides([("inference.hanning_weight", "1.5")]).is_err());

        let env = vec![
            ("CLDTRACK_TRAIN_STEPS".to_string(), "7".to_string()),
            ("CLDTRACK_SEED".to_string(), "3".to_string()),
            ("OTHER".to_string(), "x".to_string()),
        ];
        let e = base.with_env(env).unwrap();
        assert_eq!((e.train.steps, e.seed), (7, 3));
        assert_eq!(env_name("bag.tau_val"), "CLDTRACK_BAG_TAU_VAL");
        assert_eq!(flag_name("bag.tau_val"), "bag-tau-val");
    }

    #[test]
    fn seeds_flow_from_top_level() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.bag_config().seed, b.bag_config().seed);
        assert_ne!(a.train_config().seed, a.bag_config().seed);
        assert!(a.keys().unwrap().contains(&"train.seed".to_string()));
    }
}
