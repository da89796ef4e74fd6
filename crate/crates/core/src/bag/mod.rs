//! Construction, enrichment, validation and persistence of the bag of
//! target descriptions.

mod build;
mod dictionary;
mod enrich;
mod lexicon;
mod persist;
mod validate;

pub use build::{build_bag, BuildOutcome, Dictionaries};
pub use dictionary::{match_dictionary, match_many, parse_dictionary_lines, top_k, DictKind, Dictionary};
pub use enrich::{enrich_semantic_context, EnrichInput, EnrichOutput};
pub use lexicon::{perturb, retrieve_synonyms, Lexicon, MapLexicon, Synonym};
pub use persist::{bag_from_str, bag_to_string, load_bag, save_bag};
pub use validate::{apply_exclusions, validate_bag, Discard, ValidationOutcome};

use serde::{Deserialize, Serialize};

use crate::embedding::FeatureVec;
use crate::encoders::EncoderBackend;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Class,
    Attribute,
    Generated,
    SemanticContext,
}

impl EntryKind {
    pub const ALL: [EntryKind; 4] = [
        EntryKind::Class,
        EntryKind::Attribute,
        EntryKind::Generated,
        EntryKind::SemanticContext,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EntryKind::Class => "class",
            EntryKind::Attribute => "attribute",
            EntryKind::Generated => "generated",
            EntryKind::SemanticContext => "semantic_context",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    DictionaryMatch,
    Service,
    Synonym,
    Perturbation,
    TaskPhrase,
    Concept,
}

impl Provenance {
    /// Entries whose text came from the generative service and can be
    /// regenerated after failing validation.
    pub fn is_generated(&self) -> bool {
        matches!(self, Provenance::Service | Provenance::TaskPhrase | Provenance::Concept)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionEntry {
    pub kind: EntryKind,
    pub text: String,
    pub provenance: Provenance,
    /// Cosine similarity to the first-frame target feature; 0 until validated.
    pub sim_to_image: f64,
    pub embedding: FeatureVec,
}

impl DescriptionEntry {
    /// Encode `text` once and wrap it as an entry.
    pub fn encode(
        kind: EntryKind,
        provenance: Provenance,
        text: impl Into<String>,
        backend: &dyn EncoderBackend,
    ) -> Result<Self> {
        let text = text.into();
        let embedding = backend.encode_text(&text)?;
        Ok(Self {
            kind,
            text,
            provenance,
            sim_to_image: 0.0,
            embedding,
        })
    }
}

/// Settings for bag construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BagConfig {
    /// Validation threshold on image–text cosine similarity (inclusive).
    pub tau_val: f64,
    /// Synonym similarity threshold.
    pub tau_syn: f64,
    /// Synonyms kept per word.
    pub n_synonyms: usize,
    /// Per-token replacement probability for perturbed copies.
    pub alpha: f64,
    /// Attributes kept from dictionary matching.
    pub top_k_attributes: usize,
    /// Rounds of regeneration for rejected service descriptions.
    pub regeneration_rounds: usize,
    pub max_concept_words: usize,
    pub seed: u64,
}

impl Default for BagConfig {
    fn default() -> Self {
        Self {
            tau_val: 0.8,
            tau_syn: 0.5,
            n_synonyms: 10,
            alpha: 0.3,
            top_k_attributes: 4,
            regeneration_rounds: 2,
            max_concept_words: 5,
            seed: 0,
        }
    }
}

/// Ordered, pre-encoded descriptions of one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagOfDescriptions {
    pub frame_digest: String,
    pub config: BagConfig,
    pub entries: Vec<DescriptionEntry>,
}

impl BagOfDescriptions {
    pub fn new(frame_digest: impl Into<String>, config: BagConfig, entries: Vec<DescriptionEntry>) -> Self {
        Self {
            frame_digest: frame_digest.into(),
            config,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn embedding(&self, i: usize) -> &FeatureVec {
        &self.entries[i].embedding
    }

    pub fn dim(&self) -> Result<usize> {
        self.entries
            .first()
            .map(|e| e.embedding.dim())
            .ok_or(Error::Empty("bag"))
    }

    pub fn count(&self, kind: EntryKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    /// Stable sort into class, attribute, generated, semantic-context order.
    pub fn sort_by_kind(&mut self) {
        self.entries.sort_by_key(|e| e.kind);
    }
}
