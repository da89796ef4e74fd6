//! Encoder interfaces for the joint image–text embedding space and the
//! generative description service, with deterministic offline stand-ins.

mod generative;
mod stub;
mod table;

pub use generative::{
    ClientConfig, FailingTransport, GenerativeClient, GenerativeRequest, GenerativeResponse,
    MockTransport, Transport, TransportError, PROMPT_CONCEPT, PROMPT_DESCRIPTION,
    PROMPT_REGENERATE, PROMPT_TASK,
};
#[cfg(feature = "live-client")]
pub use generative::HttpTransport;
pub use stub::{caption_for, tokenize, StubBackend, StubConfig};
pub use table::TableBackend;

use crate::embedding::FeatureVec;
use crate::error::Result;
use crate::image::ImagePatch;

/// Where a backend's embeddings come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Stub,
    External,
}

/// A joint image–text encoder. Implementations are stateless after
/// construction and return unit-norm vectors of length [`embed_dim`].
///
/// [`embed_dim`]: EncoderBackend::embed_dim
pub trait EncoderBackend: Send + Sync {
    fn embed_dim(&self) -> usize;
    fn kind(&self) -> BackendKind;
    fn encode_text(&self, text: &str) -> Result<FeatureVec>;
    fn encode_image(&self, patch: &ImagePatch) -> Result<FeatureVec>;
}
