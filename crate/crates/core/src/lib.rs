//! Vision-language single-object tracking pipeline.
//!
//! The crate is organised the way data flows through the tracker: text and
//! image features come out of [`encoders`], a bag of target descriptions is
//! assembled by [`bag`], the [`adapter`] picks the description that best
//! matches each crop, [`ttfum`] keeps the text feature in step with recent
//! frames, and [`fusion`] correlates it with the visual feature map and
//! decodes a box. [`train`] holds the losses and the toy trainer, [`eval`]
//! the one-pass evaluation metrics.
//!
//! Data-parallel loops go through [`exec`], which uses rayon when the
//! `parallel` feature is on and plain iterators otherwise.

pub mod adapter;
pub mod bag;
pub mod config;
pub mod container;
pub mod embedding;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod exec;
pub mod fusion;
pub mod geometry;
pub mod hashing;
pub mod image;
pub mod synthetic;
pub mod train;
pub mod ttfum;

pub use error::{Error, Result};
pub use geometry::BBox;
