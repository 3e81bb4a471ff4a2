//! Object-aware video captioning with an attention decoder and a
//! metric-learning caption head.
//!
//! The pipeline reads per-video feature packs (frame CNN features plus
//! object detections), encodes them with a stacked two-layer LSTM that
//! fuses the dominant-object embedding into the lower layer, decodes a
//! caption with soft attention over the upper encoder states. On top of
//! the usual word-by-word cross entropy, a metric-learning head trains
//! the captioner against ground truth in a learned sentence-embedding
//! space under a Manhattan-distance similarity loss.
//!
//! All numerics run on a small reverse-mode tape ([`graph`]) over `f64`
//! matrices, so every loss here is differentiable end to end, including
//! generation via soft word embeddings (no sampling anywhere).

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod meaning;
pub mod model;
pub mod training;

pub use error::{Error, Result};
