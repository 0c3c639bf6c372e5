//! Semantic IDs for points of interest.
//!
//! The pipeline turns raw check-in logs into hierarchical, collision-free
//! semantic IDs using a residual-quantized autoencoder, then emits
//! fine-tuning prompt datasets and scores next-POI predictions:
//!
//! - [`ingest`]: parsing, iterative filtering, chronological splitting and
//!   per-POI aggregates.
//! - [`geocode`]: Open Location Code grid encoding and region vocabularies.
//! - [`features`]: the multi-hot POI vector (category, region, busy hours,
//!   frequent visitors).
//! - [`numcore`]: a small dense tensor kernel with a reverse-mode tape and Adam.
//! - [`rqvae`]: the residual-quantized autoencoder, its losses and training.
//! - [`sidregistry`]: semantic ID rendering, collision suffixes and statistics.
//! - [`promptgen`]: prompt rendering, cropping and fill-in-the-blank augmentation.
//! - [`evalrec`]: Acc@1 scoring, a Markov baseline and prefix-similarity analysis.

pub mod error;
pub mod evalrec;
pub mod features;
pub mod geocode;
pub mod ingest;
pub mod numcore;
pub mod promptgen;
pub mod rqvae;
pub mod sidregistry;
pub mod synth;

pub use error::{Error, Result};
