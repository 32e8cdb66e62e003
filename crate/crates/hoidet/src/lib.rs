//! Desk-scale human-object interaction detection.
//!
//! The crate implements an interaction-decoding pipeline over precomputed
//! CLIP-style feature fixtures: a transformer decoder with knowledge
//! integration, cosine-similarity classifiers assembled by visual semantic
//! arithmetic, a training-free zero-shot enhancement, bipartite matching with
//! DETR-style losses, and the standard HOI mAP evaluation protocol.
//!
//! Everything is deterministic given a seed, CPU-only, and f64 end to end.

pub mod attention;
pub mod classifiers;
pub mod data_io;
pub mod eval;
pub mod infer;
pub mod matching_loss;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
