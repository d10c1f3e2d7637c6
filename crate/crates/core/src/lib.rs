//! Peripheral blood smear toolkit.
//!
//! The crate covers a desk-scale version of a smear analysis pipeline:
//!
//! - [`slide`]: tiling slides into 512×512 patches, quality scoring, context sampling
//! - [`cells`]: instance masks to centered cell crops, label normalization, WBC differentials
//! - [`qa`]: deterministic question synthesis with quality filters and dedupe
//! - [`metrics`]: benchmark scoring (EMatch/PMatch, accuracy, BLEU-1, ROUGE-L, similarity) with bootstrap spread
//! - [`align`]: cross-attention resampler and cell-patch alignment losses with analytic gradients
//! - [`train`]: toy training phases on synthetic token data, warmup + cosine schedule
//! - [`pipeline`]: configuration, manifests, and the end-to-end run
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod align;
pub mod cells;
pub mod jsonl;
pub mod metrics;
pub mod pipeline;
pub mod qa;
pub mod seed;
pub mod slide;
pub mod train;
pub mod synth;
