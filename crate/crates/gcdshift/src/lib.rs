//! Category discovery under domain shift, at desk scale.
//!
//! The crate implements three trainable methods on a tiny from-scratch
//! vision transformer over procedurally generated two-domain datasets:
//!
//! - `hilo` — contrastive + prototype clustering with low/high-level
//!   feature taps, adversarial mutual-information minimization between
//!   them, patch-embedding mixing, and curriculum-weighted sampling;
//! - `hlprompt` — `hilo` plus spectral (normalized-cut) foreground masks
//!   driving a selectively applied spatial prompt, trained by alternating
//!   prompt/model phases;
//! - `vlprompt` — a dual-encoder variant with a frozen toy text tower,
//!   factorized textual prompts, symmetric-KL vision-language alignment,
//!   cross-modal mixing, and a boundary pixel prompt.
//!
//! Evaluation is Hungarian-matched clustering accuracy on All/Old/New
//! splits, reported per domain. Everything runs in `f64` and is
//! deterministic given (seed, config, dataset).
//!
//! See the `examples/` directory for one runnable program per capability;
//! the `gcdshift` binary wraps dataset generation, training, and
//! evaluation for scripted use.

pub mod backbone;
pub mod blob;
pub mod check;
pub mod config;
pub mod curriculum;
pub mod error;
pub mod eval;
pub mod graph;
pub mod heads;
pub mod losses;
pub mod ncut;
pub mod patchmix;
pub mod prompts;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
