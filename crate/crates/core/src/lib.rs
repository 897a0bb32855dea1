//! Texture classification under large scale variation.
//!
//! The crate is organized as a set of small, independently testable stages
//! that a command-line driver (`texscale`) wires into a full pipeline:
//!
//! * [`imagery`] — grayscale images, bilinear resampling, anisotropic
//!   pyramids, gradient-norm maps, patch extraction, PNG/PGM IO.
//! * [`lbp`] — uniform local binary patterns and histogram similarity.
//! * [`proposals`] — scale proposals: a linear normed-gradient window model
//!   scanned over the pyramid, followed by repetition-based reduction.
//! * [`boundary`] — sparse-coding dictionaries and scale-band regrouping of
//!   a class into subcategories.
//! * [`net`] — a small convolutional classifier with semantic-unit analysis.
//! * [`genetic`] — crossover/mutation of conv units across a population of
//!   nets, and the generation training loop.
//! * [`encoder`] — Gaussian mixture codebooks and Fisher-vector encoding of
//!   conv descriptor fields.
//! * [`classify`] — linear one-vs-rest SVMs, voting across nets, and
//!   aggregation of per-scale instance decisions.
//! * [`datakit`] — deterministic synthetic texture families, scale-banded
//!   dataset synthesis, manifests, and splits.
//! * [`pipeline`] — configuration, stage caching, and the end-to-end run.
//!
//! All randomness flows from explicit seeds; every stage is deterministic
//! given its config, so reruns reproduce results bit for bit.

pub mod boundary;
pub mod classify;
pub mod config;
pub mod datakit;
pub mod encoder;
pub mod genetic;
pub mod imagery;
pub mod lbp;
pub mod net;
pub mod persist;
pub mod pipeline;
pub mod proposals;

use std::sync::OnceLock;

/// Initializes the global worker pool, honoring the `TEXSCALE_THREADS`
/// environment variable when set. Safe to call more than once; only the
/// first call has any effect.
pub fn init_threads() {
    static INIT: OnceLock<()> = OnceLock::new();
    INIT.get_or_init(|| {
        if let Ok(v) = std::env::var("TEXSCALE_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    });
}
