//! Lightweight single-image snow removal.
//!
//! The pipeline has two cooperating networks: a small quantized autoencoder
//! that turns the Laplacian of a snowy image into a coarse snow-location mask,
//! and a mask-guided query transformer that predicts the snow residual to
//! subtract from the input. The crate also ships the synthetic snow data
//! engine, the two-stage training harness, restoration metrics, and a CLI.

pub mod ckpt;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod img;
pub mod laplace;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod mqformer;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tape;
pub mod train;
pub mod vqvae;

pub use error::{LmqError, Result};

use std::sync::Once;

static INIT_POOL: Once = Once::new();

/// Caps rayon worker threads from `LMQ_NUM_THREADS` (first call wins; later
/// calls and unset/invalid values leave the default pool).
pub fn init_parallelism() {
    INIT_POOL.call_once(|| {
        if let Ok(v) = std::env::var("LMQ_NUM_THREADS") {
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
