//! Fraud-detection models built on engineered transaction features, together
//! with the machinery needed to stress them: a seeded synthetic data
//! generator, sliding-window feature computation, a cost-normed perturbation
//! model, propagation of raw-field perturbations into the feature space,
//! black-box attack search, and adversarial retraining of a gradient-boosted
//! classifier.
//!
//! The crate is organized so that every stage of the experiment pipeline is
//! callable as a library function; the companion CLI crate only parses
//! arguments and maps errors to exit codes.

pub mod advtrain;
pub mod attack;
pub mod data;
pub mod error;
pub mod features;
pub mod gbdt;
pub mod metrics;
pub mod oracle;
pub mod par;
pub mod pipeline;
pub mod propagate;
pub mod search;
pub mod synth;

pub use error::{Error, Result};

/// Stable 64-bit FNV-1a, used to derive per-component RNG seeds from the
/// experiment seed. Must not change between releases: seed derivation is part
/// of the reproducibility contract.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for a named pipeline component, derived from the experiment seed.
pub fn component_seed(experiment_seed: u64, component: &str) -> u64 {
    experiment_seed ^ fnv1a64(component.as_bytes())
}
