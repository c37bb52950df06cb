//! Dual-level debiasing of frozen-encoder embeddings: task and sensitive
//! bottleneck adapters, clipped Gaussian noise on the sensitive embedding,
//! fused-embedding classification under classification, orthogonality and
//! demographic-parity losses, and the fairness/leakage evaluation around it.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod infer;
pub mod lemma;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod train;
