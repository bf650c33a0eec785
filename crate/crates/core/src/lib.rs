//! Collaborative-filtering training and evaluation engine built around the
//! Talos loss for direct Top-K accuracy optimization.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`dataset`]: interaction ingestion, k-core filtering, IID/temporal splits
//! - [`model`]: matrix-factorization backbone with cosine scoring and Adam
//! - [`quantile`]: learned per-user Top-K score thresholds via sampled
//!   quantile regression, plus an exact sorting oracle
//! - [`losses`]: Talos, softmax (SL), BPR, and the Talos ablation variants,
//!   with analytic score gradients
//! - [`metrics`]: Precision@K, Recall@K, NDCG@K, MRR@K, AUC, LLPAUC
//! - [`trainer`]: the alternating two-step optimizer (model step, threshold
//!   step) with negative sampling, evaluation, and early stopping
//! - [`simulator`]: Monte-Carlo measurement of how often full-ranking metrics
//!   disagree with Top-K accuracy
//! - [`verify`]: numerical checks of the surrogate bound, the DRO identity,
//!   and estimator unbiasedness
//! - [`synthetic`]: deterministic fixture generators for tests and benchmarks

pub mod checkpoint;
pub mod dataset;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod quantile;
pub mod rng;
pub mod simulator;
pub mod synthetic;
pub mod trainer;
pub mod verify;
