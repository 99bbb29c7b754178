//! forgelab: a desk-scale laboratory for iterative forget-and-relearn
//! training.
//!
//! The crate trains small layered models under a family of generation-based
//! strategies (plain descent baselines, later-layer re-initialization, and
//! phased gradient ascent on early layers) and instruments the result with
//! layer-wise k-NN probes, prediction-depth histograms, dense Hessian
//! spectra, linear-probe transfer, and episodic few-shot evaluation.
//! Everything runs on a from-scratch f64 reverse-mode autodiff and is
//! bitwise reproducible from a seed.

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diag;
pub mod error;
pub mod eval;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
