//! Causality-inspired interpretable graph classification.
//!
//! The crate bundles a small reverse-mode autodiff engine, matrix-based Rényi
//! entropy estimators, a synthetic motif benchmark, the graph VAE classifier
//! with its two-stage trainer, and evaluation utilities.

pub mod autodiff;
pub mod eig;
pub mod graph;
pub mod error;
pub mod eval;
pub mod kernel;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;

pub use autodiff::{Gradients, Segments, Tape, Var};
pub use eig::{sym_eig, EigPair};
pub use error::{Error, Result};
pub use graph::{Dataset, Graph};
pub use optim::AdamState;
pub use params::ParamStore;
pub use tensor::Tensor;
pub use model::{ModelParams, TrainConfig};
