//! Deterministic federated-learning simulator.
//!
//! Trains a two-layer perceptron across simulated devices under four local
//! objectives (plain cross-entropy, L2 activation regularization,
//! maximum-entropy activation regularization, proximal), with a built-in
//! synthetic non-IID data generator and an activation-divergence analyzer.
//! Every stochastic step is keyed off an explicit seed, so runs are
//! bit-reproducible.

pub mod analysis;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod model;
pub mod numerics;
pub mod objectives;

pub use error::{Error, Result};
