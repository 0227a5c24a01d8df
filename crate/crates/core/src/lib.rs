//! Ensemble distillation toolkit.
//!
//! Teachers are plain multilayer perceptrons; students are either plain
//! networks (KD, AE-KD, Proxy-EnD²) or BatchEnsemble networks whose members
//! share one weight matrix per layer and differ by rank-one factors. A
//! LatentBE student is a BatchEnsemble trained from all-ones factors under a
//! prior that pulls the factors back toward one, then collapsed into a single
//! network by averaging the rank-one products.

pub mod autodiff;
pub mod data;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod par;
pub mod perturb;
pub mod rng;
pub mod subspace;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
