//! Blockwise sequential latent-variable models for partially observable
//! reinforcement learning.
//!
//! Trajectories are cut into blocks of `L` embedded steps. A self-attention
//! stack scores every step, the `k` most attended rows are kept, and a
//! blockwise GRU folds them into a Gaussian block latent. The model is fitted
//! with self-normalized importance sampling and its block summaries feed a
//! soft actor-critic agent through a stop-gradient boundary.

pub mod agent;
pub mod env;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Adam, AdamConfig, ParameterStore, Tape, Tensor, Var};
