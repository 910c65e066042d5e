//! Collision-risk estimation that stays calibrated under distribution shift.
//!
//! Observations are projected onto the training distribution through a
//! variational autoencoder, then pushed through a weight posterior of an
//! action-conditioned collision predictor. The spread of the resulting
//! time-to-collision samples drives risk-averse intervention rules.

pub mod artifact;
pub mod bnn;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod sim;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
