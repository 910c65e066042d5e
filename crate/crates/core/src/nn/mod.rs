//! Layers and losses composed from tape ops.

mod dropout;
mod layers;

pub use dropout::{concrete_dropout_gate, concrete_dropout_regularizer, logistic_noise, ConcreteDropoutConfig};
pub use layers::{lstm_step, Activation, Layer, LayerSpec, RecurrentState};

use rand::Rng;

use crate::error::Result;
use crate::tensor::{BoundParams, ParamStore, Tape, Tensor, Var};

/// Supplies weights and post-layer hooks to a network forward pass.
///
/// A forward pass asks the context for each named weight, so the same network
/// code runs with point weights, sampled weights, or gated activations.
pub trait ForwardContext {
    fn weight(&mut self, tape: &mut Tape, name: &str) -> Result<Var>;

    /// Hook applied to a layer's activated output.
    fn after_layer(&mut self, _tape: &mut Tape, _layer: &str, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// Point weights bound from a [`ParamStore`].
pub struct PointWeights<'a> {
    store: &'a ParamStore,
    bound: BoundParams,
}

impl<'a> PointWeights<'a> {
    /// Binds parameters as grad-tracking leaves.
    pub fn trainable(store: &'a ParamStore, tape: &mut Tape) -> Self {
        let bound = store.bind(tape);
        PointWeights { store, bound }
    }

    /// Binds parameters as constants.
    pub fn frozen(store: &'a ParamStore, tape: &mut Tape) -> Self {
        let bound = store.bind_frozen(tape);
        PointWeights { store, bound }
    }

    pub fn from_bound(store: &'a ParamStore, bound: BoundParams) -> Self {
        PointWeights { store, bound }
    }

    pub fn bound(&self) -> &BoundParams {
        &self.bound
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }
}

impl ForwardContext for PointWeights<'_> {
    fn weight(&mut self, _tape: &mut Tape, name: &str) -> Result<Var> {
        Ok(self.bound.var(self.store.id(name)?))
    }
}

/// Mean binary cross entropy over per-step collision probabilities.
pub fn bce_loss(tape: &mut Tape, probs: Var, labels: &Tensor) -> Result<Var> {
    tape.bce_probs(probs, labels)
}

/// Uniform(-a, a) fill for weight initialisation.
pub(crate) fn uniform_tensor<R: Rng>(rng: &mut R, shape: &[usize], bound: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches data")
}
