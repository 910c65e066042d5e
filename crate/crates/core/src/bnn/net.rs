use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::{lstm_step, Activation, ForwardContext, Layer, LayerSpec, RecurrentState};
use crate::sim::{HORIZON, MAX_STEER_DEG};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Shape of the collision predictor. Strides left empty are chosen from the
/// input width: 4/2/2/2 from 64 px up, 2/2/1/1 below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorArch {
    pub filters: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub image_units: usize,
    pub hidden: usize,
    pub head_units: usize,
}

impl Default for PredictorArch {
    fn default() -> Self {
        PredictorArch {
            filters: vec![8, 16, 16, 16],
            kernels: vec![8, 4, 3, 3],
            strides: vec![],
            image_units: 256,
            hidden: 16,
            head_units: 16,
        }
    }
}

impl PredictorArch {
    pub fn strides_for(&self, width: usize) -> Vec<usize> {
        if !self.strides.is_empty() {
            self.strides.clone()
        } else if width >= 64 {
            vec![4, 2, 2, 2]
        } else {
            vec![2, 2, 1, 1]
        }
    }
}

/// Image → per-step collision logits, conditioned on the steering sequence.
///
/// The conv stack feeds a dense image code. From that code one dense layer
/// sets the initial LSTM hidden state and another gives a context vector that
/// is fed, alongside the scaled steering angle, at every step. Each step's
/// hidden state goes through two dense heads and a scalar output.
#[derive(Clone, Debug)]
pub struct PredictorNet {
    pub arch: PredictorArch,
    pub dims: (usize, usize, usize),
    convs: Vec<Layer>,
    image: Layer,
    context: Layer,
    init: Layer,
    cell: Layer,
    heads: [Layer; 2],
    out: Layer,
}

/// Layers whose outputs concrete dropout gates.
pub const GATED_LAYERS: [&str; 3] = ["image", "head1", "head2"];

impl PredictorNet {
    pub fn new(arch: PredictorArch, dims: (usize, usize, usize)) -> Result<Self> {
        let (c, h, w) = dims;
        let strides = arch.strides_for(w);
        if arch.filters.len() != arch.kernels.len() || strides.len() != arch.kernels.len() {
            return Err(Error::Config(format!(
                "predictor needs matching filter/kernel/stride lists, got {}/{}/{}",
                arch.filters.len(),
                arch.kernels.len(),
                strides.len()
            )));
        }
        let mut convs = Vec::new();
        let mut shape = vec![c, h, w];
        for (i, ((&f, &k), &s)) in arch.filters.iter().zip(&arch.kernels).zip(&strides).enumerate() {
            let spec = LayerSpec::Conv {
                in_channels: shape[0],
                filters: f,
                kernel: (k, k),
                stride: s,
                padding: if k % 2 == 1 { k / 2 } else { k.saturating_sub(s) / 2 },
                activation: Activation::Relu,
            };
            shape = spec.output_shape(&shape)?;
            convs.push(Layer::new(format!("conv{}", i + 1), spec));
        }
        let flat: usize = shape.iter().product();
        let dense = |name: &str, inputs, outputs, activation| {
            Layer::new(
                name,
                LayerSpec::Dense {
                    inputs,
                    outputs,
                    activation,
                },
            )
        };
        let (u, hd, hu) = (arch.image_units, arch.hidden, arch.head_units);
        Ok(PredictorNet {
            image: dense("image", flat, u, Activation::Relu),
            context: dense("context", u, hd, Activation::Relu),
            init: dense("init", u, hd, Activation::Tanh),
            cell: Layer::new("cell", LayerSpec::LstmCell { inputs: 1 + hd, hidden: hd }),
            heads: [
                dense("head1", hd, hu, Activation::Relu),
                dense("head2", hu, hu, Activation::Relu),
            ],
            out: dense("out", hu, 1, Activation::Identity),
            convs,
            arch,
            dims,
        })
    }

    pub fn pixels(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn layers(&self) -> Vec<&Layer> {
        let mut v: Vec<&Layer> = self.convs.iter().collect();
        v.extend([&self.image, &self.context, &self.init, &self.cell]);
        v.extend(self.heads.iter());
        v.push(&self.out);
        v
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers().into_iter().find(|l| l.name == name)
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        for l in self.layers() {
            l.init(&mut store, rng);
        }
        // Forget-gate bias of one keeps early gradients flowing through the unroll.
        let hd = self.arch.hidden;
        if let Ok(b) = store.get_mut("cell.b") {
            b.data_mut()[hd..2 * hd].iter_mut().for_each(|v| *v = 1.0);
        }
        store
    }

    /// Per-step logits `[N, 16]` for flat images `[N, pixels]` and steering
    /// angles in degrees `[N, 16]`.
    pub fn logits(&self, tape: &mut Tape, ctx: &mut dyn ForwardContext, x: Var, actions: &Tensor) -> Result<Var> {
        let n = tape.shape(x)[0];
        if tape.shape(x) != [n, self.pixels()] {
            return dim_err(format!(
                "predictor input {:?}, expected [N, {}]",
                tape.shape(x),
                self.pixels()
            ));
        }
        if actions.shape() != [n, HORIZON] {
            return dim_err(format!("actions {:?}, expected [{n}, {HORIZON}]", actions.shape()));
        }
        let (c, h, w) = self.dims;
        let mut y = tape.reshape(x, &[n, c, h, w])?;
        for l in &self.convs {
            y = l.forward(tape, ctx, y)?;
        }
        let flat = tape.value(y).numel() / n;
        let y = tape.reshape(y, &[n, flat])?;
        let code = self.image.forward(tape, ctx, y)?;
        let context = self.context.forward(tape, ctx, code)?;
        let h0 = self.init.forward(tape, ctx, code)?;
        let mut state = RecurrentState {
            hidden: h0,
            cell: tape.constant(Tensor::zeros(&[n, self.arch.hidden])),
        };
        let mut steps = Vec::with_capacity(HORIZON);
        for t in 0..HORIZON {
            let a: Vec<f32> = (0..n)
                .map(|i| actions.data()[i * HORIZON + t] / MAX_STEER_DEG as f32)
                .collect();
            let a = tape.constant(Tensor::new(vec![n, 1], a)?);
            let input = tape.concat_cols(&[a, context])?;
            let (h_t, s) = lstm_step(tape, ctx, &self.cell, input, state)?;
            state = s;
            steps.push(h_t);
        }
        let hs = tape.concat_cols(&steps)?;
        let mut z = tape.reshape(hs, &[n * HORIZON, self.arch.hidden])?;
        for l in &self.heads {
            z = l.forward(tape, ctx, z)?;
        }
        let z = self.out.forward(tape, ctx, z)?;
        tape.reshape(z, &[n, HORIZON])
    }
}

/// Logits to probabilities kept strictly inside (0, 1).
pub fn probabilities(logits: &[f32]) -> Vec<f32> {
    logits
        .iter()
        .map(|&l| crate::tensor::sigmoid(l).clamp(1e-6, 1.0 - 1e-6))
        .collect()
}
