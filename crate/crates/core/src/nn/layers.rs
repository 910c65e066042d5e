use rand::Rng;

use super::{uniform_tensor, ForwardContext};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Static description of one layer. Output shapes follow from input shapes
/// without running data. Shapes exclude the leading batch dimension.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    Conv {
        in_channels: usize,
        filters: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        activation: Activation,
    },
    Deconv {
        in_channels: usize,
        filters: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        output_padding: (usize, usize),
        activation: Activation,
    },
    LstmCell {
        inputs: usize,
        hidden: usize,
    },
}

impl LayerSpec {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => {
                if input != [inputs] {
                    return dim_err(format!("dense expects [{inputs}], got {input:?}"));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv {
                in_channels,
                filters,
                kernel,
                stride,
                padding,
                ..
            } => {
                let [c, h, w] = input[..] else {
                    return dim_err(format!("conv expects [C,H,W], got {input:?}"));
                };
                if c != in_channels || stride == 0 {
                    return dim_err(format!("conv expects {in_channels} channels, got {c}"));
                }
                let (ph, pw) = (h + 2 * padding, w + 2 * padding);
                if ph < kernel.0 || pw < kernel.1 {
                    return dim_err(format!("conv output would be empty for {input:?}"));
                }
                Ok(vec![
                    filters,
                    (ph - kernel.0) / stride + 1,
                    (pw - kernel.1) / stride + 1,
                ])
            }
            LayerSpec::Deconv {
                in_channels,
                filters,
                kernel,
                stride,
                padding,
                output_padding,
                ..
            } => {
                let [c, h, w] = input[..] else {
                    return dim_err(format!("deconv expects [C,H,W], got {input:?}"));
                };
                if c != in_channels {
                    return dim_err(format!("deconv expects {in_channels} channels, got {c}"));
                }
                let oh = ((h - 1) * stride + kernel.0 + output_padding.0).checked_sub(2 * padding);
                let ow = ((w - 1) * stride + kernel.1 + output_padding.1).checked_sub(2 * padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(vec![filters, oh, ow]),
                    _ => dim_err(format!("deconv output would be empty for {input:?}")),
                }
            }
            LayerSpec::LstmCell { inputs, hidden } => {
                if input != [inputs] {
                    return dim_err(format!("lstm expects [{inputs}], got {input:?}"));
                }
                Ok(vec![hidden])
            }
        }
    }

    /// `(suffix, shape)` of every parameter the layer owns.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => vec![("w", vec![inputs, outputs]), ("b", vec![outputs])],
            LayerSpec::Conv {
                in_channels,
                filters,
                kernel,
                ..
            } => vec![
                ("w", vec![filters, in_channels, kernel.0, kernel.1]),
                ("b", vec![filters]),
            ],
            LayerSpec::Deconv {
                in_channels,
                filters,
                kernel,
                ..
            } => vec![
                ("w", vec![in_channels, filters, kernel.0, kernel.1]),
                ("b", vec![filters]),
            ],
            LayerSpec::LstmCell { inputs, hidden } => {
                vec![("w", vec![inputs + hidden, 4 * hidden]), ("b", vec![4 * hidden])]
            }
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel.0 * kernel.1,
            LayerSpec::Deconv {
                in_channels,
                kernel,
                stride,
                ..
            } => (in_channels * kernel.0 * kernel.1 / (stride * stride)).max(1),
            LayerSpec::LstmCell { inputs, hidden } => inputs + hidden,
        }
    }

    fn activation(&self) -> Activation {
        match *self {
            LayerSpec::Dense { activation, .. }
            | LayerSpec::Conv { activation, .. }
            | LayerSpec::Deconv { activation, .. } => activation,
            LayerSpec::LstmCell { .. } => Activation::Identity,
        }
    }
}

/// A named layer; its parameters live in a [`ParamStore`] as `"{name}.w"` / `"{name}.b"`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

impl Layer {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Self {
        Layer {
            name: name.into(),
            spec,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    /// Number of activations the layer emits per example (per-channel for convolutions).
    pub fn units(&self) -> usize {
        match self.spec {
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Conv { filters, .. } | LayerSpec::Deconv { filters, .. } => filters,
            LayerSpec::LstmCell { hidden, .. } => hidden,
        }
    }

    /// Adds freshly initialised parameters: He-uniform for ReLU layers,
    /// Glorot-style uniform otherwise, zero biases.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let fan_in = self.spec.fan_in() as f32;
        let gain = if self.spec.activation() == Activation::Relu {
            6.0f32
        } else {
            3.0
        };
        let bound = (gain / fan_in).sqrt();
        for (suffix, shape) in self.spec.param_shapes() {
            let name = format!("{}.{suffix}", self.name);
            let t = if suffix == "b" {
                Tensor::zeros(&shape)
            } else {
                uniform_tensor(rng, &shape, bound)
            };
            store.insert(name, t);
        }
    }

    /// Batched forward pass; `x` carries a leading batch dimension.
    pub fn forward(&self, tape: &mut Tape, ctx: &mut dyn ForwardContext, x: Var) -> Result<Var> {
        let w = ctx.weight(tape, &self.weight_name())?;
        let b = ctx.weight(tape, &self.bias_name())?;
        let pre = match self.spec {
            LayerSpec::Dense { .. } => {
                let y = tape.matmul(x, w)?;
                tape.bias_add(y, b, 1)?
            }
            LayerSpec::Conv {
                stride, padding, ..
            } => {
                let y = tape.conv2d(x, w, stride, padding)?;
                tape.bias_add(y, b, 1)?
            }
            LayerSpec::Deconv {
                stride,
                padding,
                output_padding,
                ..
            } => {
                let y = tape.conv_transpose2d(x, w, stride, padding, output_padding)?;
                tape.bias_add(y, b, 1)?
            }
            LayerSpec::LstmCell { .. } => {
                return Err(Error::Contract(
                    "lstm cells are stepped with lstm_step".into(),
                ))
            }
        };
        let y = self.spec.activation().apply(tape, pre)?;
        ctx.after_layer(tape, &self.name, y)
    }
}

/// Hidden and cell state of an LSTM, each `[batch, hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct RecurrentState {
    pub hidden: Var,
    pub cell: Var,
}

/// One LSTM step with gate order (input, forget, candidate, output).
pub fn lstm_step(
    tape: &mut Tape,
    ctx: &mut dyn ForwardContext,
    cell: &Layer,
    x_t: Var,
    state: RecurrentState,
) -> Result<(Var, RecurrentState)> {
    let LayerSpec::LstmCell { inputs, hidden } = cell.spec else {
        return Err(Error::Contract(format!("{} is not an lstm cell", cell.name)));
    };
    let hs = tape.shape(state.hidden).to_vec();
    let cs = tape.shape(state.cell).to_vec();
    if hs.len() != 2 || hs[1] != hidden || cs != hs {
        return dim_err(format!(
            "lstm state shapes {hs:?}/{cs:?} do not match hidden size {hidden}"
        ));
    }
    let xs = tape.shape(x_t);
    if xs.len() != 2 || xs[1] != inputs || xs[0] != hs[0] {
        return dim_err(format!("lstm input {xs:?}, expected [{}, {inputs}]", hs[0]));
    }
    let w = ctx.weight(tape, &cell.weight_name())?;
    let b = ctx.weight(tape, &cell.bias_name())?;
    let joined = tape.concat_cols(&[x_t, state.hidden])?;
    let gates = tape.matmul(joined, w)?;
    let gates = tape.bias_add(gates, b, 1)?;
    let i = tape.slice_cols(gates, 0, hidden)?;
    let f = tape.slice_cols(gates, hidden, hidden)?;
    let g = tape.slice_cols(gates, 2 * hidden, hidden)?;
    let o = tape.slice_cols(gates, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let keep = tape.mul(f, state.cell)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next)?;
    let h_next = tape.mul(o, squashed)?;
    Ok((
        h_next,
        RecurrentState {
            hidden: h_next,
            cell: c_next,
        },
    ))
}
