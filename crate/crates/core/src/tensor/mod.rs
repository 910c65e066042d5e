//! Dense row-major `f32` tensors and the reverse-mode tape built on them.

mod conv;
mod gradcheck;
mod optim;
mod params;
mod serialize;
mod tape;

pub use conv::ConvGeometry;
pub use gradcheck::gradient_check;
pub use optim::{Adam, AdamConfig};
pub use params::{BoundParams, ParamStore};
pub use serialize::{read_records, write_records, Record, WEIGHTS_MAGIC, WEIGHTS_VERSION};
pub use tape::{sigmoid, softplus, Gradients, Tape, Unary, Var, PROB_CLAMP};

use crate::error::{dim_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    /// Populated by [`Gradients::tensor`] after a backward pass.
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return dim_err(format!("shape {shape:?} has a zero dimension"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_slice(data: &[f32]) -> Self {
        Tensor {
            shape: vec![data.len()],
            data: data.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return dim_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
