//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value and enough context to
//! compute vector-Jacobian products. Nodes are appended in execution order, so
//! the tape is topologically sorted by construction and `backward` is a single
//! reverse sweep.

use super::conv::{
    batch_major_to_channel_major, channel_major_to_batch_major, col2im, gemm, im2col,
    ConvGeometry, Layout,
};
use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise single-input ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Log,
    Neg,
    Square,
}

impl Unary {
    fn apply(self, x: f32) -> f32 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Neg => -x,
            Unary::Square => x * x,
        }
    }

    /// d out / d in, given input `x` and output `y`.
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Neg => -1.0,
            Unary::Square => 2.0 * x,
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
        filters: usize,
        cols: Vec<f32>,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        /// Geometry of the forward conv whose adjoint this op computes.
        geom: ConvGeometry,
        in_channels: usize,
    },
    BiasAdd {
        x: Var,
        bias: Var,
        axis: usize,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    Offset {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: f32,
        hi: f32,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    BceLogits {
        logits: Var,
        labels: Vec<f32>,
    },
    BceProbs {
        probs: Var,
        labels: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Probability clamp used by [`Tape::bce_probs`].
pub const PROB_CLAMP: f32 = 1e-6;

/// Single-threaded record of executed ops. Consumed by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor; gradients are tracked when `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{name} produced a non-finite value")));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Normal,
            0.0,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, needs)
    }

    /// Cross-correlation of `input` (`[C,H,W]` or `[N,C,H,W]`) with `kernel` `[F,C,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        let (batched, n, c, h, w) = match si.as_slice() {
            [c, h, w] => (false, 1, *c, *h, *w),
            [n, c, h, w] => (true, *n, *c, *h, *w),
            _ => return dim_err(format!("conv2d input must be rank 3 or 4, got {si:?}")),
        };
        if sk.len() != 4 || sk[1] != c {
            return dim_err(format!("conv2d kernel {sk:?} incompatible with input {si:?}"));
        }
        let f = sk[0];
        let geom = ConvGeometry::new(n, c, h, w, sk[2], sk[3], stride, padding)?;
        let cols = im2col(&geom, self.value(input).data());
        let p = geom.out_h * geom.out_w;
        let mut out_cm = vec![0.0f32; f * n * p];
        gemm(
            f,
            geom.patch_len(),
            n * p,
            self.value(kernel).data(),
            Layout::Normal,
            &cols,
            Layout::Normal,
            0.0,
            &mut out_cm,
        );
        let out = channel_major_to_batch_major(&out_cm, n, f, p);
        let shape = if batched {
            vec![n, f, geom.out_h, geom.out_w]
        } else {
            vec![f, geom.out_h, geom.out_w]
        };
        let needs = self.needs(input) || self.needs(kernel);
        let cols = if self.needs(kernel) { cols } else { Vec::new() };
        self.push(
            "conv2d",
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                kernel,
                geom,
                filters: f,
                cols,
            },
            needs,
        )
    }

    /// Transposed convolution: input `[N,C,H,W]`, kernel `[C,F,kh,kw]`, output
    /// `[N,F,(H-1)s-2p+kh+op_h,(W-1)s-2p+kw+op_w]`. Output padding must be below the stride.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        output_padding: (usize, usize),
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        let [n, c, h, w] = si[..] else {
            return dim_err(format!("conv_transpose2d input must be rank 4, got {si:?}"));
        };
        if sk.len() != 4 || sk[0] != c {
            return dim_err(format!(
                "conv_transpose2d kernel {sk:?} incompatible with input {si:?}"
            ));
        }
        if stride == 0 || output_padding.0 >= stride || output_padding.1 >= stride {
            return dim_err("conv_transpose2d output padding must be smaller than stride");
        }
        let (f, kh, kw) = (sk[1], sk[2], sk[3]);
        let oh = ((h - 1) * stride + kh + output_padding.0)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0);
        let ow = ((w - 1) * stride + kw + output_padding.1)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return dim_err("conv_transpose2d output would be empty");
        };
        let geom = ConvGeometry::new(n, f, oh, ow, kh, kw, stride, padding)?;
        if geom.out_h != h || geom.out_w != w {
            return dim_err("conv_transpose2d geometry is not invertible");
        }
        let x_cm = batch_major_to_channel_major(self.value(input).data(), n, c, h * w);
        let mut cols = vec![0.0f32; geom.patch_len() * n * h * w];
        gemm(
            geom.patch_len(),
            c,
            n * h * w,
            self.value(kernel).data(),
            Layout::Transposed,
            &x_cm,
            Layout::Normal,
            0.0,
            &mut cols,
        );
        let out = col2im(&geom, &cols);
        let needs = self.needs(input) || self.needs(kernel);
        self.push(
            "conv_transpose2d",
            Tensor::new(vec![n, f, oh, ow], out)?,
            Op::ConvTranspose2d {
                input,
                kernel,
                geom,
                in_channels: c,
            },
            needs,
        )
    }

    /// Adds `bias` (length = `x.shape[axis]`) along `axis`.
    pub fn bias_add(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if axis >= sx.len() || self.value(bias).numel() != sx[axis] {
            return dim_err(format!("bias {sb:?} does not match axis {axis} of {sx:?}"));
        }
        let inner: usize = sx[axis + 1..].iter().product();
        let len = sx[axis];
        let mut out = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for (chunk_idx, chunk) in out.chunks_mut(inner).enumerate() {
            let bv = b[chunk_idx % len];
            for v in chunk {
                *v += bv;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        self.push("bias_add", Tensor::new(sx, out)?, Op::BiasAdd { x, bias, axis }, needs)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let t = self.value(x);
        if kind == Unary::Log {
            if let Some(bad) = t.data().iter().find(|v| **v <= 0.0) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let data = t.data().iter().map(|&v| kind.apply(v)).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.push(
            &format!("{kind:?}").to_lowercase(),
            Tensor::new(shape, data)?,
            Op::Unary { x, kind },
            needs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }
    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.is_scalar() {
            ta.shape().to_vec()
        } else if ta.is_scalar() {
            tb.shape().to_vec()
        } else {
            return dim_err(format!(
                "{kind:?}: shapes {:?} and {:?} are not broadcast-compatible",
                ta.shape(),
                tb.shape()
            ));
        };
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let (sa, sb) = (da.len() != 1 || n == 1, db.len() != 1 || n == 1);
        let f = |x: f32, y: f32| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let data = (0..n)
            .map(|i| f(da[if sa { i } else { 0 }], db[if sb { i } else { 0 }]))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(
            &format!("{kind:?}").to_lowercase(),
            Tensor::new(shape, data)?,
            Op::Binary { a, b, kind },
            needs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `x · factor` for a constant factor.
    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect())?;
        let needs = self.needs(x);
        self.push("scale", out, Op::Scale { x, factor }, needs)
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f32) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + c).collect())?;
        let needs = self.needs(x);
        self.push("offset", out, Op::Offset { x }, needs)
    }

    /// Clamps to `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|v| v.clamp(lo, hi)).collect(),
        )?;
        let needs = self.needs(x);
        self.push("clamp", out, Op::Clamp { x, lo, hi }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let needs = self.needs(x);
        self.push("sum", Tensor::scalar(s as f32), Op::Sum { x }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f32;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let needs = self.needs(x);
        self.push("reshape", t, Op::Reshape { x }, needs)
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat_cols of nothing");
        }
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return dim_err(format!("concat_cols part {s:?} with {rows} rows expected"));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat_cols",
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + width > s[1] || width == 0 {
            return dim_err(format!("slice_cols [{start}, {}) of {s:?}", start + width));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * width);
        for r in 0..s[0] {
            out.extend_from_slice(&d[r * s[1] + start..r * s[1] + start + width]);
        }
        let needs = self.needs(x);
        self.push(
            "slice_cols",
            Tensor::new(vec![s[0], width], out)?,
            Op::SliceCols { x, start },
            needs,
        )
    }

    fn check_labels(&self, x: Var, labels: &Tensor) -> Result<()> {
        if labels.numel() != self.value(x).numel() {
            return dim_err(format!(
                "{} labels for {} predictions",
                labels.numel(),
                self.value(x).numel()
            ));
        }
        if let Some(bad) = labels.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Domain(format!("label {bad} is not in {{0, 1}}")));
        }
        Ok(())
    }

    /// Mean binary cross entropy of sigmoid(logits) against {0,1} labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &Tensor) -> Result<Var> {
        self.check_labels(logits, labels)?;
        let z = self.value(logits).data();
        let n = z.len() as f64;
        let loss: f64 = z
            .iter()
            .zip(labels.data())
            .map(|(&z, &y)| (z.max(0.0) - z * y + softplus(-z.abs())) as f64)
            .sum::<f64>()
            / n;
        let needs = self.needs(logits);
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss as f32),
            Op::BceLogits {
                logits,
                labels: labels.data().to_vec(),
            },
            needs,
        )
    }

    /// Mean binary cross entropy on probabilities clamped to `[1e-6, 1-1e-6]`.
    pub fn bce_probs(&mut self, probs: Var, labels: &Tensor) -> Result<Var> {
        self.check_labels(probs, labels)?;
        let p = self.value(probs).data();
        let n = p.len() as f64;
        let loss: f64 = p
            .iter()
            .zip(labels.data())
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP) as f64;
                -(y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let needs = self.needs(probs);
        self.push(
            "bce_probs",
            Tensor::scalar(loss as f32),
            Op::BceProbs {
                probs,
                labels: labels.data().to_vec(),
            },
            needs,
        )
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut leaves = Vec::new();
        for (i, node) in self.nodes.into_iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                leaves.push((Var(i), node.value, g));
            }
        }
        Ok(Gradients { leaves })
    }

    fn propagate(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, g, Layout::Normal, self.value(*b).data(), Layout::Transposed, 1.0, ga);
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, k * n);
                    gemm(k, m, n, self.value(*a).data(), Layout::Transposed, g, Layout::Normal, 1.0, gb);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                filters,
                cols,
            } => {
                let p = geom.out_h * geom.out_w;
                let g_cm = batch_major_to_channel_major(g, geom.batch, *filters, p);
                let np = geom.batch * p;
                if self.needs(*kernel) {
                    let gk = slot(grads, *kernel, filters * geom.patch_len());
                    gemm(*filters, np, geom.patch_len(), &g_cm, Layout::Normal, cols, Layout::Transposed, 1.0, gk);
                }
                if self.needs(*input) {
                    let mut dcols = vec![0.0f32; geom.patch_len() * np];
                    gemm(
                        geom.patch_len(),
                        *filters,
                        np,
                        self.value(*kernel).data(),
                        Layout::Transposed,
                        &g_cm,
                        Layout::Normal,
                        0.0,
                        &mut dcols,
                    );
                    let dx = col2im(geom, &dcols);
                    add_into(slot(grads, *input, dx.len()), &dx);
                }
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                geom,
                in_channels,
            } => {
                let c = *in_channels;
                let hw = geom.out_h * geom.out_w;
                let n = geom.batch;
                let dcols = im2col(geom, g);
                if self.needs(*kernel) {
                    let x_cm = batch_major_to_channel_major(self.value(*input).data(), n, c, hw);
                    let gk = slot(grads, *kernel, c * geom.patch_len());
                    gemm(c, n * hw, geom.patch_len(), &x_cm, Layout::Normal, &dcols, Layout::Transposed, 1.0, gk);
                }
                if self.needs(*input) {
                    let mut dx_cm = vec![0.0f32; c * n * hw];
                    gemm(
                        c,
                        geom.patch_len(),
                        n * hw,
                        self.value(*kernel).data(),
                        Layout::Normal,
                        &dcols,
                        Layout::Normal,
                        0.0,
                        &mut dx_cm,
                    );
                    let dx = channel_major_to_batch_major(&dx_cm, n, c, hw);
                    add_into(slot(grads, *input, dx.len()), &dx);
                }
            }
            Op::BiasAdd { x, bias, axis } => {
                if self.needs(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if self.needs(*bias) {
                    let s = out.shape();
                    let inner: usize = s[axis + 1..].iter().product();
                    let len = s[*axis];
                    let gb = slot(grads, *bias, len);
                    for (chunk_idx, chunk) in g.chunks(inner).enumerate() {
                        gb[chunk_idx % len] += chunk.iter().sum::<f32>();
                    }
                }
            }
            Op::Unary { x, kind } => {
                if self.needs(*x) {
                    let xin = self.value(*x).data();
                    let y = out.data();
                    let gx = slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * kind.derivative(xin[i], y[i]);
                    }
                }
            }
            Op::Binary { a, b, kind } => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let n = g.len();
                let pick = |d: &[f32], i: usize| if d.len() == n { d[i] } else { d[0] };
                for (this, other, first) in [(*a, db, true), (*b, da, false)] {
                    if !self.needs(this) {
                        continue;
                    }
                    let len = self.value(this).numel();
                    let gs = slot(grads, this, len);
                    for i in 0..n {
                        let local = match kind {
                            Binary::Add => 1.0,
                            Binary::Sub => {
                                if first {
                                    1.0
                                } else {
                                    -1.0
                                }
                            }
                            Binary::Mul => pick(other, i),
                        };
                        let j = if len == n { i } else { 0 };
                        gs[j] += g[i] * local;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    let gx = slot(grads, *x, g.len());
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += s * factor;
                    }
                }
            }
            Op::Offset { x } | Op::Reshape { x } => {
                if self.needs(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.needs(*x) {
                    let xin = self.value(*x).data();
                    let gx = slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        if xin[i] >= *lo && xin[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let len = self.value(*x).numel();
                    for v in slot(grads, *x, len) {
                        *v += g[0];
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.needs(p) {
                        let gp = slot(grads, p, rows * w);
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let s = self.shape(*x);
                    let (rows, cols) = (s[0], s[1]);
                    let w = out.shape()[1];
                    let gx = slot(grads, *x, rows * cols);
                    for r in 0..rows {
                        for c in 0..w {
                            gx[r * cols + start + c] += g[r * w + c];
                        }
                    }
                }
            }
            Op::BceLogits { logits, labels } => {
                if self.needs(*logits) {
                    let z = self.value(*logits).data();
                    let n = z.len() as f32;
                    let gz = slot(grads, *logits, z.len());
                    for i in 0..z.len() {
                        gz[i] += g[0] * (sigmoid(z[i]) - labels[i]) / n;
                    }
                }
            }
            Op::BceProbs { probs, labels } => {
                if self.needs(*probs) {
                    let p = self.value(*probs).data();
                    let n = p.len() as f32;
                    let gp = slot(grads, *probs, p.len());
                    for i in 0..p.len() {
                        if p[i] > PROB_CLAMP && p[i] < 1.0 - PROB_CLAMP {
                            gp[i] += g[0] * (p[i] - labels[i]) / (p[i] * (1.0 - p[i])) / n;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f32>>], v: Var, len: usize) -> &'a mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients of a loss with respect to every grad-tracking leaf.
pub struct Gradients {
    leaves: Vec<(Var, Tensor, Vec<f32>)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.leaves
            .iter()
            .find(|(var, _, _)| *var == v)
            .map(|(_, _, g)| g.as_slice())
    }

    /// The leaf tensor with its `grad` buffer populated.
    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        self.leaves.iter().find(|(var, _, _)| *var == v).map(|(_, t, g)| {
            let mut t = t.clone();
            t.grad = Some(g.clone());
            t
        })
    }

    /// Moves out the gradient for `v` (leaves order is tape order, so lookups are cheap).
    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        let pos = self
            .leaves
            .binary_search_by_key(&v.0, |(var, _, _)| var.0)
            .ok()?;
        Some(std::mem::take(&mut self.leaves[pos].2))
    }
}
