//! Dense `f64` tensors and a reverse-mode autodiff tape.
//!
//! Values live in a [`Tape`]; every operation appends a node whose inputs
//! already exist, so the node list is a topological order by construction and
//! [`Tape::backward`] is a single reverse sweep. Shared subexpressions simply
//! receive several additive gradient contributions.

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// One-dimensional tensor copied from a slice.
    pub fn vector(data: &[f64]) -> Self {
        Tensor {
            shape: vec![data.len()],
            data: data.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Clamp applied to probabilities inside binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        in_channels: usize,
        kernel: usize,
        out_len: usize,
        cols: Option<Vec<f64>>,
    },
    MaxPool1d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
        sorted: bool,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Softmax(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    AddN(Vec<Var>),
    Sum(Var),
    L1Norm(Var),
    L2Norm(Var),
    Row {
        matrix: Var,
        row: usize,
    },
    SqDistRows {
        point: Var,
        matrix: Var,
    },
    PairwiseL1(Var),
    RowNormSum(Var),
    CrossEntropyLogits {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    Bce {
        input: Var,
        target: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes must not be used afterwards.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient populated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Valid (unpadded) 1-D cross-correlation of `input [C_in, L]` with
    /// `kernels [C_out, C_in, K]`.
    pub fn conv1d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        let (in_channels, len) = match self.shape(input) {
            [c, l] => (*c, *l),
            s => return Err(Error::dim(format!("conv1d input must be [C, L], got {s:?}"))),
        };
        let (out_channels, k_in, kernel) = match self.shape(kernels) {
            [o, i, k] => (*o, *i, *k),
            s => {
                return Err(Error::dim(format!(
                    "conv1d kernels must be [C_out, C_in, K], got {s:?}"
                )))
            }
        };
        if k_in != in_channels {
            return Err(Error::dim(format!(
                "conv1d input has {in_channels} channels but kernels expect {k_in}"
            )));
        }
        if self.shape(bias) != [out_channels] {
            return Err(Error::dim(format!(
                "conv1d bias must be [{out_channels}], got {:?}",
                self.shape(bias)
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv1d stride must be positive"));
        }
        if kernel > len {
            return Err(Error::dim(format!("conv1d kernel {kernel} exceeds length {len}")));
        }
        let out_len = (len - kernel) / stride + 1;
        let patch = in_channels * kernel;

        let x = self.data(input);
        let mut cols = vec![0.0; patch * out_len];
        for c in 0..in_channels {
            let row_x = &x[c * len..(c + 1) * len];
            for k in 0..kernel {
                let row = &mut cols[(c * kernel + k) * out_len..(c * kernel + k + 1) * out_len];
                if stride == 1 {
                    row.copy_from_slice(&row_x[k..k + out_len]);
                } else {
                    for (t, slot) in row.iter_mut().enumerate() {
                        *slot = row_x[t * stride + k];
                    }
                }
            }
        }

        let mut out = vec![0.0; out_channels * out_len];
        let b = self.data(bias);
        for (o, row) in out.chunks_exact_mut(out_len).enumerate() {
            row.fill(b[o]);
        }
        gemm(
            out_channels,
            patch,
            out_len,
            (self.data(kernels), patch, 1),
            (&cols, out_len, 1),
            1.0,
            &mut out,
        );

        let requires_grad = self.any_grad(&[input, kernels, bias]);
        let keep_cols = self.nodes[kernels.0].requires_grad;
        let value = Tensor {
            shape: vec![out_channels, out_len],
            data: out,
        };
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                kernels,
                bias,
                stride,
                in_channels,
                kernel,
                out_len,
                cols: keep_cols.then_some(cols),
            },
            requires_grad,
        ))
    }

    /// Per-channel max pooling over `input [C, L]`; a trailing remainder
    /// shorter than `window` is dropped.
    pub fn maxpool1d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (channels, len) = match self.shape(input) {
            [c, l] => (*c, *l),
            s => return Err(Error::dim(format!("maxpool1d input must be [C, L], got {s:?}"))),
        };
        if window == 0 || stride == 0 {
            return Err(Error::dim("maxpool1d window and stride must be positive"));
        }
        if window > len {
            return Err(Error::dim(format!("pool window {window} exceeds length {len}")));
        }
        let out_len = (len - window) / stride + 1;
        let x = self.data(input);
        let mut out = Vec::with_capacity(channels * out_len);
        let mut argmax = Vec::with_capacity(channels * out_len);
        for c in 0..channels {
            for t in 0..out_len {
                let start = c * len + t * stride;
                let mut best = start;
                for i in start + 1..start + window {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
        let requires_grad = self.nodes[input.0].requires_grad;
        let value = Tensor {
            shape: vec![channels, out_len],
            data: out,
        };
        Ok(self.push(value, Op::MaxPool1d { input, argmax }, requires_grad))
    }

    pub fn activation(&mut self, kind: Activation, input: Var) -> Var {
        let x = self.data(input);
        let (data, op) = match kind {
            Activation::Relu => (x.iter().map(|&v| v.max(0.0)).collect(), Op::Relu(input)),
            Activation::Sigmoid => (x.iter().map(|&v| sigmoid(v)).collect(), Op::Sigmoid(input)),
        };
        let value = Tensor {
            shape: self.shape(input).to_vec(),
            data,
        };
        let requires_grad = self.nodes[input.0].requires_grad;
        self.push(value, op, requires_grad)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(Activation::Relu, input)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(Activation::Sigmoid, input)
    }

    /// `weight [D_out, D_in] · input [D_in] + bias [D_out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.linear_impl(input, weight, bias, false)
    }

    /// As [`Tape::linear`], but the input gradient sums over output rows in
    /// sorted order, so permuting the rows of `weight` and `bias` permutes
    /// the result without changing any bit. Meant for class-indexed layers.
    pub fn linear_row_invariant(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.linear_impl(input, weight, bias, true)
    }

    fn linear_impl(&mut self, input: Var, weight: Var, bias: Var, sorted: bool) -> Result<Var> {
        let d_in = match self.shape(input) {
            [d] => *d,
            s => return Err(Error::dim(format!("linear input must be 1-D, got {s:?}"))),
        };
        let d_out = match self.shape(weight) {
            [o, i] if *i == d_in => *o,
            s => {
                return Err(Error::dim(format!(
                    "linear weight {s:?} does not accept input of length {d_in}"
                )))
            }
        };
        if self.shape(bias) != [d_out] {
            return Err(Error::dim(format!(
                "linear bias must be [{d_out}], got {:?}",
                self.shape(bias)
            )));
        }
        let x = self.data(input);
        let w = self.data(weight);
        let b = self.data(bias);
        let data = w
            .chunks_exact(d_in)
            .zip(b)
            .map(|(row, &bo)| bo + dot(row, x))
            .collect();
        let requires_grad = self.any_grad(&[input, weight, bias]);
        let value = Tensor {
            shape: vec![d_out],
            data,
        };
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
                sorted,
            },
            requires_grad,
        ))
    }

    /// Inverted dropout: identity in eval mode, otherwise each unit is zeroed
    /// with probability `rate` and survivors scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(input).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self
            .data(input)
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let value = Tensor {
            shape: self.shape(input).to_vec(),
            data,
        };
        let requires_grad = self.nodes[input.0].requires_grad;
        Ok(self.push(value, Op::Dropout { input, mask }, requires_grad))
    }

    pub fn softmax(&mut self, input: Var) -> Var {
        let value = Tensor {
            shape: self.shape(input).to_vec(),
            data: softmax(self.data(input)),
        };
        let requires_grad = self.nodes[input.0].requires_grad;
        self.push(value, Op::Softmax(input), requires_grad)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape.to_vec(), self.data(input).to_vec())?;
        let requires_grad = self.nodes[input.0].requires_grad;
        Ok(self.push(value, Op::Reshape(input), requires_grad))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let requires_grad = self.any_grad(&[a, b]);
        self.push(value, op, requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = Tensor {
            shape: self.shape(input).to_vec(),
            data: self.data(input).iter().map(|x| x * factor).collect(),
        };
        let requires_grad = self.nodes[input.0].requires_grad;
        self.push(value, Op::Scale(input, factor), requires_grad)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, input: Var, offset: f64) -> Var {
        let value = Tensor {
            shape: self.shape(input).to_vec(),
            data: self.data(input).iter().map(|x| x + offset).collect(),
        };
        let requires_grad = self.nodes[input.0].requires_grad;
        self.push(value, Op::Shift(input), requires_grad)
    }

    /// Elementwise sum of equally shaped values.
    pub fn add_n(&mut self, inputs: &[Var]) -> Result<Var> {
        let (&first, rest) = inputs
            .split_first()
            .ok_or_else(|| Error::dim("add_n needs at least one input"))?;
        for &v in rest {
            self.same_shape(first, v, "add_n")?;
        }
        let mut data = self.data(first).to_vec();
        for &v in rest {
            for (d, x) in data.iter_mut().zip(self.data(v)) {
                *d += x;
            }
        }
        let value = Tensor {
            shape: self.shape(first).to_vec(),
            data,
        };
        let requires_grad = self.any_grad(inputs);
        Ok(self.push(value, Op::AddN(inputs.to_vec()), requires_grad))
    }

    /// Mean of equally shaped values.
    pub fn mean_n(&mut self, inputs: &[Var]) -> Result<Var> {
        let total = self.add_n(inputs)?;
        Ok(self.scale(total, 1.0 / inputs.len() as f64))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.data(input).iter().sum();
        let requires_grad = self.nodes[input.0].requires_grad;
        self.push(Tensor::scalar(total), Op::Sum(input), requires_grad)
    }

    pub fn l1_norm(&mut self, input: Var) -> Var {
        let total = self.data(input).iter().map(|x| x.abs()).sum();
        let requires_grad = self.nodes[input.0].requires_grad;
        self.push(Tensor::scalar(total), Op::L1Norm(input), requires_grad)
    }

    /// Euclidean norm; the gradient at the origin is taken as zero.
    pub fn l2_norm(&mut self, input: Var) -> Var {
        let total = dot(self.data(input), self.data(input)).sqrt();
        let requires_grad = self.nodes[input.0].requires_grad;
        self.push(Tensor::scalar(total), Op::L2Norm(input), requires_grad)
    }

    /// Row `row` of a 2-D value.
    pub fn row(&mut self, matrix: Var, row: usize) -> Result<Var> {
        let (rows, cols) = match self.shape(matrix) {
            [r, c] => (*r, *c),
            s => return Err(Error::dim(format!("row() needs a matrix, got {s:?}"))),
        };
        if row >= rows {
            return Err(Error::dim(format!("row {row} out of range for {rows} rows")));
        }
        let value = Tensor::vector(&self.data(matrix)[row * cols..(row + 1) * cols]);
        let requires_grad = self.nodes[matrix.0].requires_grad;
        Ok(self.push(value, Op::Row { matrix, row }, requires_grad))
    }

    /// Squared Euclidean distance from `point [P]` to every row of
    /// `matrix [N, P]`.
    pub fn sq_dist_rows(&mut self, point: Var, matrix: Var) -> Result<Var> {
        let p = match self.shape(point) {
            [p] => *p,
            s => return Err(Error::dim(format!("distance point must be 1-D, got {s:?}"))),
        };
        let n = match self.shape(matrix) {
            [n, q] if *q == p => *n,
            s => {
                return Err(Error::dim(format!(
                    "prototype matrix {s:?} does not match point dimension {p}"
                )))
            }
        };
        let x = self.data(point);
        let data = self
            .data(matrix)
            .chunks_exact(p)
            .map(|row| row.iter().zip(x).map(|(c, v)| (v - c) * (v - c)).sum())
            .collect();
        let requires_grad = self.any_grad(&[point, matrix]);
        let value = Tensor {
            shape: vec![n],
            data,
        };
        Ok(self.push(value, Op::SqDistRows { point, matrix }, requires_grad))
    }

    /// `Σ_{i<j} ‖row_i − row_j‖₁` over a 2-D value.
    pub fn pairwise_l1(&mut self, matrix: Var) -> Result<Var> {
        let (n, p) = self.matrix_dims(matrix)?;
        let c = self.data(matrix);
        let mut terms = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                terms.push((0..p).map(|k| (c[i * p + k] - c[j * p + k]).abs()).sum());
            }
        }
        let total = ordered_sum(&mut terms);
        let requires_grad = self.nodes[matrix.0].requires_grad;
        Ok(self.push(Tensor::scalar(total), Op::PairwiseL1(matrix), requires_grad))
    }

    /// `Σ_i ‖row_i‖₂` over a 2-D value.
    pub fn row_norm_sum(&mut self, matrix: Var) -> Result<Var> {
        let (_, p) = self.matrix_dims(matrix)?;
        let mut norms: Vec<f64> = self
            .data(matrix)
            .chunks_exact(p)
            .map(|r| dot(r, r).sqrt())
            .collect();
        let total = ordered_sum(&mut norms);
        let requires_grad = self.nodes[matrix.0].requires_grad;
        Ok(self.push(Tensor::scalar(total), Op::RowNormSum(matrix), requires_grad))
    }

    fn matrix_dims(&self, matrix: Var) -> Result<(usize, usize)> {
        match self.shape(matrix) {
            [n, p] => Ok((*n, *p)),
            s => Err(Error::dim(format!("expected a matrix, got {s:?}"))),
        }
    }

    /// `−ln softmax(logits)[label]`, fused for stability.
    pub fn cross_entropy_logits(&mut self, logits: Var, label: usize) -> Result<Var> {
        let n = match self.shape(logits) {
            [n] => *n,
            s => return Err(Error::dim(format!("logits must be 1-D, got {s:?}"))),
        };
        if label >= n {
            return Err(Error::dim(format!("label {label} out of range for {n} classes")));
        }
        let z = self.data(logits);
        let lse = log_sum_exp(z);
        let loss = lse - z[label];
        let probs = z.iter().map(|v| (v - lse).exp()).collect();
        let requires_grad = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyLogits {
                logits,
                label,
                probs,
            },
            requires_grad,
        ))
    }

    /// Binary cross-entropy of a one-element probability against `target`.
    /// The probability is clamped to `[BCE_CLAMP, 1 − BCE_CLAMP]`; the
    /// gradient is evaluated at the clamped point.
    pub fn bce(&mut self, input: Var, target: f64) -> Result<Var> {
        if !self.value(input).is_scalar() {
            return Err(Error::dim("bce expects a single probability"));
        }
        let p = self.data(input)[0].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let loss = -(target * p.ln() + (1.0 - target) * (1.0 - p).ln());
        let requires_grad = self.nodes[input.0].requires_grad;
        Ok(self.push(Tensor::scalar(loss), Op::Bce { input, target }, requires_grad))
    }

    /// Reverse sweep from a scalar `loss`; populates the gradient of every
    /// node on a path from a `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = match g {
                Some(data) if node.requires_grad => Some(Tensor {
                    shape: node.value.shape.clone(),
                    data,
                }),
                _ => None,
            };
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                kernels,
                bias,
                stride,
                in_channels,
                kernel,
                out_len,
                cols,
            } => {
                let out_channels = self.shape(*kernels)[0];
                let patch = in_channels * kernel;
                if let Some(db) = self.slot(*bias, grads) {
                    for (o, row) in g.chunks_exact(*out_len).enumerate() {
                        db[o] += row.iter().sum::<f64>();
                    }
                }
                if let Some(dw) = self.slot(*kernels, grads) {
                    let cols = cols.as_ref().expect("im2col buffer kept for kernel grads");
                    gemm(
                        out_channels,
                        *out_len,
                        patch,
                        (g, *out_len, 1),
                        (cols, 1, *out_len),
                        1.0,
                        dw,
                    );
                }
                if self.nodes[input.0].requires_grad {
                    let mut dcols = vec![0.0; patch * out_len];
                    gemm(
                        patch,
                        out_channels,
                        *out_len,
                        (self.data(*kernels), 1, patch),
                        (g, *out_len, 1),
                        0.0,
                        &mut dcols,
                    );
                    let len = self.shape(*input)[1];
                    let dx = self.slot(*input, grads).expect("input requires grad");
                    for c in 0..*in_channels {
                        for k in 0..*kernel {
                            let row = &dcols[(c * kernel + k) * out_len..][..*out_len];
                            for (t, v) in row.iter().enumerate() {
                                dx[c * len + t * stride + k] += v;
                            }
                        }
                    }
                }
            }
            Op::MaxPool1d { input, argmax } => {
                if let Some(dx) = self.slot(*input, grads) {
                    for (&src, gv) in argmax.iter().zip(g) {
                        dx[src] += gv;
                    }
                }
            }
            Op::Relu(input) => {
                if let Some(dx) = self.slot(*input, grads) {
                    for ((d, gv), y) in dx.iter_mut().zip(g).zip(out) {
                        if *y > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(input) => {
                if let Some(dx) = self.slot(*input, grads) {
                    for ((d, gv), y) in dx.iter_mut().zip(g).zip(out) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
                sorted,
            } => {
                let x = self.data(*input);
                let d_in = x.len();
                if let Some(db) = self.slot(*bias, grads) {
                    add_assign(db, g);
                }
                if let Some(dw) = self.slot(*weight, grads) {
                    for (row, gv) in dw.chunks_exact_mut(d_in).zip(g) {
                        axpy(*gv, x, row);
                    }
                }
                if let Some(dx) = self.slot(*input, grads) {
                    let w = self.data(*weight);
                    if *sorted {
                        let mut terms = Vec::with_capacity(g.len());
                        for (j, d) in dx.iter_mut().enumerate() {
                            terms.clear();
                            terms.extend(g.iter().enumerate().map(|(o, gv)| gv * w[o * d_in + j]));
                            *d += ordered_sum(&mut terms);
                        }
                    } else {
                        for (row, gv) in w.chunks_exact(d_in).zip(g) {
                            axpy(*gv, row, dx);
                        }
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if let Some(dx) = self.slot(*input, grads) {
                    for ((d, gv), m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            Op::Softmax(input) => {
                if let Some(dx) = self.slot(*input, grads) {
                    let inner = dot(g, out);
                    for ((d, gv), y) in dx.iter_mut().zip(g).zip(out) {
                        *d += y * (gv - inner);
                    }
                }
            }
            Op::Reshape(input) | Op::Shift(input) => {
                if let Some(dx) = self.slot(*input, grads) {
                    add_assign(dx, g);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(*a, grads) {
                    add_assign(da, g);
                }
                if let Some(db) = self.slot(*b, grads) {
                    add_assign(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(*a, grads) {
                    add_assign(da, g);
                }
                if let Some(db) = self.slot(*b, grads) {
                    axpy(-1.0, g, db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(da) = self.slot(*a, grads) {
                    for ((d, gv), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if let Some(db) = self.slot(*b, grads) {
                    for ((d, gv), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale(input, factor) => {
                if let Some(dx) = self.slot(*input, grads) {
                    axpy(*factor, g, dx);
                }
            }
            Op::AddN(inputs) => {
                for v in inputs {
                    if let Some(dx) = self.slot(*v, grads) {
                        add_assign(dx, g);
                    }
                }
            }
            Op::Sum(input) => {
                if let Some(dx) = self.slot(*input, grads) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::L1Norm(input) => {
                let x = self.data(*input);
                if let Some(dx) = self.slot(*input, grads) {
                    for (d, v) in dx.iter_mut().zip(x) {
                        *d += g[0] * sign(*v);
                    }
                }
            }
            Op::L2Norm(input) => {
                let norm = out[0];
                let x = self.data(*input);
                if norm > 0.0 {
                    if let Some(dx) = self.slot(*input, grads) {
                        axpy(g[0] / norm, x, dx);
                    }
                }
            }
            Op::Row { matrix, row } => {
                let cols = g.len();
                if let Some(dm) = self.slot(*matrix, grads) {
                    add_assign(&mut dm[row * cols..(row + 1) * cols], g);
                }
            }
            Op::SqDistRows { point, matrix } => {
                let x = self.data(*point);
                let c = self.data(*matrix);
                let p = x.len();
                if let Some(dx) = self.slot(*point, grads) {
                    let mut terms = Vec::with_capacity(g.len());
                    for (j, d) in dx.iter_mut().enumerate() {
                        terms.clear();
                        terms.extend(
                            c.chunks_exact(p)
                                .zip(g)
                                .map(|(row, gv)| 2.0 * gv * (x[j] - row[j])),
                        );
                        *d += ordered_sum(&mut terms);
                    }
                }
                if let Some(dc) = self.slot(*matrix, grads) {
                    for ((drow, row), gv) in dc.chunks_exact_mut(p).zip(c.chunks_exact(p)).zip(g) {
                        for ((d, xv), cv) in drow.iter_mut().zip(x).zip(row) {
                            *d -= 2.0 * gv * (xv - cv);
                        }
                    }
                }
            }
            Op::PairwiseL1(matrix) => {
                let (n, p) = (self.shape(*matrix)[0], self.shape(*matrix)[1]);
                let c = self.data(*matrix);
                if let Some(dc) = self.slot(*matrix, grads) {
                    // Integer sign counts keep the result independent of row order.
                    for i in 0..n {
                        for k in 0..p {
                            let count: i64 = (0..n)
                                .map(|j| sign(c[i * p + k] - c[j * p + k]) as i64)
                                .sum();
                            dc[i * p + k] += g[0] * count as f64;
                        }
                    }
                }
            }
            Op::RowNormSum(matrix) => {
                let p = self.shape(*matrix)[1];
                let c = self.data(*matrix);
                if let Some(dc) = self.slot(*matrix, grads) {
                    for (drow, row) in dc.chunks_exact_mut(p).zip(c.chunks_exact(p)) {
                        let norm = dot(row, row).sqrt();
                        if norm > 0.0 {
                            axpy(g[0] / norm, row, drow);
                        }
                    }
                }
            }
            Op::CrossEntropyLogits {
                logits,
                label,
                probs,
            } => {
                if let Some(dz) = self.slot(*logits, grads) {
                    for (i, (d, p)) in dz.iter_mut().zip(probs).enumerate() {
                        let onehot = if i == *label { 1.0 } else { 0.0 };
                        *d += g[0] * (p - onehot);
                    }
                }
            }
            Op::Bce { input, target } => {
                let p = self.data(*input)[0].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                if let Some(dx) = self.slot(*input, grads) {
                    dx[0] += g[0] * (-target / p + (1.0 - target) / (1.0 - p));
                }
            }
        }
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when `v`
    /// does not need a gradient.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Max-shifted log-sum-exp; the sum does not depend on the order of `z`.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    max + ordered_sum(&mut exps).ln()
}

/// Sum of `terms` in ascending order; identical for every permutation.
pub fn ordered_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (d, s) in y.iter_mut().zip(x) {
        *d += alpha * s;
    }
}

/// `c ← a·b + beta·c` for an `m×k` by `k×n` product; operands are given as
/// `(data, row_stride, col_stride)` and `c` is dense row-major `m×n`.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    let (a, rsa, csa) = a;
    let (b, rsb, csb) = b;
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert_eq!(c.len(), m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
