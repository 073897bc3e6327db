use std::fmt;
use std::sync::Arc;

use rand::Rng;

use super::sparse::SparseRows;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for [`Tape::custom`]: given the op inputs, its
/// output and the upstream gradient, returns one gradient per input.
pub type VjpFn = dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>> + Send + Sync;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    MulCol(Var, Var),
    MulMask(Var, Vec<f64>),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    SoftmaxRows(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    MeanRows(Var),
    SumAll(Var),
    GatherRows(Var, Vec<Option<usize>>),
    ScatterAddRows(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    SpMM(Arc<SparseRows>, Var),
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        dilation: usize,
    },
    TakeStep(Var, usize),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Option<Vec<f64>>,
        probs: Vec<f64>,
    },
    Custom(Vec<Var>, Arc<VjpFn>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order of the
/// computation DAG; [`Tape::backward`] walks it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
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

    /// Records an input. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Records an input without copying its storage.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient shape matches value")
        })
    }

    /// Gradient of `v`, or zeros when no path from the loss reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{} vs {}", shape_str(self.shape(a)), shape_str(self.shape(b))),
            ));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(op, format!("expected a matrix, got {}", shape_str(s)))),
        }
    }

    fn map_unary(&mut self, op_name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(op_name, out, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims("add_bias", x)?;
        if self.value(bias).len() != n {
            return Err(Error::dim(
                "add_bias",
                format!("{} with bias {}", shape_str(self.shape(x)), shape_str(self.shape(bias))),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("hadamard", out, Op::Hadamard(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary("scale", x, Op::Scale(x, c), |v| v * c)
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if factors.len() != xv.rows() || xv.ndim() == 0 {
            return Err(Error::dim(
                "scale_rows",
                format!("{} rows vs {} factors", xv.rows(), factors.len()),
            ));
        }
        let w = xv.row_width();
        let mut data = xv.data().to_vec();
        for (row, f) in data.chunks_mut(w).zip(&factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("scale_rows", out, Op::ScaleRows(x, factors), &[x])
    }

    /// Multiplies row `i` of `x` (`m × n`) by the entry `col[i]` of an `m × 1` tensor.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("mul_col", x)?;
        if self.value(col).len() != m {
            return Err(Error::dim(
                "mul_col",
                format!("{} with column {}", shape_str(self.shape(x)), shape_str(self.shape(col))),
            ));
        }
        let c = self.value(col).data();
        let mut data = self.value(x).data().to_vec();
        for (row, f) in data.chunks_mut(n).zip(c) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push("mul_col", out, Op::MulCol(x, col), &[x, col])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{} x {}", shape_str(self.shape(a)), shape_str(self.shape(b))),
            ));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", x)?;
        let out = Tensor::new(vec![n, m], transpose_raw(self.value(x).data(), m, n))?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map_unary("tanh", x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.map_unary("leaky_relu", x, Op::LeakyRelu(x, slope), |v| {
            if v > 0.0 {
                v
            } else {
                slope * v
            }
        })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("softmax_rows", x)?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push("softmax_rows", out, Op::SoftmaxRows(x), &[x])
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() || axis > 1 {
            return Err(Error::dim("concat", format!("{} inputs on axis {axis}", inputs.len())));
        }
        let dims = inputs
            .iter()
            .map(|&v| self.matrix_dims("concat", v))
            .collect::<Result<Vec<_>>>()?;
        let fixed = if axis == 0 { dims[0].1 } else { dims[0].0 };
        if dims.iter().any(|&(r, c)| if axis == 0 { c != fixed } else { r != fixed }) {
            let shapes: Vec<_> = dims.iter().map(|&(r, c)| format!("[{r}, {c}]")).collect();
            return Err(Error::dim("concat", format!("axis {axis}: {}", shapes.join(" | "))));
        }
        let out = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let data = inputs.iter().flat_map(|&v| self.value(v).data().iter().copied()).collect();
            Tensor::new(vec![rows, fixed], data)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(fixed * cols);
            for i in 0..fixed {
                for &v in inputs {
                    data.extend_from_slice(self.value(v).row(i));
                }
            }
            Tensor::new(vec![fixed, cols], data)?
        };
        self.push(
            "concat",
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Column means of an `m × n` matrix, as `1 × n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("mean_rows", x)?;
        let mut acc = vec![0.0; n];
        for row in self.value(x).data().chunks(n) {
            acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= m as f64);
        let out = Tensor::new(vec![1, n], acc)?;
        self.push("mean_rows", out, Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("dropout", out, Op::MulMask(x, mask), &[x])
    }

    /// Selects leading-axis slices; `None` yields a zero slice.
    pub fn gather_rows(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() == 0 || index.is_empty() {
            return Err(Error::dim("gather_rows", "needs a non-scalar source and a non-empty index"));
        }
        let w = xv.row_width();
        let rows = xv.rows();
        let mut data = Vec::with_capacity(index.len() * w);
        for idx in &index {
            match *idx {
                Some(i) if i < rows => data.extend_from_slice(xv.row(i)),
                Some(i) => {
                    return Err(Error::dim("gather_rows", format!("row {i} out of {rows}")));
                }
                None => data.extend(std::iter::repeat(0.0).take(w)),
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = index.len();
        let out = Tensor::new(shape, data)?;
        self.push("gather_rows", out, Op::GatherRows(x, index), &[x])
    }

    /// Sums row `e` of `x` into output row `target[e]`.
    pub fn scatter_add_rows(&mut self, x: Var, target: Vec<usize>, out_rows: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() == 0 || target.len() != xv.rows() || target.iter().any(|&t| t >= out_rows) {
            return Err(Error::dim(
                "scatter_add_rows",
                format!("{} rows into {out_rows} targets", xv.rows()),
            ));
        }
        let w = xv.row_width();
        let mut data = vec![0.0; out_rows * w];
        for (e, &t) in target.iter().enumerate() {
            data[t * w..(t + 1) * w]
                .iter_mut()
                .zip(xv.row(e))
                .for_each(|(o, v)| *o += v);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = out_rows;
        let out = Tensor::new(shape, data)?;
        self.push("scatter_add_rows", out, Op::ScatterAddRows(x, target), &[x])
    }

    /// Softmax over contiguous segments of a flat score vector.
    /// `offsets` has one more entry than there are segments.
    pub fn segment_softmax(&mut self, x: Var, offsets: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if offsets.first() != Some(&0)
            || offsets.last() != Some(&xv.len())
            || offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::dim("segment_softmax", "offsets do not cover the input"));
        }
        let mut data = xv.data().to_vec();
        for w in offsets.windows(2) {
            softmax_in_place(&mut data[w[0]..w[1]]);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("segment_softmax", out, Op::SegmentSoftmax(x, offsets), &[x])
    }

    /// Constant sparse matrix times dense matrix.
    pub fn spmm(&mut self, a: Arc<SparseRows>, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("spmm", x)?;
        if a.n_cols() != m {
            return Err(Error::dim(
                "spmm",
                format!("[{}, {}] x [{m}, {n}]", a.n_rows(), a.n_cols()),
            ));
        }
        let xv = self.value(x).data();
        let mut data = vec![0.0; a.n_rows() * n];
        for i in 0..a.n_rows() {
            let out = &mut data[i * n..(i + 1) * n];
            for (j, w) in a.row(i) {
                out.iter_mut()
                    .zip(&xv[j * n..(j + 1) * n])
                    .for_each(|(o, v)| *o += w * v);
            }
        }
        let out = Tensor::new(vec![a.n_rows(), n], data)?;
        self.push("spmm", out, Op::SpMM(a, x), &[x])
    }

    /// Causal 1-D convolution over the time axis of `x: [N, S, D_in]` with
    /// `kernel: [w, D_in, D_out]` and `bias: [D_out]`.
    ///
    /// Kernel tap `j` reads time step `t - (w - 1 - j) * dilation`; steps
    /// before the start of the sequence read zeros.
    pub fn conv1d_causal(&mut self, x: Var, kernel: Var, bias: Var, dilation: usize) -> Result<Var> {
        let (n, s, din) = match *self.shape(x) {
            [n, s, d] => (n, s, d),
            ref sh => return Err(Error::dim("conv1d_causal", format!("input {}", shape_str(sh)))),
        };
        let (w, kin, dout) = match *self.shape(kernel) {
            [w, i, o] => (w, i, o),
            ref sh => return Err(Error::dim("conv1d_causal", format!("kernel {}", shape_str(sh)))),
        };
        if kin != din || self.value(bias).len() != dout {
            return Err(Error::dim(
                "conv1d_causal",
                format!(
                    "input {} kernel {} bias {}",
                    shape_str(self.shape(x)),
                    shape_str(self.shape(kernel)),
                    shape_str(self.shape(bias))
                ),
            ));
        }
        if w > s {
            return Err(Error::Config(format!("kernel width {w} exceeds sequence length {s}")));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be at least 1".into()));
        }
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let bv = self.value(bias).data();
        let mut data = vec![0.0; n * s * dout];
        for b in 0..n {
            for t in 0..s {
                let out = &mut data[(b * s + t) * dout..(b * s + t + 1) * dout];
                out.copy_from_slice(bv);
                for j in 0..w {
                    let back = (w - 1 - j) * dilation;
                    if back > t {
                        continue;
                    }
                    let src = &xv[(b * s + t - back) * din..(b * s + t - back + 1) * din];
                    for (i, &xi) in src.iter().enumerate() {
                        let krow = &kv[(j * din + i) * dout..(j * din + i + 1) * dout];
                        out.iter_mut().zip(krow).for_each(|(o, k)| *o += xi * k);
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, s, dout], data)?;
        self.push(
            "conv1d_causal",
            out,
            Op::Conv1d {
                x,
                kernel,
                bias,
                dilation,
            },
            &[x, kernel, bias],
        )
    }

    /// Slice `[:, step, :]` of an `[N, S, D]` tensor.
    pub fn take_step(&mut self, x: Var, step: usize) -> Result<Var> {
        let (n, s, d) = match *self.shape(x) {
            [n, s, d] if step < s => (n, s, d),
            ref sh => return Err(Error::dim("take_step", format!("step {step} of {}", shape_str(sh)))),
        };
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(n * d);
        for b in 0..n {
            data.extend_from_slice(&xv[(b * s + step) * d..(b * s + step + 1) * d]);
        }
        let out = Tensor::new(vec![n, d], data)?;
        self.push("take_step", out, Op::TakeStep(x, step), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Mean over rows of the (optionally class-weighted) negative
    /// log-softmax of the true class.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], class_weights: Option<&[f64]>) -> Result<Var> {
        let (m, c) = self.matrix_dims("cross_entropy", logits)?;
        if labels.len() != m {
            return Err(Error::dim("cross_entropy", format!("{m} rows vs {} labels", labels.len())));
        }
        if let Some(w) = class_weights {
            if w.len() != c {
                return Err(Error::dim("cross_entropy", format!("{c} classes vs {} weights", w.len())));
            }
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, (logit_row, &y)) in probs.chunks_mut(c).zip(labels).enumerate() {
            if y >= c {
                return Err(Error::data(Some(row), format!("label {y} outside [0, {c})")));
            }
            let max = logit_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logit_row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let weight = class_weights.map_or(1.0, |w| w[y]);
            loss += weight * (lse - logit_row[y]);
            logit_row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        loss /= m as f64;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: class_weights.map(<[f64]>::to_vec),
                probs,
            },
            &[logits],
        )
    }

    /// Records an op whose forward value is computed by the caller and
    /// whose backward rule is `vjp`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, vjp: Arc<VjpFn>) -> Result<Var> {
        self.push("custom", value, Op::Custom(inputs.to_vec(), vjp), inputs)
    }

    /// Reverse pass from a scalar. Gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {}",
                shape_str(self.shape(loss))
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let nodes = &self.nodes;
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, &mut |s| axpy(s, g, 1.0));
                send(*b, &mut |s| axpy(s, g, 1.0));
            }
            Op::Sub(a, b) => {
                send(*a, &mut |s| axpy(s, g, 1.0));
                send(*b, &mut |s| axpy(s, g, -1.0));
            }
            Op::AddBias(x, b) => {
                send(*x, &mut |s| axpy(s, g, 1.0));
                let n = nodes[b.0].value.len();
                send(*b, &mut |s| {
                    for row in g.chunks(n) {
                        axpy(s, row, 1.0);
                    }
                });
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, &mut |s| s.iter_mut().zip(g).zip(bv).for_each(|((s, g), y)| *s += g * y));
                send(*b, &mut |s| s.iter_mut().zip(g).zip(av).for_each(|((s, g), x)| *s += g * x));
            }
            Op::Scale(x, c) => send(*x, &mut |s| axpy(s, g, *c)),
            Op::ScaleRows(x, f) => {
                let w = nodes[x.0].value.row_width();
                send(*x, &mut |s| {
                    for ((srow, grow), fac) in s.chunks_mut(w).zip(g.chunks(w)).zip(f) {
                        axpy(srow, grow, *fac);
                    }
                });
            }
            Op::MulCol(x, c) => {
                let n = nodes[x.0].value.row_width();
                let (xv, cv) = (val(*x), val(*c));
                send(*x, &mut |s| {
                    for ((srow, grow), fac) in s.chunks_mut(n).zip(g.chunks(n)).zip(cv) {
                        axpy(srow, grow, *fac);
                    }
                });
                send(*c, &mut |s| {
                    for ((sv, grow), xrow) in s.iter_mut().zip(g.chunks(n)).zip(xv.chunks(n)) {
                        *sv += dot(grow, xrow);
                    }
                });
            }
            Op::MulMask(x, mask) => {
                send(*x, &mut |s| s.iter_mut().zip(g).zip(mask).for_each(|((s, g), m)| *s += g * m));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                let (av, bv) = (val(*a), val(*b));
                send(*a, &mut |s| {
                    // dA = G Bᵀ
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            s[r * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                send(*b, &mut |s| {
                    // dB = Aᵀ G
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let a_rp = av[r * k + p];
                            if a_rp != 0.0 {
                                axpy(&mut s[p * n..(p + 1) * n], grow, a_rp);
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let gt = transpose_raw(g, n, m);
                send(*x, &mut |s| axpy(s, &gt, 1.0));
            }
            Op::Sigmoid(x) => {
                send(*x, &mut |s| s.iter_mut().zip(g).zip(out).for_each(|((s, g), y)| *s += g * y * (1.0 - y)));
            }
            Op::Tanh(x) => {
                send(*x, &mut |s| s.iter_mut().zip(g).zip(out).for_each(|((s, g), y)| *s += g * (1.0 - y * y)));
            }
            Op::Relu(x) => {
                let xv = val(*x);
                send(*x, &mut |s| {
                    s.iter_mut().zip(g).zip(xv).for_each(|((s, g), v)| {
                        if *v > 0.0 {
                            *s += g
                        }
                    })
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x);
                send(*x, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(xv)
                        .for_each(|((s, g), v)| *s += if *v > 0.0 { *g } else { slope * g })
                });
            }
            Op::SoftmaxRows(x) => {
                let n = nodes[x.0].value.shape()[1];
                send(*x, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        softmax_vjp(srow, grow, yrow);
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &v in inputs {
                        let len = nodes[v.0].value.len();
                        send(v, &mut |s| axpy(s, &g[off..off + len], 1.0));
                        off += len;
                    }
                } else {
                    let total = node.value.shape()[1];
                    let mut col = 0;
                    for &v in inputs {
                        let w = nodes[v.0].value.shape()[1];
                        send(v, &mut |s| {
                            for (srow, grow) in s.chunks_mut(w).zip(g.chunks(total)) {
                                axpy(srow, &grow[col..col + w], 1.0);
                            }
                        });
                        col += w;
                    }
                }
            }
            Op::MeanRows(x) => {
                let m = nodes[x.0].value.shape()[0];
                send(*x, &mut |s| {
                    for srow in s.chunks_mut(g.len()) {
                        axpy(srow, g, 1.0 / m as f64);
                    }
                });
            }
            Op::SumAll(x) => send(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::GatherRows(x, index) => {
                let w = nodes[x.0].value.row_width();
                send(*x, &mut |s| {
                    for (e, idx) in index.iter().enumerate() {
                        if let Some(r) = *idx {
                            axpy(&mut s[r * w..(r + 1) * w], &g[e * w..(e + 1) * w], 1.0);
                        }
                    }
                });
            }
            Op::ScatterAddRows(x, target) => {
                let w = nodes[x.0].value.row_width();
                send(*x, &mut |s| {
                    for (e, &t) in target.iter().enumerate() {
                        axpy(&mut s[e * w..(e + 1) * w], &g[t * w..(t + 1) * w], 1.0);
                    }
                });
            }
            Op::SegmentSoftmax(x, offsets) => {
                send(*x, &mut |s| {
                    for w in offsets.windows(2) {
                        let r = w[0]..w[1];
                        softmax_vjp(&mut s[r.clone()], &g[r.clone()], &out[r]);
                    }
                });
            }
            Op::SpMM(a, x) => {
                let n = nodes[x.0].value.shape()[1];
                send(*x, &mut |s| {
                    for i in 0..a.n_rows() {
                        let grow = &g[i * n..(i + 1) * n];
                        for (j, w) in a.row(i) {
                            axpy(&mut s[j * n..(j + 1) * n], grow, w);
                        }
                    }
                });
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                dilation,
            } => {
                let (n, s_len, din) = {
                    let sh = nodes[x.0].value.shape();
                    (sh[0], sh[1], sh[2])
                };
                let (w, dout) = {
                    let sh = nodes[kernel.0].value.shape();
                    (sh[0], sh[2])
                };
                let (xv, kv) = (val(*x), val(*kernel));
                let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for b in 0..n {
                        for t in 0..s_len {
                            for j in 0..w {
                                let back = (w - 1 - j) * dilation;
                                if back <= t {
                                    f(b * s_len + t, b * s_len + t - back, j);
                                }
                            }
                        }
                    }
                };
                send(*x, &mut |s| {
                    taps(&mut |out_pos, in_pos, j| {
                        let grow = &g[out_pos * dout..(out_pos + 1) * dout];
                        for i in 0..din {
                            s[in_pos * din + i] += dot(grow, &kv[(j * din + i) * dout..(j * din + i + 1) * dout]);
                        }
                    });
                });
                send(*kernel, &mut |s| {
                    taps(&mut |out_pos, in_pos, j| {
                        let grow = &g[out_pos * dout..(out_pos + 1) * dout];
                        for i in 0..din {
                            let xi = xv[in_pos * din + i];
                            axpy(&mut s[(j * din + i) * dout..(j * din + i + 1) * dout], grow, xi);
                        }
                    });
                });
                send(*bias, &mut |s| {
                    for grow in g.chunks(dout) {
                        axpy(s, grow, 1.0);
                    }
                });
            }
            Op::TakeStep(x, step) => {
                let sh = nodes[x.0].value.shape();
                let (s_len, d) = (sh[1], sh[2]);
                send(*x, &mut |s| {
                    for (b, grow) in g.chunks(d).enumerate() {
                        axpy(&mut s[(b * s_len + step) * d..(b * s_len + step + 1) * d], grow, 1.0);
                    }
                });
            }
            Op::Reshape(x) => send(*x, &mut |s| axpy(s, g, 1.0)),
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                let c = nodes[logits.0].value.shape()[1];
                let m = labels.len() as f64;
                send(*logits, &mut |s| {
                    for ((srow, prow), &y) in s.chunks_mut(c).zip(probs.chunks(c)).zip(labels) {
                        let wy = weights.as_ref().map_or(1.0, |w| w[y]);
                        let f = g[0] * wy / m;
                        for (k, (sv, p)) in srow.iter_mut().zip(prow).enumerate() {
                            let onehot = if k == y { 1.0 } else { 0.0 };
                            *sv += f * (p - onehot);
                        }
                    }
                });
            }
            Op::Custom(inputs, vjp) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &*nodes[v.0].value).collect();
                let grads = vjp(&ins, &node.value, g);
                for (&v, gv) in inputs.iter().zip(grads) {
                    send(v, &mut |s| axpy(s, &gv, 1.0));
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn softmax_vjp(s: &mut [f64], g: &[f64], y: &[f64]) {
    let inner = dot(g, y);
    s.iter_mut()
        .zip(g)
        .zip(y)
        .for_each(|((s, g), y)| *s += y * (g - inner));
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy(y: &mut [f64], x: &[f64], alpha: f64) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip != 0.0 {
                axpy(orow, &b[p * n..(p + 1) * n], a_ip);
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}
