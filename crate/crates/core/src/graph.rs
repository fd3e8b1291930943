//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order, so the record list is already topologically sorted. [`Graph::backward`]
//! walks it once in reverse and accumulates exact gradients into every node
//! that depends on a differentiable leaf. Graphs are meant to be short-lived:
//! build one per forward pass, read the leaf gradients, drop it.
//!
//! Constants used by the ops: layer-norm epsilon [`LN_EPS`], exact erf GELU,
//! numerically stable softmax (max subtraction).

use crate::kernels::{self, ConvGeom};
use crate::tensor::{mismatch, Tensor, TensorError};

pub const LN_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, f64),
    ScaleBy(Var, Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Conv1d { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose1d { x: Var, w: Var, geom: ConvGeom },
    RepeatRows { x: Var, factor: usize },
    Sum(Var),
    Mean(Var),
    Select { x: Var, index: usize },
    /// Custom scalar loss with a precomputed gradient w.r.t. its input.
    Loss { x: Var, grad: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulScalar(..) => "mul_scalar",
            Op::ScaleBy(..) => "scale_by",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose(..) => "transpose",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Embedding { .. } => "embedding_lookup",
            Op::Conv1d { .. } => "conv1d",
            Op::ConvTranspose1d { .. } => "conv1d_transpose",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Select { .. } => "select",
            Op::Loss { .. } => "loss",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow(a, b) | Op::ScaleBy(a, b) => vec![*a, *b],
            Op::MulScalar(x, _)
            | Op::Transpose(x)
            | Op::Gelu(x)
            | Op::LogSoftmax(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { x, .. }
            | Op::Softmax { x, .. }
            | Op::RepeatRows { x, .. }
            | Op::Select { x, .. }
            | Op::Loss { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::Conv1d { x, w, .. } | Op::ConvTranspose1d { x, w, .. } => vec![*x, *w],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// `(outer, axis_len, inner)` strides for iterating one axis of `shape`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(op.name()));
        }
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        self.value(v)
            .dims2()
            .ok_or_else(|| mismatch(op, format!("expected a matrix, got {:?}", self.shape(v))))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", format!("{m}x{k} * {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op.name(), format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `[D]` vector to every row of a `[T, D]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (t, d) = self.dims2(x, "add_row")?;
        if self.shape(bias) != [d] {
            return Err(mismatch("add_row", format!("[{t}, {d}] + {:?}", self.shape(bias))));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(u, v)| u + v))
            .collect();
        self.push(Tensor::new(vec![t, d], data)?, Op::AddRow(x, bias))
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * s).collect())?;
        self.push(t, Op::MulScalar(x, s))
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).len() != 1 {
            return Err(mismatch("scale_by", format!("scale has shape {:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * sv).collect())?;
        self.push(t, Op::ScaleBy(x, s))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = inputs.first().ok_or_else(|| mismatch("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(mismatch("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", format!("{base:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let tv = self.value(*v);
                let chunk = tv.shape()[axis] * inner;
                data.extend_from_slice(&tv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(Tensor::new(shape, data)?, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(mismatch("slice", format!("[{start}, {}) of axis {axis} in {shape:?}", start + len)));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(Tensor::new(out_shape, data)?, Op::Slice { x, axis, start })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(x))
    }

    /// Normalizes each row of `[T, D]` to zero mean and unit variance, then
    /// applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (t, d) = self.dims2(x, "layer_norm")?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch(
                "layer_norm",
                format!("features {d}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(t * d);
        let mut rstd = Vec::with_capacity(t);
        let mut out = Vec::with_capacity(t * d);
        for row in self.value(x).data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.push(Tensor::new(vec![t, d], out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| kernels::gelu(*v)).collect())?;
        self.push(t, Op::Gelu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(mismatch("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * n * inner + k * inner + i;
                let m = (0..n).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (src[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[idx(k)] /= z;
                }
            }
        }
        self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis })
    }

    /// Row-wise log-softmax of a `[T, V]` matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let (t, v) = self.dims2(x, "log_softmax")?;
        let mut out = Vec::with_capacity(t * v);
        for row in self.value(x).data().chunks(v) {
            let lse = kernels::log_sum_exp(row);
            out.extend(row.iter().map(|z| z - lse));
        }
        self.push(Tensor::new(vec![t, v], out)?, Op::LogSoftmax(x))
    }

    /// Gathers rows of a `[V, D]` table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (v, d) = self.dims2(table, "embedding_lookup")?;
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(mismatch("embedding_lookup", format!("id {bad} outside table of {v}")));
        }
        let tt = self.value(table);
        let data = ids.iter().flat_map(|&i| tt.row(i).iter().copied()).collect();
        self.push(Tensor::new(vec![ids.len(), d], data)?, Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Unpadded strided convolution: `x [T, C_in]`, `w [k, C_in, C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, TensorError> {
        self.conv1d_padded(x, w, stride, 0)
    }

    /// Convolution with `pad` zero frames on each side.
    pub fn conv1d_padded(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let geom = self.conv_geom(x, w, stride, pad, "conv1d")?;
        let t_in = self.shape(x)[0];
        let t_out = geom.out_len(t_in);
        let mut out = vec![0.0; t_out * geom.c_out];
        kernels::conv1d_forward(self.value(x).data(), t_in, self.value(w).data(), geom, &mut out);
        self.push(Tensor::new(vec![t_out, geom.c_out], out)?, Op::Conv1d { x, w, geom })
    }

    /// Transposed convolution: output length `(T - 1) * stride + k`.
    pub fn conv1d_transpose(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, TensorError> {
        let geom = self.conv_geom(x, w, stride, 0, "conv1d_transpose")?;
        let t_in = self.shape(x)[0];
        let t_out = geom.transpose_out_len(t_in);
        let mut out = vec![0.0; t_out * geom.c_out];
        kernels::conv1d_transpose_forward(self.value(x).data(), t_in, self.value(w).data(), geom, &mut out);
        self.push(Tensor::new(vec![t_out, geom.c_out], out)?, Op::ConvTranspose1d { x, w, geom })
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize, op: &'static str) -> Result<ConvGeom, TensorError> {
        let (_, c_in) = self.dims2(x, op)?;
        let &[kernel, wc_in, c_out] = self.shape(w) else {
            return Err(mismatch(op, format!("kernel shape {:?} is not [k, C_in, C_out]", self.shape(w))));
        };
        if wc_in != c_in || stride == 0 || kernel == 0 {
            return Err(mismatch(
                op,
                format!("input channels {c_in}, kernel {:?}, stride {stride}", self.shape(w)),
            ));
        }
        Ok(ConvGeom { kernel, stride, pad, c_in, c_out })
    }

    /// Repeats every row of `[T, D]` `factor` times: `[T * factor, D]`.
    pub fn repeat_rows(&mut self, x: Var, factor: usize) -> Result<Var, TensorError> {
        let (t, d) = self.dims2(x, "repeat_rows")?;
        if factor == 0 {
            return Err(mismatch("repeat_rows", "factor 0"));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(t * factor * d);
        for r in 0..t {
            for _ in 0..factor {
                data.extend_from_slice(src.row(r));
            }
        }
        self.push(Tensor::new(vec![t * factor, d], data)?, Op::RepeatRows { x, factor })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if tx.is_empty() {
            return Err(mismatch("mean", "empty tensor"));
        }
        let m = tx.sum() / tx.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// The flat element `index` as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if index >= tx.len() {
            return Err(mismatch("select", format!("index {index} of {} values", tx.len())));
        }
        let v = tx.data()[index];
        self.push(Tensor::scalar(v), Op::Select { x, index })
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Registers a scalar loss computed outside the graph. `grad` is the
    /// derivative of `value` with respect to `x`.
    pub fn custom_loss(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var, TensorError> {
        if grad.shape() != self.shape(x) {
            return Err(mismatch("loss", format!("grad {:?} for input {:?}", grad.shape(), self.shape(x))));
        }
        if !grad.is_finite() {
            return Err(TensorError::NonFinite("loss"));
        }
        self.push(Tensor::scalar(value), Op::Loss { x, grad })
    }

    /// Populates gradients of `loss` with respect to every node.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        let slot = self.grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape));
        f(slot);
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor) {
        // Ops only read from `self.nodes`, so temporarily move the op out.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_a_bt_acc(g.data(), self.value(*b).data(), &mut da, m, n, k);
                    self.accum(*a, |s| s.data_mut().iter_mut().zip(&da).for_each(|(x, y)| *x += y));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_at_b_acc(self.value(*a).data(), g.data(), &mut db, m, k, n);
                    self.accum(*b, |s| s.data_mut().iter_mut().zip(&db).for_each(|(x, y)| *x += y));
                }
            }
            Op::Add(a, b) => {
                self.accum(*a, |s| s.add_assign(g));
                self.accum(*b, |s| s.add_assign(g));
            }
            Op::Sub(a, b) => {
                self.accum(*a, |s| s.add_assign(g));
                self.accum(*b, |s| s.add_scaled(g, -1.0));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d: Vec<f64> = g.data().iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    self.accum(*a, |s| s.data_mut().iter_mut().zip(&d).for_each(|(x, y)| *x += y));
                }
                if self.wants(*b) {
                    let d: Vec<f64> = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    self.accum(*b, |s| s.data_mut().iter_mut().zip(&d).for_each(|(x, y)| *x += y));
                }
            }
            Op::AddRow(x, bias) => {
                self.accum(*x, |s| s.add_assign(g));
                let d = self.shape(*bias)[0];
                self.accum(*bias, |s| {
                    for row in g.data().chunks(d) {
                        s.data_mut().iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::MulScalar(x, c) => self.accum(*x, |s| s.add_scaled(g, *c)),
            Op::ScaleBy(x, sc) => {
                let sv = self.value(*sc).item();
                self.accum(*x, |s| s.add_scaled(g, sv));
                if self.wants(*sc) {
                    let d = g.dot(self.value(*x));
                    self.accum(*sc, |s| s.data_mut()[0] += d);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let n = self.shape(*v)[*axis];
                    self.accum(*v, |s| {
                        let dst = s.data_mut();
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let chunk = &g.data()[src..src + n * inner];
                            dst[o * n * inner..(o + 1) * n * inner]
                                .iter_mut()
                                .zip(chunk)
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let len = g.shape()[*axis];
                self.accum(*x, |s| {
                    let dst = s.data_mut();
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        dst[base..base + len * inner]
                            .iter_mut()
                            .zip(&g.data()[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2().unwrap();
                self.accum(*x, |s| {
                    let dst = s.data_mut();
                    for i in 0..r {
                        for j in 0..c {
                            dst[i * c + j] += g.data()[j * r + i];
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.shape(*gamma)[0];
                let gm = self.value(*gamma).data().to_vec();
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, (dy, h)) in g.data().chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let dh: Vec<f64> = dy.iter().zip(&gm).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                    self.accum(*x, |s| s.data_mut().iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
                }
                self.accum(*gamma, |s| {
                    for (dy, h) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s.data_mut()[j] += dy[j] * h[j];
                        }
                    }
                });
                self.accum(*beta, |s| {
                    for dy in g.data().chunks(d) {
                        s.data_mut().iter_mut().zip(dy).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Gelu(x) => {
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, xv)| gv * kernels::gelu_grad(*xv))
                    .collect();
                self.accum(*x, |s| s.data_mut().iter_mut().zip(&d).for_each(|(a, b)| *a += b));
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[i].value.data();
                let (outer, n, inner) = axis_split(g.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for q in 0..inner {
                        let idx = |k: usize| o * n * inner + k * inner + q;
                        let dot: f64 = (0..n).map(|k| g.data()[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            dx[idx(k)] = y[idx(k)] * (g.data()[idx(k)] - dot);
                        }
                    }
                }
                self.accum(*x, |s| s.data_mut().iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
            }
            Op::LogSoftmax(x) => {
                let v = g.shape()[1];
                let y = self.nodes[i].value.data();
                let mut dx = vec![0.0; y.len()];
                for (r, dy) in g.data().chunks(v).enumerate() {
                    let total: f64 = dy.iter().sum();
                    for k in 0..v {
                        dx[r * v + k] = dy[k] - y[r * v + k].exp() * total;
                    }
                }
                self.accum(*x, |s| s.data_mut().iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
            }
            Op::Embedding { table, ids } => {
                let d = g.shape()[1];
                self.accum(*table, |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        s.data_mut()[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g.data()[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Conv1d { x, w, geom } => {
                let t_in = self.shape(*x)[0];
                let mut dx = self.wants(*x).then(|| vec![0.0; self.value(*x).len()]);
                let mut dw = self.wants(*w).then(|| vec![0.0; self.value(*w).len()]);
                kernels::conv1d_backward(
                    self.value(*x).data(),
                    t_in,
                    self.value(*w).data(),
                    *geom,
                    g.data(),
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.accum(*x, |s| s.data_mut().iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
                }
                if let Some(dw) = dw {
                    self.accum(*w, |s| s.data_mut().iter_mut().zip(&dw).for_each(|(a, b)| *a += b));
                }
            }
            Op::ConvTranspose1d { x, w, geom } => {
                let t_in = self.shape(*x)[0];
                let mut dx = self.wants(*x).then(|| vec![0.0; self.value(*x).len()]);
                let mut dw = self.wants(*w).then(|| vec![0.0; self.value(*w).len()]);
                kernels::conv1d_transpose_backward(
                    self.value(*x).data(),
                    t_in,
                    self.value(*w).data(),
                    *geom,
                    g.data(),
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.accum(*x, |s| s.data_mut().iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
                }
                if let Some(dw) = dw {
                    self.accum(*w, |s| s.data_mut().iter_mut().zip(&dw).for_each(|(a, b)| *a += b));
                }
            }
            Op::RepeatRows { x, factor } => {
                let d = g.shape()[1];
                self.accum(*x, |s| {
                    for (r, block) in g.data().chunks(d * factor).enumerate() {
                        for row in block.chunks(d) {
                            s.data_mut()[r * d..(r + 1) * d]
                                .iter_mut()
                                .zip(row)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accum(*x, |s| s.data_mut().iter_mut().for_each(|a| *a += gv));
            }
            Op::Mean(x) => {
                let gv = g.item() / self.value(*x).len() as f64;
                self.accum(*x, |s| s.data_mut().iter_mut().for_each(|a| *a += gv));
            }
            Op::Select { x, index } => {
                let gv = g.item();
                self.accum(*x, |s| s.data_mut()[*index] += gv);
            }
            Op::Loss { x, grad } => {
                let gv = g.item();
                self.accum(*x, |s| s.add_scaled(grad, gv));
            }
        }
        self.nodes[i].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 4], 3.5));
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 5.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn inner_product_grad_is_twice_x() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 5.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 10.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = g.mul_scalar(x, 2.0).unwrap();
        assert_eq!(g.backward(y), Err(TensorError::NotScalar(vec![2])));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { op: "matmul", .. })));
    }

    #[test]
    fn non_finite_values_are_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![f64::MAX]));
        assert_eq!(g.mul_scalar(a, 10.0), Err(TensorError::NonFinite("mul_scalar")));
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0]));
        let c = g.constant(Tensor::vector(vec![3.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.constant(Tensor::from_rows(&[vec![5.0], vec![6.0]]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(s).data(), &[5.0, 6.0]);
    }
}
