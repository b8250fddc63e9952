//! Reverse-mode differentiation by operation recording.
//!
//! Every operation appends a node holding its value and, when gradients are
//! being recorded, the information its backward rule needs. Nodes are
//! appended in evaluation order so replaying them in reverse is a valid
//! topological order.

use std::borrow::Cow;

use rand::Rng;

use super::kernels::{self, gemm, LayerNormCache};
use super::{Gradients, NumericsError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { src: Var, start: usize },
    SliceRows { src: Var, start: usize },
    Gather { table: Var, indices: Vec<usize> },
    MaskedSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, cache: LayerNormCache },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    MulConst(Var, Vec<f64>),
    ScaleCols(Var, Vec<f64>),
    Sum(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one forward/backward pass.
///
/// A tape borrows its [`ParamStore`] immutably, so parameters cannot change
/// while a pass is in flight. With `grad_enabled == false` nothing needed for
/// backward is kept and [`Tape::backward`] is rejected.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
    fully_masked_rows: usize,
    softmax_outputs: Vec<Var>,
    grads: Vec<Option<Vec<f64>>>,
}

impl<'p> Tape<'p> {
    /// A tape with no parameter store; leaves are created explicitly.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
            grad_enabled: true,
            fully_masked_rows: 0,
            softmax_outputs: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore, grad_enabled: bool) -> Self {
        Self {
            params: Some(params),
            param_vars: vec![None; params.len()],
            grad_enabled,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Rows of every masked softmax so far that had no unblocked entry.
    pub fn fully_masked_rows(&self) -> usize {
        self.fully_masked_rows
    }

    /// Sign of every ReLU input recorded so far, in tape order. Two points
    /// with equal patterns lie in the same smooth piece of the function.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(a) = n.op {
                out.extend(self.value(a).data().iter().map(|&x| x > 0.0));
            }
        }
        out
    }

    /// Outputs of every masked softmax recorded on this tape.
    pub fn softmax_outputs(&self) -> &[Var] {
        &self.softmax_outputs
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// A free leaf; gradients are kept for it when `requires_grad`.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, requires_grad)
    }

    /// The node for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.index()).copied().flatten() {
            return v;
        }
        let store = self.params.expect("tape has no parameter store");
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Param, true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = kernels::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = kernels::transpose(self.value(a))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Cow::Owned(out), Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_parts(self.value(a).shape().to_vec(), data, "add");
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), rg))
    }

    /// Adds a row vector (`[n]` or `[1×n]`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (av, rv) = (self.value(a), self.value(row));
        let n = av.cols();
        if rv.len() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                left: av.shape().to_vec(),
                right: rv.shape().to_vec(),
            });
        }
        let r = rv.data();
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + r[i % n])
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data, "add_row");
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(Cow::Owned(out), Op::AddRow(a, row), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_parts(self.value(a).shape().to_vec(), data, "mul");
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * s).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data, "scale");
        let rg = self.any_grad(&[a]);
        self.push(Cow::Owned(out), Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data, "relu");
        let rg = self.any_grad(&[a]);
        self.push(Cow::Owned(out), Op::Relu(a), rg)
    }

    /// Concatenation along the last axis of 2-D values with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = self.value(parts[0]).rows();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).rows() != rows) {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_cols",
                left: self.value(parts[0]).shape().to_vec(),
                right: self.value(*bad).shape().to_vec(),
            });
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let out = Tensor::from_parts(vec![rows, total], data, "concat_cols");
        let rg = self.any_grad(parts);
        Ok(self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks 2-D values with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let cols = self.value(parts[0]).cols();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).cols() != cols) {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_rows",
                left: self.value(parts[0]).shape().to_vec(),
                right: self.value(*bad).shape().to_vec(),
            });
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let rows = data.len() / cols;
        let out = Tensor::from_parts(vec![rows, cols], data, "concat_rows");
        let rg = self.any_grad(parts);
        Ok(self.push(Cow::Owned(out), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let cols = av.cols();
        if width == 0 || start + width > cols {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_cols",
                left: av.shape().to_vec(),
                right: vec![start, width],
            });
        }
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&av.row_slice(r)[start..start + width]);
        }
        let out = Tensor::from_parts(vec![rows, width], data, "slice_cols");
        let rg = self.any_grad(&[a]);
        Ok(self.push(Cow::Owned(out), Op::SliceCols { src: a, start }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let cols = av.cols();
        if count == 0 || start + count > av.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_rows",
                left: av.shape().to_vec(),
                right: vec![start, count],
            });
        }
        let data = av.data()[start * cols..(start + count) * cols].to_vec();
        let out = Tensor::from_parts(vec![count, cols], data, "slice_rows");
        let rg = self.any_grad(&[a]);
        Ok(self.push(Cow::Owned(out), Op::SliceRows { src: a, start }, rg))
    }

    /// Embedding lookup: row `indices[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let tv = self.value(table);
        let cols = tv.cols();
        if indices.is_empty() {
            return Err(NumericsError::InvalidArgument("gather_rows needs at least one index"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= tv.rows()) {
            return Err(NumericsError::TargetOutOfRange {
                target: bad,
                classes: tv.rows(),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(tv.row_slice(i));
        }
        let out = Tensor::from_parts(vec![indices.len(), cols], data, "gather_rows");
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Cow::Owned(out),
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax over the last axis after adding a constant 0 / blocked mask.
    pub fn masked_softmax(&mut self, scores: Var, mask: Option<&Tensor>) -> Result<Var, NumericsError> {
        let (out, blocked) = kernels::masked_softmax(self.value(scores), mask)?;
        self.fully_masked_rows += blocked;
        let rg = self.any_grad(&[scores]);
        let v = self.push(Cow::Owned(out), Op::MaskedSoftmax(scores), rg);
        self.softmax_outputs.push(v);
        Ok(v)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let (out, cache) =
            kernels::layer_norm_forward(self.value(x), self.value(gain), self.value(bias), eps)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of row-wise softmax against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let (loss, probs) = kernels::cross_entropy_forward(self.value(logits), targets)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Inverted dropout. Evaluation mode and rate 0 return `x` itself.
    pub fn dropout<R: Rng>(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var, NumericsError> {
        check_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        Ok(self.mul_const(x, mask))
    }

    /// Inverted dropout with one mask over the last axis shared by all rows.
    pub fn dropout_shared_cols<R: Rng>(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var, NumericsError> {
        check_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).cols())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let n = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * mask[i % n])
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data, "dropout_shared_cols");
        let rg = self.any_grad(&[x]);
        Ok(self.push(Cow::Owned(out), Op::ScaleCols(x, mask), rg))
    }

    /// Element-wise product with a constant buffer.
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), factors.len(), "mul_const length mismatch");
        let data = xv.data().iter().zip(&factors).map(|(a, b)| a * b).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data, "mul_const");
        let rg = self.any_grad(&[x]);
        self.push(Cow::Owned(out), Op::MulConst(x, factors), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(a), rg)
    }

    /// Mean of a list of scalars.
    pub fn mean_of(&mut self, scalars: &[Var]) -> Result<Var, NumericsError> {
        if scalars.is_empty() {
            return Err(NumericsError::InvalidArgument("mean of an empty list"));
        }
        let stacked = self.concat_rows(scalars)?;
        let total = self.sum(stacked);
        Ok(self.scale(total, 1.0 / scalars.len() as f64))
    }

    /// Reverse pass from a scalar. Gradients accumulate across shared uses.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if !self.grad_enabled {
            return Err(NumericsError::InvalidArgument("backward on a tape without gradients"));
        }
        if self.value(loss).len() != 1 {
            return Err(NumericsError::InvalidArgument("backward requires a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients of the last backward pass.
    pub fn param_grads(&self) -> Gradients {
        let mut out = Gradients::new(self.param_vars.len());
        for (i, var) in self.param_vars.iter().enumerate() {
            if let Some(g) = var.and_then(|v| self.grad(v)) {
                out.set(ParamId::new(i), g.to_vec());
            }
        }
        out
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if needs(*a) {
                    let da = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, bv.data(), true, da, true);
                }
                if needs(*b) {
                    let db = slot(grads, *b, k * n);
                    gemm(k, m, n, av.data(), true, g, false, db, true);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if needs(*a) {
                    let da = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, bv.data(), false, da, true);
                }
                if needs(*b) {
                    let db = slot(grads, *b, n * k);
                    gemm(n, m, k, g, true, av.data(), false, db, true);
                }
            }
            Op::Transpose(a) => {
                let av = &nodes[a.0].value;
                let (r, c) = (av.rows(), av.cols());
                let da = slot(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(*v) {
                        axpy(slot(grads, *v, g.len()), g, 1.0);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    axpy(slot(grads, *a, g.len()), g, 1.0);
                }
                if needs(*row) {
                    let n = nodes[row.0].value.len();
                    let dr = slot(grads, *row, n);
                    for (idx, gv) in g.iter().enumerate() {
                        dr[idx % n] += gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if needs(*a) {
                    let da = slot(grads, *a, g.len());
                    for ((d, gv), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if needs(*b) {
                    let db = slot(grads, *b, g.len());
                    for ((d, gv), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale(a, s) => axpy(slot(grads, *a, g.len()), g, *s),
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                let da = slot(grads, *a, g.len());
                for ((d, gv), xv) in da.iter_mut().zip(g).zip(x) {
                    if *xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let rows = nodes[i].value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    if needs(*p) {
                        let dp = slot(grads, *p, rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            axpy(&mut dp[r * w..(r + 1) * w], src, 1.0);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    if needs(*p) {
                        axpy(slot(grads, *p, n), &g[offset..offset + n], 1.0);
                    }
                    offset += n;
                }
            }
            Op::SliceCols { src, start } => {
                let sv = &nodes[src.0].value;
                let (rows, cols) = (sv.rows(), sv.cols());
                let w = nodes[i].value.cols();
                let ds = slot(grads, *src, rows * cols);
                for r in 0..rows {
                    axpy(
                        &mut ds[r * cols + start..r * cols + start + w],
                        &g[r * w..(r + 1) * w],
                        1.0,
                    );
                }
            }
            Op::SliceRows { src, start } => {
                let sv = &nodes[src.0].value;
                let cols = sv.cols();
                let ds = slot(grads, *src, sv.len());
                axpy(&mut ds[start * cols..start * cols + g.len()], g, 1.0);
            }
            Op::Gather { table, indices } => {
                let tv = &nodes[table.0].value;
                let cols = tv.cols();
                let dt = slot(grads, *table, tv.len());
                for (r, &ix) in indices.iter().enumerate() {
                    axpy(&mut dt[ix * cols..(ix + 1) * cols], &g[r * cols..(r + 1) * cols], 1.0);
                }
            }
            Op::MaskedSoftmax(a) => {
                let y = &nodes[i].value;
                let cols = y.cols();
                let da = slot(grads, *a, y.len());
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        da[r * cols + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            } => {
                let xv = &nodes[x.0].value;
                let d = xv.cols();
                let rows = xv.rows();
                let gv = nodes[gain.0].value.data();
                if needs(*gain) {
                    let dg = slot(grads, *gain, d);
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * cache.normalized[r * d + j];
                        }
                    }
                }
                if needs(*bias) {
                    let db = slot(grads, *bias, d);
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                }
                if needs(*x) {
                    let dx = slot(grads, *x, rows * d);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let xh = &cache.normalized[r * d..(r + 1) * d];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gv[j];
                            sum_d += dxhat[j];
                            sum_dx += dxhat[j] * xh[j];
                        }
                        let istd = cache.inv_std[r];
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += istd * (dxhat[j] - inv_d * sum_d - xh[j] * inv_d * sum_dx);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = &nodes[logits.0].value;
                let c = lv.cols();
                let n = targets.len();
                let scale = g[0] / n as f64;
                let dl = slot(grads, *logits, lv.len());
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::MulConst(a, factors) => {
                let da = slot(grads, *a, g.len());
                for ((d, gv), f) in da.iter_mut().zip(g).zip(factors) {
                    *d += gv * f;
                }
            }
            Op::ScaleCols(a, factors) => {
                let n = factors.len();
                let da = slot(grads, *a, g.len());
                for (idx, (d, gv)) in da.iter_mut().zip(g).enumerate() {
                    *d += gv * factors[idx % n];
                }
            }
            Op::Sum(a) => {
                let n = nodes[a.0].value.len();
                let da = slot(grads, *a, n);
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
        }
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_rate(rate: f64) -> Result<(), NumericsError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NumericsError::InvalidArgument("dropout rate must lie in [0, 1)"));
    }
    Ok(())
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
