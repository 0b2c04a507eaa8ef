use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::param::{ParamId, ParamStore};
use super::{Real, Tensor};

/// Additive logit penalty for blocked positions ahead of a softmax.
pub const MASK_PENALTY: f64 = -1e9;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<F> {
    Owned(Tensor<F>),
    Param(ParamId),
}

enum Op<F> {
    /// Input or parameter; nothing to propagate through.
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    MulConst(Var, Tensor<F>),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Embedding(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<F>,
        rstd: Vec<F>,
    },
    Nll {
        logits: Var,
        targets: Vec<usize>,
        active: Vec<bool>,
        probs: Tensor<F>,
    },
    Sum(Var),
}

struct Node<F> {
    value: Value<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A recording of one forward computation.
///
/// Nodes are appended in evaluation order, so walking them backwards is a
/// reverse topological order. Parameters are read from the borrowed store and
/// are never copied onto the tape.
pub struct Graph<'p, F: Real> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
    no_grad: bool,
}

/// Result of a backward pass: gradients of every parameter and every
/// grad-requiring leaf reached from the loss.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    params: BTreeMap<ParamId, Tensor<F>>,
    leaves: BTreeMap<Var, Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.params.iter().map(|(&k, v)| (k, v))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(&id)
    }

    pub fn wrt(&self, var: Var) -> Option<&Tensor<F>> {
        self.leaves.get(&var)
    }

    /// Elementwise sum of two gradient sets.
    pub fn merge(&mut self, other: Gradients<F>) {
        for (k, v) in other.params {
            match self.params.get_mut(&k) {
                Some(t) => t.add_assign(&v),
                None => {
                    self.params.insert(k, v);
                }
            }
        }
        for (k, v) in other.leaves {
            match self.leaves.get_mut(&k) {
                Some(t) => t.add_assign(&v),
                None => {
                    self.leaves.insert(k, v);
                }
            }
        }
    }

    pub fn empty() -> Self {
        Self {
            params: BTreeMap::new(),
            leaves: BTreeMap::new(),
        }
    }
}

fn shape_err<T>(op: &'static str, a: &[usize], b: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    })
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            no_grad: false,
        }
    }

    /// A graph that never records gradients, for decoding and evaluation.
    pub fn inference(params: &'p ParamStore<F>) -> Self {
        Self {
            no_grad: true,
            ..Self::new(params)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn store(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => &self.params.get(*id).value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients are not tracked.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported in [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// The parameter as a graph node. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: !self.no_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn rg2(&self, a: Var, b: Var) -> bool {
        self.requires_grad(a) || self.requires_grad(b)
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(name, ta.shape(), tb.shape());
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg2(a, b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if !ta.is_matrix() || tr.len() != ta.cols() || tr.rows() != 1 {
            return shape_err("add_row", ta.shape(), tr.shape());
        }
        let n = ta.cols();
        let mut out = ta.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += tr.data()[i % n];
        }
        let rg = self.rg2(a, row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = F::of(s);
        let out = self.value(a).map(|x| x * s);
        let rg = self.requires_grad(a);
        Ok(self.push(out, Op::Scale(a, s), rg))
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor<F>) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return shape_err("mul_const", ta.shape(), c.shape());
        }
        let data = ta.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, Op::MulConst(a, c), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return shape_err("matmul", ta.shape(), tb.shape());
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(&[m, n]);
        F::gemm(m, k, n, ta.data(), false, tb.data(), false, out.data_mut(), false);
        let rg = self.rg2(a, b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.cols() {
            return shape_err("matmul_t", ta.shape(), tb.shape());
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = Tensor::zeros(&[m, n]);
        F::gemm(m, k, n, ta.data(), false, tb.data(), true, out.data_mut(), false);
        let rg = self.rg2(a, b);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_matrix() {
            return shape_err("transpose", ta.shape(), &[]);
        }
        let out = ta.transpose();
        let rg = self.requires_grad(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let rg = self.requires_grad(a);
        Ok(self.push(out, Op::Sigmoid(a), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(F::tanh);
        let rg = self.requires_grad(a);
        Ok(self.push(out, Op::Tanh(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(F::zero()));
        let rg = self.requires_grad(a);
        Ok(self.push(out, Op::Relu(a), rg))
    }

    /// Row-wise softmax over the last dimension.
    ///
    /// `blocked[i]` (row-major, same element count as `a`) adds a `-1e9`
    /// penalty before normalization, which drives those weights to exactly
    /// zero. A row with every entry blocked is an error.
    pub fn softmax_rows(&mut self, a: Var, blocked: Option<&[bool]>) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols();
        if n == 0 {
            return shape_err("softmax_rows", ta.shape(), &[]);
        }
        if let Some(b) = blocked {
            if b.len() != ta.len() {
                return shape_err("softmax_rows", ta.shape(), &[b.len()]);
            }
        }
        let penalty = F::of(MASK_PENALTY);
        let mut out = ta.clone();
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            if let Some(b) = blocked {
                let mask = &b[r * n..(r + 1) * n];
                if mask.iter().all(|&m| m) {
                    return Err(Error::FullyMasked {
                        op: "softmax_rows",
                        row: r,
                    });
                }
                for (x, &m) in row.iter_mut().zip(mask) {
                    if m {
                        *x += penalty;
                    }
                }
            }
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x = *x / total;
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Concatenates matrices with equal row counts along the last dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.rows() != rows {
                return shape_err("concat_cols", self.value(parts[0]).shape(), t.shape());
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.cols() != cols {
                return shape_err("concat_rows", self.value(parts[0]).shape(), t.shape());
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_matrix() || start + len > ta.cols() {
            return shape_err("slice_cols", ta.shape(), &[start, len]);
        }
        let mut data = Vec::with_capacity(ta.rows() * len);
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.row_slice(r)[start..start + len]);
        }
        let out = Tensor::new(vec![ta.rows(), len], data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_matrix() || start + len > ta.rows() {
            return shape_err("slice_rows", ta.shape(), &[start, len]);
        }
        let c = ta.cols();
        let out = Tensor::new(vec![len, c], ta.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    /// Gathers rows of `table` (`V x d`) into a `len x d` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if !t.is_matrix() {
            return shape_err("embedding", t.shape(), &[]);
        }
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &id in ids {
            if id >= t.rows() {
                return Err(Error::IdOutOfRange { id, rows: t.rows() });
            }
            data.extend_from_slice(t.row_slice(id));
        }
        let out = Tensor::new(vec![ids.len(), t.cols()], data)?;
        let rg = self.requires_grad(table);
        Ok(self.push(out, Op::Embedding(table, ids.to_vec()), rg))
    }

    /// Normalizes each row to zero mean and unit variance (eps 1e-5), then
    /// applies `gain` and `bias` (both `1 x n`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        if !tx.is_matrix() || tg.len() != n || tb.len() != n {
            return shape_err("layer_norm", tx.shape(), tg.shape());
        }
        let nf = F::of(n as f64);
        let eps = F::of(LAYER_NORM_EPS);
        let mut xhat = tx.clone();
        let mut rstd = Vec::with_capacity(tx.rows());
        for row in xhat.data_mut().chunks_mut(n) {
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let r = F::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(n) {
            for ((v, &g), &b) in row.iter_mut().zip(tg.data()).zip(tb.data()) {
                *v = *v * g + b;
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`T x V`), over positions where `active` is true.
    pub fn nll_loss(&mut self, logits: Var, targets: &[usize], active: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, v) = (t.rows(), t.cols());
        if !t.is_matrix() || targets.len() != rows || active.len() != rows {
            return shape_err("nll_loss", t.shape(), &[targets.len(), active.len()]);
        }
        let count = active.iter().filter(|&&a| a).count();
        if count == 0 {
            return Err(Error::FullyMasked {
                op: "nll_loss",
                row: 0,
            });
        }
        let mut probs = t.clone();
        let mut total = 0.0f64;
        for (r, row) in probs.data_mut().chunks_mut(v).enumerate() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            if active[r] {
                let y = targets[r];
                if y >= v {
                    return Err(Error::IdOutOfRange { id: y, rows: v });
                }
                let logit = t.data()[r * v + y];
                total += (max + z.ln() - logit).as_f64();
            }
            for x in row.iter_mut() {
                *x = *x / z;
            }
        }
        let loss = Tensor::scalar(F::of(total / count as f64));
        let rg = self.requires_grad(logits);
        Ok(self.push(
            loss,
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                active: active.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: F = self.value(a).data().iter().copied().sum();
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    /// Mean of the given scalars.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        self.scale(acc, 1.0 / parts.len() as f64)
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut out = Gradients::empty();
        if !self.requires_grad(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::full(lt.shape(), F::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    match node.value {
                        Value::Param(id) => {
                            out.params.insert(id, g);
                        }
                        Value::Owned(_) => {
                            out.leaves.insert(Var(i), g);
                        }
                    }
                }
                op => self.propagate(Var(i), op, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn accum(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Adds into `v`'s gradient in place, creating a zero slot if needed.
    fn accum_with(
        &self,
        grads: &mut [Option<Tensor<F>>],
        v: Var,
        f: impl FnOnce(&mut Tensor<F>),
    ) {
        if !self.requires_grad(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
        f(slot);
    }

    fn propagate(&self, this: Var, op: &Op<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let y = self.value(this);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = elementwise(g, tb, |gi, bi| gi * bi);
                let gb = elementwise(g, ta, |gi, ai| gi * ai);
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::AddRow(a, row) => {
                self.accum(grads, *a, g.clone());
                let n = g.cols();
                self.accum_with(grads, *row, |t| {
                    for (i, &gi) in g.data().iter().enumerate() {
                        t.data_mut()[i % n] += gi;
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accum(grads, *a, g.map(|x| x * s));
            }
            Op::MulConst(a, c) => {
                self.accum(grads, *a, elementwise(g, c, |gi, ci| gi * ci));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = dC * B^T, dB = A^T * dC
                self.accum_with(grads, *a, |t| {
                    F::gemm(m, n, k, g.data(), false, tb.data(), true, t.data_mut(), true)
                });
                self.accum_with(grads, *b, |t| {
                    F::gemm(k, m, n, ta.data(), true, g.data(), false, t.data_mut(), true)
                });
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                // C = A B^T: dA = dC * B, dB = dC^T * A
                self.accum_with(grads, *a, |t| {
                    F::gemm(m, n, k, g.data(), false, tb.data(), false, t.data_mut(), true)
                });
                self.accum_with(grads, *b, |t| {
                    F::gemm(n, m, k, g.data(), true, ta.data(), false, t.data_mut(), true)
                });
            }
            Op::Transpose(a) => self.accum(grads, *a, g.transpose()),
            Op::Sigmoid(a) => {
                let ga = elementwise(g, y, |gi, yi| gi * yi * (F::one() - yi));
                self.accum(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = elementwise(g, y, |gi, yi| gi * (F::one() - yi * yi));
                self.accum(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = elementwise(g, y, |gi, yi| if yi > F::zero() { gi } else { F::zero() });
                self.accum(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let n = y.cols();
                let mut ga = g.clone();
                for (gr, yr) in ga.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: F = gr.iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum();
                    for (gi, &yi) in gr.iter_mut().zip(yr) {
                        *gi = yi * (*gi - dot);
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accum_with(grads, p, |t| {
                        for r in 0..g.rows() {
                            let src = &g.data()[r * total + offset..r * total + offset + w];
                            for (d, &s) in t.data_mut()[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut row = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    self.accum_with(grads, p, |t| {
                        for (d, &s) in t.data_mut().iter_mut().zip(&g.data()[row * c..(row + h) * c]) {
                            *d += s;
                        }
                    });
                    row += h;
                }
            }
            Op::SliceCols(a, start) => {
                let w = g.cols();
                let total = self.value(*a).cols();
                self.accum_with(grads, *a, |t| {
                    for r in 0..g.rows() {
                        let dst = &mut t.data_mut()[r * total + start..r * total + start + w];
                        for (d, &s) in dst.iter_mut().zip(g.row_slice(r)) {
                            *d += s;
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let c = g.cols();
                self.accum_with(grads, *a, |t| {
                    let dst = &mut t.data_mut()[start * c..start * c + g.len()];
                    for (d, &s) in dst.iter_mut().zip(g.data()) {
                        *d += s;
                    }
                });
            }
            Op::Embedding(table, ids) => {
                let d = g.cols();
                self.accum_with(grads, *table, |t| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut t.data_mut()[id * d..(id + 1) * d];
                        for (x, &s) in dst.iter_mut().zip(g.row_slice(r)) {
                            *x += s;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = g.cols();
                let nf = F::of(n as f64);
                let tg = self.value(*gain);
                self.accum_with(grads, *gain, |t| {
                    for (gr, xr) in g.data().chunks(n).zip(xhat.data().chunks(n)) {
                        for ((d, &gi), &xi) in t.data_mut().iter_mut().zip(gr).zip(xr) {
                            *d += gi * xi;
                        }
                    }
                });
                self.accum_with(grads, *bias, |t| {
                    for gr in g.data().chunks(n) {
                        for (d, &gi) in t.data_mut().iter_mut().zip(gr) {
                            *d += gi;
                        }
                    }
                });
                if self.requires_grad(*x) {
                    let mut gx = Tensor::zeros(g.shape());
                    let rows = gx
                        .data_mut()
                        .chunks_mut(n)
                        .zip(g.data().chunks(n))
                        .zip(xhat.data().chunks(n))
                        .zip(rstd);
                    for (((out, gr), xr), &r) in rows {
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..n {
                            let dxh = gr[j] * tg.data()[j];
                            s1 += dxh;
                            s2 += dxh * xr[j];
                        }
                        for j in 0..n {
                            let dxh = gr[j] * tg.data()[j];
                            out[j] = r / nf * (nf * dxh - s1 - xr[j] * s2);
                        }
                    }
                    self.accum(grads, *x, gx);
                }
            }
            Op::Nll {
                logits,
                targets,
                active,
                probs,
            } => {
                let v = probs.cols();
                let count = active.iter().filter(|&&a| a).count();
                let scale = g.item() / F::of(count as f64);
                self.accum_with(grads, *logits, |t| {
                    for (r, &on) in active.iter().enumerate() {
                        if !on {
                            continue;
                        }
                        let dst = &mut t.data_mut()[r * v..(r + 1) * v];
                        for (d, &p) in dst.iter_mut().zip(probs.row_slice(r)) {
                            *d += p * scale;
                        }
                        dst[targets[r]] -= scale;
                    }
                });
            }
            Op::Sum(a) => {
                let s = g.item();
                let shape = self.value(*a).shape().to_vec();
                self.accum(grads, *a, Tensor::full(&shape, s));
            }
        }
    }
}

fn elementwise<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}
