//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order of the computation graph. [`Tape::backward`] walks the
//! records in reverse and never mutates the tape, so it can be called any
//! number of times on the same loss.

use crate::eig::sym_eig;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log2(Var),
    Sqrt(Var),
    Square(Var),
    Powf(Var, f64),
    ClampMin(Var, f64),
    Sum(Var),
    SumRows(Var),
    MaxRows(Var, Vec<usize>),
    Trace(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    PairwiseSqDist(Var),
    EigValsh(Var, Tensor),
    CrossEntropy(Var, Vec<usize>, Tensor),
    SumCols(Var),
    ScaleRows(Var, Var),
    BlockMatMul(Var, Var, Segments),
    BlockGram(Var, Segments),
    SegmentSum(Var, Segments, bool),
    SegmentMax(Var, Segments, Vec<usize>),
}

/// Row ranges of several graphs stacked into one tensor.
///
/// Per-graph node blocks occupy consecutive rows; per-graph `n×n` blocks are
/// stored as `Σn × n_max` with block `g` in the leading `n_g` columns of its
/// rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_sizes(sizes: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0);
        for &n in sizes {
            offsets.push(offsets.last().copied().unwrap_or(0) + n);
        }
        Self { offsets }
    }

    pub fn uniform(count: usize, size: usize) -> Self {
        Self::from_sizes(&vec![size; count])
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().expect("offsets start at 0")
    }

    pub fn range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    pub fn size(&self, g: usize) -> usize {
        self.offsets[g + 1] - self.offsets[g]
    }

    pub fn max_size(&self) -> usize {
        (0..self.count()).map(|g| self.size(g)).max().unwrap_or(0)
    }

    /// Shared block size when every block has the same node count.
    pub fn uniform_size(&self) -> Option<usize> {
        let n = self.size(0);
        (0..self.count()).all(|g| self.size(g) == n).then_some(n)
    }

    /// Packs square per-graph matrices into the stacked block layout.
    pub fn stack_blocks(&self, blocks: &[&Tensor]) -> Result<Tensor> {
        if blocks.len() != self.count() {
            return Err(Error::dim(
                "stack_blocks",
                format!("{} blocks for {} segments", blocks.len(), self.count()),
            ));
        }
        let w = self.max_size();
        let mut out = Tensor::zeros(self.total(), w);
        for (g, b) in blocks.iter().enumerate() {
            let n = self.size(g);
            if b.shape() != [n, n] {
                return Err(Error::dim("stack_blocks", format!("block {g} is {:?}, expected {n}x{n}", b.shape())));
            }
            for (i, r) in self.range(g).enumerate() {
                out.data_mut()[r * w..r * w + n].copy_from_slice(b.row(i));
            }
        }
        Ok(out)
    }

    /// Block `g` of a stacked `Σn × n_max` tensor as a square matrix.
    pub fn block(&self, stacked: &Tensor, g: usize) -> Tensor {
        let n = self.size(g);
        let w = stacked.cols();
        let start = self.offsets[g];
        Tensor::from_fn(n, n, |i, j| stacked.data()[(start + i) * w + j])
    }

    fn check_rows(&self, op: &'static str, t: &Tensor) -> Result<()> {
        if t.rows() != self.total() || self.count() == 0 {
            return Err(Error::dim(
                op,
                format!("{} rows for {} stacked rows in {} segments", t.rows(), self.total(), self.count()),
            ));
        }
        Ok(())
    }

    fn check_blocks(&self, op: &'static str, t: &Tensor) -> Result<()> {
        self.check_rows(op, t)?;
        if t.cols() != self.max_size() {
            return Err(Error::dim(op, format!("{} block columns, expected {}", t.cols(), self.max_size())));
        }
        Ok(())
    }

    /// Contiguous copy (or borrow) of square block `g`.
    fn block_data<'a>(&self, stacked: &'a Tensor, g: usize) -> std::borrow::Cow<'a, [f64]> {
        let n = self.size(g);
        let w = stacked.cols();
        let start = self.offsets[g] * w;
        if n == w {
            std::borrow::Cow::Borrowed(&stacked.data()[start..start + n * n])
        } else {
            let mut v = Vec::with_capacity(n * n);
            for i in 0..n {
                v.extend_from_slice(&stacked.data()[start + i * w..start + i * w + n]);
            }
            std::borrow::Cow::Owned(v)
        }
    }

    /// Writes a contiguous `n×n` buffer into block `g` of a stacked tensor.
    fn put_block(&self, stacked: &mut Tensor, g: usize, data: &[f64]) {
        let n = self.size(g);
        let w = stacked.cols();
        let start = self.offsets[g] * w;
        for i in 0..n {
            stacked.data_mut()[start + i * w..start + i * w + n].copy_from_slice(&data[i * n..(i + 1) * n]);
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation graph recorded during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Tape::param`]. Leaves the loss
    /// does not depend on report `None` from here; use [`Gradients::wrt`]
    /// for the zero-filled form.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| {
            let t = tape.value(v);
            Tensor::zeros(t.rows(), t.cols())
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "param")
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg, "transpose")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    /// `a + row` with the `1×n` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        if self.shape(row) != [1, n] {
            return Err(Error::dim(
                "add_row",
                format!("{:?} onto {m}x{n}", self.shape(row)),
            ));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(out, Op::AddRow(a, row), rg, "add_row")
    }

    /// `a ⊙ row` with the `1×n` row broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        if self.shape(row) != [1, n] {
            return Err(Error::dim(
                "mul_row",
                format!("{:?} onto {m}x{n}", self.shape(row)),
            ));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n.max(1)) {
            for (o, b) in chunk.iter_mut().zip(&r) {
                *o *= b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(out, Op::MulRow(a, row), rg, "mul_row")
    }

    /// `a * s` for a `1×1` variable `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check_scalar("mul_scalar", s)?;
        let k = self.value(s).item();
        let out = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a, s]);
        self.push(out, Op::MulScalar(a, s), rg, "mul_scalar")
    }

    /// `a / s` for a `1×1` variable `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check_scalar("div_scalar", s)?;
        let k = self.value(s).item();
        let out = self.value(a).map(|x| x / k);
        let rg = self.rg(&[a, s]);
        self.push(out, Op::DivScalar(a, s), rg, "div_scalar")
    }

    fn check_scalar(&self, op: &'static str, s: Var) -> Result<()> {
        if self.value(s).len() != 1 {
            return Err(Error::dim(op, format!("expected scalar, got {:?}", self.shape(s))));
        }
        Ok(())
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, k), rg, "scale")
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + k);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddConst(a), rg, "add_const")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg, "sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg, "relu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg, "exp")
    }

    pub fn log2(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::log2);
        let rg = self.rg(&[a]);
        self.push(out, Op::Log2(a), rg, "log2")
    }

    /// Elementwise square root. The backward pass uses a zero subgradient
    /// where the output is exactly zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::sqrt);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sqrt(a), rg, "sqrt")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(out, Op::Square(a), rg, "square")
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.powf(p));
        let rg = self.rg(&[a]);
        self.push(out, Op::Powf(a, p), rg, "powf")
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(floor));
        let rg = self.rg(&[a]);
        self.push(out, Op::ClampMin(a, floor), rg, "clamp_min")
    }

    /// Sum of all entries, as `1×1`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Column sums, as `1×n`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = Tensor::zeros(1, t.cols());
        for i in 0..t.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SumRows(a), rg, "sum_rows")
    }

    /// Column maxima, as `1×n`. Ties route the gradient to the first row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows() == 0 {
            return Err(Error::dim("max_rows", "no rows"));
        }
        let mut arg = vec![0usize; t.cols()];
        let mut out = Tensor::from_fn(1, t.cols(), |_, j| t.get(0, j));
        for i in 1..t.rows() {
            for j in 0..t.cols() {
                if t.get(i, j) > out.get(0, j) {
                    out.set(0, j, t.get(i, j));
                    arg[j] = i;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::MaxRows(a, arg), rg, "max_rows")
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        if !self.value(a).is_square() {
            return Err(Error::dim("trace", format!("{:?}", self.shape(a))));
        }
        let out = Tensor::scalar(self.value(a).trace());
        let rg = self.rg(&[a]);
        self.push(out, Op::Trace(a), rg, "trace")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let [_, n] = self.shape(a);
        if start > end || end > n {
            return Err(Error::dim("slice_cols", format!("{start}..{end} of {n}")));
        }
        let out = self.value(a).slice_cols(start, end);
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceCols(a, start), rg, "slice_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let [m, _] = self.shape(a);
        if start > end || end > m {
            return Err(Error::dim("slice_rows", format!("{start}..{end} of {m}")));
        }
        let out = self.value(a).slice_rows(start, end);
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceRows(a, start), rg, "slice_rows")
    }

    /// Stacks tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.shape(p)[1],
            None => return Err(Error::dim("concat_rows", "no inputs")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::dim(
                    "concat_rows",
                    format!("{} columns vs {cols}", t.cols()),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        let rg = self.rg(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).reshape(rows, cols)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape(a), rg, "reshape")
    }

    /// Squared Euclidean distances between the rows of `a`.
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Result<Var> {
        let out = pairwise_sq_dist(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::PairwiseSqDist(a), rg, "pairwise_sq_dist")
    }

    /// Eigenvalues of a symmetric matrix as a `1×n` row, descending.
    ///
    /// Only eigenvalue gradients are propagated: `dA = V·diag(dλ)·Vᵀ`.
    /// When eigenvalues repeat, the eigenvectors inside the degenerate
    /// subspace are not unique, but any loss that is a symmetric function of
    /// the spectrum (such as `Σ λᵢ^δ`) assigns equal `dλ` across that
    /// subspace, and `V·diag(dλ)·Vᵀ` is then invariant to the basis chosen
    /// within it. No perturbation is needed for such losses.
    pub fn eigvalsh(&mut self, a: Var) -> Result<Var> {
        let eig = sym_eig(self.value(a))?;
        let n = eig.values.len();
        let out = Tensor::new(1, n, eig.values)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::EigValsh(a, eig.vectors), rg, "eigvalsh")
    }

    /// Mean softmax cross-entropy (natural log) of `B×C` logits against
    /// class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, c) = (t.rows(), t.cols());
        if labels.len() != b || c < 2 {
            return Err(Error::dim(
                "cross_entropy",
                format!("{b}x{c} logits for {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Tensor::zeros(b, c);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = t.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - row[y];
            for j in 0..c {
                probs.set(i, j, (row[j] - lse).exp());
            }
        }
        let out = Tensor::scalar(loss / b as f64);
        let rg = self.rg(&[logits]);
        self.push(
            out,
            Op::CrossEntropy(logits, labels.to_vec(), probs),
            rg,
            "cross_entropy",
        )
    }

    /// Row sums, as `m×1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::from_fn(t.rows(), 1, |i, _| t.row(i).iter().sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::SumCols(a), rg, "sum_cols")
    }

    /// Multiplies row `i` of `a` by `s[i]` for an `m×1` column `s`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        if self.shape(s) != [m, 1] {
            return Err(Error::dim("scale_rows", format!("{:?} against {m}x{n}", self.shape(s))));
        }
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(a).clone();
        for (chunk, k) in out.data_mut().chunks_mut(n.max(1)).zip(&sv) {
            chunk.iter_mut().for_each(|x| *x *= k);
        }
        let rg = self.rg(&[a, s]);
        self.push(out, Op::ScaleRows(a, s), rg, "scale_rows")
    }

    /// Per-graph products `A_g · H_g` for stacked square blocks `adj` and
    /// stacked node rows `h`.
    pub fn block_matmul(&mut self, adj: Var, h: Var, seg: &Segments) -> Result<Var> {
        seg.check_blocks("block_matmul", self.value(adj))?;
        seg.check_rows("block_matmul", self.value(h))?;
        let (ta, th) = (self.value(adj), self.value(h));
        let d = th.cols();
        let mut out = Tensor::zeros(seg.total(), d);
        for g in 0..seg.count() {
            let n = seg.size(g);
            let r = seg.range(g);
            let a = seg.block_data(ta, g);
            gemm(false, false, n, n, d, &a, &th.data()[r.start * d..r.end * d], &mut out.data_mut()[r.start * d..r.end * d]);
        }
        let rg = self.rg(&[adj, h]);
        self.push(out, Op::BlockMatMul(adj, h, seg.clone()), rg, "block_matmul")
    }

    /// Per-graph inner-product matrices `Z_g · Z_gᵀ` in the stacked block
    /// layout; padding columns are zero.
    pub fn block_gram(&mut self, z: Var, seg: &Segments) -> Result<Var> {
        seg.check_rows("block_gram", self.value(z))?;
        let tz = self.value(z);
        let k = tz.cols();
        let mut out = Tensor::zeros(seg.total(), seg.max_size());
        for g in 0..seg.count() {
            let n = seg.size(g);
            let r = seg.range(g);
            let zg = &tz.data()[r.start * k..r.end * k];
            let mut buf = vec![0.0; n * n];
            gemm(false, true, n, k, n, zg, zg, &mut buf);
            seg.put_block(&mut out, g, &buf);
        }
        let rg = self.rg(&[z]);
        self.push(out, Op::BlockGram(z, seg.clone()), rg, "block_gram")
    }

    /// Per-graph column sums (or means), as `B×d`.
    pub fn segment_sum(&mut self, a: Var, seg: &Segments, mean: bool) -> Result<Var> {
        seg.check_rows("segment_sum", self.value(a))?;
        let t = self.value(a);
        let d = t.cols();
        let mut out = Tensor::zeros(seg.count(), d);
        for g in 0..seg.count() {
            let k = if mean { 1.0 / seg.size(g).max(1) as f64 } else { 1.0 };
            for i in seg.range(g) {
                for (o, v) in out.data_mut()[g * d..(g + 1) * d].iter_mut().zip(t.row(i)) {
                    *o += v * k;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SegmentSum(a, seg.clone(), mean), rg, "segment_sum")
    }

    /// Per-graph column maxima, as `B×d`. Ties route to the first row.
    pub fn segment_max(&mut self, a: Var, seg: &Segments) -> Result<Var> {
        seg.check_rows("segment_max", self.value(a))?;
        let t = self.value(a);
        let d = t.cols();
        if (0..seg.count()).any(|g| seg.size(g) == 0) {
            return Err(Error::dim("segment_max", "empty segment"));
        }
        let mut out = Tensor::zeros(seg.count(), d);
        let mut arg = vec![0usize; seg.count() * d];
        for g in 0..seg.count() {
            let r = seg.range(g);
            for j in 0..d {
                let mut best = r.start;
                for i in r.clone().skip(1) {
                    if t.get(i, j) > t.get(best, j) {
                        best = i;
                    }
                }
                arg[g * d + j] = best;
                out.set(g, j, t.get(best, j));
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SegmentMax(a, seg.clone(), arg), rg, "segment_max")
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        // Keep gradients for trainable leaves only.
        for (i, slot) in grads.iter_mut().enumerate() {
            let node = &self.nodes[i];
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    let mut da = Tensor::zeros(m, k);
                    gemm(false, true, m, n, k, g.data(), tb.data(), da.data_mut());
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = Tensor::zeros(k, n);
                    gemm(true, false, k, m, n, ta.data(), g.data(), db.data_mut());
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(tb, |x, y| x * y).unwrap());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(ta, |x, y| x * y).unwrap());
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*row) {
                    let mut dr = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in dr.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (val(*a), val(*row));
                let n = ta.cols();
                if self.requires_grad(*a) {
                    let d = Tensor::from_fn(ta.rows(), n, |i, j| g.get(i, j) * tr.get(0, j));
                    self.accumulate(grads, *a, d);
                }
                if self.requires_grad(*row) {
                    let mut dr = Tensor::zeros(1, n);
                    for i in 0..ta.rows() {
                        for j in 0..n {
                            dr.data_mut()[j] += g.get(i, j) * ta.get(i, j);
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::MulScalar(a, s) => {
                let k = val(*s).item();
                self.accumulate(grads, *a, g.map(|x| x * k));
                if self.requires_grad(*s) {
                    let d: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, *s, Tensor::scalar(d));
                }
            }
            Op::DivScalar(a, s) => {
                let k = val(*s).item();
                self.accumulate(grads, *a, g.map(|x| x / k));
                if self.requires_grad(*s) {
                    let d: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, *s, Tensor::scalar(-d / (k * k)));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|x| x * k)),
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::Sigmoid(a) => {
                let d = g.zip_map(out, |x, s| x * s * (1.0 - s)).unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = g.zip_map(val(*a), |x, v| if v > 0.0 { x } else { 0.0 }).unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = g.zip_map(out, |x, e| x * e).unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Log2(a) => {
                let d = g
                    .zip_map(val(*a), |x, v| x / (v * std::f64::consts::LN_2))
                    .unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let d = g
                    .zip_map(out, |x, r| if r > 0.0 { x / (2.0 * r) } else { 0.0 })
                    .unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let d = g.zip_map(val(*a), |x, v| 2.0 * x * v).unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Powf(a, p) => {
                let p = *p;
                let d = g
                    .zip_map(val(*a), |x, v| x * p * v.powf(p - 1.0))
                    .unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::ClampMin(a, floor) => {
                let f = *floor;
                let d = g
                    .zip_map(val(*a), |x, v| if v > f { x } else { 0.0 })
                    .unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let t = val(*a);
                self.accumulate(grads, *a, Tensor::filled(t.rows(), t.cols(), g.item()));
            }
            Op::SumRows(a) => {
                let t = val(*a);
                let d = Tensor::from_fn(t.rows(), t.cols(), |_, j| g.get(0, j));
                self.accumulate(grads, *a, d);
            }
            Op::MaxRows(a, arg) => {
                let t = val(*a);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for (j, &i) in arg.iter().enumerate() {
                    d.set(i, j, g.get(0, j));
                }
                self.accumulate(grads, *a, d);
            }
            Op::Trace(a) => {
                let n = val(*a).rows();
                let mut d = Tensor::zeros(n, n);
                for i in 0..n {
                    d.set(i, i, g.item());
                }
                self.accumulate(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let t = val(*a);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        d.set(i, start + j, g.get(i, j));
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SliceRows(a, start) => {
                let t = val(*a);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                let off = start * t.cols();
                d.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let t = val(p);
                    let len = t.len();
                    if self.requires_grad(p) {
                        let d = Tensor::new(t.rows(), t.cols(), g.data()[off..off + len].to_vec())
                            .unwrap();
                        self.accumulate(grads, p, d);
                    }
                    off += len;
                }
            }
            Op::Reshape(a) => {
                let t = val(*a);
                self.accumulate(grads, *a, g.reshape(t.rows(), t.cols()).unwrap());
            }
            Op::PairwiseSqDist(a) => {
                // dX = 2·(diag(rowsum S) − S)·X with S = G + Gᵀ
                let x = val(*a);
                let n = x.rows();
                let s = Tensor::from_fn(n, n, |i, j| g.get(i, j) + g.get(j, i));
                let mut lap = s.map(|v| -v);
                for i in 0..n {
                    let rs: f64 = s.row(i).iter().sum();
                    lap.set(i, i, lap.get(i, i) + rs);
                }
                let d = lap.matmul(x).unwrap().map(|v| 2.0 * v);
                self.accumulate(grads, *a, d);
            }
            Op::EigValsh(a, vecs) => {
                let n = vecs.rows();
                let scaled = Tensor::from_fn(n, n, |i, j| vecs.get(i, j) * g.get(0, j));
                let d = scaled.matmul(&vecs.transpose()).unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::CrossEntropy(a, labels, probs) => {
                let b = labels.len() as f64;
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d.set(i, y, d.get(i, y) - 1.0);
                }
                let k = g.item() / b;
                self.accumulate(grads, *a, d.map(|v| v * k));
            }
            Op::SumCols(a) => {
                let t = val(*a);
                let d = Tensor::from_fn(t.rows(), t.cols(), |i, _| g.get(i, 0));
                self.accumulate(grads, *a, d);
            }
            Op::ScaleRows(a, s) => {
                let (ta, ts) = (val(*a), val(*s));
                let n = ta.cols();
                if self.requires_grad(*a) {
                    let d = Tensor::from_fn(ta.rows(), n, |i, j| g.get(i, j) * ts.get(i, 0));
                    self.accumulate(grads, *a, d);
                }
                if self.requires_grad(*s) {
                    let d = Tensor::from_fn(ta.rows(), 1, |i, _| {
                        g.row(i).iter().zip(ta.row(i)).map(|(x, y)| x * y).sum()
                    });
                    self.accumulate(grads, *s, d);
                }
            }
            Op::BlockMatMul(adj, h, seg) => {
                let (ta, th) = (val(*adj), val(*h));
                let d = th.cols();
                let mut dadj = self.requires_grad(*adj).then(|| Tensor::zeros(ta.rows(), ta.cols()));
                let mut dh = self.requires_grad(*h).then(|| Tensor::zeros(th.rows(), d));
                for b in 0..seg.count() {
                    let n = seg.size(b);
                    let r = seg.range(b);
                    let gb = &g.data()[r.start * d..r.end * d];
                    if let Some(dh) = dh.as_mut() {
                        let a = seg.block_data(ta, b);
                        gemm(true, false, n, n, d, &a, gb, &mut dh.data_mut()[r.start * d..r.end * d]);
                    }
                    if let Some(da) = dadj.as_mut() {
                        let mut buf = vec![0.0; n * n];
                        gemm(false, true, n, d, n, gb, &th.data()[r.start * d..r.end * d], &mut buf);
                        seg.put_block(da, b, &buf);
                    }
                }
                if let Some(da) = dadj {
                    self.accumulate(grads, *adj, da);
                }
                if let Some(dh) = dh {
                    self.accumulate(grads, *h, dh);
                }
            }
            Op::BlockGram(z, seg) => {
                // d(Z Zᵀ) = (G + Gᵀ) Z per block
                let tz = val(*z);
                let k = tz.cols();
                let mut dz = Tensor::zeros(tz.rows(), k);
                for b in 0..seg.count() {
                    let n = seg.size(b);
                    let r = seg.range(b);
                    let gb = seg.block_data(g, b);
                    let sym: Vec<f64> = (0..n * n).map(|idx| gb[idx] + gb[(idx % n) * n + idx / n]).collect();
                    gemm(false, false, n, n, k, &sym, &tz.data()[r.start * k..r.end * k], &mut dz.data_mut()[r.start * k..r.end * k]);
                }
                self.accumulate(grads, *z, dz);
            }
            Op::SegmentSum(a, seg, mean) => {
                let t = val(*a);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for b in 0..seg.count() {
                    let k = if *mean { 1.0 / seg.size(b).max(1) as f64 } else { 1.0 };
                    for i in seg.range(b) {
                        for j in 0..t.cols() {
                            d.set(i, j, g.get(b, j) * k);
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SegmentMax(a, seg, arg) => {
                let t = val(*a);
                let cols = t.cols();
                let mut d = Tensor::zeros(t.rows(), cols);
                for b in 0..seg.count() {
                    for j in 0..cols {
                        d.set(arg[b * cols + j], j, g.get(b, j));
                    }
                }
                self.accumulate(grads, *a, d);
            }
        }
    }
}

pub(crate) fn pairwise_sq_dist(x: &Tensor) -> Tensor {
    let n = x.rows();
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}
