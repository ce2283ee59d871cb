//! Dense tensors on a recorded tape with reverse-mode differentiation and
//! deterministic cost counters.
//!
//! The tape is an arena: every operation appends a node holding its output
//! buffer and enough structure to replay itself backwards. Graph edges are
//! plain indices, so node ids are valid for the lifetime of the tape (or
//! until `reset_to` truncates past them). Leaves are registered explicitly;
//! only paths that reach a `requires_grad` leaf ever get gradient buffers.

mod counters;
pub(crate) mod kernels;

pub use counters::CostCounters;
pub(crate) use counters::CounterStack;

use std::fmt;
use std::rc::Rc;

use crate::csr::CsrPattern;
use crate::error::{Error, Result};
use crate::rng::SeedRng;

// ── Element types ───────────────────────────────────────────────────────

/// Scalar element of every tensor. Implemented for `f32` (the working
/// precision) and `f64` (used by gradient checks).
pub trait Element:
    Copy
    + Send
    + Sync
    + 'static
    + fmt::Debug
    + fmt::Display
    + num_traits::Float
    + num_traits::NumAssignOps
{
    const BYTES: usize;
    const NAME: &'static str;
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

// ── Tensor ──────────────────────────────────────────────────────────────

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} implies {} elements, buffer has {}", shape, numel, data.len()),
            });
        }
        Ok(Self { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![T::zero(); numel], requires_grad: false }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v], requires_grad: false }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flat_map(|row| row.iter().map(|&v| T::of(v))).collect();
        Self { shape: vec![r, c], data, requires_grad: false }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut SeedRng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| T::of(rng.normal_f64() * std)).collect();
        Self { shape, data, requires_grad: false }
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad_required(&self) -> bool {
        self.requires_grad
    }

    /// Rows of a matrix (shape `[r, c]`).
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() needs a matrix, got {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a matrix, got {:?}", self.shape);
        self.shape[1]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Clone)]
enum Op<T> {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: T },
    Relu { x: TensorId },
    Gelu { x: TensorId },
    Sigmoid { x: TensorId },
    RowSoftmax { x: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: T },
    Sum { x: TensorId },
    WeightedSum { x: TensorId, w: Rc<Vec<T>> },
    ColMean { x: TensorId },
    CrossEntropy { logits: TensorId, targets: Rc<Vec<usize>> },
    Embed { table: TensorId, ids: Rc<Vec<usize>> },
    GatherRows { x: TensorId, rows: Rc<Vec<usize>> },
    ScatterRows { x: TensorId, rows: Rc<Vec<usize>> },
    ScaleRows { x: TensorId, s: TensorId },
    GatherScalars { x: TensorId, idx: Rc<Vec<usize>> },
    ConcatCols { parts: Rc<Vec<TensorId>> },
    SliceCols { x: TensorId, start: usize },
    Sddmm { q: TensorId, k: TensorId, pat: Rc<CsrPattern> },
    SparseRowSoftmax { vals: TensorId, pat: Rc<CsrPattern> },
    Spmm { vals: TensorId, v: TensorId, pat: Rc<CsrPattern> },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

// ── Tape ────────────────────────────────────────────────────────────────

/// Execution context: an arena of tensors, the recorded operations that
/// produced them, and the cost counters observing every event.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    counters: CounterStack,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), counters: CounterStack::new() }
    }

    // ── registration and access ─────────────────────────────────────

    /// Register a leaf tensor (input or parameter). Gradients flow back to
    /// it only if `requires_grad` was set on the tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<TensorId> {
        let needs = value.requires_grad;
        self.push_node("leaf", value, Op::Leaf, needs)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].value.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> T {
        let t = &self.nodes[id.0].value;
        assert_eq!(t.numel(), 1, "scalar_value on shape {:?}", t.shape);
        t.data[0]
    }

    /// Mutable access to a leaf's buffer (optimizer updates).
    pub fn leaf_data_mut(&mut self, id: TensorId) -> &mut [T] {
        assert!(matches!(self.nodes[id.0].op, Op::Leaf), "only leaves may be mutated in place");
        &mut self.nodes[id.0].value.data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Every leaf whose tensor asked for gradients, in registration order.
    /// This is the optimizer's parameter list.
    pub fn trainable_leaves(&self) -> Vec<TensorId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.value.requires_grad)
            .map(|(i, _)| TensorId(i))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── lifetime management ─────────────────────────────────────────

    /// Watermark for [`Tape::reset_to`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drop every node past `mark` (and all gradients), releasing their
    /// bytes from the live-buffer account. Persistent leaves registered
    /// before the mark survive, which is how a training loop reuses one
    /// tape across steps.
    pub fn reset_to(&mut self, mark: usize) {
        self.clear_grads();
        self.grads.truncate(mark);
        for node in self.nodes.drain(mark..) {
            self.counters.release((node.value.data.len() * T::BYTES) as u64);
        }
    }

    fn clear_grads(&mut self) {
        for g in self.grads.iter_mut() {
            if let Some(v) = g.take() {
                self.counters.release((v.len() * T::BYTES) as u64);
            }
        }
    }

    // ── counters ────────────────────────────────────────────────────

    /// Run `f` with a fresh counter frame; returns `f`'s result plus the
    /// costs accumulated strictly inside.
    pub fn counters_scope<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> (R, CostCounters) {
        self.counters.push();
        let r = f(self);
        (r, self.counters.pop())
    }

    /// Attribute FLOPs of the enclosed work to a named module.
    pub fn module_scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.counters.push_module(name);
        let r = f(self);
        self.counters.pop_module();
        r
    }

    /// Counters accumulated since the tape was created.
    pub fn totals(&self) -> CostCounters {
        self.counters.root()
    }

    pub(crate) fn add_flops(&mut self, op: &'static str, n: u64) {
        self.counters.add_flops(op, n);
    }

    pub(crate) fn count_attention_entries(&mut self, n: u64) {
        self.counters.add_attention_entries(n);
    }

    // ── op plumbing ─────────────────────────────────────────────────

    fn push_node(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<TensorId> {
        if !value.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.counters.alloc((value.data.len() * T::BYTES) as u64);
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn want_matrix(&self, op: &'static str, id: TensorId) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op, detail: format!("expected a matrix, got shape {s:?}") });
        }
        Ok((s[0], s[1]))
    }

    // ── operations ──────────────────────────────────────────────────

    /// Matrix product `[m,k] x [k,p] -> [m,p]`. Counts `m*k*p` FLOPs.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.want_matrix("matmul", a)?;
        let (k2, p) = self.want_matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dimensions disagree: [{m},{k}] x [{k2},{p}]"),
            });
        }
        let mut out = vec![T::zero(); m * p];
        kernels::matmul_nn(self.data(a), self.data(b), &mut out, m, k, p);
        self.counters.add_flops("matmul", (m * k * p) as u64);
        let needs = self.needs(&[a, b]);
        self.push_node("matmul", Tensor::new(vec![m, p], out)?, Op::Matmul { a, b }, needs)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a, b]);
        self.push_node("add", Tensor::new(shape, out)?, Op::Add { a, b }, needs)
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: TensorId, c: T) -> Result<TensorId> {
        let out: Vec<T> = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        self.push_node("scale", Tensor::new(shape, out)?, Op::Scale { x, c }, needs)
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<T> = self.data(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        self.push_node("relu", Tensor::new(shape, out)?, Op::Relu { x }, needs)
    }

    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<T> = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        self.push_node("gelu", Tensor::new(shape, out)?, Op::Gelu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<T> = self.data(x).iter().map(|&v| (T::one() + (-v).exp()).recip()).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        self.push_node("sigmoid", Tensor::new(shape, out)?, Op::Sigmoid { x }, needs)
    }

    /// Softmax over each row of a matrix. `keep`, when present, marks which
    /// entries participate; the rest are exactly zero in the output. A row
    /// with nothing kept is a degenerate-row error.
    pub fn row_softmax(&mut self, x: TensorId, keep: Option<&[bool]>) -> Result<TensorId> {
        let (r, c) = self.want_matrix("row_softmax", x)?;
        if let Some(k) = keep {
            if k.len() != r * c {
                return Err(Error::ShapeMismatch {
                    op: "row_softmax",
                    detail: format!("mask has {} entries for a {r}x{c} matrix", k.len()),
                });
            }
        }
        let mut out = vec![T::zero(); r * c];
        kernels::row_softmax(self.data(x), keep, &mut out, r, c).map_err(|row| Error::DegenerateRow { row })?;
        let needs = self.needs(&[x]);
        self.push_node("row_softmax", Tensor::new(vec![r, c], out)?, Op::RowSoftmax { x }, needs)
    }

    /// Row-wise layer normalization with learnable gain and shift.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let (r, c) = self.want_matrix("layer_norm", x)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / shift {:?} for row width {c}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            });
        }
        let eps = T::of(eps);
        let mut out = vec![T::zero(); r * c];
        kernels::layer_norm(self.data(x), self.data(gamma), self.data(beta), eps, &mut out, r, c);
        let needs = self.needs(&[x, gamma, beta]);
        self.push_node("layer_norm", Tensor::new(vec![r, c], out)?, Op::LayerNorm { x, gamma, beta, eps }, needs)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let mut acc = T::zero();
        for &v in self.data(x) {
            acc += v;
        }
        let needs = self.needs(&[x]);
        self.push_node("sum", Tensor::scalar(acc), Op::Sum { x }, needs)
    }

    /// Weighted sum with fixed weights: `sum_i w_i * x_i` as a scalar.
    pub fn weighted_sum(&mut self, x: TensorId, w: Vec<T>) -> Result<TensorId> {
        if w.len() != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                detail: format!("{} weights for {} elements", w.len(), self.value(x).numel()),
            });
        }
        let mut acc = T::zero();
        for (&v, &wi) in self.data(x).iter().zip(&w) {
            acc += v * wi;
        }
        let needs = self.needs(&[x]);
        self.push_node("weighted_sum", Tensor::scalar(acc), Op::WeightedSum { x, w: Rc::new(w) }, needs)
    }

    /// Column means of a matrix: `[r,c] -> [c]`.
    pub fn col_mean(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.want_matrix("col_mean", x)?;
        if r == 0 {
            return Err(Error::ShapeMismatch { op: "col_mean", detail: "empty matrix".into() });
        }
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] += self.data(x)[i * c + j];
            }
        }
        let inv = T::of(1.0 / r as f64);
        for o in &mut out {
            *o = *o * inv;
        }
        let needs = self.needs(&[x]);
        self.push_node("col_mean", Tensor::new(vec![c], out)?, Op::ColMean { x }, needs)
    }

    /// Mean negative log-likelihood of integer targets under row softmax.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: Vec<usize>) -> Result<TensorId> {
        let (r, c) = self.want_matrix("cross_entropy", logits)?;
        if targets.len() != r {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{} targets for {} rows", targets.len(), r),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("target {t} out of range for {c} classes"),
            });
        }
        let loss = kernels::cross_entropy(self.data(logits), &targets, r, c);
        let needs = self.needs(&[logits]);
        self.push_node(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: Rc::new(targets) },
            needs,
        )
    }

    /// Row lookup into an embedding table: `ids` index rows of `table`.
    pub fn embed(&mut self, table: TensorId, ids: Vec<usize>) -> Result<TensorId> {
        let (v, d) = self.want_matrix("embed", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::ShapeMismatch {
                op: "embed",
                detail: format!("id {bad} out of range for table with {v} rows"),
            });
        }
        let mut out = vec![T::zero(); ids.len() * d];
        for (row, &id) in ids.iter().enumerate() {
            out[row * d..(row + 1) * d].copy_from_slice(&self.data(table)[id * d..(id + 1) * d]);
        }
        let n = ids.len();
        let needs = self.needs(&[table]);
        self.push_node("embed", Tensor::new(vec![n, d], out)?, Op::Embed { table, ids: Rc::new(ids) }, needs)
    }

    /// Gather rows of a matrix in the given order (duplicates allowed).
    pub fn gather_rows(&mut self, x: TensorId, rows: Vec<usize>) -> Result<TensorId> {
        let (r, c) = self.want_matrix("gather_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                detail: format!("row {bad} out of range for {r} rows"),
            });
        }
        let mut out = vec![T::zero(); rows.len() * c];
        for (dst, &src) in rows.iter().enumerate() {
            out[dst * c..(dst + 1) * c].copy_from_slice(&self.data(x)[src * c..(src + 1) * c]);
        }
        let n = rows.len();
        let needs = self.needs(&[x]);
        self.push_node("gather_rows", Tensor::new(vec![n, c], out)?, Op::GatherRows { x, rows: Rc::new(rows) }, needs)
    }

    /// Scatter-add rows of `x` into a zeroed `[n_rows, c]` output; row `i`
    /// of `x` lands on output row `rows[i]`.
    pub fn scatter_rows(&mut self, x: TensorId, rows: Vec<usize>, n_rows: usize) -> Result<TensorId> {
        let (r, c) = self.want_matrix("scatter_rows", x)?;
        if rows.len() != r {
            return Err(Error::ShapeMismatch {
                op: "scatter_rows",
                detail: format!("{} destinations for {} rows", rows.len(), r),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= n_rows) {
            return Err(Error::ShapeMismatch {
                op: "scatter_rows",
                detail: format!("destination {bad} out of range for {n_rows} rows"),
            });
        }
        let mut out = vec![T::zero(); n_rows * c];
        for (src, &dst) in rows.iter().enumerate() {
            let xrow = &self.data(x)[src * c..(src + 1) * c];
            let orow = &mut out[dst * c..(dst + 1) * c];
            for (o, &v) in orow.iter_mut().zip(xrow) {
                *o += v;
            }
        }
        let needs = self.needs(&[x]);
        self.push_node("scatter_rows", Tensor::new(vec![n_rows, c], out)?, Op::ScatterRows { x, rows: Rc::new(rows) }, needs)
    }

    /// Scale row `i` of a matrix by scalar `s[i]`.
    pub fn scale_rows(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let (r, c) = self.want_matrix("scale_rows", x)?;
        if self.shape(s) != [r] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                detail: format!("scales {:?} for {r} rows", self.shape(s)),
            });
        }
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let sv = self.data(s)[i];
            for j in 0..c {
                out[i * c + j] = self.data(x)[i * c + j] * sv;
            }
        }
        let needs = self.needs(&[x, s]);
        self.push_node("scale_rows", Tensor::new(vec![r, c], out)?, Op::ScaleRows { x, s }, needs)
    }

    /// Gather individual elements by flat index into a `[k]` vector.
    pub fn gather_scalars(&mut self, x: TensorId, idx: Vec<usize>) -> Result<TensorId> {
        let numel = self.value(x).numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= numel) {
            return Err(Error::ShapeMismatch {
                op: "gather_scalars",
                detail: format!("flat index {bad} out of range for {numel} elements"),
            });
        }
        let out: Vec<T> = idx.iter().map(|&i| self.data(x)[i]).collect();
        let k = idx.len();
        let needs = self.needs(&[x]);
        self.push_node("gather_scalars", Tensor::new(vec![k], out)?, Op::GatherScalars { x, idx: Rc::new(idx) }, needs)
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch { op: "concat_cols", detail: "no parts".into() });
        }
        let (r, _) = self.want_matrix("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rp, cp) = self.want_matrix("concat_cols", p)?;
            if rp != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts differ: {r} vs {rp}"),
                });
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for i in 0..r {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let needs = self.needs(parts);
        self.push_node(
            "concat_cols",
            Tensor::new(vec![r, total], out)?,
            Op::ConcatCols { parts: Rc::new(parts.to_vec()) },
            needs,
        )
    }

    /// Column slice `[start, start+width)` of a matrix.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, width: usize) -> Result<TensorId> {
        let (r, c) = self.want_matrix("slice_cols", x)?;
        if start + width > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("slice {start}..{} of {c} columns", start + width),
            });
        }
        let mut out = vec![T::zero(); r * width];
        for i in 0..r {
            out[i * width..(i + 1) * width].copy_from_slice(&self.data(x)[i * c + start..i * c + start + width]);
        }
        let needs = self.needs(&[x]);
        self.push_node("slice_cols", Tensor::new(vec![r, width], out)?, Op::SliceCols { x, start }, needs)
    }

    /// Sampled dense-dense product over a CSR pattern: stored entry (i, j)
    /// receives `q_i . k_j`. Counts `nnz * d` FLOPs.
    pub fn sddmm(&mut self, q: TensorId, k: TensorId, pat: Rc<CsrPattern>) -> Result<TensorId> {
        let (nq, d) = self.want_matrix("sddmm", q)?;
        let (nk, dk) = self.want_matrix("sddmm", k)?;
        if d != dk {
            return Err(Error::ShapeMismatch {
                op: "sddmm",
                detail: format!("query dim {d} vs key dim {dk}"),
            });
        }
        if pat.n_rows != nq || pat.n_cols != nk {
            return Err(Error::ShapeMismatch {
                op: "sddmm",
                detail: format!("pattern {}x{} for {nq} queries and {nk} keys", pat.n_rows, pat.n_cols),
            });
        }
        let mut out = vec![T::zero(); pat.nnz()];
        kernels::sddmm(self.data(q), self.data(k), &pat, &mut out, d);
        self.counters.add_flops("sddmm", (pat.nnz() * d) as u64);
        let nnz = pat.nnz();
        let needs = self.needs(&[q, k]);
        self.push_node("sddmm", Tensor::new(vec![nnz], out)?, Op::Sddmm { q, k, pat }, needs)
    }

    /// Softmax over each pattern row's stored values. `keep` is per stored
    /// entry when present; rows whose entries are all masked are an error.
    pub fn sparse_row_softmax(&mut self, vals: TensorId, pat: Rc<CsrPattern>, keep: Option<&[bool]>) -> Result<TensorId> {
        if self.value(vals).numel() != pat.nnz() {
            return Err(Error::ShapeMismatch {
                op: "sparse_row_softmax",
                detail: format!("{} values for pattern nnz {}", self.value(vals).numel(), pat.nnz()),
            });
        }
        if let Some(kmask) = keep {
            if kmask.len() != pat.nnz() {
                return Err(Error::ShapeMismatch {
                    op: "sparse_row_softmax",
                    detail: format!("mask has {} entries for nnz {}", kmask.len(), pat.nnz()),
                });
            }
        }
        let mut out = vec![T::zero(); pat.nnz()];
        kernels::sparse_row_softmax(self.data(vals), &pat, keep, &mut out)
            .map_err(|row| Error::DegenerateRow { row })?;
        let nnz = pat.nnz();
        let needs = self.needs(&[vals]);
        self.push_node("sparse_softmax", Tensor::new(vec![nnz], out)?, Op::SparseRowSoftmax { vals, pat }, needs)
    }

    /// Sparse-dense product: CSR values times a dense matrix. Counts
    /// `nnz * d` FLOPs.
    pub fn spmm(&mut self, vals: TensorId, v: TensorId, pat: Rc<CsrPattern>) -> Result<TensorId> {
        let (nv, d) = self.want_matrix("spmm", v)?;
        if pat.n_cols != nv {
            return Err(Error::ShapeMismatch {
                op: "spmm",
                detail: format!("pattern has {} columns, dense operand {nv} rows", pat.n_cols),
            });
        }
        if self.value(vals).numel() != pat.nnz() {
            return Err(Error::ShapeMismatch {
                op: "spmm",
                detail: format!("{} values for pattern nnz {}", self.value(vals).numel(), pat.nnz()),
            });
        }
        let mut out = vec![T::zero(); pat.n_rows * d];
        kernels::spmm(self.data(vals), self.data(v), &pat, &mut out, d);
        self.counters.add_flops("spmm", (pat.nnz() * d) as u64);
        let rows = pat.n_rows;
        let needs = self.needs(&[vals, v]);
        self.push_node("spmm", Tensor::new(vec![rows, d], out)?, Op::Spmm { vals, v, pat }, needs)
    }

    // ── reverse pass ────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Nodes are replayed in reverse
    /// creation order (a valid topological order, since every op refers to
    /// earlier nodes). Gradient buffers are allocated lazily and only for
    /// nodes on a path to a `requires_grad` leaf.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        {
            let t = &self.nodes[loss.0].value;
            if t.numel() != 1 {
                return Err(Error::NonScalarLoss(t.shape.clone()));
            }
        }
        self.clear_grads();
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // nothing trainable below the loss
        }
        self.seed_grad(loss.0, vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = self.grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            self.backprop_node(i, &dy, &op)?;
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn seed_grad(&mut self, idx: usize, g: Vec<T>) {
        self.counters.alloc((g.len() * T::BYTES) as u64);
        self.grads[idx] = Some(g);
    }

    /// Zeroed gradient buffer for node `idx`, allocating (and accounting)
    /// on first touch.
    fn grad_buf<'a>(
        grads: &'a mut [Option<Vec<T>>],
        counters: &mut CounterStack,
        idx: usize,
        len: usize,
    ) -> &'a mut [T] {
        if grads[idx].is_none() {
            counters.alloc((len * T::BYTES) as u64);
            grads[idx] = Some(vec![T::zero(); len]);
        }
        grads[idx].as_mut().expect("grad buffer").as_mut_slice()
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&mut self, out_idx: usize, dy: &[T], op: &Op<T>) -> Result<()> {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let counters = &mut self.counters;
        let needs = |id: TensorId| nodes[id.0].needs_grad;
        let val = |id: TensorId| nodes[id.0].value.data.as_slice();
        let numel = |id: TensorId| nodes[id.0].value.numel();

        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                let p = nodes[b.0].value.cols();
                if needs(*a) {
                    let da = Self::grad_buf(grads, counters, a.0, m * k);
                    kernels::matmul_nt(dy, val(*b), da, m, p, k);
                    counters.add_flops("matmul", (m * p * k) as u64);
                }
                if needs(*b) {
                    let db = Self::grad_buf(grads, counters, b.0, k * p);
                    kernels::matmul_tn(val(*a), dy, db, m, k, p);
                    counters.add_flops("matmul", (m * k * p) as u64);
                }
            }
            Op::Add { a, b } => {
                for &x in &[*a, *b] {
                    if needs(x) {
                        let dx = Self::grad_buf(grads, counters, x.0, numel(x));
                        for (o, &g) in dx.iter_mut().zip(dy) {
                            *o += g;
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if needs(*x) {
                    let dx = Self::grad_buf(grads, counters, x.0, numel(*x));
                    for (o, &g) in dx.iter_mut().zip(dy) {
                        *o += g * *c;
                    }
                }
            }
            Op::Relu { x } => {
                if needs(*x) {
                    let xs = val(*x);
                    let dx = Self::grad_buf(grads, counters, x.0, numel(*x));
                    for j in 0..dx.len() {
                        if xs[j] > T::zero() {
                            dx[j] += dy[j];
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if needs(*x) {
                    let xs = val(*x);
                    let dx = Self::grad_buf(grads, counters, x.0, numel(*x));
                    for j in 0..dx.len() {
                        dx[j] += dy[j] * kernels::gelu_grad(xs[j]);
                    }
                }
            }
            Op::Sigmoid { x } => {
                if needs(*x) {
                    let ys = nodes[out_idx].value.data.as_slice();
                    let dx = Self::grad_buf(grads, counters, x.0, numel(*x));
                    for j in 0..dx.len() {
                        dx[j] += dy[j] * ys[j] * (T::one() - ys[j]);
                    }
                }
            }
            Op::RowSoftmax { x } => {
                if needs(*x) {
                    let (r, c) = (nodes[out_idx].value.rows(), nodes[out_idx].value.cols());
                    let ys = nodes[out_idx].value.data.as_slice();
                    let dx = Self::grad_buf(grads, counters, x.0, r * c);
                    kernels::row_softmax_grad(ys, dy, dx, r, c);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, c) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                let (xs, gs) = (val(*x), val(*gamma));
                let (nx, ng, nb) = (needs(*x), needs(*gamma), needs(*beta));
                // Allocate up front so the three disjoint buffers can be
                // borrowed out of the grads vec simultaneously.
                if nx {
                    Self::grad_buf(grads, counters, x.0, r * c);
                }
                if ng {
                    Self::grad_buf(grads, counters, gamma.0, c);
                }
                if nb {
                    Self::grad_buf(grads, counters, beta.0, c);
                }
                let [dx, dg, db] = distinct_grads(grads, [
                    nx.then_some(x.0),
                    ng.then_some(gamma.0),
                    nb.then_some(beta.0),
                ]);
                kernels::layer_norm_grad(xs, gs, *eps, dy, dx, dg, db, r, c);
            }
            Op::Sum { x } => {
                if needs(*x) {
                    let g = dy[0];
                    let dx = Self::grad_buf(grads, counters, x.0, numel(*x));
                    for o in dx.iter_mut() {
                        *o += g;
                    }
                }
            }
            Op::WeightedSum { x, w } => {
                if needs(*x) {
                    let g = dy[0];
                    let dx = Self::grad_buf(grads, counters, x.0, numel(*x));
                    for (o, &wi) in dx.iter_mut().zip(w.iter()) {
                        *o += g * wi;
                    }
                }
            }
            Op::ColMean { x } => {
                if needs(*x) {
                    let (r, c) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                    let inv = T::of(1.0 / r as f64);
                    let dx = Self::grad_buf(grads, counters, x.0, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += dy[j] * inv;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if needs(*logits) {
                    let (r, c) = (nodes[logits.0].value.rows(), nodes[logits.0].value.cols());
                    let ls = val(*logits);
                    let dl = Self::grad_buf(grads, counters, logits.0, r * c);
                    kernels::cross_entropy_grad(ls, targets, dy[0], dl, r, c);
                }
            }
            Op::Embed { table, ids } => {
                if needs(*table) {
                    let d = nodes[table.0].value.cols();
                    let dt = Self::grad_buf(grads, counters, table.0, numel(*table));
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += dy[row * d + j];
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if needs(*x) {
                    let c = nodes[x.0].value.cols();
                    let dx = Self::grad_buf(grads, counters, x.0, numel(*x));
                    for (src, &dst) in rows.iter().enumerate() {
                        for j in 0..c {
                            dx[dst * c + j] += dy[src * c + j];
                        }
                    }
                }
            }
            Op::ScatterRows { x, rows } => {
                if needs(*x) {
                    let c = nodes[x.0].value.cols();
                    let dx = Self::grad_buf(grads, counters, x.0, numel(*x));
                    for (src, &dst) in rows.iter().enumerate() {
                        for j in 0..c {
                            dx[src * c + j] += dy[dst * c + j];
                        }
                    }
                }
            }
            Op::ScaleRows { x, s } => {
                let (r, c) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                if needs(*x) {
                    let sv = val(*s);
                    let dx = Self::grad_buf(grads, counters, x.0, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += dy[i * c + j] * sv[i];
                        }
                    }
                }
                if needs(*s) {
                    let xs = val(*x);
                    let ds = Self::grad_buf(grads, counters, s.0, r);
                    for i in 0..r {
                        let mut acc = T::zero();
                        for j in 0..c {
                            acc += dy[i * c + j] * xs[i * c + j];
                        }
                        ds[i] += acc;
                    }
                }
            }
            Op::GatherScalars { x, idx } => {
                if needs(*x) {
                    let dx = Self::grad_buf(grads, counters, x.0, numel(*x));
                    for (k, &flat) in idx.iter().enumerate() {
                        dx[flat] += dy[k];
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let r = nodes[out_idx].value.rows();
                let total = nodes[out_idx].value.cols();
                let mut offset = 0;
                for &p in parts.iter() {
                    let w = nodes[p.0].value.cols();
                    if needs(p) {
                        let dp = Self::grad_buf(grads, counters, p.0, r * w);
                        for i in 0..r {
                            for j in 0..w {
                                dp[i * w + j] += dy[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                if needs(*x) {
                    let (r, c) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                    let w = nodes[out_idx].value.cols();
                    let dx = Self::grad_buf(grads, counters, x.0, r * c);
                    for i in 0..r {
                        for j in 0..w {
                            dx[i * c + start + j] += dy[i * w + j];
                        }
                    }
                }
            }
            Op::Sddmm { q, k, pat } => {
                let d = nodes[q.0].value.cols();
                let (nq, nk) = (needs(*q), needs(*k));
                if nq {
                    Self::grad_buf(grads, counters, q.0, numel(*q));
                    counters.add_flops("sddmm", (pat.nnz() * d) as u64);
                }
                if nk {
                    Self::grad_buf(grads, counters, k.0, numel(*k));
                    counters.add_flops("sddmm", (pat.nnz() * d) as u64);
                }
                if nq && nk && q.0 == k.0 {
                    // Self-product (q and k are the same tensor, e.g. row
                    // norms): both partials land in one buffer, so apply
                    // them one after the other.
                    let dq = Self::grad_buf(grads, counters, q.0, numel(*q));
                    kernels::sddmm_grad(val(*q), val(*k), pat, dy, Some(dq), None, d);
                    let dk = Self::grad_buf(grads, counters, k.0, numel(*k));
                    kernels::sddmm_grad(val(*q), val(*k), pat, dy, None, Some(dk), d);
                } else {
                    let [dq, dk] = distinct_grads(grads, [nq.then_some(q.0), nk.then_some(k.0)]);
                    kernels::sddmm_grad(val(*q), val(*k), pat, dy, dq, dk, d);
                }
            }
            Op::SparseRowSoftmax { vals, pat } => {
                if needs(*vals) {
                    let ys = nodes[out_idx].value.data.as_slice();
                    let dx = Self::grad_buf(grads, counters, vals.0, pat.nnz());
                    kernels::sparse_row_softmax_grad(ys, dy, pat, dx);
                }
            }
            Op::Spmm { vals, v, pat } => {
                let d = nodes[v.0].value.cols();
                let (na, nv) = (needs(*vals), needs(*v));
                if na {
                    Self::grad_buf(grads, counters, vals.0, pat.nnz());
                    counters.add_flops("spmm", (pat.nnz() * d) as u64);
                }
                if nv {
                    Self::grad_buf(grads, counters, v.0, numel(*v));
                    counters.add_flops("spmm", (pat.nnz() * d) as u64);
                }
                let [dvals, dv] = distinct_grads(grads, [na.then_some(vals.0), nv.then_some(v.0)]);
                kernels::spmm_grad(val(*vals), val(*v), pat, dy, dvals, dv, d);
            }
        }
        Ok(())
    }
}

/// Borrow up to N pairwise-distinct gradient buffers at once. Buffers must
/// already be allocated. Requesting the same node twice is a logic error
/// (ops with potentially aliased operands accumulate sequentially instead).
fn distinct_grads<T, const N: usize>(
    grads: &mut [Option<Vec<T>>],
    idx: [Option<usize>; N],
) -> [Option<&mut [T]>; N] {
    for a in 0..N {
        for b in (a + 1)..N {
            if let (Some(x), Some(y)) = (idx[a], idx[b]) {
                assert_ne!(x, y, "aliased gradient operands must accumulate sequentially");
            }
        }
    }
    // Safety by construction: indices are pairwise distinct, so the raw
    // pointers below never alias.
    let base = grads.as_mut_ptr();
    idx.map(|slot| {
        slot.map(|i| {
            let opt = unsafe { &mut *base.add(i) };
            opt.as_mut().expect("grad buffer allocated before split borrow").as_mut_slice()
        })
    })
}
