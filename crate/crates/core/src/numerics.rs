//! A minimal reverse-mode differentiation kernel.
//!
//! A [`Graph`] records tensor operations as they are evaluated. Parameters
//! enter as borrowed leaves tagged with their index in the caller's
//! parameter list, so [`Graph::backward`] can hand back one gradient per
//! parameter. Everything runs single-threaded with a fixed summation order,
//! which makes forward and backward passes bitwise reproducible.
//!
//! The kernel is generic over [`Real`]: training runs in `f32`, gradient
//! checks in `f64`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;

use num_traits::{Float, FromPrimitive};
use rand::Rng;

/// Additive bias applied to attention scores of padded keys.
pub const MASK_BIAS: f64 = -1e9;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("every position is masked out of the loss")]
    MaskedEverything,
    #[error("index {index} out of range for a table of {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

type Result<T> = core::result::Result<T, NumericsError>;

fn shape_err<T>(msg: String) -> Result<T> {
    Err(NumericsError::Shape(msg))
}

/// Floating point element type of tensors.
///
/// Transcendentals call `libm` directly. `Float::exp` and `Float::ln` switch
/// to the platform math library whenever some other crate enables
/// `num-traits/std`, which would make results depend on the build.
pub trait Real: Float + FromPrimitive + Default + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
    fn erf(self) -> Self;
    fn libm_exp(self) -> Self;
    fn libm_ln(self) -> Self;
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn libm_exp(self) -> Self {
        libm::expf(self)
    }
    fn libm_ln(self) -> Self {
        libm::logf(self)
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn libm_exp(self) -> Self {
        libm::exp(self)
    }
    fn libm_ln(self) -> Self {
        libm::log(self)
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows".into());
        }
        Tensor::new(vec![rows.len(), cols], rows.iter().flat_map(|r| r.iter().copied()).collect())
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or(0)
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn add_assign(&mut self, other: &Tensor<T>) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

// Dense kernels. All accumulate into `c` in a fixed loop order: each output
// element sums its k products in ascending p, whatever the tiling.

const MR: usize = 4;
const NR: usize = 16;

/// c[i..i+R, j..j+w] += a[i..i+R, :] · b[:, j..j+w] with w <= NR, kept in registers.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tile<T: Real, const R: usize>(a: &[T], b: &[T], c: &mut [T], i: usize, j: usize, w: usize, k: usize, n: usize) {
    let mut acc = [[T::zero(); NR]; R];
    for (r, row) in acc.iter_mut().enumerate() {
        row[..w].copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + w]);
    }
    if w == NR {
        for p in 0..k {
            let bp: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().expect("full tile");
            for (r, row) in acc.iter_mut().enumerate() {
                let av = a[(i + r) * k + p];
                for q in 0..NR {
                    row[q] = row[q] + av * bp[q];
                }
            }
        }
    } else {
        for p in 0..k {
            let bp = &b[p * n + j..p * n + j + w];
            for (r, row) in acc.iter_mut().enumerate() {
                let av = a[(i + r) * k + p];
                for (x, &bv) in row[..w].iter_mut().zip(bp) {
                    *x = *x + av * bv;
                }
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i + r) * n + j..(i + r) * n + j + w].copy_from_slice(&row[..w]);
    }
}

/// c[m,n] += a[m,k] · b[k,n]
fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i < m {
        let rows = (m - i).min(MR);
        let mut j = 0;
        while j < n {
            let w = (n - j).min(NR);
            match rows {
                4 => tile::<T, 4>(a, b, c, i, j, w, k, n),
                3 => tile::<T, 3>(a, b, c, i, j, w, k, n),
                2 => tile::<T, 2>(a, b, c, i, j, w, k, n),
                _ => tile::<T, 1>(a, b, c, i, j, w, k, n),
            }
            j += w;
        }
        i += rows;
    }
}

fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let at = transpose(a, m, k);
    gemm_nn(&at, b, c, k, m, n);
}

/// c[m,n] += a[m,k] · b[n,k]ᵀ
fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm_nn(a, &bt, c, m, k, n);
}

fn std_normal_cdf<T: Real>(x: T) -> T {
    T::of(0.5) * (T::one() + (x * T::of(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn std_normal_pdf<T: Real>(x: T) -> T {
    T::of(0.398_942_280_401_432_7) * (-(x * x) * T::of(0.5)).libm_exp()
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(usize),
    Gather { table: NodeId, ids: Vec<u32> },
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    BatchMatMul { a: NodeId, b: NodeId, trans_b: bool },
    Reshape(NodeId),
    SplitHeads { x: NodeId, heads: usize },
    MergeHeads { x: NodeId, heads: usize },
    Scale(NodeId, T),
    MaskKeys(NodeId),
    Softmax { x: NodeId, axis: usize },
    Gelu(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: NodeId, mask: Vec<T> },
    SelectRows { x: NodeId, rows: Vec<usize> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, keep: Vec<bool>, probs: Vec<T> },
    WeightedSum { x: NodeId, weights: Vec<T> },
}

enum Value<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients for every parameter passed to [`Graph::param`], indexed by the
/// parameter's key. Parameters that the loss does not reach stay `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, key: usize) -> Option<&Tensor<T>> {
        self.grads.get(key).and_then(Option::as_ref)
    }

    /// Gradient for `key`, or zeros of the given shape when the loss does
    /// not depend on it.
    pub fn get_or_zeros(&self, key: usize, shape: &[usize]) -> Tensor<T> {
        self.get(key).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_vec(self) -> Vec<Option<Tensor<T>>> {
        self.grads
    }
}

/// Tape of recorded operations.
pub struct Graph<'p, T> {
    nodes: Vec<Node<'p, T>>,
    key_mask: Option<(Vec<bool>, usize, usize)>,
}

impl<'p, T: Real> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), key_mask: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { value: Value::Owned(value), op: Op::Input, needs_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// A trainable leaf borrowed from the caller; `key` identifies it in the
    /// returned [`Gradients`].
    pub fn param(&mut self, value: &'p Tensor<T>, key: usize) -> NodeId {
        self.nodes.push(Node { value: Value::Borrowed(value), op: Op::Param(key), needs_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    /// Rows of `table` selected by `ids`; output `[ids.len(), width]`.
    pub fn gather(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let t = self.value(table);
        if t.shape.len() != 2 {
            return shape_err(format!("gather table must be 2-d, got {:?}", t.shape));
        }
        let (rows, width) = (t.shape[0], t.shape[1]);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            let id = id as usize;
            if id >= rows {
                return Err(NumericsError::IndexOutOfRange { index: id, len: rows });
            }
            out.extend_from_slice(&t.data[id * width..(id + 1) * width]);
        }
        let value = Tensor { shape: vec![ids.len(), width], data: out };
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.data.len() != tb.data.len() {
            return shape_err(format!("add {:?} + {:?}", ta.shape, tb.shape));
        }
        let mut value = ta.clone();
        value.add_assign(tb);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// `x[..., n] + bias[n]`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.last_dim();
        if tb.data.len() != n {
            return shape_err(format!("bias {:?} for input {:?}", tb.shape, tx.shape));
        }
        let mut value = tx.clone();
        for row in value.data.chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(&tb.data) {
                *v = *v + b;
            }
        }
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x[..., k] · w[k, n]`, leading dimensions of `x` are preserved.
    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.shape.len() != 2 || tx.last_dim() != tw.shape[0] || tx.shape.is_empty() {
            return shape_err(format!("matmul {:?} · {:?}", tx.shape, tw.shape));
        }
        let (m, k, n) = (tx.rows(), tw.shape[0], tw.shape[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(&tx.data, &tw.data, &mut out, m, k, n);
        let mut shape = tx.shape.clone();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(x, w), &[x, w]))
    }

    /// Batched product over the leading dimension: `a[g,m,k] · b[g,k,n]`, or
    /// `a[g,m,k] · b[g,n,k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 3 || tb.shape.len() != 3 || ta.shape[0] != tb.shape[0] {
            return shape_err(format!("batch_matmul {:?} · {:?}", ta.shape, tb.shape));
        }
        let (g, m, k) = (ta.shape[0], ta.shape[1], ta.shape[2]);
        let (kb, n) = if trans_b { (tb.shape[2], tb.shape[1]) } else { (tb.shape[1], tb.shape[2]) };
        if kb != k {
            return shape_err(format!("batch_matmul inner dims {:?} · {:?}", ta.shape, tb.shape));
        }
        let mut out = vec![T::zero(); g * m * n];
        for gi in 0..g {
            let ai = &ta.data[gi * m * k..(gi + 1) * m * k];
            let bi = &tb.data[gi * k * n..(gi + 1) * k * n];
            let ci = &mut out[gi * m * n..(gi + 1) * m * n];
            if trans_b {
                gemm_nt(ai, bi, ci, m, k, n);
            } else {
                gemm_nn(ai, bi, ci, m, k, n);
            }
        }
        let value = Tensor { shape: vec![g, m, n], data: out };
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    /// Same data under a new shape.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `[b, s, heads·d] → [b·heads, s, d]`.
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.shape.len() != 3 || heads == 0 || !tx.shape[2].is_multiple_of(heads) {
            return shape_err(format!("split_heads {:?} into {heads}", tx.shape));
        }
        let (b, s, h) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let d = h / heads;
        let mut out = vec![T::zero(); tx.data.len()];
        for bi in 0..b {
            for si in 0..s {
                for a in 0..heads {
                    let src = (bi * s + si) * h + a * d;
                    let dst = ((bi * heads + a) * s + si) * d;
                    out[dst..dst + d].copy_from_slice(&tx.data[src..src + d]);
                }
            }
        }
        let value = Tensor { shape: vec![b * heads, s, d], data: out };
        Ok(self.push(value, Op::SplitHeads { x, heads }, &[x]))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.shape.len() != 3 || heads == 0 || !tx.shape[0].is_multiple_of(heads) {
            return shape_err(format!("merge_heads {:?} from {heads}", tx.shape));
        }
        let value = merge_heads_data(&tx.data, tx.shape[0] / heads, heads, tx.shape[1], tx.shape[2]);
        Ok(self.push(value, Op::MergeHeads { x, heads }, &[x]))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        let value = self.value(x).map(|v| v * c);
        Ok(self.push(value, Op::Scale(x, c), &[x]))
    }

    /// Sets the padding mask used by [`Graph::mask_keys`]: `keep[b·s + j]`
    /// is true for real tokens.
    pub fn set_key_mask(&mut self, keep: Vec<bool>, batch: usize, seq: usize) -> Result<()> {
        if keep.len() != batch * seq {
            return shape_err(format!("key mask of {} for {batch}x{seq}", keep.len()));
        }
        self.key_mask = Some((keep, batch, seq));
        Ok(())
    }

    /// Adds a large negative bias to attention scores `[b·heads, s, s]` at
    /// padded key positions.
    pub fn mask_keys(&mut self, scores: NodeId) -> Result<NodeId> {
        let Some((keep, batch, seq)) = &self.key_mask else {
            return shape_err("mask_keys without a key mask".into());
        };
        let ts = self.value(scores);
        let (batch, seq) = (*batch, *seq);
        if ts.shape.len() != 3 || ts.shape[1] != seq || ts.shape[2] != seq || !ts.shape[0].is_multiple_of(batch) {
            return shape_err(format!("mask_keys {:?} for {batch}x{seq}", ts.shape));
        }
        let heads = ts.shape[0] / batch;
        let bias = T::of(MASK_BIAS);
        let mut value = ts.clone();
        for (g, block) in value.data.chunks_mut(seq * seq).enumerate() {
            let mask = &keep[(g / heads) * seq..(g / heads + 1) * seq];
            for row in block.chunks_mut(seq) {
                for (v, &k) in row.iter_mut().zip(mask) {
                    if !k {
                        *v = *v + bias;
                    }
                }
            }
        }
        Ok(self.push(value, Op::MaskKeys(scores), &[scores]))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let tx = self.value(x);
        if axis >= tx.shape.len() {
            return shape_err(format!("softmax axis {axis} for {:?}", tx.shape));
        }
        let (outer, len, inner) = axis_layout(&tx.shape, axis);
        let mut out = tx.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| out[idx(a)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for a in 0..len {
                    let e = (out[idx(a)] - max).libm_exp();
                    out[idx(a)] = e;
                    sum = sum + e;
                }
                for a in 0..len {
                    out[idx(a)] = out[idx(a)] / sum;
                }
            }
        }
        let value = Tensor { shape: tx.shape.clone(), data: out };
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| v * std_normal_cdf(v));
        Ok(self.push(value, Op::Gelu(x), &[x]))
    }

    /// Normalizes each last-axis row to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.last_dim();
        if tg.data.len() != n || tb.data.len() != n {
            return shape_err(format!("layer_norm gain {:?} bias {:?} for {:?}", tg.shape, tb.shape, tx.shape));
        }
        let rows = tx.rows();
        let nf = T::from_usize(n).unwrap();
        let mut xhat = vec![T::zero(); tx.data.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.data.len()];
        for r in 0..rows {
            let row = &tx.data[r * n..(r + 1) * n];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data[j] + tb.data[j];
            }
        }
        let value = Tensor { shape: tx.shape.clone(), data: out };
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Inverted dropout. Outside training (or at rate 0) this is the
    /// identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, rate: f64, rng: &mut R, training: bool) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return shape_err(format!("dropout rate {rate} outside [0, 1)"));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::of(1.0 / (1.0 - rate));
        let tx = self.value(x);
        let mask: Vec<T> =
            (0..tx.data.len()).map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep_scale }).collect();
        let mut value = tx.clone();
        for (v, &m) in value.data.iter_mut().zip(&mask) {
            *v = *v * m;
        }
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Picks rows of `x` viewed as `[rows, last_dim]`.
    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let tx = self.value(x);
        let (n, total) = (tx.last_dim(), tx.rows());
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= total {
                return Err(NumericsError::IndexOutOfRange { index: r, len: total });
            }
            out.extend_from_slice(&tx.data[r * n..(r + 1) * n]);
        }
        let value = Tensor { shape: vec![rows.len(), n], data: out };
        Ok(self.push(value, Op::SelectRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Mean negative log-likelihood over rows with `keep[r]`, where
    /// `logits` is viewed as `[rows, classes]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], keep: &[bool]) -> Result<NodeId> {
        let tl = self.value(logits);
        let (c, rows) = (tl.last_dim(), tl.rows());
        if targets.len() != rows || keep.len() != rows {
            return shape_err(format!("cross_entropy {rows} rows, {} targets, {} mask", targets.len(), keep.len()));
        }
        let kept = keep.iter().filter(|k| **k).count();
        if kept == 0 {
            return Err(NumericsError::MaskedEverything);
        }
        let mut probs = vec![T::zero(); tl.data.len()];
        let mut total = T::zero();
        for r in 0..rows {
            if !keep[r] {
                continue;
            }
            if targets[r] >= c {
                return Err(NumericsError::IndexOutOfRange { index: targets[r], len: c });
            }
            let row = &tl.data[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum = row.iter().fold(T::zero(), |a, &v| a + (v - max).libm_exp());
            let log_z = max + sum.libm_ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - log_z).libm_exp();
            }
            total = total + (log_z - row[targets[r]]);
        }
        let loss = total / T::from_usize(kept).unwrap();
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), keep: keep.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// `Σ xᵢ·wᵢ` with constant weights; a generic way to reduce any tensor
    /// to a scalar.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<T>) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.data.len() != weights.len() {
            return shape_err(format!("weighted_sum {} weights for {:?}", weights.len(), tx.shape));
        }
        let s = tx.data.iter().zip(&weights).fold(T::zero(), |a, (&v, &w)| a + v * w);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x]))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.data.len() != 1 {
            return shape_err(format!("backward needs a scalar loss, got {:?}", lv.shape));
        }
        let key_count = self
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Param(k) => Some(k + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let mut params: Vec<Option<Tensor<T>>> = vec![None; key_count];
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor { shape: lv.shape.clone(), data: vec![T::one()] });

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(key) => accumulate(&mut params[*key], g),
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let width = t.shape[1];
                    let mut dt = Tensor::zeros(&t.shape);
                    for (r, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        let dst = &mut dt.data[id * width..(id + 1) * width];
                        for (d, &v) in dst.iter_mut().zip(&g.data[r * width..(r + 1) * width]) {
                            *d = *d + v;
                        }
                    }
                    self.send(&mut grads, *table, dt);
                }
                Op::Add(a, b) => {
                    let ga = g.clone().reshaped(self.value(*a).shape.clone())?;
                    let gb = g.reshaped(self.value(*b).shape.clone())?;
                    self.send(&mut grads, *a, ga);
                    self.send(&mut grads, *b, gb);
                }
                Op::AddBias(x, bias) => {
                    let tb = self.value(*bias);
                    let n = tb.data.len();
                    let mut db = Tensor::zeros(&tb.shape);
                    for row in g.data.chunks(n) {
                        for (d, &v) in db.data.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.send(&mut grads, *bias, db);
                    self.send(&mut grads, *x, g);
                }
                Op::MatMul(x, w) => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (m, k, n) = (tx.rows(), tw.shape[0], tw.shape[1]);
                    if self.nodes[w.0].needs_grad {
                        let mut dw = Tensor::zeros(&tw.shape);
                        gemm_tn(&tx.data, &g.data, &mut dw.data, m, k, n);
                        self.send(&mut grads, *w, dw);
                    }
                    if self.nodes[x.0].needs_grad {
                        let mut dx = Tensor::zeros(&tx.shape);
                        gemm_nt(&g.data, &tw.data, &mut dx.data, m, n, k);
                        self.send(&mut grads, *x, dx);
                    }
                }
                Op::Reshape(x) => {
                    let gx = g.reshaped(self.value(*x).shape.clone())?;
                    self.send(&mut grads, *x, gx);
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (groups, m, k) = (ta.shape[0], ta.shape[1], ta.shape[2]);
                    let n = g.shape[2];
                    let mut da = Tensor::zeros(&ta.shape);
                    let mut db = Tensor::zeros(&tb.shape);
                    for gi in 0..groups {
                        let ai = &ta.data[gi * m * k..(gi + 1) * m * k];
                        let bi = &tb.data[gi * k * n..(gi + 1) * k * n];
                        let gg = &g.data[gi * m * n..(gi + 1) * m * n];
                        let dai = &mut da.data[gi * m * k..(gi + 1) * m * k];
                        let dbi = &mut db.data[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            // C = A·Bᵀ, B is [n, k]
                            gemm_nn(gg, bi, dai, m, n, k);
                            gemm_tn(gg, ai, dbi, m, n, k);
                        } else {
                            gemm_nt(gg, bi, dai, m, n, k);
                            gemm_tn(ai, gg, dbi, m, k, n);
                        }
                    }
                    self.send(&mut grads, *a, da);
                    self.send(&mut grads, *b, db);
                }
                Op::SplitHeads { x, heads } => {
                    let tx = self.value(*x);
                    let (b, s) = (tx.shape[0], tx.shape[1]);
                    let d = tx.shape[2] / heads;
                    let dx = merge_heads_data(&g.data, b, *heads, s, d);
                    self.send(&mut grads, *x, dx);
                }
                Op::MergeHeads { x, heads } => {
                    let tx = self.value(*x);
                    let (s, d) = (tx.shape[1], tx.shape[2]);
                    let b = tx.shape[0] / heads;
                    let mut dx = Tensor::zeros(&tx.shape);
                    for bi in 0..b {
                        for si in 0..s {
                            for a in 0..*heads {
                                let src = (bi * s + si) * heads * d + a * d;
                                let dst = ((bi * heads + a) * s + si) * d;
                                dx.data[dst..dst + d].copy_from_slice(&g.data[src..src + d]);
                            }
                        }
                    }
                    self.send(&mut grads, *x, dx);
                }
                Op::Scale(x, c) => {
                    let dx = g.map(|v| v * *c);
                    self.send(&mut grads, *x, dx);
                }
                Op::MaskKeys(x) => self.send(&mut grads, *x, g),
                Op::Softmax { x, axis } => {
                    let y = self.value(NodeId(idx));
                    let (outer, len, inner) = axis_layout(&y.shape, *axis);
                    let mut dx = g;
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let dot = (0..len).fold(T::zero(), |s, a| s + dx.data[at(a)] * y.data[at(a)]);
                            for a in 0..len {
                                dx.data[at(a)] = y.data[at(a)] * (dx.data[at(a)] - dot);
                            }
                        }
                    }
                    self.send(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let tx = self.value(*x);
                    let mut dx = g;
                    for (d, &v) in dx.data.iter_mut().zip(&tx.data) {
                        *d = *d * (std_normal_cdf(v) + v * std_normal_pdf(v));
                    }
                    self.send(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let tg = self.value(*gain);
                    let n = tg.data.len();
                    let nf = T::from_usize(n).unwrap();
                    let mut dgain = Tensor::zeros(&tg.shape);
                    let mut dbias = Tensor::zeros(&self.value(*bias).shape);
                    let mut dx = Tensor::zeros(&self.value(*x).shape);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g.data[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..n {
                            dgain.data[j] = dgain.data[j] + gr[j] * hr[j];
                            dbias.data[j] = dbias.data[j] + gr[j];
                            let dh = gr[j] * tg.data[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * hr[j];
                        }
                        let (mean_dh, mean_dh_h) = (sum_dh / nf, sum_dh_h / nf);
                        for j in 0..n {
                            let dh = gr[j] * tg.data[j];
                            dx.data[r * n + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    self.send(&mut grads, *gain, dgain);
                    self.send(&mut grads, *bias, dbias);
                    self.send(&mut grads, *x, dx);
                }
                Op::Dropout { x, mask } => {
                    let mut dx = g;
                    for (d, &m) in dx.data.iter_mut().zip(mask) {
                        *d = *d * m;
                    }
                    self.send(&mut grads, *x, dx);
                }
                Op::SelectRows { x, rows } => {
                    let tx = self.value(*x);
                    let n = tx.last_dim();
                    let mut dx = Tensor::zeros(&tx.shape);
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            dx.data[r * n + j] = dx.data[r * n + j] + g.data[i * n + j];
                        }
                    }
                    self.send(&mut grads, *x, dx);
                }
                Op::CrossEntropy { logits, targets, keep, probs } => {
                    let tl = self.value(*logits);
                    let c = tl.last_dim();
                    let kept = keep.iter().filter(|k| **k).count();
                    let scale = g.data[0] / T::from_usize(kept).unwrap();
                    let mut dl = Tensor::zeros(&tl.shape);
                    for (r, &k) in keep.iter().enumerate() {
                        if !k {
                            continue;
                        }
                        for j in 0..c {
                            let onehot = if j == targets[r] { T::one() } else { T::zero() };
                            dl.data[r * c + j] = (probs[r * c + j] - onehot) * scale;
                        }
                    }
                    self.send(&mut grads, *logits, dl);
                }
                Op::WeightedSum { x, weights } => {
                    let tx = self.value(*x);
                    let dx = Tensor { shape: tx.shape.clone(), data: weights.iter().map(|&w| w * g.data[0]).collect() };
                    self.send(&mut grads, *x, dx);
                }
            }
        }
        Ok(Gradients { grads: params })
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], to: NodeId, g: Tensor<T>) {
        if self.nodes[to.0].needs_grad {
            accumulate(&mut grads[to.0], g);
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn merge_heads_data<T: Real>(data: &[T], b: usize, heads: usize, s: usize, d: usize) -> Tensor<T> {
    let h = heads * d;
    let mut out = vec![T::zero(); data.len()];
    for bi in 0..b {
        for a in 0..heads {
            for si in 0..s {
                let src = ((bi * heads + a) * s + si) * d;
                let dst = (bi * s + si) * h + a * d;
                out[dst..dst + d].copy_from_slice(&data[src..src + d]);
            }
        }
    }
    Tensor { shape: vec![b, s, h], data: out }
}

/// Finite-difference verification of reverse-mode gradients.
pub mod gradcheck {
    use super::*;

    /// Denominator floor for the relative error, so that gradients that are
    /// zero up to rounding do not blow the ratio up.
    pub const REL_ERR_FLOOR: f64 = 1e-6;

    #[derive(Debug, Clone, PartialEq)]
    pub struct ParamReport {
        pub key: usize,
        pub max_rel_err: f64,
        pub worst_index: usize,
        pub analytic: f64,
        pub numeric: f64,
    }

    pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
    }

    /// Compares `grads` against central differences of `loss` over every
    /// element of every parameter. The step is `h_scale·max(1, |x|)`.
    pub fn check<F>(params: &mut [Tensor<f64>], grads: &[Tensor<f64>], h_scale: f64, mut loss: F) -> Vec<ParamReport>
    where
        F: FnMut(&[Tensor<f64>]) -> f64,
    {
        let mut reports = Vec::with_capacity(params.len());
        for key in 0..params.len() {
            let mut report = ParamReport { key, max_rel_err: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
            for i in 0..params[key].len() {
                let x = params[key].data[i];
                let h = h_scale * x.abs().max(1.0);
                params[key].data[i] = x + h;
                let up = loss(params);
                params[key].data[i] = x - h;
                let down = loss(params);
                params[key].data[i] = x;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[key].data[i];
                let err = relative_error(analytic, numeric);
                if err > report.max_rel_err || i == 0 {
                    report = ParamReport { key, max_rel_err: err, worst_index: i, analytic, numeric };
                }
            }
            reports.push(report);
        }
        reports
    }
}
