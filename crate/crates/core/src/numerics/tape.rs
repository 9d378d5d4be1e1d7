//! Reverse-mode differentiation over row-major matrices.
//!
//! Every value on the tape is a `rows x cols` matrix (vectors are single
//! rows). Operations append a node holding the forward value plus whatever
//! the backward pass needs. [`Tape::backward`] walks the nodes in exact
//! reverse order and accumulates gradients additively, so a value used twice
//! receives the sum of both path gradients.

use std::sync::Arc;

use rand::Rng;

use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    Sqrt(Var),
    Gelu(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    SoftmaxRows(Var),
    TopkSoftmaxRows(Var),
    Mask(Var, Vec<bool>),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gather(Var, Arc<[usize]>),
    ScatterRows(Var, Arc<[usize]>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SegmentMean { x: Var, seg: Arc<[usize]>, counts: Vec<usize> },
    Rotate { x: Var, cos: Arc<[f64]>, sin: Arc<[f64]>, pairs: usize },
    RotateScaled { x: Var, scale: Var, row_seg: Arc<[usize]>, freqs: Arc<[f64]>, cos: Vec<f64>, sin: Vec<f64> },
    ScaleByCol { x: Var, g: Var, col: usize },
    Mae { pred: Var, target: Arc<[f64]>, mask: Vec<bool>, count: usize },
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Ordered record of differentiable operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// `out[m,n] += A[m,k] . B[k,n]` where element `(r, c)` of each operand lives at
/// `r * row_stride + c * col_stride`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], a_strides: (usize, usize), b: &[f64], b_strides: (usize, usize), out: &mut [f64]) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, (rs, cs): (usize, usize)| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(a.len() >= extent(m, k, a_strides) && b.len() >= extent(k, n, b_strides) && out.len() >= m * n);
    // SAFETY: the assertion above bounds every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// out[m,n] += a[m,k] . b[k,n]
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    gemm_acc(m, k, n, a, (k, 1), b, (n, 1), out);
}

// out[m,n] += a[m,k] . b[n,k]^T
fn matmul_t_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    gemm_acc(m, k, n, a, (k, 1), b, (1, k), out);
}

// out[k,n] += a[m,k]^T . b[m,n]
fn matmul_tn_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    gemm_acc(k, m, n, a, (1, k), b, (n, 1), out);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

// 1 + tanh(u) == 2 * sigmoid(2u)
fn gelu_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * GELU_C * (x + GELU_A * x * x * x)).exp())
}

pub(crate) fn gelu(x: f64) -> f64 {
    x * gelu_sigmoid(x)
}

fn gelu_grad(x: f64) -> f64 {
    let s = gelu_sigmoid(x);
    let t = 2.0 * s - 1.0;
    s + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub(crate) fn top_k_indices(xs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].partial_cmp(&xs[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k.min(xs.len()));
    idx
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Gradient of the last backward target with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        self.push(rows, cols, value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient without belonging to a parameter store.
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        self.push(rows, cols, value, Op::Leaf, true)
    }

    /// Places a stored parameter on the tape, viewed as `rows x cols` from its shape.
    /// Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let (rows, cols) = p.tensor.dims2();
        let v = self.push(rows, cols, p.tensor.data().to_vec(), Op::Leaf, p.trainable());
        self.nodes[v.0].param = Some(id);
        v
    }

    fn check_same(&self, a: Var, b: Var) {
        assert_eq!(self.dims(a), self.dims(b), "elementwise operands must share a shape");
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        self.check_same(a, b);
        let (r, c) = self.dims(a);
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(r, c, value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `a[r, c] + row[1, c]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(self.dims(row), (1, c), "add_row expects a 1 x cols bias");
        let bias = self.value(row).to_vec();
        let value = self.value(a).chunks(c).flat_map(|ch| ch.iter().zip(&bias).map(|(x, b)| x + b)).collect();
        let ng = self.ng(a) || self.ng(row);
        self.push(r, c, value, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.dims(a);
        let value = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.ng(a);
        self.push(r, c, value, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.dims(a);
        let value = self.value(a).iter().map(|x| x + s).collect();
        let ng = self.ng(a);
        self.push(r, c, value, Op::AddScalar(a), ng)
    }

    pub fn mul_const(&mut self, a: Var, k: Vec<f64>) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(k.len(), r * c);
        let value = self.value(a).iter().zip(&k).map(|(x, y)| x * y).collect();
        let ng = self.ng(a);
        self.push(r, c, value, Op::MulConst(a, k), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let value = self.value(a).iter().map(|x| x.sqrt()).collect();
        let ng = self.ng(a);
        self.push(r, c, value, Op::Sqrt(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let value = self.value(a).iter().map(|&x| gelu(x)).collect();
        let ng = self.ng(a);
        self.push(r, c, value, Op::Gelu(a), ng)
    }

    /// `a[m, k] . b[k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut value = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), m, k, n, &mut value);
        let ng = self.ng(a) || self.ng(b);
        self.push(m, n, value, Op::MatMul(a, b), ng)
    }

    /// `a[m, k] . b[n, k]^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_t inner dimensions differ");
        let mut value = vec![0.0; m * n];
        matmul_t_into(self.value(a), self.value(b), m, k, n, &mut value);
        let ng = self.ng(a) || self.ng(b);
        self.push(m, n, value, Op::MatMulT(a, b), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut value = self.value(a).to_vec();
        for row in value.chunks_mut(c) {
            super::functional::softmax_in_place(row);
        }
        let ng = self.ng(a);
        self.push(r, c, value, Op::SoftmaxRows(a), ng)
    }

    /// Per row: softmax over the `k` largest entries only, zero elsewhere.
    pub fn topk_softmax_rows(&mut self, a: Var, k: usize) -> Var {
        let (r, c) = self.dims(a);
        let mut value = vec![0.0; r * c];
        for (src, dst) in self.value(a).chunks(c).zip(value.chunks_mut(c)) {
            let idx = top_k_indices(src, k);
            let mut sel: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
            super::functional::softmax_in_place(&mut sel);
            for (&i, w) in idx.iter().zip(sel) {
                dst[i] = w;
            }
        }
        let ng = self.ng(a);
        self.push(r, c, value, Op::TopkSoftmaxRows(a), ng)
    }

    /// Per row: keep the `k` largest entries, zero the rest. Selection is not differentiated.
    pub fn topk_mask_rows(&mut self, a: Var, k: usize) -> Var {
        let (r, c) = self.dims(a);
        let mut keep = vec![false; r * c];
        for (row, src) in self.value(a).chunks(c).enumerate() {
            for i in top_k_indices(src, k) {
                keep[row * c + i] = true;
            }
        }
        let value = self.value(a).iter().zip(&keep).map(|(x, &m)| if m { *x } else { 0.0 }).collect();
        let ng = self.ng(a);
        self.push(r, c, value, Op::Mask(a, keep), ng)
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(gamma), (1, c));
        assert_eq!(self.dims(beta), (1, c));
        let g = self.value(gamma).to_vec();
        let b = self.value(beta).to_vec();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut value = vec![0.0; r * c];
        for (i, row) in self.value(x).chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                value[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(r, c, value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    /// `out[i] = a[map[i]]`, reshaped to `rows x cols`. Covers slicing, permutation,
    /// row lookup and broadcasting; the backward pass scatter-adds.
    pub fn gather(&mut self, a: Var, map: Arc<[usize]>, rows: usize, cols: usize) -> Var {
        assert_eq!(map.len(), rows * cols);
        let src = self.value(a);
        let value = map.iter().map(|&i| src[i]).collect();
        let ng = self.ng(a);
        self.push(rows, cols, value, Op::Gather(a, map), ng)
    }

    /// Places row `i` of `a` at row `targets[i]` of a zero `rows x cols` matrix.
    /// Targets must be distinct.
    pub fn scatter_rows(&mut self, a: Var, targets: Arc<[usize]>, rows: usize) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(targets.len(), r);
        let mut value = vec![0.0; rows * c];
        for (i, &t) in targets.iter().enumerate() {
            value[t * c..(t + 1) * c].copy_from_slice(&self.value(a)[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        self.push(rows, c, value, Op::ScatterRows(a, targets), ng)
    }

    /// Rows `rows_idx` of `a`, in order.
    pub fn gather_rows(&mut self, a: Var, rows_idx: &[usize]) -> Var {
        let c = self.dims(a).1;
        let map: Arc<[usize]> = rows_idx.iter().flat_map(|&r| (0..c).map(move |j| r * c + j)).collect();
        self.gather(a, map, rows_idx.len(), c)
    }

    /// Columns `start..start+width` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let (r, c) = self.dims(a);
        assert!(start + width <= c);
        let map: Arc<[usize]> = (0..r).flat_map(|i| (0..width).map(move |j| i * c + start + j)).collect();
        self.gather(a, map, r, width)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        assert!(parts.iter().all(|&p| self.dims(p).0 == r), "concat_cols row counts differ");
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(r, total, value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Rows `start..start+n` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, n: usize) -> Var {
        let (r, c) = self.dims(a);
        assert!(start + n <= r);
        let map: Arc<[usize]> = (start * c..(start + n) * c).collect();
        self.gather(a, map, n, c)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.dims(parts[0]).1;
        assert!(parts.iter().all(|&p| self.dims(p).1 == c), "concat_rows column counts differ");
        let mut value = Vec::new();
        for &p in parts {
            value.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value.len() / c.max(1), c, value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Mean over all entries of the rows assigned to each segment. Output is `n_seg x 1`.
    pub fn segment_mean(&mut self, x: Var, seg: Arc<[usize]>, n_seg: usize) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(seg.len(), r);
        let mut sums = vec![0.0; n_seg];
        let mut counts = vec![0usize; n_seg];
        for (i, row) in self.value(x).chunks(c).enumerate() {
            sums[seg[i]] += row.iter().sum::<f64>();
            counts[seg[i]] += c;
        }
        let value = sums.iter().zip(&counts).map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 }).collect();
        let ng = self.ng(x);
        self.push(n_seg, 1, value, Op::SegmentMean { x, seg, counts }, ng)
    }

    /// Rotates interleaved pairs `(2i, 2i+1)` for `i < pairs` of every row by fixed
    /// angles given as per-(row, pair) cosines and sines. Remaining columns pass through.
    pub fn rotate_pairs(&mut self, x: Var, cos: Arc<[f64]>, sin: Arc<[f64]>, pairs: usize) -> Var {
        let (r, c) = self.dims(x);
        assert!(2 * pairs <= c);
        assert_eq!(cos.len(), r * pairs);
        let mut value = self.value(x).to_vec();
        for i in 0..r {
            for p in 0..pairs {
                let (co, si) = (cos[i * pairs + p], sin[i * pairs + p]);
                let (a, b) = (value[i * c + 2 * p], value[i * c + 2 * p + 1]);
                value[i * c + 2 * p] = co * a - si * b;
                value[i * c + 2 * p + 1] = si * a + co * b;
            }
        }
        let ng = self.ng(x);
        self.push(r, c, value, Op::Rotate { x, cos, sin, pairs }, ng)
    }

    /// Rotates pairs `p < freqs.len()` of row `i` by `scale[row_seg[i]] * freqs[p]`,
    /// differentiable in both `x` and the per-segment `scale` (an `n x 1` column).
    pub fn rotate_pairs_scaled(&mut self, x: Var, scale: Var, row_seg: Arc<[usize]>, freqs: Arc<[f64]>) -> Var {
        let (r, c) = self.dims(x);
        let pairs = freqs.len();
        assert!(2 * pairs <= c);
        assert_eq!(row_seg.len(), r);
        let s = self.value(scale).to_vec();
        let mut cos = vec![0.0; r * pairs];
        let mut sin = vec![0.0; r * pairs];
        let mut value = self.value(x).to_vec();
        for i in 0..r {
            for p in 0..pairs {
                let theta = s[row_seg[i]] * freqs[p];
                let (si, co) = theta.sin_cos();
                cos[i * pairs + p] = co;
                sin[i * pairs + p] = si;
                let (a, b) = (value[i * c + 2 * p], value[i * c + 2 * p + 1]);
                value[i * c + 2 * p] = co * a - si * b;
                value[i * c + 2 * p + 1] = si * a + co * b;
            }
        }
        let ng = self.ng(x) || self.ng(scale);
        self.push(r, c, value, Op::RotateScaled { x, scale, row_seg, freqs, cos, sin }, ng)
    }

    /// `x[r, c] * g[r, col]` broadcast across columns.
    pub fn scale_by_col(&mut self, x: Var, g: Var, col: usize) -> Var {
        let (r, c) = self.dims(x);
        let (gr, gc) = self.dims(g);
        assert_eq!(gr, r);
        assert!(col < gc);
        let gv = self.value(g);
        let value = self.value(x).chunks(c).enumerate().flat_map(|(i, row)| {
            let w = gv[i * gc + col];
            row.iter().map(move |v| v * w)
        });
        let value: Vec<f64> = value.collect();
        let ng = self.ng(x) || self.ng(g);
        self.push(r, c, value, Op::ScaleByCol { x, g, col }, ng)
    }

    /// Masked mean absolute error against a constant target. Entries where `mask`
    /// is false are skipped; an all-masked input yields zero.
    pub fn mae(&mut self, pred: Var, target: Arc<[f64]>, mask: Vec<bool>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.len(), target.len());
        assert_eq!(p.len(), mask.len());
        let mut s = 0.0;
        let mut count = 0;
        for ((x, t), &m) in p.iter().zip(target.iter()).zip(&mask) {
            if m {
                s += (x - t).abs();
                count += 1;
            }
        }
        let value = if count > 0 { s / count as f64 } else { 0.0 };
        let ng = self.ng(pred);
        self.push(1, 1, vec![value], Op::Mae { pred, target, mask, count }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)`. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let n = self.value(a).len();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        self.mul_const(a, mask)
    }

    /// Back-propagates from the scalar `loss`. Returns the node indices in visit order.
    pub fn backward(&mut self, loss: Var) -> Vec<usize> {
        assert_eq!(self.dims(loss), (1, 1), "backward target must be a scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = Vec::new();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            visited.push(i);
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        visited
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] / bv[k];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for k in 0..g.len() {
                        gb[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gr) = self.acc(grads, *row) {
                    for ch in g.chunks(cols) {
                        gr.iter_mut().zip(ch).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::MulConst(a, k) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * k[j];
                    }
                }
            }
            Op::Sqrt(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * 0.5 / node.value[j];
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * gelu_grad(av[j]);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    // ga[m,k] += g[m,n] . b[k,n]^T
                    matmul_t_into(g, bv, m, n, k, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // gb[k,n] += a^T . g
                    matmul_tn_into(av, g, m, k, n, gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    // ga[m,k] += g[m,n] . b[n,k]
                    matmul_into(g, bv, m, n, k, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // gb[n,k] += g^T[n,m] . a[m,k]
                    matmul_tn_into(g, av, m, n, k, gb);
                }
            }
            Op::SoftmaxRows(a) | Op::TopkSoftmaxRows(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..rows {
                        let y = &node.value[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            ga[r * cols + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Mask(a, keep) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        if keep[j] {
                            ga[j] += g[j];
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = self.value(*gamma).to_vec();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..cols {
                            gg[j] += g[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for ch in g.chunks(cols) {
                        gb.iter_mut().zip(ch).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let c = cols as f64;
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..cols {
                            let gh = g[r * cols + j] * gam[j];
                            m1 += gh;
                            m2 += gh * xhat[r * cols + j];
                        }
                        m1 /= c;
                        m2 /= c;
                        for j in 0..cols {
                            let gh = g[r * cols + j] * gam[j];
                            gx[r * cols + j] += rstd[r] * (gh - m1 - xhat[r * cols + j] * m2);
                        }
                    }
                }
            }
            Op::Gather(a, map) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (j, &src) in map.iter().enumerate() {
                        ga[src] += g[j];
                    }
                }
            }
            Op::ScatterRows(a, targets) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..cols {
                            ga[r * cols + j] += g[t * cols + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * cols + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(gp) = self.acc(grads, p) {
                        for (x, y) in gp.iter_mut().zip(&g[off..off + len]) {
                            *x += y;
                        }
                    }
                    off += len;
                }
            }
            Op::SegmentMean { x, seg, counts } => {
                let c = self.dims(*x).1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &s) in seg.iter().enumerate() {
                        let d = g[s] / counts[s] as f64;
                        gx[r * c..(r + 1) * c].iter_mut().for_each(|v| *v += d);
                    }
                }
            }
            Op::Rotate { x, cos, sin, pairs } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        for j in 2 * pairs..cols {
                            gx[r * cols + j] += g[r * cols + j];
                        }
                        for p in 0..*pairs {
                            let (co, si) = (cos[r * pairs + p], sin[r * pairs + p]);
                            let (g0, g1) = (g[r * cols + 2 * p], g[r * cols + 2 * p + 1]);
                            gx[r * cols + 2 * p] += co * g0 + si * g1;
                            gx[r * cols + 2 * p + 1] += -si * g0 + co * g1;
                        }
                    }
                }
            }
            Op::RotateScaled { x, scale, row_seg, freqs, cos, sin } => {
                let pairs = freqs.len();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        for j in 2 * pairs..cols {
                            gx[r * cols + j] += g[r * cols + j];
                        }
                        for p in 0..pairs {
                            let (co, si) = (cos[r * pairs + p], sin[r * pairs + p]);
                            let (g0, g1) = (g[r * cols + 2 * p], g[r * cols + 2 * p + 1]);
                            gx[r * cols + 2 * p] += co * g0 + si * g1;
                            gx[r * cols + 2 * p + 1] += -si * g0 + co * g1;
                        }
                    }
                }
                if let Some(gs) = self.acc(grads, *scale) {
                    let y = &node.value;
                    for r in 0..rows {
                        let mut d = 0.0;
                        for p in 0..pairs {
                            let (y0, y1) = (y[r * cols + 2 * p], y[r * cols + 2 * p + 1]);
                            let (g0, g1) = (g[r * cols + 2 * p], g[r * cols + 2 * p + 1]);
                            d += freqs[p] * (-g0 * y1 + g1 * y0);
                        }
                        gs[row_seg[r]] += d;
                    }
                }
            }
            Op::ScaleByCol { x, g: gate, col } => {
                let xv = self.value(*x);
                let gv = self.value(*gate);
                let gc = self.dims(*gate).1;
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let w = gv[r * gc + col];
                        for j in 0..cols {
                            gx[r * cols + j] += g[r * cols + j] * w;
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gate) {
                    for r in 0..rows {
                        let d: f64 = (0..cols).map(|j| g[r * cols + j] * xv[r * cols + j]).sum();
                        gg[r * gc + col] += d;
                    }
                }
            }
            Op::Mae { pred, target, mask, count } => {
                if *count == 0 {
                    return;
                }
                let pv = self.value(*pred);
                if let Some(gp) = self.acc(grads, *pred) {
                    let s = g[0] / *count as f64;
                    for j in 0..pv.len() {
                        if mask[j] {
                            let d = pv[j] - target[j];
                            gp[j] += if d > 0.0 {
                                s
                            } else if d < 0.0 {
                                -s
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
        }
    }

    /// Adds the gradients of every trainable parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(id) = node.param else { continue };
            if let Some(Some(g)) = self.grads.get(i) {
                store.get_mut(id).tensor.accumulate_grad(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += h;
                let mut m = x.to_vec();
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn two_uses_accumulate() {
        let mut t = Tape::new();
        let w = t.leaf(1, 1, vec![3.0]);
        let a = t.mul(w, w);
        let b = t.scale(w, 2.0);
        let s = t.add(a, b);
        t.backward(s);
        assert_eq!(t.grad(w).unwrap(), &[8.0]);
    }

    #[test]
    fn backward_visits_in_reverse_order() {
        let mut t = Tape::new();
        let x = t.leaf(1, 2, vec![1.0, 2.0]);
        let y = t.gelu(x);
        let z = t.scale(y, 3.0);
        let s = t.sum(z);
        let order = t.backward(s);
        assert_eq!(order, vec![s.index(), z.index(), y.index(), x.index()]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let k = t.constant(1, 2, vec![1.0, -1.0]);
        let x = t.leaf(1, 2, vec![0.5, 0.25]);
        let p = t.mul(k, x);
        let s = t.sum(p);
        t.backward(s);
        assert!(t.grad(k).is_none());
        assert_eq!(t.grad(x).unwrap(), &[1.0, -1.0]);
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        let a = vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4];
        let b = vec![1.1, 0.2, -0.5, 0.9, 0.3, -0.8];
        let f = |a: &[f64], b: &[f64], transposed: bool| {
            let mut t = Tape::new();
            let va = t.leaf(2, 3, a.to_vec());
            let vb = if transposed { t.leaf(2, 3, b.to_vec()) } else { t.leaf(3, 2, b.to_vec()) };
            let m = if transposed { t.matmul_t(va, vb) } else { t.matmul(va, vb) };
            let sq = t.mul(m, m);
            let s = t.sum(sq);
            let v = t.scalar(s);
            t.backward(s);
            (v, t.grad(va).unwrap().to_vec(), t.grad(vb).unwrap().to_vec())
        };
        for tr in [false, true] {
            let (_, ga, gb) = f(&a, &b, tr);
            close(&ga, &fd(|x| f(x, &b, tr).0, &a), 1e-6);
            close(&gb, &fd(|x| f(&a, x, tr).0, &b), 1e-6);
        }
    }

    #[test]
    fn layer_norm_and_rotations_match_finite_differences() {
        let x = vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4, 1.5, 0.2];
        let gam = vec![1.1, 0.2, -0.5, 0.9];
        let sc = vec![0.7, -1.3];
        let run = |x: &[f64], gam: &[f64], sc: &[f64]| {
            let mut t = Tape::new();
            let vx = t.leaf(2, 4, x.to_vec());
            let vg = t.leaf(1, 4, gam.to_vec());
            let vb = t.leaf(1, 4, vec![0.1, 0.2, 0.3, 0.4]);
            let vs = t.leaf(2, 1, sc.to_vec());
            let ln = t.layer_norm_rows(vx, vg, vb, 1e-5);
            let rot = t.rotate_pairs_scaled(ln, vs, Arc::from(vec![1, 0]), Arc::from(vec![1.0]));
            let c: Arc<[f64]> = Arc::from(vec![0.3f64.cos(), 0.1f64.cos(), 1.2f64.cos(), 0.5f64.cos()]);
            let s: Arc<[f64]> = Arc::from(vec![0.3f64.sin(), 0.1f64.sin(), 1.2f64.sin(), 0.5f64.sin()]);
            let rot = t.rotate_pairs(rot, c, s, 2);
            let w = t.constant(2, 4, vec![0.5, -1.0, 2.0, 0.3, 1.0, 0.7, -0.2, 0.9]);
            let m = t.mul(rot, w);
            let sm = t.softmax_rows(m);
            let sq = t.mul(sm, m);
            let out = t.sum(sq);
            let v = t.scalar(out);
            t.backward(out);
            (v, t.grad(vx).unwrap().to_vec(), t.grad(vg).unwrap().to_vec(), t.grad(vs).unwrap().to_vec())
        };
        let (_, gx, gg, gs) = run(&x, &gam, &sc);
        close(&gx, &fd(|v| run(v, &gam, &sc).0, &x), 1e-6);
        close(&gg, &fd(|v| run(&x, v, &sc).0, &gam), 1e-6);
        close(&gs, &fd(|v| run(&x, &gam, v).0, &sc), 1e-6);
    }

    #[test]
    fn segment_mean_gather_div_sqrt_match_finite_differences() {
        let x = vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4];
        let run = |x: &[f64]| {
            let mut t = Tape::new();
            let vx = t.leaf(3, 2, x.to_vec());
            let seg: Arc<[usize]> = Arc::from(vec![0, 1, 0]);
            let mean = t.segment_mean(vx, seg.clone(), 2);
            let map: Arc<[usize]> = Arc::from(vec![0, 0, 1, 1, 0, 0]);
            let b = t.gather(mean, map, 3, 2);
            let c = t.sub(vx, b);
            let sq = t.mul(c, c);
            let var = t.segment_mean(sq, seg, 2);
            let var = t.add_scalar(var, 1e-3);
            let sd = t.sqrt(var);
            let map: Arc<[usize]> = Arc::from(vec![0, 0, 1, 1, 0, 0]);
            let sdb = t.gather(sd, map, 3, 2);
            let y = t.div(c, sdb);
            let w = t.constant(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.3, -0.7]);
            let y = t.mul(y, w);
            let y = t.gelu(y);
            let sc = t.scatter_rows(y, Arc::from(vec![2, 0, 4]), 5);
            let back = t.gather_rows(sc, &[4, 2, 0]);
            let y = t.add(y, back);
            let top = t.slice_rows(y, 0, 1);
            let rest = t.slice_rows(y, 1, 2);
            let y = t.concat_rows(&[rest, top]);
            let y = t.mul(y, w);
            let g = t.concat_cols(&[y, vx]);
            let g = t.slice_cols(g, 1, 3);
            let out = t.sum(g);
            let v = t.scalar(out);
            t.backward(out);
            (v, t.grad(vx).unwrap().to_vec())
        };
        let (_, g) = run(&x);
        close(&g, &fd(|v| run(v).0, &x), 1e-5);
    }

    #[test]
    fn topk_ops_and_scale_by_col_match_finite_differences() {
        let x = vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4];
        let run = |x: &[f64]| {
            let mut t = Tape::new();
            let vx = t.leaf(2, 3, x.to_vec());
            let w = t.topk_softmax_rows(vx, 2);
            let m = t.topk_mask_rows(vx, 1);
            let s = t.scale_by_col(w, m, 2);
            let s2 = t.scale_by_col(vx, w, 0);
            let a = t.add(s, s2);
            let out = t.mae(a, Arc::from(vec![0.1, 0.2, -0.3, 0.4, 0.0, 9.0]), vec![true, true, true, true, true, false]);
            let v = t.scalar(out);
            t.backward(out);
            (v, t.grad(vx).unwrap().to_vec())
        };
        let (_, g) = run(&x);
        close(&g, &fd(|v| run(v).0, &x), 1e-6);
    }

    #[test]
    fn topk_softmax_zeroes_unselected() {
        let mut t = Tape::new();
        let x = t.constant(1, 4, vec![1.0, 3.0, 2.0, 0.0]);
        let w = t.topk_softmax_rows(x, 2);
        let v = t.value(w);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[3], 0.0);
        assert!((v[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.0, 5.0, 5.0, 1.0], 3), vec![1, 2, 3]);
    }

    #[test]
    fn dropout_is_inverted_and_identity_at_zero() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = t.constant(1, 1000, vec![1.0; 1000]);
        assert_eq!(t.dropout(x, 0.0, &mut rng), x);
        let y = t.dropout(x, 0.3, &mut rng);
        let v = t.value(y);
        assert!(v.iter().all(|&e| e == 0.0 || (e - 1.0 / 0.7).abs() < 1e-12));
        let mean = v.iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.1);
    }
}
