//! Define-by-run gradient tape.
//!
//! Every differentiable primitive is a method on [`Tape`]. A fresh tape is
//! built for each training step and discarded afterwards. Operations record
//! a node only when at least one input is tracked; pure inference therefore
//! costs nothing extra. The tape is confined to one thread for the duration
//! of a step; parallelism happens across independent tapes.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type NodeId = usize;

enum Op<F: Scalar> {
    Leaf,
    Add { a: Tensor<F>, b: Tensor<F> },
    Sub { a: Tensor<F>, b: Tensor<F> },
    Mul { a: Tensor<F>, b: Tensor<F> },
    AddBias { x: Tensor<F>, b: Tensor<F> },
    Scale { x: Tensor<F>, c: F },
    Matmul { a: Tensor<F>, b: Tensor<F> },
    /// C = A · Bᵀ (rows of both operands are contracted).
    MatmulNT { a: Tensor<F>, b: Tensor<F> },
    Transpose { x: Tensor<F> },
    Gelu { x: Tensor<F> },
    Softmax { x: Tensor<F>, axis: usize, out: Tensor<F> },
    LayerNorm { x: Tensor<F>, gamma: Tensor<F>, beta: Tensor<F>, eps: F },
    Embedding { table: Tensor<F>, ids: Vec<usize> },
    ConcatRows { parts: Vec<Tensor<F>> },
    SliceRows { x: Tensor<F>, start: usize },
    GatherRows { x: Tensor<F>, ids: Vec<usize> },
    SliceCols { x: Tensor<F>, start: usize },
    ConcatCols { parts: Vec<Tensor<F>> },
    SumAll { x: Tensor<F> },
    MeanAll { x: Tensor<F> },
    MeanRows { x: Tensor<F> },
    CrossEntropy { logits: Tensor<F>, labels: Vec<usize> },
    StraightThrough { soft: Tensor<F> },
}

struct Node<F: Scalar> {
    op: Op<F>,
}

/// Accumulated gradients from one backward pass.
pub struct Gradients<F: Scalar> {
    by_node: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient w.r.t. a tracked tensor, if any path reached it.
    pub fn wrt(&self, t: &Tensor<F>) -> Option<&[F]> {
        t.node.and_then(|id| self.by_node[id].as_deref())
    }

    /// Gradient w.r.t. a tracked tensor; parameters untouched by the loss
    /// get an explicit zero gradient.
    pub fn wrt_or_zeros(&self, t: &Tensor<F>) -> Vec<F> {
        match self.wrt(t) {
            Some(g) => g.to_vec(),
            None => vec![F::zero(); t.numel()],
        }
    }
}

pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

// ── raw matrix kernels ──────────────────────────────────────────────

/// C[m×n] = A[m×k] · B[k×n], row-major.
pub fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

/// C[m×n] = A[m×k] · B[n×k]ᵀ, row-major.
fn matmul_nt_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *cv = acc;
        }
    }
    c
}

/// C[k×n] = A[m×k]ᵀ · B[m×n], row-major.
fn matmul_tn_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), m * n);
    let mut c = vec![F::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

fn transpose_raw<F: Scalar>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn softmax_raw<F: Scalar>(x: &[F], shape: &[usize], axis: usize) -> Vec<F> {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![F::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |s: usize| o * axis_len * inner + s * inner + i;
            let mut mx = F::neg_infinity();
            for s in 0..axis_len {
                mx = mx.max(x[at(s)]);
            }
            let mut denom = F::zero();
            for s in 0..axis_len {
                let e = (x[at(s)] - mx).exp();
                out[at(s)] = e;
                denom = denom + e;
            }
            for s in 0..axis_len {
                out[at(s)] = out[at(s)] / denom;
            }
        }
    }
    out
}

fn gelu_val<F: Scalar>(x: F) -> F {
    // x · Φ(x) with the exact Gaussian CDF, Φ(x) = (1 + erf(x/√2)) / 2.
    let half = F::cast_from(0.5);
    let inv_sqrt2 = F::cast_from(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (F::one() + (x * inv_sqrt2).erf())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    // Φ(x) + x·φ(x)
    let half = F::cast_from(0.5);
    let inv_sqrt2 = F::cast_from(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = F::cast_from(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let phi_cdf = half * (F::one() + (x * inv_sqrt2).erf());
    let phi_pdf = inv_sqrt_2pi * (-half * x * x).exp();
    phi_cdf + x * phi_pdf
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a tracked leaf (a trainable parameter or any
    /// value gradients should flow to).
    pub fn watch(&mut self, t: &Tensor<F>) -> Tensor<F> {
        let mut out = t.detached();
        out.node = Some(self.push(Op::Leaf));
        out
    }

    fn push(&mut self, op: Op<F>) -> NodeId {
        self.nodes.push(Node { op });
        self.nodes.len() - 1
    }

    fn record(&mut self, tracked: bool, op: Op<F>, mut out: Tensor<F>) -> Tensor<F> {
        if tracked {
            out.node = Some(self.push(op));
        }
        out
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
        assert_eq!(a.shape(), b.shape(), "add: shape {:?} vs {:?}", a.shape(), b.shape());
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data);
        self.record(a.is_tracked() || b.is_tracked(), Op::Add { a: a.clone(), b: b.clone() }, out)
    }

    pub fn sub(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
        assert_eq!(a.shape(), b.shape(), "sub: shape {:?} vs {:?}", a.shape(), b.shape());
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data);
        self.record(a.is_tracked() || b.is_tracked(), Op::Sub { a: a.clone(), b: b.clone() }, out)
    }

    pub fn mul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
        assert_eq!(a.shape(), b.shape(), "mul: shape {:?} vs {:?}", a.shape(), b.shape());
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data);
        self.record(a.is_tracked() || b.is_tracked(), Op::Mul { a: a.clone(), b: b.clone() }, out)
    }

    /// Broadcast-add a vector across the rows of a matrix.
    pub fn add_bias(&mut self, x: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.rank(), 2, "add_bias: x must be rank 2, got {:?}", x.shape());
        assert_eq!(
            b.numel(),
            x.dim(1),
            "add_bias: bias {:?} vs row width {}",
            b.shape(),
            x.dim(1)
        );
        let w = x.dim(1);
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b.data()[i % w])
            .collect();
        let out = Tensor::from_vec(x.shape().to_vec(), data);
        self.record(x.is_tracked() || b.is_tracked(), Op::AddBias { x: x.clone(), b: b.clone() }, out)
    }

    pub fn scale(&mut self, x: &Tensor<F>, c: F) -> Tensor<F> {
        let data = x.data().iter().map(|&v| v * c).collect();
        let out = Tensor::from_vec(x.shape().to_vec(), data);
        self.record(x.is_tracked(), Op::Scale { x: x.clone(), c }, out)
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
        assert_eq!(a.rank(), 2, "matmul: lhs must be rank 2, got {:?}", a.shape());
        assert_eq!(b.rank(), 2, "matmul: rhs must be rank 2, got {:?}", b.shape());
        assert_eq!(
            a.dim(1),
            b.dim(0),
            "matmul: inner dimensions disagree, {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let out = Tensor::from_vec(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n));
        self.record(a.is_tracked() || b.is_tracked(), Op::Matmul { a: a.clone(), b: b.clone() }, out)
    }

    /// a[m×k] · b[n×k]ᵀ without materializing the transpose.
    pub fn matmul_nt(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
        assert_eq!(a.rank(), 2, "matmul_nt: lhs must be rank 2, got {:?}", a.shape());
        assert_eq!(b.rank(), 2, "matmul_nt: rhs must be rank 2, got {:?}", b.shape());
        assert_eq!(
            a.dim(1),
            b.dim(1),
            "matmul_nt: contraction widths disagree, {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(0));
        let out = Tensor::from_vec(vec![m, n], matmul_nt_raw(a.data(), b.data(), m, k, n));
        self.record(a.is_tracked() || b.is_tracked(), Op::MatmulNT { a: a.clone(), b: b.clone() }, out)
    }

    pub fn transpose(&mut self, x: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.rank(), 2, "transpose: rank 2 required, got {:?}", x.shape());
        let (r, c) = (x.dim(0), x.dim(1));
        let out = Tensor::from_vec(vec![c, r], transpose_raw(x.data(), r, c));
        self.record(x.is_tracked(), Op::Transpose { x: x.clone() }, out)
    }

    // ── nonlinearities ──────────────────────────────────────────────

    pub fn gelu(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let data = x.data().iter().map(|&v| gelu_val(v)).collect();
        let out = Tensor::from_vec(x.shape().to_vec(), data);
        self.record(x.is_tracked(), Op::Gelu { x: x.clone() }, out)
    }

    pub fn softmax(&mut self, x: &Tensor<F>, axis: usize) -> Tensor<F> {
        assert!(axis < x.rank(), "softmax: axis {} out of range for {:?}", axis, x.shape());
        let out = Tensor::from_vec(x.shape().to_vec(), softmax_raw(x.data(), x.shape(), axis));
        let tracked = x.is_tracked();
        self.record(tracked, Op::Softmax { x: x.clone(), axis, out: out.detached() }, out)
    }

    /// Normalize each trailing-dimension vector to zero mean and unit
    /// variance, then apply the learned affine map. A constant vector
    /// normalizes to zeros (eps keeps the variance denominator finite).
    pub fn layer_norm(&mut self, x: &Tensor<F>, gamma: &Tensor<F>, beta: &Tensor<F>, eps: F) -> Tensor<F> {
        let d = *x.shape().last().expect("layer_norm: empty shape");
        assert_eq!(gamma.numel(), d, "layer_norm: gamma {:?} vs width {}", gamma.shape(), d);
        assert_eq!(beta.numel(), d, "layer_norm: beta {:?} vs width {}", beta.shape(), d);
        let rows = x.numel() / d;
        let df = F::cast_from(d as f64);
        let mut data = vec![F::zero(); x.numel()];
        for r in 0..rows {
            let xs = &x.data()[r * d..(r + 1) * d];
            let mut mean = F::zero();
            for &v in xs {
                mean = mean + v;
            }
            mean = mean / df;
            let mut var = F::zero();
            for &v in xs {
                let c = v - mean;
                var = var + c * c;
            }
            var = var / df;
            let inv_std = F::one() / (var + eps).sqrt();
            for (i, &v) in xs.iter().enumerate() {
                data[r * d + i] = (v - mean) * inv_std * gamma.data()[i] + beta.data()[i];
            }
        }
        let out = Tensor::from_vec(x.shape().to_vec(), data);
        let tracked = x.is_tracked() || gamma.is_tracked() || beta.is_tracked();
        self.record(
            tracked,
            Op::LayerNorm { x: x.clone(), gamma: gamma.clone(), beta: beta.clone(), eps },
            out,
        )
    }

    // ── lookup / rearrangement ──────────────────────────────────────

    /// Row gather from an embedding table; the gradient scatters back
    /// additively, so repeated ids sum their contributions.
    pub fn embedding(&mut self, table: &Tensor<F>, ids: &[usize]) -> Tensor<F> {
        assert_eq!(table.rank(), 2, "embedding: table must be rank 2, got {:?}", table.shape());
        let (v, d) = (table.dim(0), table.dim(1));
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding: id {} out of range for table with {} rows", id, v);
            data.extend_from_slice(table.row(id));
        }
        let out = Tensor::from_vec(vec![ids.len(), d], data);
        self.record(
            table.is_tracked(),
            Op::Embedding { table: table.clone(), ids: ids.to_vec() },
            out,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Tensor<F>]) -> Tensor<F> {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let d = parts[0].dim(1);
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(p.rank(), 2, "concat_rows: rank 2 required, got {:?}", p.shape());
            assert_eq!(p.dim(1), d, "concat_rows: width {:?} vs {}", p.shape(), d);
            rows += p.dim(0);
            data.extend_from_slice(p.data());
        }
        let out = Tensor::from_vec(vec![rows, d], data);
        let tracked = parts.iter().any(|p| p.is_tracked());
        self.record(tracked, Op::ConcatRows { parts: parts.to_vec() }, out)
    }

    pub fn slice_rows(&mut self, x: &Tensor<F>, start: usize, len: usize) -> Tensor<F> {
        assert_eq!(x.rank(), 2, "slice_rows: rank 2 required, got {:?}", x.shape());
        assert!(start + len <= x.dim(0), "slice_rows: {}..{} out of {:?}", start, start + len, x.shape());
        let d = x.dim(1);
        let data = x.data()[start * d..(start + len) * d].to_vec();
        let out = Tensor::from_vec(vec![len, d], data);
        self.record(x.is_tracked(), Op::SliceRows { x: x.clone(), start }, out)
    }

    pub fn gather_rows(&mut self, x: &Tensor<F>, ids: &[usize]) -> Tensor<F> {
        assert_eq!(x.rank(), 2, "gather_rows: rank 2 required, got {:?}", x.shape());
        let d = x.dim(1);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < x.dim(0), "gather_rows: row {} out of {:?}", id, x.shape());
            data.extend_from_slice(x.row(id));
        }
        let out = Tensor::from_vec(vec![ids.len(), d], data);
        self.record(x.is_tracked(), Op::GatherRows { x: x.clone(), ids: ids.to_vec() }, out)
    }

    pub fn slice_cols(&mut self, x: &Tensor<F>, start: usize, len: usize) -> Tensor<F> {
        assert_eq!(x.rank(), 2, "slice_cols: rank 2 required, got {:?}", x.shape());
        assert!(start + len <= x.dim(1), "slice_cols: {}..{} out of {:?}", start, start + len, x.shape());
        let (rows, w) = (x.dim(0), x.dim(1));
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * w + start..r * w + start + len]);
        }
        let out = Tensor::from_vec(vec![rows, len], data);
        self.record(x.is_tracked(), Op::SliceCols { x: x.clone(), start }, out)
    }

    pub fn concat_cols(&mut self, parts: &[Tensor<F>]) -> Tensor<F> {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let rows = parts[0].dim(0);
        let mut width = 0;
        for p in parts {
            assert_eq!(p.rank(), 2, "concat_cols: rank 2 required, got {:?}", p.shape());
            assert_eq!(p.dim(0), rows, "concat_cols: rows {:?} vs {}", p.shape(), rows);
            width += p.dim(1);
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        let out = Tensor::from_vec(vec![rows, width], data);
        let tracked = parts.iter().any(|p| p.is_tracked());
        self.record(tracked, Op::ConcatCols { parts: parts.to_vec() }, out)
    }

    // ── reductions / losses ─────────────────────────────────────────

    pub fn sum_all(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let mut s = F::zero();
        for &v in x.data() {
            s = s + v;
        }
        let out = Tensor::scalar(s);
        self.record(x.is_tracked(), Op::SumAll { x: x.clone() }, out)
    }

    pub fn mean_all(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let mut s = F::zero();
        for &v in x.data() {
            s = s + v;
        }
        let out = Tensor::scalar(s / F::cast_from(x.numel() as f64));
        self.record(x.is_tracked(), Op::MeanAll { x: x.clone() }, out)
    }

    /// Column means of a matrix: [n×d] → [1×d].
    pub fn mean_rows(&mut self, x: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.rank(), 2, "mean_rows: rank 2 required, got {:?}", x.shape());
        let (n, d) = (x.dim(0), x.dim(1));
        let nf = F::cast_from(n as f64);
        let mut data = vec![F::zero(); d];
        for r in 0..n {
            for (acc, &v) in data.iter_mut().zip(x.row(r)) {
                *acc = *acc + v;
            }
        }
        for v in data.iter_mut() {
            *v = *v / nf;
        }
        let out = Tensor::from_vec(vec![1, d], data);
        self.record(x.is_tracked(), Op::MeanRows { x: x.clone() }, out)
    }

    /// Mean softmax cross-entropy over rows of a logit matrix.
    pub fn cross_entropy(&mut self, logits: &Tensor<F>, labels: &[usize]) -> Tensor<F> {
        assert_eq!(logits.rank(), 2, "cross_entropy: rank 2 required, got {:?}", logits.shape());
        let (n, c) = (logits.dim(0), logits.dim(1));
        assert_eq!(labels.len(), n, "cross_entropy: {} labels for {} rows", labels.len(), n);
        let mut total = F::zero();
        for (r, &lbl) in labels.iter().enumerate() {
            assert!(lbl < c, "cross_entropy: label {} out of range for {} classes", lbl, c);
            let row = logits.row(r);
            let mut mx = F::neg_infinity();
            for &v in row {
                mx = mx.max(v);
            }
            let mut denom = F::zero();
            for &v in row {
                denom = denom + (v - mx).exp();
            }
            total = total - (row[lbl] - mx - denom.ln());
        }
        let out = Tensor::scalar(total / F::cast_from(n as f64));
        self.record(
            logits.is_tracked(),
            Op::CrossEntropy { logits: logits.clone(), labels: labels.to_vec() },
            out,
        )
    }

    /// Forward takes the value of `hard`; the gradient flows to `soft`
    /// unchanged (straight-through estimator).
    pub fn straight_through(&mut self, soft: &Tensor<F>, hard: &Tensor<F>) -> Tensor<F> {
        assert_eq!(soft.shape(), hard.shape(), "straight_through: {:?} vs {:?}", soft.shape(), hard.shape());
        let out = Tensor::from_vec(hard.shape().to_vec(), hard.data().to_vec());
        self.record(soft.is_tracked(), Op::StraightThrough { soft: soft.clone() }, out)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Visits every recorded operation
    /// exactly once, in reverse record order; fan-out sums.
    pub fn backward(&self, loss: &Tensor<F>) -> Gradients<F> {
        assert_eq!(loss.numel(), 1, "backward: loss must be scalar, got shape {:?}", loss.shape());
        let loss_node = loss.node.expect("backward: loss is not on the tape");
        let mut by_node: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        by_node[loss_node] = Some(vec![F::one()]);

        for id in (0..self.nodes.len()).rev() {
            let grad = match by_node[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_backward(id, &grad, &mut by_node);
            by_node[id] = Some(grad);
        }
        Gradients { by_node }
    }

    fn apply_backward(&self, id: NodeId, grad: &[F], by_node: &mut [Option<Vec<F>>]) {
        let accum = |by_node: &mut [Option<Vec<F>>], t: &Tensor<F>, contrib: &[F]| {
            if let Some(nid) = t.node {
                let slot = by_node[nid].get_or_insert_with(|| vec![F::zero(); t.numel()]);
                for (a, &b) in slot.iter_mut().zip(contrib) {
                    *a = *a + b;
                }
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                accum(by_node, a, grad);
                accum(by_node, b, grad);
            }
            Op::Sub { a, b } => {
                accum(by_node, a, grad);
                let neg: Vec<F> = grad.iter().map(|&g| -g).collect();
                accum(by_node, b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<F> = grad.iter().zip(b.data()).map(|(&g, &y)| g * y).collect();
                let db: Vec<F> = grad.iter().zip(a.data()).map(|(&g, &x)| g * x).collect();
                accum(by_node, a, &da);
                accum(by_node, b, &db);
            }
            Op::AddBias { x, b } => {
                accum(by_node, x, grad);
                let w = b.numel();
                let mut db = vec![F::zero(); w];
                for (i, &g) in grad.iter().enumerate() {
                    db[i % w] = db[i % w] + g;
                }
                accum(by_node, b, &db);
            }
            Op::Scale { x, c } => {
                let dx: Vec<F> = grad.iter().map(|&g| g * *c).collect();
                accum(by_node, x, &dx);
            }
            Op::Matmul { a, b } => {
                let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
                // dA = G · Bᵀ, dB = Aᵀ · G
                let da = matmul_nt_raw(grad, b.data(), m, n, k);
                let db = matmul_tn_raw(a.data(), grad, m, k, n);
                accum(by_node, a, &da);
                accum(by_node, b, &db);
            }
            Op::MatmulNT { a, b } => {
                let (m, k, n) = (a.dim(0), a.dim(1), b.dim(0));
                // C = A·Bᵀ: dA = G · B, dB = Gᵀ · A
                let da = matmul_raw(grad, b.data(), m, n, k);
                let db = matmul_tn_raw(grad, a.data(), m, n, k);
                accum(by_node, a, &da);
                accum(by_node, b, &db);
            }
            Op::Transpose { x } => {
                let (r, c) = (x.dim(0), x.dim(1));
                accum(by_node, x, &transpose_raw(grad, c, r));
            }
            Op::Gelu { x } => {
                let dx: Vec<F> = grad.iter().zip(x.data()).map(|(&g, &v)| g * gelu_grad(v)).collect();
                accum(by_node, x, &dx);
            }
            Op::Softmax { x, axis, out } => {
                // ds_i = s_i (g_i − Σ_j g_j s_j) per slice
                let shape = x.shape();
                let axis_len = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let s = out.data();
                let mut dx = vec![F::zero(); x.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * axis_len * inner + k * inner + i;
                        let mut dot = F::zero();
                        for k in 0..axis_len {
                            dot = dot + grad[at(k)] * s[at(k)];
                        }
                        for k in 0..axis_len {
                            dx[at(k)] = s[at(k)] * (grad[at(k)] - dot);
                        }
                    }
                }
                accum(by_node, x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = *x.shape().last().unwrap();
                let rows = x.numel() / d;
                let df = F::cast_from(d as f64);
                let mut dx = vec![F::zero(); x.numel()];
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                for r in 0..rows {
                    let xs = &x.data()[r * d..(r + 1) * d];
                    let gs = &grad[r * d..(r + 1) * d];
                    let mut mean = F::zero();
                    for &v in xs {
                        mean = mean + v;
                    }
                    mean = mean / df;
                    let mut var = F::zero();
                    for &v in xs {
                        let c = v - mean;
                        var = var + c * c;
                    }
                    var = var / df;
                    let inv_std = F::one() / (var + *eps).sqrt();

                    let xhat: Vec<F> = xs.iter().map(|&v| (v - mean) * inv_std).collect();
                    let mut dxhat = vec![F::zero(); d];
                    for i in 0..d {
                        dgamma[i] = dgamma[i] + gs[i] * xhat[i];
                        dbeta[i] = dbeta[i] + gs[i];
                        dxhat[i] = gs[i] * gamma.data()[i];
                    }
                    let mut sum_dxhat = F::zero();
                    let mut sum_dxhat_xhat = F::zero();
                    for i in 0..d {
                        sum_dxhat = sum_dxhat + dxhat[i];
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat[i] * xhat[i];
                    }
                    for i in 0..d {
                        dx[r * d + i] =
                            inv_std / df * (df * dxhat[i] - sum_dxhat - xhat[i] * sum_dxhat_xhat);
                    }
                }
                accum(by_node, x, &dx);
                accum(by_node, gamma, &dgamma);
                accum(by_node, beta, &dbeta);
            }
            Op::Embedding { table, ids } => {
                let d = table.dim(1);
                let mut dt = vec![F::zero(); table.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for i in 0..d {
                        dt[id * d + i] = dt[id * d + i] + grad[r * d + i];
                    }
                }
                accum(by_node, table, &dt);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = p.numel();
                    accum(by_node, p, &grad[offset..offset + n]);
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let d = x.dim(1);
                let mut dx = vec![F::zero(); x.numel()];
                dx[start * d..start * d + grad.len()].copy_from_slice(grad);
                accum(by_node, x, &dx);
            }
            Op::GatherRows { x, ids } => {
                let d = x.dim(1);
                let mut dx = vec![F::zero(); x.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for i in 0..d {
                        dx[id * d + i] = dx[id * d + i] + grad[r * d + i];
                    }
                }
                accum(by_node, x, &dx);
            }
            Op::SliceCols { x, start } => {
                let (rows, w) = (x.dim(0), x.dim(1));
                let len = grad.len() / rows;
                let mut dx = vec![F::zero(); x.numel()];
                for r in 0..rows {
                    dx[r * w + start..r * w + start + len].copy_from_slice(&grad[r * len..(r + 1) * len]);
                }
                accum(by_node, x, &dx);
            }
            Op::ConcatCols { parts } => {
                let rows = parts[0].dim(0);
                let width: usize = parts.iter().map(|p| p.dim(1)).sum();
                let mut offset = 0;
                for p in parts {
                    let w = p.dim(1);
                    let mut dp = vec![F::zero(); p.numel()];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&grad[r * width + offset..r * width + offset + w]);
                    }
                    accum(by_node, p, &dp);
                    offset += w;
                }
            }
            Op::SumAll { x } => {
                let dx = vec![grad[0]; x.numel()];
                accum(by_node, x, &dx);
            }
            Op::MeanAll { x } => {
                let g = grad[0] / F::cast_from(x.numel() as f64);
                let dx = vec![g; x.numel()];
                accum(by_node, x, &dx);
            }
            Op::MeanRows { x } => {
                let (n, d) = (x.dim(0), x.dim(1));
                let nf = F::cast_from(n as f64);
                let mut dx = vec![F::zero(); x.numel()];
                for r in 0..n {
                    for i in 0..d {
                        dx[r * d + i] = grad[i] / nf;
                    }
                }
                accum(by_node, x, &dx);
            }
            Op::CrossEntropy { logits, labels } => {
                let (n, c) = (logits.dim(0), logits.dim(1));
                let s = softmax_raw(logits.data(), logits.shape(), 1);
                let nf = F::cast_from(n as f64);
                let mut dl = vec![F::zero(); logits.numel()];
                for (r, &lbl) in labels.iter().enumerate() {
                    for j in 0..c {
                        let y = if j == lbl { F::one() } else { F::zero() };
                        dl[r * c + j] = grad[0] * (s[r * c + j] - y) / nf;
                    }
                }
                accum(by_node, logits, &dl);
            }
            Op::StraightThrough { soft } => {
                accum(by_node, soft, grad);
            }
        }
    }

    /// Number of recorded nodes; used by tests asserting tape confinement.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}
