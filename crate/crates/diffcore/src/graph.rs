//! Define-by-run computation graph.
//!
//! Every op evaluates eagerly and appends a node to the tape, so node ids
//! are already in topological order. [`Graph::backward`] walks the tape in
//! reverse and accumulates vector-Jacobian products into every node that
//! contributed to the seeded output.

use std::collections::BTreeMap;

use crate::error::DiffError;
use crate::tensor::{matmul_a_bt, matmul_at_b, matmul_raw, Tensor};

/// Clamp applied to probabilities before taking logs in [`Graph::bce`].
pub const BCE_EPS: f64 = 1e-7;
/// Variance epsilon used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Input,
    Param,
    Constant,
}

#[derive(Debug)]
enum Op {
    Leaf(LeafKind),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        kernel: usize,
        cols: Vec<f64>,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Resample {
        x: usize,
        taps: Vec<(usize, usize, f64)>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Softmax(usize, Axis),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    SumAll(usize),
    MeanAll(usize),
    MeanRows(usize),
    SliceRows {
        x: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Bce {
        p: usize,
        target: Vec<f64>,
    },
    SquaredError(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    name: Option<String>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    no_grad: bool,
    outputs: BTreeMap<String, usize>,
}

fn matrix_dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn check_finite(what: &str, t: &Tensor) -> Result<(), DiffError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(DiffError::NonFiniteValue(what.to_string()))
    }
}

/// Linear-interpolation taps `(lo, hi, frac)` mapping `n_in` rows onto
/// `n_out` rows with the first and last rows aligned.
pub fn interpolation_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            if n_in == 1 {
                return (0, 0, 0.0);
            }
            let pos = if n_out == 1 {
                (n_in - 1) as f64 / 2.0
            } else {
                i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            };
            let lo = (pos.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Resamples the rows of a matrix to `n_out` rows by linear interpolation.
pub fn resample_rows(x: &Tensor, n_out: usize) -> Tensor {
    let (n_in, c) = matrix_dims(x);
    let taps = interpolation_taps(n_in, n_out);
    let mut out = vec![0.0; n_out * c];
    for (i, &(lo, hi, f)) in taps.iter().enumerate() {
        let (a, b) = (x.row(lo), x.row(hi));
        for j in 0..c {
            out[i * c + j] = (1.0 - f) * a[j] + f * b[j];
        }
    }
    Tensor::matrix(n_out, c, out).expect("resample shape")
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that evaluates values but refuses [`Graph::backward`].
    pub fn no_grad() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn name(&self, id: NodeId) -> Option<&str> {
        self.nodes[id.0].name.as_deref()
    }

    pub fn leaf_kind(&self, id: NodeId) -> Option<LeafKind> {
        match self.nodes[id.0].op {
            Op::Leaf(kind) => Some(kind),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let op = if self.no_grad {
            // Keep leaves and attention maps; drop everything else.
            match op {
                Op::Leaf(k) => Op::Leaf(k),
                a @ Op::Attention { .. } => a,
                _ => Op::Leaf(LeafKind::Constant),
            }
        } else {
            op
        };
        self.nodes.push(Node {
            value,
            op,
            name: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, name: Option<&str>, t: Tensor, kind: LeafKind) -> Result<NodeId, DiffError> {
        check_finite(name.unwrap_or("constant"), &t)?;
        let id = self.push(t, Op::Leaf(kind));
        self.nodes[id.0].name = name.map(str::to_string);
        Ok(id)
    }

    pub fn input(&mut self, name: &str, t: Tensor) -> Result<NodeId, DiffError> {
        self.leaf(Some(name), t, LeafKind::Input)
    }

    pub fn param(&mut self, name: &str, t: Tensor) -> Result<NodeId, DiffError> {
        self.leaf(Some(name), t, LeafKind::Param)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<NodeId, DiffError> {
        self.leaf(None, t, LeafKind::Constant)
    }

    /// Registers `id` under `name` so [`Graph::outputs`] can report it.
    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id.0);
    }

    /// Named outputs; fails if any carries a non-finite value.
    pub fn outputs(&self) -> Result<BTreeMap<String, Tensor>, DiffError> {
        self.outputs
            .iter()
            .map(|(name, &i)| {
                check_finite(name, &self.nodes[i].value)?;
                Ok((name.clone(), self.nodes[i].value.clone()))
            })
            .collect()
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), DiffError> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(DiffError::ShapeMismatch {
                op,
                expected: sa.to_vec(),
                got: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (n, k) = matrix_dims(self.val(a));
        let (k2, m) = (self.val(b).rows(), self.val(b).cols());
        if self.val(b).rank() != 2 || k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                expected: vec![k, m],
                got: self.val(b).shape().to_vec(),
            });
        }
        let out = matmul_raw(self.val(a).data(), self.val(b).data(), n, k, m);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a.0, b.0)))
    }

    /// Adds a length-`c` bias to every row of an `n×c` matrix.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (n, c) = matrix_dims(self.val(x));
        if self.val(b).len() != c {
            return Err(DiffError::ShapeMismatch {
                op: "add_bias",
                expected: vec![c],
                got: self.val(b).shape().to_vec(),
            });
        }
        let bias = self.val(b).data();
        let mut out = self.val(x).data().to_vec();
        for r in 0..n {
            for (o, bv) in out[r * c..(r + 1) * c].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let shape = self.val(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x.0, b.0)))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, DiffError> {
        self.same_shape(op_name, a, b)?;
        let out: Vec<f64> = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.val(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, DiffError> {
        let t = self.val(x).map(|v| v * factor);
        Ok(self.push(t, Op::Scale(x.0, factor)))
    }

    /// Temporal 1-D convolution with "same" zero padding.
    ///
    /// `x` is `T × c_in`, `w` is `(kernel·c_in) × c_out` with tap-major rows
    /// and `b` has length `c_out`. Kernel must be odd.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, kernel: usize) -> Result<NodeId, DiffError> {
        let (t, cin) = matrix_dims(self.val(x));
        let (wr, cout) = matrix_dims(self.val(w));
        if kernel % 2 == 0 || wr != kernel * cin || self.val(b).len() != cout {
            return Err(DiffError::ShapeMismatch {
                op: "conv1d",
                expected: vec![kernel * cin, self.val(b).len()],
                got: self.val(w).shape().to_vec(),
            });
        }
        let pad = kernel / 2;
        let xd = self.val(x).data();
        let kc = kernel * cin;
        let mut cols = vec![0.0; t * kc];
        for ti in 0..t {
            for j in 0..kernel {
                let src = ti as isize + j as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                cols[ti * kc + j * cin..ti * kc + (j + 1) * cin]
                    .copy_from_slice(&xd[src * cin..(src + 1) * cin]);
            }
        }
        let mut out = matmul_raw(&cols, self.val(w).data(), t, kc, cout);
        let bias = self.val(b).data();
        for r in 0..t {
            for (o, bv) in out[r * cout..(r + 1) * cout].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(
            Tensor::matrix(t, cout, out)?,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
                kernel,
                cols,
            },
        ))
    }

    /// Non-overlapping max pooling with the given window along `axis`.
    /// Ties resolve to the first element of the window.
    pub fn max_pool(&mut self, x: NodeId, axis: Axis, window: usize) -> Result<NodeId, DiffError> {
        let (n, c) = matrix_dims(self.val(x));
        let len = match axis {
            Axis::Rows => n,
            Axis::Cols => c,
        };
        if window == 0 || len % window != 0 {
            return Err(DiffError::Invalid(format!(
                "max_pool: axis length {len} not divisible by window {window}"
            )));
        }
        let (on, oc) = match axis {
            Axis::Rows => (n / window, c),
            Axis::Cols => (n, c / window),
        };
        let xd = self.val(x).data();
        let mut out = Vec::with_capacity(on * oc);
        let mut argmax = Vec::with_capacity(on * oc);
        for r in 0..on {
            for j in 0..oc {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for w in 0..window {
                    let idx = match axis {
                        Axis::Rows => (r * window + w) * c + j,
                        Axis::Cols => r * c + j * window + w,
                    };
                    if best == usize::MAX || xd[idx] > best_v {
                        best = idx;
                        best_v = xd[idx];
                    }
                }
                out.push(best_v);
                argmax.push(best);
            }
        }
        Ok(self.push(Tensor::matrix(on, oc, out)?, Op::MaxPool { x: x.0, argmax }))
    }

    /// Linear-interpolation resampling of the row (time) axis to `n_out`.
    pub fn resample(&mut self, x: NodeId, n_out: usize) -> Result<NodeId, DiffError> {
        if n_out == 0 {
            return Err(DiffError::InvalidShape(vec![0]));
        }
        let n_in = self.val(x).rows();
        let out = resample_rows(self.val(x), n_out);
        let taps = interpolation_taps(n_in, n_out);
        Ok(self.push(out, Op::Resample { x: x.0, taps }))
    }

    /// Layer normalisation over the last axis, followed by `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, DiffError> {
        let (n, c) = matrix_dims(self.val(x));
        if self.val(gamma).len() != c || self.val(beta).len() != c {
            return Err(DiffError::ShapeMismatch {
                op: "layer_norm",
                expected: vec![c],
                got: self.val(gamma).shape().to_vec(),
            });
        }
        let xd = self.val(x).data();
        let (g, b) = (self.val(gamma).data(), self.val(beta).data());
        let mut xhat = vec![0.0; n * c];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.val(x).shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let t = self.val(x).map(|v| v.max(0.0));
        Ok(self.push(t, Op::Relu(x.0)))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let t = self.val(x).map(gelu);
        Ok(self.push(t, Op::Gelu(x.0)))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let t = self.val(x).map(sigmoid);
        Ok(self.push(t, Op::Sigmoid(x.0)))
    }

    pub fn softmax(&mut self, x: NodeId, axis: Axis) -> Result<NodeId, DiffError> {
        let (n, c) = matrix_dims(self.val(x));
        let mut t = self.val(x).clone();
        match axis {
            Axis::Cols => {
                for r in 0..n {
                    softmax_in_place(&mut t.data_mut()[r * c..(r + 1) * c]);
                }
            }
            Axis::Rows => {
                let d = t.data_mut();
                let mut col = vec![0.0; n];
                for j in 0..c {
                    for r in 0..n {
                        col[r] = d[r * c + j];
                    }
                    softmax_in_place(&mut col);
                    for r in 0..n {
                        d[r * c + j] = col[r];
                    }
                }
            }
        }
        Ok(self.push(t, Op::Softmax(x.0, axis)))
    }

    /// Multi-head scaled dot-product attention, `softmax(Q Kᵀ / √d_head) V`
    /// per head with heads concatenated along columns. Projections are the
    /// caller's business; this is the raw attention primitive.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId, DiffError> {
        let (n, d) = matrix_dims(self.val(q));
        let (m, dk) = matrix_dims(self.val(k));
        let (mv, dv) = matrix_dims(self.val(v));
        if dk != d || mv != m {
            return Err(DiffError::ShapeMismatch {
                op: "attention",
                expected: vec![m, d],
                got: vec![mv, dk],
            });
        }
        if heads == 0 || d % heads != 0 || dv % heads != 0 {
            return Err(DiffError::Invalid(format!(
                "attention: width {d}/{dv} not divisible by {heads} heads"
            )));
        }
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.val(q).data(), self.val(k).data(), self.val(v).data());
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * dv];
        for h in 0..heads {
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            for i in 0..n {
                let qi = &qd[i * d + h * dh..i * d + (h + 1) * dh];
                let row = &mut p[i * m..(i + 1) * m];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &kd[j * d + h * dh..j * d + (h + 1) * dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(row);
                let orow = &mut out[i * dv + h * dvh..i * dv + (h + 1) * dvh];
                for (j, &pij) in row.iter().enumerate() {
                    let vj = &vd[j * dv + h * dvh..j * dv + (h + 1) * dvh];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += pij * vv;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::matrix(n, dv, out)?,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                probs,
            },
        ))
    }

    /// Per-head attention weights (`heads` matrices of `n×m`) of an
    /// [`Graph::attention`] node, if recorded.
    pub fn attention_weights(&self, id: NodeId) -> Option<Vec<Tensor>> {
        match &self.nodes[id.0].op {
            Op::Attention { q, k, heads, probs, .. } => {
                let n = self.nodes[*q].value.rows();
                let m = self.nodes[*k].value.rows();
                Some(
                    probs
                        .chunks(n * m)
                        .take(*heads)
                        .map(|c| Tensor::matrix(n, m, c.to_vec()).expect("probs shape"))
                        .collect(),
                )
            }
            _ => None,
        }
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let s = self.val(x).sum();
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x.0)))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let s = self.val(x).sum() / self.val(x).len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(x.0)))
    }

    /// Mean over the row axis: `n×c → 1×c`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let (n, c) = matrix_dims(self.val(x));
        let mut out = vec![0.0; c];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(self.val(x).row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        Ok(self.push(Tensor::matrix(1, c, out)?, Op::MeanRows(x.0)))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        let (n, c) = matrix_dims(self.val(x));
        if len == 0 || start + len > n {
            return Err(DiffError::Invalid(format!(
                "slice_rows: {start}..{} out of 0..{n}",
                start + len
            )));
        }
        let data = self.val(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::matrix(len, c, data)?, Op::SliceRows { x: x.0, start }))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId, DiffError> {
        let c = xs
            .first()
            .map(|&x| self.val(x).cols())
            .ok_or_else(|| DiffError::Invalid("concat_rows: empty".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for &x in xs {
            let t = self.val(x);
            if t.cols() != c {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_rows",
                    expected: vec![t.rows(), c],
                    got: t.shape().to_vec(),
                });
            }
            n += t.rows();
            data.extend_from_slice(t.data());
        }
        let ids = xs.iter().map(|x| x.0).collect();
        Ok(self.push(Tensor::matrix(n, c, data)?, Op::ConcatRows(ids)))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId, DiffError> {
        let n = xs
            .first()
            .map(|&x| self.val(x).rows())
            .ok_or_else(|| DiffError::Invalid("concat_cols: empty".into()))?;
        let mut total = 0;
        for &x in xs {
            let t = self.val(x);
            if t.rows() != n {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    expected: vec![n, t.cols()],
                    got: t.shape().to_vec(),
                });
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &x in xs {
                data.extend_from_slice(self.val(x).row(r));
            }
        }
        let ids = xs.iter().map(|x| x.0).collect();
        Ok(self.push(Tensor::matrix(n, total, data)?, Op::ConcatCols(ids)))
    }

    /// Summed binary cross-entropy of probabilities `p` against fixed
    /// targets. Probabilities are clamped to `[ε, 1−ε]` before the logs;
    /// the clamp passes no gradient where it is active.
    pub fn bce(&mut self, p: NodeId, target: &Tensor) -> Result<NodeId, DiffError> {
        if self.val(p).shape() != target.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "bce",
                expected: self.val(p).shape().to_vec(),
                got: target.shape().to_vec(),
            });
        }
        check_finite("bce target", target)?;
        let loss: f64 = self
            .val(p)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p: p.0,
                target: target.data().to_vec(),
            },
        ))
    }

    /// `Σ (a − b)²`.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.same_shape("squared_error", a, b)?;
        let s: f64 = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::SquaredError(a.0, b.0)))
    }

    /// Reverse sweep from `output` seeded with `seed` (same shape as the
    /// output's value).
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<Gradients, DiffError> {
        if self.no_grad {
            return Err(DiffError::NotEvaluated);
        }
        if output.0 >= self.nodes.len() {
            return Err(DiffError::UnknownNode(output.0));
        }
        let out_shape = self.nodes[output.0].value.shape();
        if out_shape != seed.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "backward seed",
                expected: out_shape.to_vec(),
                got: seed.shape().to_vec(),
            });
        }
        check_finite("backward seed", seed)?;

        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let mut acc = |j: usize, t: Tensor| match &mut grads[j] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let with_shape = |j: usize, data: Vec<f64>| {
            Tensor::new(self.nodes[j].value.shape().to_vec(), data).expect("grad shape")
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf(_) => {}
            &Op::MatMul(a, b) => {
                let (n, k) = matrix_dims(val(a));
                let m = val(b).cols();
                acc(a, with_shape(a, matmul_a_bt(gd, val(b).data(), n, m, k)));
                acc(b, with_shape(b, matmul_at_b(val(a).data(), gd, n, k, m)));
            }
            &Op::AddBias(x, b) => {
                let c = val(b).len();
                let mut gb = vec![0.0; c];
                for row in gd.chunks(c) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(x, g.clone());
                acc(b, with_shape(b, gb));
            }
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                let ga = gd.iter().zip(val(b).data()).map(|(g, y)| g * y).collect();
                let gb = gd.iter().zip(val(a).data()).map(|(g, x)| g * x).collect();
                acc(a, with_shape(a, ga));
                acc(b, with_shape(b, gb));
            }
            &Op::Scale(x, f) => acc(x, g.map(|v| v * f)),
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                cols,
            } => {
                let (x, w, b, kernel) = (*x, *w, *b, *kernel);
                let (t, cin) = matrix_dims(val(x));
                let cout = val(b).len();
                let kc = kernel * cin;
                acc(w, with_shape(w, matmul_at_b(cols, gd, t, kc, cout)));
                let mut gb = vec![0.0; cout];
                for row in gd.chunks(cout) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(b, with_shape(b, gb));
                let gcols = matmul_a_bt(gd, val(w).data(), t, cout, kc);
                let pad = kernel / 2;
                let mut gx = vec![0.0; t * cin];
                for ti in 0..t {
                    for j in 0..kernel {
                        let src = ti as isize + j as isize - pad as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        let gsrc = &gcols[ti * kc + j * cin..ti * kc + (j + 1) * cin];
                        for (o, v) in gx[src * cin..(src + 1) * cin].iter_mut().zip(gsrc) {
                            *o += v;
                        }
                    }
                }
                acc(x, with_shape(x, gx));
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; val(*x).len()];
                for (&idx, &gv) in argmax.iter().zip(gd) {
                    gx[idx] += gv;
                }
                acc(*x, with_shape(*x, gx));
            }
            Op::Resample { x, taps } => {
                let (n_in, c) = matrix_dims(val(*x));
                let mut gx = vec![0.0; n_in * c];
                for (o, &(lo, hi, f)) in taps.iter().enumerate() {
                    for j in 0..c {
                        let gv = gd[o * c + j];
                        gx[lo * c + j] += (1.0 - f) * gv;
                        gx[hi * c + j] += f * gv;
                    }
                }
                acc(*x, with_shape(*x, gx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = matrix_dims(val(*x));
                let gam = val(*gamma).data();
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut gx = vec![0.0; n * c];
                for r in 0..n {
                    let grow = &gd[r * c..(r + 1) * c];
                    let hrow = &xhat[r * c..(r + 1) * c];
                    let mut sum_gh = 0.0;
                    let mut sum_ghh = 0.0;
                    for j in 0..c {
                        gg[j] += grow[j] * hrow[j];
                        gbeta[j] += grow[j];
                        let gh = grow[j] * gam[j];
                        sum_gh += gh;
                        sum_ghh += gh * hrow[j];
                    }
                    let k = inv_std[r] / c as f64;
                    for j in 0..c {
                        let gh = grow[j] * gam[j];
                        gx[r * c + j] = k * (c as f64 * gh - sum_gh - hrow[j] * sum_ghh);
                    }
                }
                acc(*x, with_shape(*x, gx));
                acc(*gamma, with_shape(*gamma, gg));
                acc(*beta, with_shape(*beta, gbeta));
            }
            &Op::Relu(x) => {
                let gx = gd
                    .iter()
                    .zip(val(x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(x, with_shape(x, gx));
            }
            &Op::Gelu(x) => {
                let gx = gd.iter().zip(val(x).data()).map(|(g, &v)| g * gelu_grad(v)).collect();
                acc(x, with_shape(x, gx));
            }
            &Op::Sigmoid(x) => {
                let gx = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, &y)| g * y * (1.0 - y))
                    .collect();
                acc(x, with_shape(x, gx));
            }
            &Op::Softmax(x, axis) => {
                let (n, c) = matrix_dims(val(x));
                let y = node.value.data();
                let mut gx = vec![0.0; n * c];
                match axis {
                    Axis::Cols => {
                        for r in 0..n {
                            let s: f64 = (0..c).map(|j| gd[r * c + j] * y[r * c + j]).sum();
                            for j in 0..c {
                                gx[r * c + j] = y[r * c + j] * (gd[r * c + j] - s);
                            }
                        }
                    }
                    Axis::Rows => {
                        for j in 0..c {
                            let s: f64 = (0..n).map(|r| gd[r * c + j] * y[r * c + j]).sum();
                            for r in 0..n {
                                gx[r * c + j] = y[r * c + j] * (gd[r * c + j] - s);
                            }
                        }
                    }
                }
                acc(x, with_shape(x, gx));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let (n, d) = matrix_dims(val(q));
                let m = val(k).rows();
                let dv = val(v).cols();
                let (dh, dvh) = (d / heads, dv / heads);
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(q).data(), val(k).data(), val(v).data());
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; m * d];
                let mut gv = vec![0.0; m * dv];
                let mut gs = vec![0.0; m];
                for h in 0..heads {
                    let p = &probs[h * n * m..(h + 1) * n * m];
                    for i in 0..n {
                        let gout = &gd[i * dv + h * dvh..i * dv + (h + 1) * dvh];
                        let prow = &p[i * m..(i + 1) * m];
                        // dP = dO · Vᵀ, dV += Pᵀ · dO
                        for j in 0..m {
                            let vj = &vd[j * dv + h * dvh..j * dv + (h + 1) * dvh];
                            gs[j] = gout.iter().zip(vj).map(|(a, b)| a * b).sum();
                            let gvj = &mut gv[j * dv + h * dvh..j * dv + (h + 1) * dvh];
                            for (o, &go) in gvj.iter_mut().zip(gout) {
                                *o += prow[j] * go;
                            }
                        }
                        let dot: f64 = gs.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            let ds = prow[j] * (gs[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..dh {
                                gq[i * d + h * dh + c] += ds * kd[j * d + h * dh + c];
                                gk[j * d + h * dh + c] += ds * qd[i * d + h * dh + c];
                            }
                        }
                    }
                }
                acc(q, with_shape(q, gq));
                acc(k, with_shape(k, gk));
                acc(v, with_shape(v, gv));
            }
            &Op::SumAll(x) => acc(x, Tensor::full(val(x).shape(), gd[0])),
            &Op::MeanAll(x) => {
                let n = val(x).len() as f64;
                acc(x, Tensor::full(val(x).shape(), gd[0] / n));
            }
            &Op::MeanRows(x) => {
                let (n, c) = matrix_dims(val(x));
                let mut gx = Vec::with_capacity(n * c);
                for _ in 0..n {
                    gx.extend(gd.iter().map(|g| g / n as f64));
                }
                acc(x, with_shape(x, gx));
            }
            &Op::SliceRows { x, start } => {
                let c = val(x).cols();
                let mut gx = vec![0.0; val(x).len()];
                gx[start * c..start * c + gd.len()].copy_from_slice(gd);
                acc(x, with_shape(x, gx));
            }
            Op::ConcatRows(ids) => {
                let mut offset = 0;
                for &j in ids {
                    let len = val(j).len();
                    acc(j, with_shape(j, gd[offset..offset + len].to_vec()));
                    offset += len;
                }
            }
            Op::ConcatCols(ids) => {
                let total = g.cols();
                let mut offset = 0;
                for &j in ids {
                    let (n, c) = matrix_dims(val(j));
                    let mut gj = Vec::with_capacity(n * c);
                    for r in 0..n {
                        gj.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                    }
                    acc(j, with_shape(j, gj));
                    offset += c;
                }
            }
            Op::Bce { p, target } => {
                let gp = val(*p)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&pv, &t)| {
                        if pv <= BCE_EPS || pv >= 1.0 - BCE_EPS {
                            0.0
                        } else {
                            gd[0] * (pv - t) / (pv * (1.0 - pv))
                        }
                    })
                    .collect();
                acc(*p, with_shape(*p, gp));
            }
            &Op::SquaredError(a, b) => {
                let ga: Vec<f64> = val(a)
                    .data()
                    .iter()
                    .zip(val(b).data())
                    .map(|(x, y)| 2.0 * (x - y) * gd[0])
                    .collect();
                let gb = ga.iter().map(|v| -v).collect();
                acc(a, with_shape(a, ga));
                acc(b, with_shape(b, gb));
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`; zeros if `id` did not influence the output.
    pub fn get(&self, graph: &Graph, id: NodeId) -> Tensor {
        self.grads
            .get(id.0)
            .and_then(Option::as_ref)
            .cloned()
            .unwrap_or_else(|| graph.value(id).zeros_like())
    }

    /// Gradients of every named leaf of `kind`, keyed by name. Leaves with
    /// the same name (a parameter reused across sub-graphs) are summed.
    pub fn named(&self, graph: &Graph, kind: LeafKind) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (i, node) in graph.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf(k) if k == kind) {
                continue;
            }
            let Some(name) = &node.name else { continue };
            let g = self.get(graph, NodeId(i));
            match out.get_mut(name) {
                Some(existing) => existing.add_assign(&g),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_graph_passes_input_through() {
        let mut g = Graph::new();
        let x = g.input("x", m(1, 3, &[1.0, -2.0, 3.5])).unwrap();
        g.mark_output("y", x);
        assert_eq!(g.outputs().unwrap()["y"], m(1, 3, &[1.0, -2.0, 3.5]));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input("x", m(1, 3, &[0.0; 3])).unwrap();
        let s = g.softmax(x, Axis::Cols).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.input("x", m(2, 4, &[3.0; 8])).unwrap();
        let gamma = g.param("g", Tensor::full(&[4], 1.0)).unwrap();
        let beta = g.param("b", Tensor::zeros(&[4])).unwrap();
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.input("x", m(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let s = g.sum_all(x).unwrap();
        let grads = g.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(&g, x), Tensor::full(&[2, 2], 1.0));
    }

    #[test]
    fn matmul_weight_gradient_is_xt_seed() {
        let mut g = Graph::new();
        let x = g.input("x", m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let w = g.param("w", m(3, 2, &[0.5, -1.0, 2.0, 0.0, 1.0, 1.0])).unwrap();
        let y = g.matmul(x, w).unwrap();
        let seed = m(2, 2, &[1.0, 0.0, -1.0, 2.0]);
        let grads = g.backward(y, &seed).unwrap();
        // xᵀ · seed
        let expected = m(3, 2, &[1.0 - 4.0, 8.0, 2.0 - 5.0, 10.0, 3.0 - 6.0, 12.0]);
        assert_eq!(grads.get(&g, w), expected);
    }

    #[test]
    fn relu_flat_region_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", m(1, 2, &[-1.0, -0.3])).unwrap();
        let y = g.relu(x).unwrap();
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(&g, x), Tensor::zeros(&[1, 2]));
    }

    #[test]
    fn unused_input_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", m(1, 2, &[1.0, 2.0])).unwrap();
        let unused = g.input("u", m(1, 2, &[5.0, 6.0])).unwrap();
        let s = g.sum_all(x).unwrap();
        let grads = g.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(&g, unused), Tensor::zeros(&[1, 2]));
        let named = grads.named(&g, LeafKind::Input);
        assert_eq!(named["u"], Tensor::zeros(&[1, 2]));
    }

    #[test]
    fn no_grad_graph_refuses_backward() {
        let mut g = Graph::no_grad();
        let x = g.input("x", m(1, 1, &[1.0])).unwrap();
        let s = g.sum_all(x).unwrap();
        assert_eq!(g.backward(s, &Tensor::scalar(1.0)).unwrap_err(), DiffError::NotEvaluated);
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let mut g = Graph::new();
        let err = g.input("x", m(1, 2, &[1.0, f64::NAN])).unwrap_err();
        assert!(matches!(err, DiffError::NonFiniteValue(_)));
        assert!(g.param("w", Tensor::scalar(f64::INFINITY)).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.input("a", m(2, 3, &[0.0; 6])).unwrap();
        let b = g.input("b", m(2, 3, &[0.0; 6])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(DiffError::ShapeMismatch { .. })));
        let c = g.input("c", m(3, 2, &[0.0; 6])).unwrap();
        assert!(matches!(g.add(a, c), Err(DiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn resample_matches_hand_interpolation() {
        let x = m(2, 1, &[1.0, 5.0]);
        let y = resample_rows(&x, 5);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let same = resample_rows(&m(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), 3);
        assert_eq!(same.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn bce_at_half_is_log_two_per_element() {
        let mut g = Graph::new();
        let p = g.input("p", Tensor::full(&[2, 6], 0.5)).unwrap();
        let mut target = Tensor::zeros(&[2, 6]);
        target.data_mut()[1] = 1.0;
        target.data_mut()[9] = 1.0;
        let l = g.bce(p, &target).unwrap();
        assert!((g.value(l).item() - 12.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut g = Graph::new();
        let q = g.input("q", m(2, 4, &[0.3, -1.0, 2.0, 0.1, 0.5, 0.5, -0.2, 1.2])).unwrap();
        let k = g.input("k", m(3, 4, &[1.0, 0.0, -1.0, 2.0, 0.3, 0.3, 0.3, 0.3, -2.0, 1.0, 0.0, 0.5])).unwrap();
        let a = g.attention(q, k, k, 2).unwrap();
        for w in g.attention_weights(a).unwrap() {
            for r in 0..w.rows() {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
