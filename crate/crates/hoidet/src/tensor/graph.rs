//! Reverse-mode autodiff over an operation tape.
//!
//! A [`Graph`] owns every tensor it produces. Ops execute forward eagerly,
//! record what backward needs, and hand back a [`TensorId`]. [`Graph::backward`]
//! replays the tape in exact reverse order, accumulating vector-Jacobian
//! products into per-node gradients. One tape is single-threaded; independent
//! tapes are independent.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{axis_dims, Real, Result, Tensor, TensorError, ZERO_NORM_EPS};

/// Handle to a node on one specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Scale(TensorId, Real),
    AddScalar(TensorId),
    Matmul(TensorId, TensorId),
    AddBias(TensorId, TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    Abs(TensorId),
    Minimum(TensorId, TensorId),
    Maximum(TensorId, TensorId),
    Softmax { x: TensorId, axis: usize },
    L2Normalize { x: TensorId, axis: usize, norms: Vec<Real> },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, normed: Vec<Real>, inv_std: Vec<Real> },
    SumAll(TensorId),
    MeanAxis { x: TensorId, axis: usize },
    Concat { xs: Vec<TensorId>, axis: usize },
    Slice { x: TensorId, axis: usize, start: usize },
    Transpose(TensorId),
    Reshape(TensorId),
    BceWithLogits { logits: TensorId, targets: Tensor },
    FocalBceWithLogits { logits: TensorId, targets: Tensor, alpha: Real, gamma: Real },
    CrossEntropyRows { logits: TensorId, targets: Vec<usize>, weights: Vec<Real> },
    TopKMask { x: TensorId, mask: Vec<Real> },
    Dropout { x: TensorId, mask: Option<Vec<Real>> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one [`Graph::backward`] call, indexed by tensor id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`, if it required one and was reached by backward.
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enables dropout ops; without a seeded rng they act as identity.
    pub fn with_dropout_rng(rng: ChaCha8Rng) -> Self {
        Self {
            nodes: Vec::new(),
            dropout_rng: Some(rng),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Clones the node's tensor out of the tape.
    pub fn tensor(&self, id: TensorId) -> Tensor {
        self.nodes[id.0].value.clone()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Inserts a tensor that will receive a gradient.
    pub fn param(&mut self, t: Tensor) -> TensorId {
        self.push(t, Op::Leaf, true)
    }

    /// Inserts a tensor treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> TensorId {
        self.push(t, Op::Leaf, requires_grad)
    }

    // ── Elementwise binary ──────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(data, Op::Add(a, b), self.needs_grad(&[a, b])))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(data, Op::Sub(a, b), self.needs_grad(&[a, b])))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(data, Op::Mul(a, b), self.needs_grad(&[a, b])))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("div", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x / y);
        if !data.all_finite() {
            return Err(TensorError::NonFinite { op: "div" });
        }
        Ok(self.push(data, Op::Div(a, b), self.needs_grad(&[a, b])))
    }

    pub fn minimum(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("minimum", a, b)?;
        let data = zip_map(self.value(a), self.value(b), Real::min);
        Ok(self.push(data, Op::Minimum(a, b), self.needs_grad(&[a, b])))
    }

    pub fn maximum(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("maximum", a, b)?;
        let data = zip_map(self.value(a), self.value(b), Real::max);
        Ok(self.push(data, Op::Maximum(a, b), self.needs_grad(&[a, b])))
    }

    // ── Elementwise unary / scalar ──────────────────────────────────────

    pub fn scale(&mut self, x: TensorId, c: Real) -> TensorId {
        let data = map(self.value(x), |v| c * v);
        let rg = self.nodes[x.0].requires_grad;
        self.push(data, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: TensorId, c: Real) -> TensorId {
        let data = map(self.value(x), |v| v + c);
        let rg = self.nodes[x.0].requires_grad;
        self.push(data, Op::AddScalar(x), rg)
    }

    pub fn neg(&mut self, x: TensorId) -> TensorId {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data = map(self.value(x), |v| v.max(0.0));
        let rg = self.nodes[x.0].requires_grad;
        self.push(data, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data = map(self.value(x), sigmoid);
        let rg = self.nodes[x.0].requires_grad;
        self.push(data, Op::Sigmoid(x), rg)
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        let data = map(self.value(x), Real::abs);
        let rg = self.nodes[x.0].requires_grad;
        self.push(data, Op::Abs(x), rg)
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// 2D matrix product `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(t, Op::Matmul(a, b), self.needs_grad(&[a, b])))
    }

    /// Adds a length-`n` bias to every length-`n` row of `x` (explicit-rank
    /// broadcast over leading dims only).
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                detail: format!("{sx:?} + bias {sb:?}"),
            });
        }
        let n = sb[0];
        let bdata = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(&bdata) {
                *v += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), self.needs_grad(&[x, bias])))
    }

    /// Affine map `x·w + b`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                detail: format!("{s:?} is not 2D"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::from_vec(vec![c, r], out)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.value(x).shape()),
            });
        }
        let t = Tensor::from_vec(shape.to_vec(), self.value(x).data().to_vec())?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    // ── Normalizations ──────────────────────────────────────────────────

    /// Numerically stable softmax along `axis` (max-subtraction).
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.check_axis("softmax", x, axis)?;
        let xt = self.value(x);
        let (outer, len, inner) = axis_dims(xt.shape(), axis);
        let mut out = xt.clone();
        {
            let data = out.data_mut();
            for o in 0..outer {
                for j in 0..inner {
                    let idx = |i: usize| (o * len + i) * inner + j;
                    let mut mx = Real::NEG_INFINITY;
                    for i in 0..len {
                        mx = mx.max(data[idx(i)]);
                    }
                    let mut sum = 0.0;
                    for i in 0..len {
                        let e = (data[idx(i)] - mx).exp();
                        data[idx(i)] = e;
                        sum += e;
                    }
                    for i in 0..len {
                        data[idx(i)] /= sum;
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Scales each slice along `axis` to unit Euclidean norm.
    ///
    /// A slice with norm below [`ZERO_NORM_EPS`] is degenerate and reported
    /// as [`TensorError::ZeroNorm`].
    pub fn l2_normalize(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.check_axis("l2_normalize", x, axis)?;
        let xt = self.value(x);
        let (outer, len, inner) = axis_dims(xt.shape(), axis);
        let mut out = xt.clone();
        let mut norms = vec![0.0; outer * inner];
        {
            let data = out.data_mut();
            for o in 0..outer {
                for j in 0..inner {
                    let idx = |i: usize| (o * len + i) * inner + j;
                    let mut sq = 0.0;
                    for i in 0..len {
                        sq += data[idx(i)] * data[idx(i)];
                    }
                    let norm = sq.sqrt();
                    if norm < ZERO_NORM_EPS {
                        return Err(TensorError::ZeroNorm {
                            op: "l2_normalize",
                            index: o * inner + j,
                            norm,
                            eps: ZERO_NORM_EPS,
                        });
                    }
                    norms[o * inner + j] = norm;
                    for i in 0..len {
                        data[idx(i)] /= norm;
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, Op::L2Normalize { x, axis, norms }, rg))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: Real,
    ) -> Result<TensorId> {
        let n = *self.value(x).shape().last().ok_or(TensorError::ShapeMismatch {
            op: "layer_norm",
            detail: "rank-0 input".into(),
        })?;
        if self.value(gamma).shape() != [n] || self.value(beta).shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gamma {:?} / beta {:?} vs last dim {n}",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            });
        }
        let rows = self.value(x).numel() / n;
        let gdata = self.value(gamma).data().to_vec();
        let bdata = self.value(beta).data().to_vec();
        let mut out = self.value(x).clone();
        let mut normed = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        {
            let data = out.data_mut();
            for r in 0..rows {
                let row = &mut data[r * n..(r + 1) * n];
                let mean = row.iter().sum::<Real>() / n as Real;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n as Real;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[r] = inv;
                for (i, v) in row.iter_mut().enumerate() {
                    let y = (*v - mean) * inv;
                    normed[r * n + i] = y;
                    *v = gdata[i] * y + bdata[i];
                }
            }
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    // ── Reductions / shape ops ──────────────────────────────────────────

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: Real = self.value(x).data().iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.value(x).numel() as Real;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean-pool along `axis`, dropping it from the shape.
    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.check_axis("mean_axis", x, axis)?;
        let xt = self.value(x);
        let (outer, len, inner) = axis_dims(xt.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let src = xt.data();
        for o in 0..outer {
            for i in 0..len {
                for j in 0..inner {
                    out[o * inner + j] += src[(o * len + i) * inner + j];
                }
            }
        }
        for v in &mut out {
            *v /= len as Real;
        }
        let mut shape: Vec<usize> = xt.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::from_vec(shape, out)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(t, Op::MeanAxis { x, axis }, rg))
    }

    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        let first = *xs.first().ok_or(TensorError::Invalid {
            what: "concat",
            detail: "empty input list".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base_shape = self.value(first).shape().to_vec();
        let mut total_len = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != base_shape.len()
                || s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{base_shape:?} vs {s:?} along axis {axis}"),
                });
            }
            total_len += s[axis];
        }
        let (outer, _, inner) = axis_dims(&base_shape, axis);
        let mut shape = base_shape;
        shape[axis] = total_len;
        let mut out = vec![0.0; outer * total_len * inner];
        let mut offset = 0;
        for &x in xs {
            let xt = self.value(x);
            let len = xt.shape()[axis];
            let src = xt.data();
            for o in 0..outer {
                let dst_start = (o * total_len + offset) * inner;
                let src_start = o * len * inner;
                out[dst_start..dst_start + len * inner]
                    .copy_from_slice(&src[src_start..src_start + len * inner]);
            }
            offset += len;
        }
        let t = Tensor::from_vec(shape, out)?;
        let rg = self.needs_grad(xs);
        Ok(self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Contiguous slab `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        self.check_axis("slice", x, axis)?;
        let xt = self.value(x);
        let axis_len = xt.shape()[axis];
        if start + len > axis_len || len == 0 {
            return Err(TensorError::Invalid {
                what: "slice",
                detail: format!("[{start}, {start}+{len}) out of 0..{axis_len}"),
            });
        }
        let (outer, _, inner) = axis_dims(xt.shape(), axis);
        let mut shape = xt.shape().to_vec();
        shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        let src = xt.data();
        for o in 0..outer {
            let src_start = (o * axis_len + start) * inner;
            let dst_start = o * len * inner;
            out[dst_start..dst_start + len * inner]
                .copy_from_slice(&src[src_start..src_start + len * inner]);
        }
        let t = Tensor::from_vec(shape, out)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(t, Op::Slice { x, axis, start }, rg))
    }

    // ── Losses ──────────────────────────────────────────────────────────

    /// Elementwise binary cross-entropy on logits (stable log-sigmoid form).
    pub fn bce_with_logits(&mut self, logits: TensorId, targets: &Tensor) -> Result<TensorId> {
        if self.value(logits).shape() != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                detail: format!("{:?} vs {:?}", self.value(logits).shape(), targets.shape()),
            });
        }
        let mut out = self.value(logits).clone();
        for (v, &t) in out.data_mut().iter_mut().zip(targets.data()) {
            let l = *v;
            // -t*log(p) - (1-t)*log(1-p)
            *v = -t * log_sigmoid(l) - (1.0 - t) * log_sigmoid(-l);
        }
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            out,
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
            },
            rg,
        ))
    }

    /// Elementwise focal binary cross-entropy on logits.
    pub fn focal_bce_with_logits(
        &mut self,
        logits: TensorId,
        targets: &Tensor,
        alpha: Real,
        gamma: Real,
    ) -> Result<TensorId> {
        if self.value(logits).shape() != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "focal_bce_with_logits",
                detail: format!("{:?} vs {:?}", self.value(logits).shape(), targets.shape()),
            });
        }
        let mut out = self.value(logits).clone();
        for (v, &t) in out.data_mut().iter_mut().zip(targets.data()) {
            let l = *v;
            let p = sigmoid(l);
            let pos = -alpha * (1.0 - p).powf(gamma) * log_sigmoid(l);
            let neg = -(1.0 - alpha) * p.powf(gamma) * log_sigmoid(-l);
            *v = t * pos + (1.0 - t) * neg;
        }
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            out,
            Op::FocalBceWithLogits {
                logits,
                targets: targets.clone(),
                alpha,
                gamma,
            },
            rg,
        ))
    }

    /// Per-row cross entropy `-w[t_r] * log softmax(logits_r)[t_r]` for 2D
    /// logits; `weights` defaults to all ones.
    pub fn cross_entropy_rows(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        class_weights: Option<&[Real]>,
    ) -> Result<TensorId> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || targets.len() != s[0] {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_rows",
                detail: format!("logits {s:?}, {} targets", targets.len()),
            });
        }
        let c = s[1];
        let weights: Vec<Real> = match class_weights {
            Some(w) => {
                if w.len() != c {
                    return Err(TensorError::ShapeMismatch {
                        op: "cross_entropy_rows",
                        detail: format!("{} class weights for {c} classes", w.len()),
                    });
                }
                w.to_vec()
            }
            None => vec![1.0; c],
        };
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Invalid {
                what: "cross_entropy_rows target",
                detail: format!("class {t} out of 0..{c}"),
            });
        }
        let src = self.value(logits).data();
        let mut out = vec![0.0; s[0]];
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<Real>().ln();
            out[r] = weights[t] * (lse - row[t]);
        }
        let t = Tensor::from_vec(vec![s[0]], out)?;
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            t,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                weights,
            },
            rg,
        ))
    }

    /// Keeps the `k` largest entries of a 1D tensor at their values and
    /// zeroes the rest; equal values break toward the lower index.
    pub fn top_k_mask(&mut self, x: TensorId, k: usize) -> Result<TensorId> {
        let xt = self.value(x);
        if xt.rank() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "top_k_mask",
                detail: format!("{:?} is not 1D", xt.shape()),
            });
        }
        let n = xt.numel();
        if k > n {
            return Err(TensorError::Invalid {
                what: "top_k_mask k",
                detail: format!("k={k} exceeds length {n}"),
            });
        }
        let mut order: Vec<usize> = (0..n).collect();
        // Stable sort by descending value leaves equal entries in index order.
        order.sort_by(|&a, &b| xt.data()[b].partial_cmp(&xt.data()[a]).unwrap());
        let mut mask = vec![0.0; n];
        for &i in order.iter().take(k) {
            mask[i] = 1.0;
        }
        let mut out = xt.clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, Op::TopKMask { x, mask }, rg))
    }

    /// Inverted dropout. Identity when `rate == 0` or no rng was installed.
    pub fn dropout(&mut self, x: TensorId, rate: Real) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                what: "dropout rate",
                detail: format!("{rate} outside [0, 1)"),
            });
        }
        let rg = self.nodes[x.0].requires_grad;
        let mask = if rate > 0.0 {
            self.dropout_rng.as_mut().map(|rng| {
                let keep = 1.0 - rate;
                (0..self.nodes[x.0].value.numel())
                    .map(|_| {
                        if rng.gen::<Real>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect::<Vec<Real>>()
            })
        } else {
            None
        };
        let mut out = self.value(x).clone();
        if let Some(mask) = &mask {
            for (v, m) in out.data_mut().iter_mut().zip(mask) {
                *v *= m;
            }
        }
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from the scalar `loss`; returns gradients for every
    /// reachable node with `requires_grad`.
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or(TensorError::Detached(loss.0))?;
        if !node.value.is_scalar() {
            return Err(TensorError::NotScalar(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(TensorError::Detached(loss.0));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_vjp(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: TensorId, delta: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn apply_vjp(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, map(g, |v| -v));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, zip_map(g, self.value(*b), |x, y| x * y));
                self.accumulate(grads, *b, zip_map(g, self.value(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, zip_map(g, bt, |gv, y| gv / y));
                let mut gb = g.clone();
                for idx in 0..g.numel() {
                    let (x, y) = (at.data()[idx], bt.data()[idx]);
                    gb.data_mut()[idx] *= -x / (y * y);
                }
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, map(g, |v| c * v)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Matmul(a, b) => {
                let at = self.value(*a);
                let bt = self.value(*b);
                let (m, k) = (at.shape()[0], at.shape()[1]);
                let n = bt.shape()[1];
                // dA = g · Bᵀ ; dB = Aᵀ · g
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g.data()[i * n + j] * bt.data()[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..m {
                            s += at.data()[i * k + p] * g.data()[i * n + j];
                        }
                        db[p * n + j] = s;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(vec![m, k], da).unwrap());
                self.accumulate(grads, *b, Tensor::from_vec(vec![k, n], db).unwrap());
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                let n = self.value(*bias).numel();
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *bias, Tensor::from_vec(vec![n], gb).unwrap());
            }
            Op::Relu(x) => {
                let xt = self.value(*x);
                self.accumulate(
                    grads,
                    *x,
                    zip_map(g, xt, |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
                );
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, zip_map(g, out, |gv, y| gv * y * (1.0 - y)));
            }
            Op::Abs(x) => {
                let xt = self.value(*x);
                self.accumulate(grads, *x, zip_map(g, xt, |gv, xv| gv * sign(xv)));
            }
            Op::Minimum(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let mut ga = g.clone();
                let mut gb = g.clone();
                for idx in 0..g.numel() {
                    if at.data()[idx] <= bt.data()[idx] {
                        gb.data_mut()[idx] = 0.0;
                    } else {
                        ga.data_mut()[idx] = 0.0;
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Maximum(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let mut ga = g.clone();
                let mut gb = g.clone();
                for idx in 0..g.numel() {
                    if at.data()[idx] >= bt.data()[idx] {
                        gb.data_mut()[idx] = 0.0;
                    } else {
                        ga.data_mut()[idx] = 0.0;
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_dims(out.shape(), *axis);
                let y = out.data();
                let mut gx = g.clone();
                let gd = gx.data_mut();
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let mut dot = 0.0;
                        for i in 0..len {
                            dot += gd[idx(i)] * y[idx(i)];
                        }
                        for i in 0..len {
                            gd[idx(i)] = y[idx(i)] * (gd[idx(i)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::L2Normalize { x, axis, norms } => {
                let (outer, len, inner) = axis_dims(out.shape(), *axis);
                let y = out.data();
                let mut gx = g.clone();
                let gd = gx.data_mut();
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let norm = norms[o * inner + j];
                        let mut dot = 0.0;
                        for i in 0..len {
                            dot += gd[idx(i)] * y[idx(i)];
                        }
                        for i in 0..len {
                            gd[idx(i)] = (gd[idx(i)] - dot * y[idx(i)]) / norm;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let n = self.value(*gamma).numel();
                let rows = g.numel() / n;
                let gdata = self.value(*gamma).data();
                let mut ggamma = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                let mut gx = vec![0.0; g.numel()];
                for r in 0..rows {
                    let grow = &g.data()[r * n..(r + 1) * n];
                    let yrow = &normed[r * n..(r + 1) * n];
                    let mut mean_h = 0.0;
                    let mut mean_hy = 0.0;
                    for i in 0..n {
                        let h = grow[i] * gdata[i];
                        mean_h += h;
                        mean_hy += h * yrow[i];
                        ggamma[i] += grow[i] * yrow[i];
                        gbeta[i] += grow[i];
                    }
                    mean_h /= n as Real;
                    mean_hy /= n as Real;
                    for i in 0..n {
                        let h = grow[i] * gdata[i];
                        gx[r * n + i] = inv_std[r] * (h - mean_h - yrow[i] * mean_hy);
                    }
                }
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_vec(shape, gx).unwrap());
                self.accumulate(grads, *gamma, Tensor::from_vec(vec![n], ggamma).unwrap());
                self.accumulate(grads, *beta, Tensor::from_vec(vec![n], gbeta).unwrap());
            }
            Op::SumAll(x) => {
                let gv = g.item();
                let shape = self.value(*x).shape();
                self.accumulate(grads, *x, Tensor::filled(shape, gv));
            }
            Op::MeanAxis { x, axis } => {
                let xt = self.value(*x);
                let (outer, len, inner) = axis_dims(xt.shape(), *axis);
                let mut gx = vec![0.0; xt.numel()];
                for o in 0..outer {
                    for i in 0..len {
                        for j in 0..inner {
                            gx[(o * len + i) * inner + j] = g.data()[o * inner + j] / len as Real;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xt.shape().to_vec(), gx).unwrap());
            }
            Op::Concat { xs, axis } => {
                let (outer, total_len, inner) = axis_dims(out.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let xt = self.value(x);
                    let len = xt.shape()[*axis];
                    let mut gx = vec![0.0; xt.numel()];
                    for o in 0..outer {
                        let src_start = (o * total_len + offset) * inner;
                        let dst_start = o * len * inner;
                        gx[dst_start..dst_start + len * inner]
                            .copy_from_slice(&g.data()[src_start..src_start + len * inner]);
                    }
                    offset += len;
                    self.accumulate(grads, x, Tensor::from_vec(xt.shape().to_vec(), gx).unwrap());
                }
            }
            Op::Slice { x, axis, start } => {
                let xt = self.value(*x);
                let axis_len = xt.shape()[*axis];
                let (outer, len, inner) = axis_dims(out.shape(), *axis);
                let mut gx = vec![0.0; xt.numel()];
                for o in 0..outer {
                    let dst_start = (o * axis_len + start) * inner;
                    let src_start = o * len * inner;
                    gx[dst_start..dst_start + len * inner]
                        .copy_from_slice(&g.data()[src_start..src_start + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::from_vec(xt.shape().to_vec(), gx).unwrap());
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(vec![c, r], gx).unwrap());
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(
                    grads,
                    *x,
                    Tensor::from_vec(shape, g.data().to_vec()).unwrap(),
                );
            }
            Op::BceWithLogits { logits, targets } => {
                let lt = self.value(*logits);
                let mut gx = g.clone();
                for ((v, &l), &t) in gx.data_mut().iter_mut().zip(lt.data()).zip(targets.data()) {
                    *v *= sigmoid(l) - t;
                }
                self.accumulate(grads, *logits, gx);
            }
            Op::FocalBceWithLogits {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let lt = self.value(*logits);
                let mut gx = g.clone();
                for ((v, &l), &t) in gx.data_mut().iter_mut().zip(lt.data()).zip(targets.data()) {
                    *v *= focal_bce_dlogit(l, t, *alpha, *gamma);
                }
                self.accumulate(grads, *logits, gx);
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                weights,
            } => {
                let lt = self.value(*logits);
                let c = lt.shape()[1];
                let mut gx = vec![0.0; lt.numel()];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &lt.data()[r * c..(r + 1) * c];
                    let mx = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
                    let sum: Real = row.iter().map(|v| (v - mx).exp()).sum();
                    let gr = g.data()[r] * weights[t];
                    for j in 0..c {
                        let p = (row[j] - mx).exp() / sum;
                        gx[r * c + j] = gr * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(
                    grads,
                    *logits,
                    Tensor::from_vec(lt.shape().to_vec(), gx).unwrap(),
                );
            }
            Op::TopKMask { x, mask } => {
                let mut gx = g.clone();
                for (v, m) in gx.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Dropout { x, mask } => {
                let mut gx = g.clone();
                if let Some(mask) = mask {
                    for (v, m) in gx.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }

    fn check_axis(&self, op: &'static str, x: TensorId, axis: usize) -> Result<()> {
        let rank = self.value(x).rank();
        if axis >= rank {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        Ok(())
    }
}

// ── Scalar kernels ──────────────────────────────────────────────────────

pub(crate) fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sigmoid(x)) without overflow on either tail.
pub(crate) fn log_sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sign(x: Real) -> Real {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// d/dlogit of the elementwise focal BCE term.
fn focal_bce_dlogit(l: Real, t: Real, alpha: Real, gamma: Real) -> Real {
    let p = sigmoid(l);
    let log_p = log_sigmoid(l);
    let log_q = log_sigmoid(-l);
    let q = 1.0 - p;
    // pos term: -alpha * q^g * log p ; d/dl = alpha*(g*p*q^g*log p ... )
    let dpos = alpha * (gamma * p * q.powf(gamma) * log_p - q.powf(gamma + 1.0));
    let dneg = (1.0 - alpha) * (-gamma * q * p.powf(gamma) * log_q + p.powf(gamma + 1.0));
    t * dpos + (1.0 - t) * dneg
}

fn map(t: &Tensor, f: impl Fn(Real) -> Real) -> Tensor {
    let mut out = t.clone();
    for v in out.data_mut() {
        *v = f(*v);
    }
    out
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(Real, Real) -> Real) -> Tensor {
    debug_assert_eq!(a.numel(), b.numel());
    let mut out = a.clone();
    for (v, &y) in out.data_mut().iter_mut().zip(b.data()) {
        *v = f(*v, y);
    }
    out
}

pub(crate) fn matmul_raw(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
