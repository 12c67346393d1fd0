//! Reverse-mode autodiff on a linear tape.
//!
//! Every operation appends a node holding the forward value and enough
//! information to replay its backward rule. Tape order is topological by
//! construction, so `backward` is a single reverse sweep with `+=`
//! accumulation, which gives correct DAG fan-out semantics. Tapes are
//! single-threaded contexts; run one tape per thread for parallel work.
//!
//! Tracked values are never mutated in place: each forward op creates a new
//! node.

use crate::error::TntError;
use crate::tensor::{axis_split, for_each_row, matmul, matmul_grad_a, matmul_grad_b, strides, Tensor};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Names of the differentiable operations, used for diagnostics and for the
/// backward fault-injection hook of the verification harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Scale,
    Gelu,
    Sigmoid,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Reshape,
    Permute,
    Concat,
    Slice,
    SumAxis,
    MeanAxis,
    SumAll,
    Expand,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::LayerNorm,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::SumAxis,
        OpKind::MeanAxis,
        OpKind::SumAll,
        OpKind::Expand,
    ];

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::SumAxis => "sum_axis",
            OpKind::MeanAxis => "mean_axis",
            OpKind::SumAll => "sum_all",
            OpKind::Expand => "expand",
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId, batch: usize, m: usize, k: usize, n: usize, b_shared: bool },
    /// `b` is either the same shape as `a` or a suffix of it (tiled add).
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, k: f64 },
    Gelu { a: TensorId },
    Sigmoid { a: TensorId },
    Softmax { a: TensorId, axis: usize },
    LogSoftmax { a: TensorId, axis: usize },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Reshape { a: TensorId },
    Permute { a: TensorId, perm: Vec<usize> },
    Concat { parts: Vec<TensorId>, axis: usize },
    Slice { a: TensorId, axis: usize, start: usize },
    SumAxis { a: TensorId, axis: usize },
    MeanAxis { a: TensorId, axis: usize },
    SumAll { a: TensorId },
    Expand { a: TensorId, axis: usize },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::SumAll { .. } => OpKind::SumAll,
            Op::Expand { .. } => OpKind::Expand,
        })
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Gradient tape. Construct leaves, apply ops, call [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), fault: None }
    }

    /// Flip the sign of every gradient contribution produced by `kind`'s
    /// backward rule. Verification-harness hook for proving that the
    /// finite-difference comparison actually catches broken rules.
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        id
    }

    fn flows(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Gradient-tracked leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, true, Op::Leaf)
    }

    /// Untracked leaf (input data, fixed coefficients).
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient buffer populated by the last `backward` call.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    // ── Forward ops ──────────────────────────────────────────────────────

    /// Batched matrix product `[B.., m, k] x [B.., k, n]` (or a shared 2-D
    /// right operand applied to every batch).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TntError> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ar = ashape.len();
        let br = bshape.len();
        if ar < 2 || br < 2 {
            return Err(TntError::shape("matmul", format!("operands must be rank >= 2, got {ashape:?} x {bshape:?}")));
        }
        let (m, k) = (ashape[ar - 2], ashape[ar - 1]);
        let (kb, n) = (bshape[br - 2], bshape[br - 1]);
        let b_shared = br == 2 && ar > 2;
        let batch_ok = b_shared || ashape[..ar - 2] == bshape[..br - 2];
        if k != kb || !batch_ok {
            return Err(TntError::shape("matmul", format!("{ashape:?} x {bshape:?}")));
        }
        let batch: usize = ashape[..ar - 2].iter().product();
        let data = matmul(
            self.value(a).data(),
            self.value(b).data(),
            batch,
            m,
            k,
            n,
            b_shared || ar == 2,
        );
        let mut out_shape = ashape[..ar - 2].to_vec();
        out_shape.extend([m, n]);
        let value = Tensor::new(out_shape, data).expect("matmul shape");
        let rg = self.flows(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul { a, b, batch, m, k, n, b_shared: b_shared || ar == 2 }))
    }

    fn suffix_ok(ashape: &[usize], bshape: &[usize]) -> bool {
        bshape.len() <= ashape.len() && ashape[ashape.len() - bshape.len()..] == *bshape
    }

    /// Elementwise sum; `b` may be a suffix shape of `a` (tiled over the
    /// leading axes).
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TntError> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !Self::suffix_ok(&ashape, &bshape) {
            return Err(TntError::shape("add", format!("{ashape:?} + {bshape:?}")));
        }
        let bn = self.value(b).numel().max(1);
        let mut data = self.value(a).data().to_vec();
        let bdata = self.value(b).data();
        for chunk in data.chunks_mut(bn) {
            for (x, y) in chunk.iter_mut().zip(bdata) {
                *x += y;
            }
        }
        let value = Tensor::new(ashape, data).expect("add shape");
        let rg = self.flows(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    /// Elementwise product; `b` may be a suffix shape of `a`.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TntError> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !Self::suffix_ok(&ashape, &bshape) {
            return Err(TntError::shape("mul", format!("{ashape:?} * {bshape:?}")));
        }
        let bn = self.value(b).numel().max(1);
        let mut data = self.value(a).data().to_vec();
        let bdata = self.value(b).data();
        for chunk in data.chunks_mut(bn) {
            for (x, y) in chunk.iter_mut().zip(bdata) {
                *x *= y;
            }
        }
        let value = Tensor::new(ashape, data).expect("mul shape");
        let rg = self.flows(&[a, b]);
        Ok(self.push(value, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: TensorId, k: f64) -> TensorId {
        let data = self.value(a).data().iter().map(|v| v * k).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("scale shape");
        let rg = self.flows(&[a]);
        self.push(value, rg, Op::Scale { a, k })
    }

    /// Exact GELU: x * Phi(x) with Phi the standard normal CDF via erf.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x * 0.5 * (1.0 + libm::erf(x * INV_SQRT_2)))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("gelu shape");
        let rg = self.flows(&[a]);
        self.push(value, rg, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("sigmoid shape");
        let rg = self.flows(&[a]);
        self.push(value, rg, Op::Sigmoid { a })
    }

    fn check_axis(&self, op: &'static str, id: TensorId, axis: usize) -> Result<(), TntError> {
        if axis >= self.shape(id).len() {
            return Err(TntError::shape(op, format!("axis {axis} out of range for {:?}", self.shape(id))));
        }
        Ok(())
    }

    /// Max-subtracted softmax along `axis`; each slice sums to one.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId, TntError> {
        self.check_axis("softmax", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, e, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        if inner == 1 {
            // Hot path: softmax over the last axis, one worker per row.
            let work = outer * e * 8;
            for_each_row(&mut data, e, work, |o, row| {
                softmax_slice(&src[o * e..(o + 1) * e], row);
            });
        } else {
            let mut buf_in = vec![0.0; e];
            let mut buf_out = vec![0.0; e];
            for o in 0..outer {
                for i in 0..inner {
                    for j in 0..e {
                        buf_in[j] = src[(o * e + j) * inner + i];
                    }
                    softmax_slice(&buf_in, &mut buf_out);
                    for j in 0..e {
                        data[(o * e + j) * inner + i] = buf_out[j];
                    }
                }
            }
        }
        let value = Tensor::new(shape, data).expect("softmax shape");
        let rg = self.flows(&[a]);
        Ok(self.push(value, rg, Op::Softmax { a, axis }))
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId, TntError> {
        self.check_axis("log_softmax", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, e, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| src[(o * e + j) * inner + i];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..e {
                    mx = mx.max(at(j));
                }
                let mut lse = 0.0;
                for j in 0..e {
                    lse += (at(j) - mx).exp();
                }
                let lse = lse.ln() + mx;
                for j in 0..e {
                    data[(o * e + j) * inner + i] = at(j) - lse;
                }
            }
        }
        let value = Tensor::new(shape, data).expect("log_softmax shape");
        let rg = self.flows(&[a]);
        Ok(self.push(value, rg, Op::LogSoftmax { a, axis }))
    }

    /// Layer normalization over the last axis with biased variance and
    /// `eps` inside the square root: `(x - mu) / sqrt(var + eps) * gamma + beta`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId, TntError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| TntError::shape("layer_norm", "rank-0 input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TntError::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", shape, self.shape(gamma), self.shape(beta)),
            ));
        }
        let src = self.value(x).data();
        let gdata = self.value(gamma).data().to_vec();
        let bdata = self.value(beta).data().to_vec();
        let rows = src.len() / d;
        let mut data = vec![0.0; src.len()];
        for_each_row(&mut data, d, rows * d * 8, |r, out| {
            let row = &src[r * d..(r + 1) * d];
            let (mean, inv_std) = ln_moments(row, eps);
            for j in 0..d {
                out[j] = (row[j] - mean) * inv_std * gdata[j] + bdata[j];
            }
        });
        let value = Tensor::new(shape, data).expect("layer_norm shape");
        let rg = self.flows(&[x, gamma, beta]);
        Ok(self.push(value, rg, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Affine map `x W + b` for `x: [.., in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId, TntError> {
        let xshape = self.shape(x).to_vec();
        if xshape.is_empty() {
            return Err(TntError::shape("linear", "rank-0 input"));
        }
        let (restore, x2) = if xshape.len() == 1 {
            (true, self.reshape(x, vec![1, xshape[0]])?)
        } else {
            (false, x)
        };
        let y = self.matmul(x2, w)?;
        let y = self.add(y, b)?;
        if restore {
            let out = self.shape(y)[1];
            self.reshape(y, vec![out])
        } else {
            Ok(y)
        }
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, TntError> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(TntError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(a), shape),
            ));
        }
        let value = Tensor::new(shape, self.value(a).data().to_vec()).expect("reshape");
        let rg = self.flows(&[a]);
        Ok(self.push(value, rg, Op::Reshape { a }))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TntError> {
        self.permute(a, vec![1, 0])
    }

    /// General axis permutation: `out.shape[k] = in.shape[perm[k]]`.
    pub fn permute(&mut self, a: TensorId, perm: Vec<usize>) -> Result<TensorId, TntError> {
        let in_shape = self.shape(a).to_vec();
        let r = in_shape.len();
        let mut seen = vec![false; r];
        if perm.len() != r || !perm.iter().all(|&p| p < r && !std::mem::replace(&mut seen[p], true)) {
            return Err(TntError::shape("permute", format!("perm {perm:?} for shape {in_shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let data = permute_data(self.value(a).data(), &in_shape, &perm, &out_shape);
        let value = Tensor::new(out_shape, data).expect("permute shape");
        let rg = self.flows(&[a]);
        Ok(self.push(value, rg, Op::Permute { a, perm }))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId, TntError> {
        if parts.is_empty() {
            return Err(TntError::shape("concat", "no parts"));
        }
        self.check_axis("concat", parts[0], axis)?;
        let base = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(TntError::shape("concat", format!("{base:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = vec![0.0; out_shape.iter().product()];
        for o in 0..outer {
            let mut off = 0;
            for &p in parts {
                let e = self.shape(p)[axis];
                let src = self.value(p).data();
                let src_block = &src[o * e * inner..(o + 1) * e * inner];
                let dst_start = (o * total + off) * inner;
                data[dst_start..dst_start + e * inner].copy_from_slice(src_block);
                off += e;
            }
        }
        let value = Tensor::new(out_shape, data).expect("concat shape");
        let rg = self.flows(parts);
        Ok(self.push(value, rg, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn slice(
        &mut self,
        a: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TntError> {
        self.check_axis("slice", a, axis)?;
        let in_shape = self.shape(a).to_vec();
        if start + len > in_shape[axis] || len == 0 {
            return Err(TntError::shape(
                "slice",
                format!("[{start}, {}) of extent {}", start + len, in_shape[axis]),
            ));
        }
        let (outer, e, inner) = axis_split(&in_shape, axis);
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let s = (o * e + start) * inner;
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(&src[s..s + len * inner]);
        }
        let value = Tensor::new(out_shape, data).expect("slice shape");
        let rg = self.flows(&[a]);
        Ok(self.push(value, rg, Op::Slice { a, axis, start }))
    }

    /// Split along `axis` into consecutive chunks of the given sizes.
    pub fn split(
        &mut self,
        a: TensorId,
        axis: usize,
        sizes: &[usize],
    ) -> Result<Vec<TensorId>, TntError> {
        self.check_axis("split", a, axis)?;
        if sizes.iter().sum::<usize>() != self.shape(a)[axis] {
            return Err(TntError::shape(
                "split",
                format!("sizes {sizes:?} do not cover extent {}", self.shape(a)[axis]),
            ));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            out.push(self.slice(a, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId, TntError> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId, TntError> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&mut self, a: TensorId, axis: usize, mean: bool) -> Result<TensorId, TntError> {
        self.check_axis(if mean { "mean_axis" } else { "sum_axis" }, a, axis)?;
        let in_shape = self.shape(a).to_vec();
        let (outer, e, inner) = axis_split(&in_shape, axis);
        let scale = if mean { 1.0 / e as f64 } else { 1.0 };
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..e {
                let row = &src[(o * e + j) * inner..(o * e + j + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(row) {
                    *d += s * scale;
                }
            }
        }
        let mut out_shape = in_shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, data).expect("reduce shape");
        let rg = self.flows(&[a]);
        let op = if mean { Op::MeanAxis { a, axis } } else { Op::SumAxis { a, axis } };
        Ok(self.push(value, rg, op))
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.flows(&[a]);
        self.push(Tensor::scalar(s), rg, Op::SumAll { a })
    }

    /// Tile a size-1 axis to `times` copies.
    pub fn expand(&mut self, a: TensorId, axis: usize, times: usize) -> Result<TensorId, TntError> {
        self.check_axis("expand", a, axis)?;
        let in_shape = self.shape(a).to_vec();
        if in_shape[axis] != 1 || times == 0 {
            return Err(TntError::shape(
                "expand",
                format!("axis {axis} of {in_shape:?} must have extent 1, times {times} > 0"),
            ));
        }
        let (outer, _, inner) = axis_split(&in_shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * times * inner];
        for o in 0..outer {
            let block = &src[o * inner..(o + 1) * inner];
            for t in 0..times {
                data[(o * times + t) * inner..(o * times + t + 1) * inner].copy_from_slice(block);
            }
        }
        let mut out_shape = in_shape.clone();
        out_shape[axis] = times;
        let value = Tensor::new(out_shape, data).expect("expand shape");
        let rg = self.flows(&[a]);
        Ok(self.push(value, rg, Op::Expand { a, axis }))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Populate gradients of every tracked node reachable from `loss`.
    /// Shared nodes accumulate (`+=`) contributions from all consumers.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TntError> {
        if self.value(loss).numel() != 1 {
            return Err(TntError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let grad = self.nodes[i].grad.take().expect("grad present");
            let sign = match (self.fault, self.nodes[i].op.kind()) {
                (Some(f), Some(k)) if f == k => -1.0,
                _ => 1.0,
            };
            self.step_backward(i, &grad, sign);
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn acc(&mut self, id: TensorId, sign: f64, contribution: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let numel = self.nodes[id.0].value.numel();
        let g = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; numel]);
        for (dst, src) in g.iter_mut().zip(contribution) {
            *dst += sign * src;
        }
    }

    /// Accumulate into a sub-range of `id`'s gradient.
    fn acc_range(&mut self, id: TensorId, sign: f64, offset: usize, contribution: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let numel = self.nodes[id.0].value.numel();
        let g = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; numel]);
        for (dst, src) in g[offset..offset + contribution.len()].iter_mut().zip(contribution) {
            *dst += sign * src;
        }
    }

    fn step_backward(&mut self, i: usize, g: &[f64], sign: f64) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, n, b_shared } => {
                if self.nodes[a.0].requires_grad {
                    let da = matmul_grad_a(g, self.nodes[b.0].value.data(), batch, m, k, n, b_shared);
                    self.acc(a, sign, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = matmul_grad_b(self.nodes[a.0].value.data(), g, batch, m, k, n, b_shared);
                    self.acc(b, sign, &db);
                }
            }
            &Op::Add { a, b } => {
                self.acc(a, sign, g);
                if self.nodes[b.0].requires_grad {
                    let bn = self.nodes[b.0].value.numel();
                    let mut db = vec![0.0; bn];
                    for chunk in g.chunks(bn) {
                        for (d, s) in db.iter_mut().zip(chunk) {
                            *d += s;
                        }
                    }
                    self.acc(b, sign, &db);
                }
            }
            &Op::Mul { a, b } => {
                let bn = self.nodes[b.0].value.numel();
                if self.nodes[a.0].requires_grad {
                    let bdata = self.nodes[b.0].value.data();
                    let mut da = vec![0.0; g.len()];
                    for (ci, chunk) in g.chunks(bn).enumerate() {
                        for (j, s) in chunk.iter().enumerate() {
                            da[ci * bn + j] = s * bdata[j];
                        }
                    }
                    self.acc(a, sign, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let adata = self.nodes[a.0].value.data();
                    let mut db = vec![0.0; bn];
                    for (ci, chunk) in g.chunks(bn).enumerate() {
                        for (j, s) in chunk.iter().enumerate() {
                            db[j] += s * adata[ci * bn + j];
                        }
                    }
                    self.acc(b, sign, &db);
                }
            }
            &Op::Scale { a, k } => {
                let da: Vec<f64> = g.iter().map(|v| v * k).collect();
                self.acc(a, sign, &da);
            }
            &Op::Gelu { a } => {
                let x = self.nodes[a.0].value.data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| {
                        let phi = 0.5 * (1.0 + libm::erf(xv * INV_SQRT_2));
                        let pdf = INV_SQRT_2PI * (-0.5 * xv * xv).exp();
                        gv * (phi + xv * pdf)
                    })
                    .collect();
                self.acc(a, sign, &da);
            }
            &Op::Sigmoid { a } => {
                let s = self.nodes[i].value.data();
                let da: Vec<f64> = g.iter().zip(s).map(|(gv, &sv)| gv * sv * (1.0 - sv)).collect();
                self.acc(a, sign, &da);
            }
            &Op::Softmax { a, axis } => {
                let out = self.nodes[i].value.data();
                let (outer, e, inner) = axis_split(self.nodes[i].value.shape(), axis);
                let mut da = vec![0.0; out.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let mut dot = 0.0;
                        for j in 0..e {
                            let f = (o * e + j) * inner + ii;
                            dot += g[f] * out[f];
                        }
                        for j in 0..e {
                            let f = (o * e + j) * inner + ii;
                            da[f] = out[f] * (g[f] - dot);
                        }
                    }
                }
                self.acc(a, sign, &da);
            }
            &Op::LogSoftmax { a, axis } => {
                let out = self.nodes[i].value.data();
                let (outer, e, inner) = axis_split(self.nodes[i].value.shape(), axis);
                let mut da = vec![0.0; out.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let mut gsum = 0.0;
                        for j in 0..e {
                            gsum += g[(o * e + j) * inner + ii];
                        }
                        for j in 0..e {
                            let f = (o * e + j) * inner + ii;
                            da[f] = g[f] - out[f].exp() * gsum;
                        }
                    }
                }
                self.acc(a, sign, &da);
            }
            &Op::LayerNorm { x, gamma, beta, eps } => {
                let src = self.nodes[x.0].value.data();
                let gdata = self.nodes[gamma.0].value.data();
                let d = *self.nodes[x.0].value.shape().last().expect("rank >= 1");
                let rows = src.len() / d;
                let mut dx = vec![0.0; src.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = &src[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let (mean, inv_std) = ln_moments(row, eps);
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = grow[j] * gdata[j];
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let inv_d = 1.0 / d as f64;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = grow[j] * gdata[j];
                        dx[r * d + j] =
                            inv_std * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                    }
                }
                self.acc(x, sign, &dx);
                self.acc(gamma, sign, &dgamma);
                self.acc(beta, sign, &dbeta);
            }
            &Op::Reshape { a } => {
                self.acc(a, sign, g);
            }
            Op::Permute { a, perm } => {
                let a = *a;
                // Inverse permutation maps the gradient back.
                let mut inv = vec![0usize; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                let out_shape = self.nodes[i].value.shape().to_vec();
                let in_shape = self.nodes[a.0].value.shape().to_vec();
                let da = permute_data(g, &out_shape, &inv, &in_shape);
                self.acc(a, sign, &da);
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = axis_split(&out_shape, axis);
                let mut off = 0;
                for &p in &parts {
                    let e = self.nodes[p.0].value.shape()[axis];
                    if self.nodes[p.0].requires_grad {
                        let mut dp = vec![0.0; outer * e * inner];
                        for o in 0..outer {
                            let s = (o * total + off) * inner;
                            dp[o * e * inner..(o + 1) * e * inner]
                                .copy_from_slice(&g[s..s + e * inner]);
                        }
                        self.acc(p, sign, &dp);
                    }
                    off += e;
                }
            }
            &Op::Slice { a, axis, start } => {
                let in_shape = self.nodes[a.0].value.shape().to_vec();
                let (outer, e, inner) = axis_split(&in_shape, axis);
                let len = self.nodes[i].value.shape()[axis];
                for o in 0..outer {
                    let dst_off = (o * e + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    self.acc_range(a, sign, dst_off, src);
                }
            }
            &Op::SumAxis { a, axis } | &Op::MeanAxis { a, axis } => {
                let mean = matches!(self.nodes[i].op, Op::MeanAxis { .. });
                let in_shape = self.nodes[a.0].value.shape().to_vec();
                let (outer, e, inner) = axis_split(&in_shape, axis);
                let scale = if mean { 1.0 / e as f64 } else { 1.0 };
                let mut da = vec![0.0; outer * e * inner];
                for o in 0..outer {
                    let grow = &g[o * inner..(o + 1) * inner];
                    for j in 0..e {
                        let dst = &mut da[(o * e + j) * inner..(o * e + j + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(grow) {
                            *d = s * scale;
                        }
                    }
                }
                self.acc(a, sign, &da);
            }
            &Op::SumAll { a } => {
                let n = self.nodes[a.0].value.numel();
                let da = vec![g[0]; n];
                self.acc(a, sign, &da);
            }
            &Op::Expand { a, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (outer, times, inner) = axis_split(&out_shape, axis);
                let mut da = vec![0.0; outer * inner];
                for o in 0..outer {
                    for t in 0..times {
                        let src = &g[(o * times + t) * inner..(o * times + t + 1) * inner];
                        let dst = &mut da[o * inner..(o + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                self.acc(a, sign, &da);
            }
        }
    }
}

fn softmax_slice(src: &[f64], out: &mut [f64]) {
    let mut mx = f64::NEG_INFINITY;
    for &v in src {
        mx = mx.max(v);
    }
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(src) {
        let e = (v - mx).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

fn ln_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn permute_data(src: &[f64], in_shape: &[usize], perm: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let r = in_shape.len();
    let in_strides = strides(in_shape);
    let out_strides = strides(out_shape);
    let mut data = vec![0.0; src.len()];
    let mut coords = vec![0usize; r];
    for (flat, slot) in data.iter_mut().enumerate() {
        let mut rem = flat;
        for k in 0..r {
            coords[k] = rem / out_strides[k];
            rem %= out_strides[k];
        }
        let mut in_flat = 0;
        for k in 0..r {
            in_flat += coords[k] * in_strides[perm[k]];
        }
        *slot = src[in_flat];
    }
    data
}
