//! Reverse-mode differentiation over whole-tensor operations.
//!
//! A [`Tape`] records every executed operation as a node holding its output
//! value and the handles of its inputs. Nodes are appended in execution order,
//! so each node's inputs always precede it and [`Tape::backward`] is a single
//! reverse sweep that accumulates adjoints per node.
//!
//! A tape is single-owner: record a forward pass, call `backward` on a scalar
//! node, read gradients, drop the tape. Tensors entering the tape are
//! immutable afterwards.

use crate::error::{TensorError, TensorResult};
use crate::scalar::Scalar;
use crate::tensor::{row_major_strides, unravel, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    /// y = scale * x + shift, elementwise with constant scale/shift.
    AffineConst {
        x: VarId,
        scale: T,
        shift: T,
    },
    /// y = s * x where `s` is a shape-[1] node (learnable scalar weights).
    ScaleByScalar {
        s: VarId,
        x: VarId,
    },
    Matmul(VarId, VarId),
    /// y = x W + b on the last axis; x: [.. x K], W: [K x N], b: [N].
    Linear {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    /// Zero-padded same-size 2D convolution; x: [Cin,H,W], w: [Cout,Cin,k,k], b: [Cout].
    Conv2dSame {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    SoftmaxLast(VarId),
    /// Softmax over the last axis restricted to `mask`-true entries; masked
    /// entries produce exactly 0, all-masked rows produce all-zero rows.
    MaskedSoftmaxLast {
        x: VarId,
        mask: Vec<bool>,
    },
    Sigmoid(VarId),
    Softplus(VarId),
    Exp(VarId),
    Abs(VarId),
    MaxConst {
        x: VarId,
        c: T,
    },
    MaxElem(VarId, VarId),
    MinElem(VarId, VarId),
    /// Total sum -> shape [1].
    Sum(VarId),
    Reshape(VarId),
    Permute {
        x: VarId,
        perm: Vec<usize>,
    },
    /// [D,H,W] -> [1,H,W] maximum over the leading axis; argmax recorded per
    /// spatial position (first maximum wins).
    AdaptiveMaxPoolLead {
        x: VarId,
        argmax: Vec<usize>,
    },
    /// Per-channel standardization over trailing spatial dims using batch
    /// statistics, then affine with gamma/beta (shape [D]).
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: T,
    },
    ConcatAxis {
        xs: Vec<VarId>,
        axis: usize,
    },
    /// Select rows (axis 0) by index; repeated indices allowed.
    GatherRows {
        x: VarId,
        rows: Vec<usize>,
    },
    /// Slice `[start, start+len)` of the last axis.
    SliceLast {
        x: VarId,
        start: usize,
        len: usize,
    },
    /// gate: [1, rest..], x: [D, rest..]; y[d, j] = gate[j] * x[d, j].
    BroadcastMulLead {
        gate: VarId,
        x: VarId,
    },
    /// map: [C,H,W], coords: [n,2] rows of (y, x) in cell units; output [n,C].
    /// Out-of-range coordinates clamp to the border (zero coordinate grad).
    BilinearRows {
        map: VarId,
        coords: VarId,
    },
    /// k parts of shape [R,C] -> [R,k,C].
    StackMid {
        parts: Vec<VarId>,
    },
    /// samples: [R,S,C], weights: [R,S] -> [R,C] weighted sum over S.
    AggregateSamples {
        samples: VarId,
        weights: VarId,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`VarId`].
pub struct GradientMap<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradientMap<T> {
    pub fn get(&self, id: VarId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, materializing zeros for unreached nodes.
    pub fn get_or_zeros(&self, tape: &Tape<T>, id: VarId) -> Tensor<T> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape()),
        }
    }
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> VarId {
        debug_assert!(value.is_all_finite(), "tape op produced non-finite values");
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    /// Enter a tensor as a differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> VarId {
        self.push(value, Op::Leaf)
    }

    /// Enter a tensor that only carries data; identical to `leaf`, named for
    /// readability at call sites (targets, masks, position encodings...).
    pub fn constant(&mut self, value: Tensor<T>) -> VarId {
        self.leaf(value)
    }

    fn check_same_shape(&self, op: &'static str, a: VarId, b: VarId) -> TensorResult<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::DimMismatch {
                op,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> TensorResult<VarId> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(data, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> TensorResult<VarId> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(data, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> TensorResult<VarId> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(data, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> TensorResult<VarId> {
        self.check_same_shape("div", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(data, Op::Div(a, b)))
    }

    pub fn affine(&mut self, x: VarId, scale: f64, shift: f64) -> VarId {
        let (s, c) = (T::lit(scale), T::lit(shift));
        let out = map_tensor(self.value(x), |v| s * v + c);
        self.push(out, Op::AffineConst { x, scale: s, shift: c })
    }

    pub fn neg(&mut self, x: VarId) -> VarId {
        self.affine(x, -1.0, 0.0)
    }

    pub fn scale_by(&mut self, s: VarId, x: VarId) -> TensorResult<VarId> {
        if !self.value(s).is_scalar() {
            return Err(TensorError::argument(
                "scale_by",
                format!("scale must have one element, got shape {:?}", self.value(s).shape()),
            ));
        }
        let sv = self.value(s).scalar_value();
        let out = map_tensor(self.value(x), |v| sv * v);
        Ok(self.push(out, Op::ScaleByScalar { s, x }))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> TensorResult<VarId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::Matmul(a, b)))
    }

    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> TensorResult<VarId> {
        let (sx, sw, sb) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if sw.len() != 2 || sb.len() != 1 || sw[1] != sb[0] || *sx.last().unwrap() != sw[0] {
            return Err(TensorError::DimMismatch {
                op: "linear",
                left: sx,
                right: sw,
            });
        }
        let k = sw[0];
        let n = sw[1];
        let rows = self.value(x).numel() / k;
        let mut out = vec![T::zero(); rows * n];
        matmul_nn(self.value(x).data(), self.value(w).data(), rows, k, n, &mut out);
        let bias = self.value(b).data();
        for r in 0..rows {
            for (o, add) in out[r * n..(r + 1) * n].iter_mut().zip(bias) {
                *o = *o + *add;
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    pub fn conv2d_same(&mut self, x: VarId, w: VarId, b: VarId) -> TensorResult<VarId> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(TensorError::argument(
                "conv2d_same",
                format!("need x rank 3 and odd square kernel, got x {sx:?} w {sw:?}"),
            ));
        }
        if sw[1] != sx[0] || sb.len() != 1 || sb[0] != sw[0] {
            return Err(TensorError::DimMismatch {
                op: "conv2d_same",
                left: sx,
                right: sw,
            });
        }
        let out = conv2d_same_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Conv2dSame { x, w, b }))
    }

    pub fn softmax_last(&mut self, x: VarId) -> TensorResult<VarId> {
        let out = softmax_last_forward(self.value(x));
        Ok(self.push(out, Op::SoftmaxLast(x)))
    }

    /// `mask` is row-major over the whole tensor; `true` entries participate.
    pub fn masked_softmax_last(&mut self, x: VarId, mask: Vec<bool>) -> TensorResult<VarId> {
        if mask.len() != self.value(x).numel() {
            return Err(TensorError::argument(
                "masked_softmax_last",
                format!("mask length {} != numel {}", mask.len(), self.value(x).numel()),
            ));
        }
        let out = masked_softmax_last_forward(self.value(x), &mask);
        Ok(self.push(out, Op::MaskedSoftmaxLast { x, mask }))
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let out = map_tensor(self.value(x), sigmoid_scalar);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: VarId) -> VarId {
        let out = map_tensor(self.value(x), softplus_scalar);
        self.push(out, Op::Softplus(x))
    }

    /// x * sigmoid(x); smooth activation used by the fusion MLP/FFN.
    pub fn silu(&mut self, x: VarId) -> TensorResult<VarId> {
        let s = self.sigmoid(x);
        self.mul(x, s)
    }

    pub fn exp(&mut self, x: VarId) -> VarId {
        let out = map_tensor(self.value(x), |v| v.exp());
        self.push(out, Op::Exp(x))
    }

    pub fn abs(&mut self, x: VarId) -> VarId {
        let out = map_tensor(self.value(x), |v| v.abs());
        self.push(out, Op::Abs(x))
    }

    pub fn max_const(&mut self, x: VarId, c: f64) -> VarId {
        let cv = T::lit(c);
        let out = map_tensor(self.value(x), |v| v.max(cv));
        self.push(out, Op::MaxConst { x, c: cv })
    }

    pub fn max_elem(&mut self, a: VarId, b: VarId) -> TensorResult<VarId> {
        self.check_same_shape("max_elem", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x.max(y));
        Ok(self.push(out, Op::MaxElem(a, b)))
    }

    pub fn min_elem(&mut self, a: VarId, b: VarId) -> TensorResult<VarId> {
        self.check_same_shape("min_elem", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x.min(y));
        Ok(self.push(out, Op::MinElem(a, b)))
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> TensorResult<VarId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("incompatible with {} elements", self.value(x).numel()),
            });
        }
        let t = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: VarId, perm: &[usize]) -> TensorResult<VarId> {
        let rank = self.value(x).rank();
        if !is_permutation(perm, rank) {
            return Err(TensorError::argument(
                "permute",
                format!("{perm:?} is not a permutation of 0..{rank}"),
            ));
        }
        let out = permute_forward(self.value(x), perm);
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }))
    }

    /// Reduce the leading axis of a rank-3 tensor by per-position maximum.
    /// The requested output size must equal the input's spatial size.
    pub fn adaptive_max_pool(&mut self, x: VarId, out_hw: (usize, usize)) -> TensorResult<VarId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(TensorError::argument(
                "adaptive_max_pool",
                format!("need rank-3 input, got {s:?}"),
            ));
        }
        if out_hw != (s[1], s[2]) {
            return Err(TensorError::argument(
                "adaptive_max_pool",
                format!(
                    "requested size {:?} != input spatial size {:?}; only same-size pooling is supported",
                    out_hw,
                    (s[1], s[2])
                ),
            ));
        }
        let (d, h, w) = (s[0], s[1], s[2]);
        let data = self.value(x).data();
        let mut out = vec![T::zero(); h * w];
        let mut argmax = vec![0usize; h * w];
        for p in 0..h * w {
            let mut best = data[p];
            let mut best_d = 0;
            for dd in 1..d {
                let v = data[dd * h * w + p];
                if v > best {
                    best = v;
                    best_d = dd;
                }
            }
            out[p] = best;
            argmax[p] = best_d;
        }
        let t = Tensor::new(vec![1, h, w], out)?;
        Ok(self.push(t, Op::AdaptiveMaxPoolLead { x, argmax }))
    }

    pub fn batchnorm2d(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> TensorResult<VarId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(TensorError::argument(
                "batchnorm2d",
                format!("need rank-3 input, got {s:?}"),
            ));
        }
        if eps <= 0.0 {
            return Err(TensorError::argument("batchnorm2d", "eps must be > 0"));
        }
        let d = s[0];
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(TensorError::DimMismatch {
                op: "batchnorm2d",
                left: s,
                right: self.value(gamma).shape().to_vec(),
            });
        }
        let out = batchnorm_forward(self.value(x), self.value(gamma), self.value(beta), T::lit(eps));
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, eps: T::lit(eps) }))
    }

    pub fn concat(&mut self, xs: &[VarId], axis: usize) -> TensorResult<VarId> {
        if xs.is_empty() {
            return Err(TensorError::argument("concat", "no inputs"));
        }
        let first = self.value(xs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::argument(
                "concat",
                format!("axis {axis} out of range for rank {}", first.len()),
            ));
        }
        let mut axis_total = 0usize;
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::DimMismatch {
                    op: "concat",
                    left: first,
                    right: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let a = t.shape()[axis];
                let block = a * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::ConcatAxis { xs: xs.to_vec(), axis }))
    }

    pub fn gather_rows(&mut self, x: VarId, rows: &[usize]) -> TensorResult<VarId> {
        let s = self.value(x).shape().to_vec();
        let r = s[0];
        if rows.iter().any(|&i| i >= r) {
            return Err(TensorError::argument(
                "gather_rows",
                format!("row index out of range (rows: {r})"),
            ));
        }
        if rows.is_empty() {
            return Err(TensorError::argument("gather_rows", "empty row set"));
        }
        let inner: usize = s[1..].iter().product();
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &i in rows {
            out.extend_from_slice(&self.value(x).data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::GatherRows { x, rows: rows.to_vec() }))
    }

    pub fn slice_last(&mut self, x: VarId, start: usize, len: usize) -> TensorResult<VarId> {
        let s = self.value(x).shape().to_vec();
        let last = *s.last().unwrap();
        if len == 0 || start + len > last {
            return Err(TensorError::argument(
                "slice_last",
                format!("slice [{start}, {}) out of range for axis of size {last}", start + len),
            ));
        }
        let rows = self.value(x).numel() / last;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            let row = &self.value(x).data()[r * last..(r + 1) * last];
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::SliceLast { x, start, len }))
    }

    pub fn broadcast_mul_lead(&mut self, gate: VarId, x: VarId) -> TensorResult<VarId> {
        let sg = self.value(gate).shape().to_vec();
        let sx = self.value(x).shape().to_vec();
        if sg.len() != sx.len() || sg[0] != 1 || sg[1..] != sx[1..] {
            return Err(TensorError::DimMismatch {
                op: "broadcast_mul_lead",
                left: sg,
                right: sx,
            });
        }
        let inner: usize = sx[1..].iter().product();
        let g = self.value(gate).data();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for d in 0..sx[0] {
            for j in 0..inner {
                out[d * inner + j] = g[j] * xv[d * inner + j];
            }
        }
        let t = Tensor::new(sx, out)?;
        Ok(self.push(t, Op::BroadcastMulLead { gate, x }))
    }

    pub fn bilinear_rows(&mut self, map: VarId, coords: VarId) -> TensorResult<VarId> {
        let sm = self.value(map).shape().to_vec();
        let sc = self.value(coords).shape().to_vec();
        if sm.len() != 3 || sc.len() != 2 || sc[1] != 2 {
            return Err(TensorError::argument(
                "bilinear_rows",
                format!("need map [C,H,W] and coords [n,2], got {sm:?} and {sc:?}"),
            ));
        }
        let out = bilinear_rows_forward(self.value(map), self.value(coords));
        Ok(self.push(out, Op::BilinearRows { map, coords }))
    }

    pub fn stack_mid(&mut self, parts: &[VarId]) -> TensorResult<VarId> {
        if parts.is_empty() {
            return Err(TensorError::argument("stack_mid", "no parts"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() != 2 {
            return Err(TensorError::argument("stack_mid", "parts must be rank 2"));
        }
        for &p in parts {
            if self.value(p).shape() != first {
                return Err(TensorError::DimMismatch {
                    op: "stack_mid",
                    left: first,
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let (r, c) = (first[0], first[1]);
        let k = parts.len();
        let mut out = vec![T::zero(); r * k * c];
        for (s, &p) in parts.iter().enumerate() {
            let d = self.value(p).data();
            for row in 0..r {
                out[row * k * c + s * c..row * k * c + (s + 1) * c]
                    .copy_from_slice(&d[row * c..(row + 1) * c]);
            }
        }
        let t = Tensor::new(vec![r, k, c], out)?;
        Ok(self.push(t, Op::StackMid { parts: parts.to_vec() }))
    }

    pub fn aggregate_samples(&mut self, samples: VarId, weights: VarId) -> TensorResult<VarId> {
        let ss = self.value(samples).shape().to_vec();
        let sw = self.value(weights).shape().to_vec();
        if ss.len() != 3 || sw.len() != 2 || ss[0] != sw[0] || ss[1] != sw[1] {
            return Err(TensorError::DimMismatch {
                op: "aggregate_samples",
                left: ss,
                right: sw,
            });
        }
        let (r, s, c) = (ss[0], ss[1], ss[2]);
        let smp = self.value(samples).data();
        let wts = self.value(weights).data();
        let mut out = vec![T::zero(); r * c];
        for q in 0..r {
            for j in 0..s {
                let w = wts[q * s + j];
                let src = &smp[(q * s + j) * c..(q * s + j + 1) * c];
                let dst = &mut out[q * c..(q + 1) * c];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = *d + w * *v;
                }
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::AggregateSamples { samples, weights }))
    }

    /// Reverse sweep from a scalar loss node. Every leaf reachable from the
    /// loss receives an adjoint of its value's shape; unreachable leaves get
    /// zeros in the returned map.
    pub fn backward(&self, loss: VarId) -> TensorResult<GradientMap<T>> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::argument(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_inputs(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match g {
                Some(data) => Some(
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("adjoint shape matches node value"),
                ),
                None => match self.nodes[i].op {
                    Op::Leaf => Some(Tensor::zeros(self.nodes[i].value.shape())),
                    _ => None,
                },
            })
            .collect();
        Ok(GradientMap { grads })
    }

    fn accumulate_inputs(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let add_into = |grads: &mut [Option<Vec<T>>], id: VarId, contrib: Vec<T>| {
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(contrib) {
                        *a = *a + c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(grads, *a, g.to_vec());
                add_into(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, g.to_vec());
                add_into(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                add_into(grads, *a, g.iter().zip(bv).map(|(&gv, &v)| gv * v).collect());
                add_into(grads, *b, g.iter().zip(av).map(|(&gv, &v)| gv * v).collect());
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                add_into(grads, *a, g.iter().zip(bv).map(|(&gv, &v)| gv / v).collect());
                add_into(
                    grads,
                    *b,
                    g.iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&gv, (&x, &y))| -gv * x / (y * y))
                        .collect(),
                );
            }
            Op::AffineConst { x, scale, .. } => {
                let s = *scale;
                add_into(grads, *x, g.iter().map(|&v| s * v).collect());
            }
            Op::ScaleByScalar { s, x } => {
                let sv = self.value(*s).scalar_value();
                let xv = self.value(*x).data();
                add_into(grads, *x, g.iter().map(|&v| sv * v).collect());
                let ds: T = g.iter().zip(xv).map(|(&gv, &v)| gv * v).sum();
                add_into(grads, *s, vec![ds]);
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                // dA = g . B^T ; dB = A^T . g
                let mut da = vec![T::zero(); m * k];
                matmul_nt(g, self.value(*b).data(), m, n, k, &mut da);
                let mut db = vec![T::zero(); k * n];
                matmul_tn(self.value(*a).data(), g, m, k, n, &mut db);
                add_into(grads, *a, da);
                add_into(grads, *b, db);
            }
            Op::Linear { x, w, b } => {
                let sw = self.value(*w).shape();
                let (k, n) = (sw[0], sw[1]);
                let rows = self.value(*x).numel() / k;
                let mut dx = vec![T::zero(); rows * k];
                matmul_nt(g, self.value(*w).data(), rows, n, k, &mut dx);
                let mut dw = vec![T::zero(); k * n];
                matmul_tn(self.value(*x).data(), g, rows, k, n, &mut dw);
                let mut db = vec![T::zero(); n];
                for r in 0..rows {
                    for (acc, &gv) in db.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *acc = *acc + gv;
                    }
                }
                add_into(grads, *x, dx);
                add_into(grads, *w, dw);
                add_into(grads, *b, db);
            }
            Op::Conv2dSame { x, w, b } => {
                let (dx, dw, db) = conv2d_same_backward(self.value(*x), self.value(*w), g);
                add_into(grads, *x, dx);
                add_into(grads, *w, dw);
                add_into(grads, *b, db);
            }
            Op::SoftmaxLast(x) => {
                add_into(grads, *x, softmax_backward(&self.nodes[i].value, g));
            }
            Op::MaskedSoftmaxLast { x, .. } => {
                // Masked outputs are exactly 0, so the standard softmax
                // Jacobian already routes nothing through them.
                add_into(grads, *x, softmax_backward(&self.nodes[i].value, g));
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data();
                add_into(
                    grads,
                    *x,
                    g.iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                        .collect(),
                );
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                add_into(
                    grads,
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| gv * sigmoid_scalar(v))
                        .collect(),
                );
            }
            Op::Exp(x) => {
                let y = self.nodes[i].value.data();
                add_into(grads, *x, g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect());
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                add_into(
                    grads,
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v >= T::zero() { gv } else { -gv })
                        .collect(),
                );
            }
            Op::MaxConst { x, c } => {
                let xv = self.value(*x).data();
                add_into(
                    grads,
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v >= *c { gv } else { T::zero() })
                        .collect(),
                );
            }
            Op::MaxElem(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for j in 0..av.len() {
                    if av[j] >= bv[j] {
                        da[j] = g[j];
                    } else {
                        db[j] = g[j];
                    }
                }
                add_into(grads, *a, da);
                add_into(grads, *b, db);
            }
            Op::MinElem(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for j in 0..av.len() {
                    if av[j] <= bv[j] {
                        da[j] = g[j];
                    } else {
                        db[j] = g[j];
                    }
                }
                add_into(grads, *a, da);
                add_into(grads, *b, db);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                add_into(grads, *x, vec![g[0]; n]);
            }
            Op::Reshape(x) => {
                add_into(grads, *x, g.to_vec());
            }
            Op::Permute { x, perm } => {
                let inv = invert_permutation(perm);
                let gt = Tensor::new(self.nodes[i].value.shape().to_vec(), g.to_vec()).unwrap();
                add_into(grads, *x, permute_forward(&gt, &inv).into_data());
            }
            Op::AdaptiveMaxPoolLead { x, argmax } => {
                let s = self.value(*x).shape();
                let hw = s[1] * s[2];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (p, &d) in argmax.iter().enumerate() {
                    dx[d * hw + p] = g[p];
                }
                add_into(grads, *x, dx);
            }
            Op::BatchNorm { x, gamma, beta, eps } => {
                let (dx, dgamma, dbeta) =
                    batchnorm_backward(self.value(*x), self.value(*gamma), *eps, g);
                add_into(grads, *x, dx);
                add_into(grads, *gamma, dgamma);
                add_into(grads, *beta, dbeta);
            }
            Op::ConcatAxis { xs, axis } => {
                let out_shape = self.nodes[i].value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_block = out_shape[*axis] * inner;
                let mut offset_in_axis = 0usize;
                for &xid in xs {
                    let a = self.value(xid).shape()[*axis];
                    let mut dx = vec![T::zero(); self.value(xid).numel()];
                    for o in 0..outer {
                        let src = o * total_block + offset_in_axis * inner;
                        dx[o * a * inner..(o + 1) * a * inner]
                            .copy_from_slice(&g[src..src + a * inner]);
                    }
                    add_into(grads, xid, dx);
                    offset_in_axis += a;
                }
            }
            Op::GatherRows { x, rows } => {
                let inner: usize = self.value(*x).shape()[1..].iter().product();
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (out_row, &src_row) in rows.iter().enumerate() {
                    for j in 0..inner {
                        dx[src_row * inner + j] = dx[src_row * inner + j] + g[out_row * inner + j];
                    }
                }
                add_into(grads, *x, dx);
            }
            Op::SliceLast { x, start, len } => {
                let last = *self.value(*x).shape().last().unwrap();
                let rows = self.value(*x).numel() / last;
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for r in 0..rows {
                    for j in 0..*len {
                        dx[r * last + start + j] = g[r * len + j];
                    }
                }
                add_into(grads, *x, dx);
            }
            Op::BroadcastMulLead { gate, x } => {
                let sx = self.value(*x).shape();
                let inner: usize = sx[1..].iter().product();
                let gv = self.value(*gate).data();
                let xv = self.value(*x).data();
                let mut dgate = vec![T::zero(); inner];
                let mut dx = vec![T::zero(); xv.len()];
                for d in 0..sx[0] {
                    for j in 0..inner {
                        let gu = g[d * inner + j];
                        dgate[j] = dgate[j] + gu * xv[d * inner + j];
                        dx[d * inner + j] = gu * gv[j];
                    }
                }
                add_into(grads, *gate, dgate);
                add_into(grads, *x, dx);
            }
            Op::BilinearRows { map, coords } => {
                let (dmap, dcoords) =
                    bilinear_rows_backward(self.value(*map), self.value(*coords), g);
                add_into(grads, *map, dmap);
                add_into(grads, *coords, dcoords);
            }
            Op::StackMid { parts } => {
                let s = self.nodes[i].value.shape();
                let (r, k, c) = (s[0], s[1], s[2]);
                for (sidx, &p) in parts.iter().enumerate() {
                    let mut dp = vec![T::zero(); r * c];
                    for row in 0..r {
                        dp[row * c..(row + 1) * c]
                            .copy_from_slice(&g[row * k * c + sidx * c..row * k * c + (sidx + 1) * c]);
                    }
                    add_into(grads, p, dp);
                }
            }
            Op::AggregateSamples { samples, weights } => {
                let ss = self.value(*samples).shape();
                let (r, s, c) = (ss[0], ss[1], ss[2]);
                let smp = self.value(*samples).data();
                let wts = self.value(*weights).data();
                let mut dsmp = vec![T::zero(); smp.len()];
                let mut dwts = vec![T::zero(); wts.len()];
                for q in 0..r {
                    for j in 0..s {
                        let w = wts[q * s + j];
                        let mut acc = T::zero();
                        for ch in 0..c {
                            let gu = g[q * c + ch];
                            dsmp[(q * s + j) * c + ch] = gu * w;
                            acc = acc + gu * smp[(q * s + j) * c + ch];
                        }
                        dwts[q * s + j] = acc;
                    }
                }
                add_into(grads, *samples, dsmp);
                add_into(grads, *weights, dwts);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// raw kernels
// ---------------------------------------------------------------------------

fn map_tensor<T: Scalar>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        .expect("elementwise map preserves shape")
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("elementwise zip preserves shape")
}

pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// ln(1 + e^x) computed without overflow.
pub(crate) fn softplus_scalar<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

/// C[m,n] += sum_k A[m,k] B[k,n], accumulating in ascending k.
fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// C[m,n] += sum_k A[m,k] B[n,k]  (B transposed).
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// C[m,n] += sum_k A[k,m] B[k,n]  (A transposed); A stored as [k_dim x m].
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k_dim: usize, m: usize, n: usize, out: &mut [T]) {
    for p in 0..k_dim {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// im2col layout: col[(ci*k*k + ky*k + kx) * (h*w) + (y*w + x)].
fn im2col<T: Scalar>(x: &Tensor<T>, ksize: usize) -> Vec<T> {
    let s = x.shape();
    let (cin, h, w) = (s[0], s[1], s[2]);
    let pad = ksize / 2;
    let xd = x.data();
    let mut col = vec![T::zero(); cin * ksize * ksize * h * w];
    let hw = h * w;
    for ci in 0..cin {
        for ky in 0..ksize {
            for kx in 0..ksize {
                let r = (ci * ksize + ky) * ksize + kx;
                let dst = &mut col[r * hw..(r + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[y * w + xx] = xd[ci * hw + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    col
}

fn conv2d_same_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> TensorResult<Tensor<T>> {
    let (sx, sw) = (x.shape(), w.shape());
    let (h, wdt) = (sx[1], sx[2]);
    let (cout, cin, k) = (sw[0], sw[1], sw[2]);
    let col = im2col(x, k);
    let hw = h * wdt;
    let mut out = vec![T::zero(); cout * hw];
    matmul_nn(w.data(), &col, cout, cin * k * k, hw, &mut out);
    for co in 0..cout {
        let bias = b.data()[co];
        for v in &mut out[co * hw..(co + 1) * hw] {
            *v = *v + bias;
        }
    }
    Tensor::new(vec![cout, h, wdt], out)
}

fn conv2d_same_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (sx, sw) = (x.shape(), w.shape());
    let (cin, h, wdt) = (sx[0], sx[1], sx[2]);
    let (cout, k) = (sw[0], sw[2]);
    let hw = h * wdt;
    let pad = k / 2;

    // dW = g . col^T
    let col = im2col(x, k);
    let mut dw = vec![T::zero(); cout * cin * k * k];
    matmul_nt(g, &col, cout, hw, cin * k * k, &mut dw);

    // db = row sums of g
    let mut db = vec![T::zero(); cout];
    for co in 0..cout {
        db[co] = g[co * hw..(co + 1) * hw].iter().copied().sum();
    }

    // dcol = W^T . g, then scatter back (col2im).
    let mut dcol = vec![T::zero(); cin * k * k * hw];
    matmul_tn(w.data(), g, cout, cin * k * k, hw, &mut dcol);
    let mut dx = vec![T::zero(); cin * hw];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let src = &dcol[r * hw..(r + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..wdt {
                        let sx = xx as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= wdt as isize {
                            continue;
                        }
                        let di = ci * hw + sy as usize * wdt + sx as usize;
                        dx[di] = dx[di] + src[y * wdt + xx];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn softmax_last_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let last = *x.shape().last().unwrap();
    let rows = x.numel() / last;
    let mut out = vec![T::zero(); x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * last..(r + 1) * last];
        let m = row.iter().copied().fold(row[0], T::max);
        let dst = &mut out[r * last..(r + 1) * last];
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            let e = (v - m).exp();
            *d = e;
            total = total + e;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax preserves shape")
}

fn masked_softmax_last_forward<T: Scalar>(x: &Tensor<T>, mask: &[bool]) -> Tensor<T> {
    let last = *x.shape().last().unwrap();
    let rows = x.numel() / last;
    let mut out = vec![T::zero(); x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * last..(r + 1) * last];
        let rmask = &mask[r * last..(r + 1) * last];
        let mut m: Option<T> = None;
        for (v, &keep) in row.iter().zip(rmask) {
            if keep {
                m = Some(match m {
                    Some(cur) => cur.max(*v),
                    None => *v,
                });
            }
        }
        let Some(m) = m else { continue }; // all masked: leave the row zero
        let dst = &mut out[r * last..(r + 1) * last];
        let mut total = T::zero();
        for ((d, &v), &keep) in dst.iter_mut().zip(row).zip(rmask) {
            if keep {
                let e = (v - m).exp();
                *d = e;
                total = total + e;
            }
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax preserves shape")
}

fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &[T]) -> Vec<T> {
    let last = *y.shape().last().unwrap();
    let rows = y.numel() / last;
    let yd = y.data();
    let mut dx = vec![T::zero(); y.numel()];
    for r in 0..rows {
        let yr = &yd[r * last..(r + 1) * last];
        let gr = &g[r * last..(r + 1) * last];
        let dot: T = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
        for j in 0..last {
            dx[r * last + j] = yr[j] * (gr[j] - dot);
        }
    }
    dx
}

fn permute_forward<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = row_major_strides(in_shape);
    let out_strides = row_major_strides(&out_shape);
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    for flat in 0..x.numel() {
        let out_idx = unravel(flat, &out_shape);
        let mut src = 0usize;
        for (d, &o) in out_idx.iter().enumerate() {
            src += o * in_strides[perm[d]];
        }
        let _ = out_strides; // offsets computed straight from `flat`
        out[flat] = xd[src];
    }
    Tensor::new(out_shape, out).expect("permute preserves element count")
}

pub(crate) fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn is_permutation(perm: &[usize], rank: usize) -> bool {
    if perm.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Tensor<T> {
    let s = x.shape();
    let (d, hw) = (s[0], s[1] * s[2]);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    let inv_n = T::one() / T::lit(hw as f64);
    for c in 0..d {
        let ch = &xd[c * hw..(c + 1) * hw];
        let mean: T = ch.iter().copied().sum::<T>() * inv_n;
        let var: T = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let inv_std = T::one() / (var + eps).sqrt();
        let (gm, bt) = (gamma.data()[c], beta.data()[c]);
        for (o, &v) in out[c * hw..(c + 1) * hw].iter_mut().zip(ch) {
            *o = gm * (v - mean) * inv_std + bt;
        }
    }
    Tensor::new(s.to_vec(), out).expect("batchnorm preserves shape")
}

fn batchnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let (d, hw) = (s[0], s[1] * s[2]);
    let xd = x.data();
    let inv_n = T::one() / T::lit(hw as f64);
    let mut dx = vec![T::zero(); xd.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    for c in 0..d {
        let ch = &xd[c * hw..(c + 1) * hw];
        let gr = &g[c * hw..(c + 1) * hw];
        let mean: T = ch.iter().copied().sum::<T>() * inv_n;
        let var: T = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let inv_std = T::one() / (var + eps).sqrt();

        let mut g_sum = T::zero();
        let mut gx_sum = T::zero();
        for (&gv, &v) in gr.iter().zip(ch) {
            g_sum = g_sum + gv;
            gx_sum = gx_sum + gv * (v - mean) * inv_std;
        }
        dbeta[c] = g_sum;
        dgamma[c] = gx_sum;

        let gm = gamma.data()[c];
        let mean_g = g_sum * inv_n;
        let mean_gx = gx_sum * inv_n;
        for ((o, &gv), &v) in dx[c * hw..(c + 1) * hw].iter_mut().zip(gr).zip(ch) {
            let xhat = (v - mean) * inv_std;
            *o = gm * inv_std * (gv - mean_g - xhat * mean_gx);
        }
    }
    (dx, dgamma, dbeta)
}

fn bilinear_rows_forward<T: Scalar>(map: &Tensor<T>, coords: &Tensor<T>) -> Tensor<T> {
    let s = map.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let n = coords.shape()[0];
    let md = map.data();
    let cd = coords.data();
    let hw = h * w;
    let mut out = vec![T::zero(); n * c];
    for i in 0..n {
        let (y0, x0, y1, x1, fy, fx) = bilinear_cell(cd[i * 2], cd[i * 2 + 1], h, w);
        let w00 = (T::one() - fy) * (T::one() - fx);
        let w01 = (T::one() - fy) * fx;
        let w10 = fy * (T::one() - fx);
        let w11 = fy * fx;
        for ch in 0..c {
            let base = ch * hw;
            out[i * c + ch] = w00 * md[base + y0 * w + x0]
                + w01 * md[base + y0 * w + x1]
                + w10 * md[base + y1 * w + x0]
                + w11 * md[base + y1 * w + x1];
        }
    }
    Tensor::new(vec![n, c], out).expect("bilinear output shape")
}

fn bilinear_rows_backward<T: Scalar>(
    map: &Tensor<T>,
    coords: &Tensor<T>,
    g: &[T],
) -> (Vec<T>, Vec<T>) {
    let s = map.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let n = coords.shape()[0];
    let md = map.data();
    let cd = coords.data();
    let hw = h * w;
    let mut dmap = vec![T::zero(); md.len()];
    let mut dcoords = vec![T::zero(); n * 2];
    for i in 0..n {
        let (cy, cx) = (cd[i * 2], cd[i * 2 + 1]);
        let (y0, x0, y1, x1, fy, fx) = bilinear_cell(cy, cx, h, w);
        let w00 = (T::one() - fy) * (T::one() - fx);
        let w01 = (T::one() - fy) * fx;
        let w10 = fy * (T::one() - fx);
        let w11 = fy * fx;
        let y_interior = cy > T::zero() && cy < T::lit((h - 1) as f64);
        let x_interior = cx > T::zero() && cx < T::lit((w - 1) as f64);
        let mut dy = T::zero();
        let mut dx = T::zero();
        for ch in 0..c {
            let base = ch * hw;
            let gv = g[i * c + ch];
            let (v00, v01, v10, v11) = (
                md[base + y0 * w + x0],
                md[base + y0 * w + x1],
                md[base + y1 * w + x0],
                md[base + y1 * w + x1],
            );
            dmap[base + y0 * w + x0] = dmap[base + y0 * w + x0] + gv * w00;
            dmap[base + y0 * w + x1] = dmap[base + y0 * w + x1] + gv * w01;
            dmap[base + y1 * w + x0] = dmap[base + y1 * w + x0] + gv * w10;
            dmap[base + y1 * w + x1] = dmap[base + y1 * w + x1] + gv * w11;
            if y_interior {
                dy = dy + gv * ((T::one() - fx) * (v10 - v00) + fx * (v11 - v01));
            }
            if x_interior {
                dx = dx + gv * ((T::one() - fy) * (v01 - v00) + fy * (v11 - v10));
            }
        }
        dcoords[i * 2] = dy;
        dcoords[i * 2 + 1] = dx;
    }
    (dmap, dcoords)
}

/// Clamped bilinear cell for a coordinate pair: corner indices plus fractions.
fn bilinear_cell<T: Scalar>(
    y: T,
    x: T,
    h: usize,
    w: usize,
) -> (usize, usize, usize, usize, T, T) {
    let ymax = T::lit((h - 1) as f64);
    let xmax = T::lit((w - 1) as f64);
    let cy = y.max(T::zero()).min(ymax);
    let cx = x.max(T::zero()).min(xmax);
    let y0 = if h >= 2 {
        (cy.floor().to_f64_lossy() as usize).min(h - 2)
    } else {
        0
    };
    let x0 = if w >= 2 {
        (cx.floor().to_f64_lossy() as usize).min(w - 2)
    } else {
        0
    };
    let y1 = if h >= 2 { y0 + 1 } else { 0 };
    let x1 = if w >= 2 { x0 + 1 } else { 0 };
    let fy = if h >= 2 { cy - T::lit(y0 as f64) } else { T::zero() };
    let fx = if w >= 2 { cx - T::lit(x0 as f64) } else { T::zero() };
    (y0, x0, y1, x1, fy, fx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let eye = tape.leaf(tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_checked_1x2_2x1() {
        let mut tape = Tape::new();
        let a = tape.leaf(tensor(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(tensor(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_analytic_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[4], &[0.0, 0.0, 0.0, 0.0]));
        let y = tape.softmax_last(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x2 = tape.leaf(tensor(&[2], &[2.0f64.ln(), 0.0]));
        let y2 = tape.softmax_last(x2).unwrap();
        assert!((tape.value(y2).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((tape.value(y2).data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[2], &[1000.0, 1000.0]));
        let y = tape.softmax_last(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        assert!(tape.value(y).is_all_finite());
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries_and_all_masked_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 1.0, 1.0]));
        let y = tape
            .masked_softmax_last(x, vec![true, false, true, false, false, false])
            .unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[1], 0.0);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-15);
        assert_eq!(&d[3..6], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sigmoid_midpoint_and_symmetry() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[3], &[0.0, 1.7, -1.7]));
        let y = tape.sigmoid(x);
        let d = tape.value(y).data();
        assert_eq!(d[0], 0.5);
        assert!((d[1] + d[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn linear_identity_weights() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(tensor(&[2], &[0.0, 0.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_identity_kernel_and_constant_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(tensor(&[1, 1, 1, 1], &[1.0]));
        let b = tape.leaf(tensor(&[1], &[0.0]));
        let y = tape.conv2d_same(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let wz = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]));
        let bz = tape.leaf(tensor(&[1], &[7.5]));
        let y2 = tape.conv2d_same(x, wz, bz).unwrap();
        assert_eq!(tape.value(y2).data(), &[7.5, 7.5, 7.5, 7.5]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2, 2]));
        let w = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert!(tape.conv2d_same(x, w, b).is_err());
    }

    #[test]
    fn permute_shape_law_and_involution() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = tape.permute(x, &[1, 0, 2]).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 2, 4]);
        let back = tape.permute(y, &[1, 0, 2]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));

        let ident = tape.permute(x, &[0, 1, 2]).unwrap();
        assert_eq!(tape.value(ident), tape.value(x));
        assert!(tape.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn adaptive_max_pool_reduces_leading_dim() {
        let mut tape = Tape::new();
        let ones_zeros = tape.leaf(tensor(
            &[2, 2, 2],
            &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        ));
        let y = tape.adaptive_max_pool(ones_zeros, (2, 2)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0, 1.0]);
        assert!(tape.adaptive_max_pool(ones_zeros, (2, 3)).is_err());

        let single = tape.leaf(tensor(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let same = tape.adaptive_max_pool(single, (2, 2)).unwrap();
        assert_eq!(tape.value(same).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn batchnorm_constant_channel_returns_beta() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 2], 3.25));
        let gamma = tape.leaf(tensor(&[1], &[1.0]));
        let beta = tape.leaf(tensor(&[1], &[0.75]));
        let y = tape.batchnorm2d(x, gamma, beta, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.75);
        }
    }

    #[test]
    fn batchnorm_standardized_input_stays_put_as_eps_vanishes() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[1, 1, 2], &[-1.0, 1.0]));
        let gamma = tape.leaf(tensor(&[1], &[1.0]));
        let beta = tape.leaf(tensor(&[1], &[0.0]));
        let y = tape.batchnorm2d(x, gamma, beta, 1e-14).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-7);
        assert!((d[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn sum_backward_is_all_ones_and_loss_grad_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
        assert_eq!(grads.get(loss).unwrap().data(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 2], |i| i as f64));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2], |i| i as f64 + 1.0));
        let unused = tape.leaf(Tensor::from_fn(&[3], |_| 5.0));
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn bilinear_exact_at_integer_coords_and_midpoint_mean() {
        let mut tape = Tape::new();
        let map = tape.leaf(tensor(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let at = tape.leaf(tensor(&[3, 2], &[0.0, 1.0, 1.0, 0.0, 0.5, 0.5]));
        let y = tape.bilinear_rows(map, at).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[0], 2.0);
        assert_eq!(d[1], 3.0);
        assert_eq!(d[2], 2.5);
    }

    #[test]
    fn bilinear_clamps_out_of_range_coords() {
        let mut tape = Tape::new();
        let map = tape.leaf(tensor(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let at = tape.leaf(tensor(&[2, 2], &[-5.0, -5.0, 9.0, 9.0]));
        let y = tape.bilinear_rows(map, at).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 4.0]);
    }

    #[test]
    fn concat_and_gather_round_trip() {
        let mut tape = Tape::new();
        let a = tape.leaf(tensor(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(tensor(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let cat = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(cat).shape(), &[3, 2]);
        let picked = tape.gather_rows(cat, &[2, 0]).unwrap();
        assert_eq!(tape.value(picked).data(), &[5.0, 6.0, 1.0, 2.0]);
    }

    #[test]
    fn residual_style_graph_accumulates_gradients() {
        // loss = sum(x * x + x): d/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[2], &[3.0, -1.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0, -2.0]);
    }
}
