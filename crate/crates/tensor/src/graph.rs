use std::collections::HashMap;

use crate::kernels::{col2im, gemm, im2col, ConvGeom, MatRef};
use crate::{Array, Float, ParamId, ParamStore};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<F> {
    Input,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    ScaleRows(NodeId, Vec<F>),
    MulConst(NodeId, Vec<F>),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, mean: Vec<F>, rstd: Vec<F> },
    Modulate { x: NodeId, ss: NodeId },
    Silu(NodeId),
    Relu(NodeId),
    Clamp { x: NodeId, lo: F, hi: F },
    Upsample2x(NodeId),
    Concat(Vec<NodeId>),
    BatchMatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Softmax(NodeId),
    Reshape(NodeId),
    EmbeddingSum { table: NodeId, ids: Vec<Vec<usize>> },
    GlobalAvgPool(NodeId),
    MeanSquare(NodeId),
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<F> },
}

struct Node<F> {
    value: Option<Array<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Tape of eagerly evaluated operations.
///
/// Ops assert on shape mismatches: callers validate user-facing shapes
/// before building a graph, so a mismatch here is a bug.
pub struct Graph<'p, F: Float> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    params: Vec<Option<Vec<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn node(&self, id: NodeId) -> Option<&[F]> {
        self.grads[id.0].as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[F]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients indexed by [`ParamId`]; `None` for parameters that did not take part.
    pub fn into_param_grads(self) -> Vec<Option<Vec<F>>> {
        self.params
    }
}

fn acc<F: Float>(grads: &mut [Option<Vec<F>>], id: NodeId, len: usize) -> &mut [F] {
    grads[id.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn split3(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected at least [batch, channels], got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

fn sigmoid<F: Float>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

impl<'p, F: Float> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Array<F> {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    fn push(&mut self, value: Array<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; gradients are not tracked.
    pub fn input(&mut self, value: Array<F>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Input whose gradient is recorded (for sensitivity checks).
    pub fn input_with_grad(&mut self, value: Array<F>) -> NodeId {
        self.push(value, Op::Input, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), requires_grad: true });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    fn zip_map(&mut self, a: NodeId, b: NodeId, f: impl Fn(F, F) -> F) -> Array<F> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::new(va.shape().to_vec(), data)
    }

    fn map(&self, a: NodeId, f: impl Fn(F) -> F) -> Array<F> {
        let va = self.value(a);
        Array::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, s: F) -> NodeId {
        let v = self.map(a, |x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Multiplies every element of batch item `i` by `factors[i]`.
    pub fn scale_rows(&mut self, a: NodeId, factors: Vec<F>) -> NodeId {
        let va = self.value(a);
        let b = va.shape()[0];
        assert_eq!(factors.len(), b);
        let per = va.len() / b.max(1);
        let mut data = va.data().to_vec();
        for (chunk, &f) in data.chunks_mut(per.max(1)).zip(&factors) {
            for v in chunk {
                *v *= f;
            }
        }
        let v = Array::new(va.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(v, Op::ScaleRows(a, factors), rg)
    }

    /// Elementwise product with a constant of the same shape (dropout masks).
    pub fn mul_const(&mut self, a: NodeId, mask: Vec<F>) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.len(), mask.len());
        let data = va.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let v = Array::new(va.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(v, Op::MulConst(a, mask), rg)
    }

    /// `x [N, in] -> x w^T + b` with `w [out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vx.shape().len(), 2, "linear input must be [N, in]");
        let (n, din) = (vx.shape()[0], vx.shape()[1]);
        let dout = vw.shape()[0];
        assert_eq!(vw.shape(), &[dout, din], "linear weight shape");
        let mut out = vec![F::zero(); n * dout];
        if let Some(b) = b {
            let vb = self.value(b);
            assert_eq!(vb.shape(), &[dout]);
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(vb.data());
            }
        }
        gemm(F::one(), MatRef::new(vx.data(), n, din), MatRef::new(vw.data(), dout, din).t(), F::one(), &mut out);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Array::new([n, dout], out), Op::Linear { x, w, b }, rg)
    }

    /// 2-D convolution, `x [B, C, H, W]`, `w [O, C, k, k]`, square kernel.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let (vx, vw) = (self.value(x), self.value(w));
        let xs = vx.shape();
        let ws = vw.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be [B, C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O, C, k, k]");
        assert_eq!(ws[1], xs[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let geom = ConvGeom { channels: xs[1], height: xs[2], width: xs[3], kernel: ws[2], stride, pad };
        let (bsz, outc) = (xs[0], ws[0]);
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let (crows, ccols) = (geom.col_rows(), geom.col_cols());
        let in_per = geom.channels * geom.height * geom.width;
        let out_per = outc * ho * wo;
        let mut out = vec![F::zero(); bsz * out_per];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![F::zero(); crows * ccols] };
        let bias = b.map(|b| self.value(b).data());
        for bi in 0..bsz {
            let xi = &vx.data()[bi * in_per..(bi + 1) * in_per];
            let oi = &mut out[bi * out_per..(bi + 1) * out_per];
            if let Some(bias) = bias {
                for (o, plane) in oi.chunks_mut(ho * wo).enumerate() {
                    plane.fill(bias[o]);
                }
            }
            let colm = if geom.is_pointwise() {
                MatRef::new(xi, crows, ccols)
            } else {
                im2col(xi, &geom, &mut cols);
                MatRef::new(&cols, crows, ccols)
            };
            gemm(F::one(), MatRef::new(vw.data(), outc, crows), colm, F::one(), oi);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Array::new([bsz, outc, ho, wo], out), Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Group normalization over `[B, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: f64) -> NodeId {
        let vx = self.value(x);
        let (bsz, c, s) = split3(vx.shape());
        assert!(groups > 0 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let (vg, vb) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(vg.len(), c);
        assert_eq!(vb.len(), c);
        let cpg = c / groups;
        let n = F::from_usize(cpg * s).unwrap();
        let eps = F::lit(eps);
        let mut out = vec![F::zero(); vx.len()];
        let mut means = Vec::with_capacity(bsz * groups);
        let mut rstds = Vec::with_capacity(bsz * groups);
        for bi in 0..bsz {
            for g in 0..groups {
                let start = (bi * c + g * cpg) * s;
                let seg = &vx.data()[start..start + cpg * s];
                let mean = seg.iter().copied().sum::<F>() / n;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
                let rstd = F::one() / (var + eps).sqrt();
                for ci in 0..cpg {
                    let ch = g * cpg + ci;
                    for si in 0..s {
                        let idx = start + ci * s + si;
                        out[idx] = (vx.data()[idx] - mean) * rstd * vg[ch] + vb[ch];
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let v = Array::new(vx.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(v, Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds }, rg)
    }

    /// `x * (1 + scale) + shift` where `ss [B, 2C]` holds `[scale | shift]`.
    pub fn modulate(&mut self, x: NodeId, ss: NodeId) -> NodeId {
        let (vx, vs) = (self.value(x), self.value(ss));
        let (bsz, c, s) = split3(vx.shape());
        assert_eq!(vs.shape(), &[bsz, 2 * c], "modulation must be [B, 2C]");
        let mut out = vx.data().to_vec();
        for bi in 0..bsz {
            for ch in 0..c {
                let scale = F::one() + vs.data()[bi * 2 * c + ch];
                let shift = vs.data()[bi * 2 * c + c + ch];
                for v in &mut out[(bi * c + ch) * s..(bi * c + ch + 1) * s] {
                    *v = *v * scale + shift;
                }
            }
        }
        let v = Array::new(vx.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(ss);
        self.push(v, Op::Modulate { x, ss }, rg)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, |x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, |x| x.max(F::zero()));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    /// Clamp to `[lo, hi]`; the gradient passes only where the input is inside the range.
    pub fn clamp(&mut self, a: NodeId, lo: F, hi: F) -> NodeId {
        let v = self.map(a, |x| x.max(lo).min(hi));
        let rg = self.rg(a);
        self.push(v, Op::Clamp { x: a, lo, hi }, rg)
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let s = va.shape();
        assert_eq!(s.len(), 4);
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![F::zero(); planes * 4 * h * w];
        for p in 0..planes {
            let src = &va.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let v = Array::new([s[0], s[1], 2 * h, 2 * w], out);
        let rg = self.rg(a);
        self.push(v, Op::Upsample2x(a), rg)
    }

    /// Concatenation along axis 1 of `[B, C_i, ...]` tensors with equal trailing dims.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape().to_vec();
        let (bsz, _, s) = split3(&first);
        let mut total_c = 0;
        for &p in parts {
            let sh = self.value(p).shape();
            assert_eq!(sh[0], bsz, "concat batch mismatch");
            assert_eq!(&sh[2..], &first[2..], "concat trailing dims mismatch");
            total_c += sh[1];
        }
        let mut out = Vec::with_capacity(bsz * total_c * s);
        for bi in 0..bsz {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[bi * c * s..(bi + 1) * c * s]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total_c;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Array::new(shape, out), Op::Concat(parts.to_vec()), rg)
    }

    /// Batched matrix product over `[Bt, ., .]` operands, optionally transposing either side.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "batch_matmul shapes {sa:?} {sb:?}");
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "batch_matmul inner dims");
        let bt = sa[0];
        let mut out = vec![F::zero(); bt * m * n];
        for i in 0..bt {
            let am = MatRef::new(&va.data()[i * sa[1] * sa[2]..(i + 1) * sa[1] * sa[2]], sa[1], sa[2]);
            let bm = MatRef::new(&vb.data()[i * sb[1] * sb[2]..(i + 1) * sb[1] * sb[2]], sb[1], sb[2]);
            let am = if ta { am.t() } else { am };
            let bm = if tb { bm.t() } else { bm };
            gemm(F::one(), am, bm, F::zero(), &mut out[i * m * n..(i + 1) * m * n]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Array::new([bt, m, n], out), Op::BatchMatMul { a, b, ta, tb }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let last = *va.shape().last().expect("softmax on scalar");
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(last) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let v = Array::new(va.shape().to_vec(), out);
        let rg = self.rg(a);
        self.push(v, Op::Softmax(a), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(a).clone().reshape(shape.to_vec());
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    /// Row `i` of the output is the sum of `table[j]` over `j in ids[i]`.
    pub fn embedding_sum(&mut self, table: NodeId, ids: Vec<Vec<usize>>) -> NodeId {
        let vt = self.value(table);
        assert_eq!(vt.shape().len(), 2);
        let (vocab, dim) = (vt.shape()[0], vt.shape()[1]);
        let mut out = vec![F::zero(); ids.len() * dim];
        for (row, tokens) in out.chunks_mut(dim).zip(&ids) {
            for &t in tokens {
                assert!(t < vocab, "token {t} outside vocabulary of {vocab}");
                for (o, &e) in row.iter_mut().zip(&vt.data()[t * dim..(t + 1) * dim]) {
                    *o += e;
                }
            }
        }
        let n = ids.len();
        let rg = self.rg(table);
        self.push(Array::new([n, dim], out), Op::EmbeddingSum { table, ids }, rg)
    }

    /// Mean over all axes after the second: `[B, C, ...] -> [B, C]`.
    pub fn global_avg_pool(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let (bsz, c, s) = split3(va.shape());
        let inv = F::one() / F::from_usize(s).unwrap();
        let out = va.data().chunks(s).map(|p| p.iter().copied().sum::<F>() * inv).collect();
        let rg = self.rg(a);
        self.push(Array::new([bsz, c], out), Op::GlobalAvgPool(a), rg)
    }

    /// Mean of squared elements, as a scalar.
    pub fn mean_square(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let n = F::from_usize(va.len()).unwrap();
        let v = va.data().iter().map(|&x| x * x).sum::<F>() / n;
        let rg = self.rg(a);
        self.push(Array::scalar(v), Op::MeanSquare(a), rg)
    }

    /// Mean softmax cross-entropy of `logits [N, K]` against class labels, as a scalar.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let vl = self.value(logits);
        assert_eq!(vl.shape().len(), 2, "cross_entropy logits must be [N, K]");
        let (n, k) = (vl.shape()[0], vl.shape()[1]);
        assert_eq!(labels.len(), n, "one label per row");
        let mut probs = vl.data().to_vec();
        let mut loss = F::zero();
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            assert!(label < k, "label {label} outside {k} classes");
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let sum = row.iter().map(|&v| (v - max).exp()).sum::<F>();
            loss += sum.ln() + max - row[label];
            for v in row.iter_mut() {
                *v = (*v - max).exp() / sum;
            }
        }
        let loss = loss / F::from_usize(n).unwrap();
        let rg = self.rg(logits);
        self.push(Array::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg)
    }

    /// Reverse-mode pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Gradients<F> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(NodeId(i), &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let mut params = vec![None; self.params.len()];
        for (&pid, &node) in &self.param_nodes {
            params[pid.0] = grads[node.0].clone();
        }
        Gradients { grads, params }
    }

    fn backward_node(&self, id: NodeId, dy: &[F], grads: &mut [Option<Vec<F>>]) {
        let len = |n: NodeId| self.value(n).len();
        match &self.nodes[id.0].op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                for &(n, sign) in &[(*a, F::one()), (*b, F::one())] {
                    if self.rg(n) {
                        for (g, &d) in acc(grads, n, len(n)).iter_mut().zip(dy) {
                            *g += sign * d;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                for &(n, sign) in &[(*a, F::one()), (*b, -F::one())] {
                    if self.rg(n) {
                        for (g, &d) in acc(grads, n, len(n)).iter_mut().zip(dy) {
                            *g += sign * d;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    for ((g, &d), &o) in acc(grads, *a, va.len()).iter_mut().zip(dy).zip(vb) {
                        *g += d * o;
                    }
                }
                if self.rg(*b) {
                    for ((g, &d), &o) in acc(grads, *b, vb.len()).iter_mut().zip(dy).zip(va) {
                        *g += d * o;
                    }
                }
            }
            Op::Scale(a, s) => {
                for (g, &d) in acc(grads, *a, dy.len()).iter_mut().zip(dy) {
                    *g += d * *s;
                }
            }
            Op::ScaleRows(a, f) => {
                let per = dy.len() / f.len().max(1);
                let g = acc(grads, *a, dy.len());
                for ((gc, dc), &s) in g.chunks_mut(per.max(1)).zip(dy.chunks(per.max(1))).zip(f) {
                    for (gv, &d) in gc.iter_mut().zip(dc) {
                        *gv += d * s;
                    }
                }
            }
            Op::MulConst(a, m) => {
                for ((g, &d), &mv) in acc(grads, *a, dy.len()).iter_mut().zip(dy).zip(m) {
                    *g += d * mv;
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, din) = (vx.shape()[0], vx.shape()[1]);
                let dout = vw.shape()[0];
                let dym = MatRef::new(dy, n, dout);
                if self.rg(*x) {
                    gemm(F::one(), dym, MatRef::new(vw.data(), dout, din), F::one(), acc(grads, *x, n * din));
                }
                if self.rg(*w) {
                    gemm(F::one(), dym.t(), MatRef::new(vx.data(), n, din), F::one(), acc(grads, *w, dout * din));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let gb = acc(grads, b, dout);
                    for row in dy.chunks(dout) {
                        for (g, &d) in gb.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, geom, dy, grads),
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let vx = self.value(*x);
                let (bsz, c, s) = split3(vx.shape());
                let cpg = c / groups;
                let n = F::from_usize(cpg * s).unwrap();
                let vg = self.value(*gamma).data();
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                let mut dx = if self.rg(*x) { vec![F::zero(); vx.len()] } else { Vec::new() };
                for bi in 0..bsz {
                    for g in 0..*groups {
                        let k = bi * groups + g;
                        let (mu, rs) = (mean[k], rstd[k]);
                        let start = (bi * c + g * cpg) * s;
                        let mut sum_dxh = F::zero();
                        let mut sum_dxh_xh = F::zero();
                        for ci in 0..cpg {
                            let ch = g * cpg + ci;
                            for si in 0..s {
                                let idx = start + ci * s + si;
                                let xh = (vx.data()[idx] - mu) * rs;
                                dgamma[ch] += dy[idx] * xh;
                                dbeta[ch] += dy[idx];
                                let dxh = dy[idx] * vg[ch];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                            }
                        }
                        if !dx.is_empty() {
                            let (m1, m2) = (sum_dxh / n, sum_dxh_xh / n);
                            for ci in 0..cpg {
                                let ch = g * cpg + ci;
                                for si in 0..s {
                                    let idx = start + ci * s + si;
                                    let xh = (vx.data()[idx] - mu) * rs;
                                    dx[idx] = rs * (dy[idx] * vg[ch] - m1 - xh * m2);
                                }
                            }
                        }
                    }
                }
                if self.rg(*x) {
                    for (g, d) in acc(grads, *x, dx.len()).iter_mut().zip(dx) {
                        *g += d;
                    }
                }
                if self.rg(*gamma) {
                    for (g, d) in acc(grads, *gamma, c).iter_mut().zip(dgamma) {
                        *g += d;
                    }
                }
                if self.rg(*beta) {
                    for (g, d) in acc(grads, *beta, c).iter_mut().zip(dbeta) {
                        *g += d;
                    }
                }
            }
            Op::Modulate { x, ss } => {
                let (vx, vs) = (self.value(*x), self.value(*ss));
                let (bsz, c, s) = split3(vx.shape());
                if self.rg(*x) {
                    let gx = acc(grads, *x, vx.len());
                    for bi in 0..bsz {
                        for ch in 0..c {
                            let scale = F::one() + vs.data()[bi * 2 * c + ch];
                            let r = (bi * c + ch) * s..(bi * c + ch + 1) * s;
                            for (g, &d) in gx[r.clone()].iter_mut().zip(&dy[r]) {
                                *g += d * scale;
                            }
                        }
                    }
                }
                if self.rg(*ss) {
                    let gs = acc(grads, *ss, vs.len());
                    for bi in 0..bsz {
                        for ch in 0..c {
                            let r = (bi * c + ch) * s..(bi * c + ch + 1) * s;
                            let mut dscale = F::zero();
                            let mut dshift = F::zero();
                            for (&d, &xv) in dy[r.clone()].iter().zip(&vx.data()[r]) {
                                dscale += d * xv;
                                dshift += d;
                            }
                            gs[bi * 2 * c + ch] += dscale;
                            gs[bi * 2 * c + c + ch] += dshift;
                        }
                    }
                }
            }
            Op::Silu(a) => {
                let va = self.value(*a).data();
                for ((g, &d), &x) in acc(grads, *a, va.len()).iter_mut().zip(dy).zip(va) {
                    let s = sigmoid(x);
                    *g += d * s * (F::one() + x * (F::one() - s));
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                for ((g, &d), &x) in acc(grads, *a, va.len()).iter_mut().zip(dy).zip(va) {
                    if x > F::zero() {
                        *g += d;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(*x).data();
                for ((g, &d), &v) in acc(grads, *x, vx.len()).iter_mut().zip(dy).zip(vx) {
                    if v >= *lo && v <= *hi {
                        *g += d;
                    }
                }
            }
            Op::Upsample2x(a) => {
                let s = self.value(*a).shape().to_vec();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let g = acc(grads, *a, planes * h * w);
                for p in 0..planes {
                    let src = &dy[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            g[p * h * w + (y / 2) * w + x / 2] += src[y * 2 * w + x];
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let (bsz, total_c, s) = split3(self.value(id).shape());
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    if self.rg(p) {
                        let g = acc(grads, p, bsz * c * s);
                        for bi in 0..bsz {
                            let src = &dy[(bi * total_c + offset) * s..(bi * total_c + offset + c) * s];
                            for (gv, &d) in g[bi * c * s..(bi + 1) * c * s].iter_mut().zip(src) {
                                *gv += d;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
                let (m, _) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if *tb { sb[1] } else { sb[2] };
                let (asz, bsz) = (sa[1] * sa[2], sb[1] * sb[2]);
                for i in 0..sa[0] {
                    let dc = MatRef::new(&dy[i * m * n..(i + 1) * m * n], m, n);
                    let am = MatRef::new(&va.data()[i * asz..(i + 1) * asz], sa[1], sa[2]);
                    let bm = MatRef::new(&vb.data()[i * bsz..(i + 1) * bsz], sb[1], sb[2]);
                    let opa = if *ta { am.t() } else { am };
                    let opb = if *tb { bm.t() } else { bm };
                    if self.rg(*a) {
                        let ga = &mut acc(grads, *a, va.len())[i * asz..(i + 1) * asz];
                        if *ta {
                            gemm(F::one(), opb, dc.t(), F::one(), ga);
                        } else {
                            gemm(F::one(), dc, opb.t(), F::one(), ga);
                        }
                    }
                    if self.rg(*b) {
                        let gb = &mut acc(grads, *b, vb.len())[i * bsz..(i + 1) * bsz];
                        if *tb {
                            gemm(F::one(), dc.t(), opa, F::one(), gb);
                        } else {
                            gemm(F::one(), opa.t(), dc, F::one(), gb);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = self.value(id);
                let last = *y.shape().last().unwrap();
                let g = acc(grads, *a, y.len());
                for ((gr, yr), dr) in g.chunks_mut(last).zip(y.data().chunks(last)).zip(dy.chunks(last)) {
                    let dot: F = yr.iter().zip(dr).map(|(&yv, &d)| yv * d).sum();
                    for ((gv, &yv), &d) in gr.iter_mut().zip(yr).zip(dr) {
                        *gv += yv * (d - dot);
                    }
                }
            }
            Op::Reshape(a) => {
                for (g, &d) in acc(grads, *a, dy.len()).iter_mut().zip(dy) {
                    *g += d;
                }
            }
            Op::EmbeddingSum { table, ids } => {
                let vt = self.value(*table);
                let dim = vt.shape()[1];
                let g = acc(grads, *table, vt.len());
                for (row, tokens) in dy.chunks(dim).zip(ids) {
                    for &t in tokens {
                        for (gv, &d) in g[t * dim..(t + 1) * dim].iter_mut().zip(row) {
                            *gv += d;
                        }
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                let va = self.value(*a);
                let (_, _, s) = split3(va.shape());
                let inv = F::one() / F::from_usize(s).unwrap();
                let g = acc(grads, *a, va.len());
                for (plane, &d) in g.chunks_mut(s).zip(dy) {
                    for v in plane {
                        *v += d * inv;
                    }
                }
            }
            Op::MeanSquare(a) => {
                let va = self.value(*a).data();
                let k = dy[0] * F::lit(2.0) / F::from_usize(va.len()).unwrap();
                for (g, &x) in acc(grads, *a, va.len()).iter_mut().zip(va) {
                    *g += k * x;
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = dy[0] / F::from_usize(labels.len()).unwrap();
                let g = acc(grads, *logits, probs.len());
                for (i, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == label { F::one() } else { F::zero() };
                        g[i * k + j] += scale * (probs[i * k + j] - onehot);
                    }
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: &ConvGeom,
        dy: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (vx, vw) = (self.value(x), self.value(w));
        let bsz = vx.shape()[0];
        let outc = vw.shape()[0];
        let (crows, ccols) = (geom.col_rows(), geom.col_cols());
        let in_per = geom.channels * geom.height * geom.width;
        let out_per = outc * ccols;
        let want_x = self.rg(x);
        let want_w = self.rg(w);
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![F::zero(); crows * ccols] };
        let mut dcols = if want_x && !geom.is_pointwise() { vec![F::zero(); crows * ccols] } else { Vec::new() };
        let wm = MatRef::new(vw.data(), outc, crows);
        if let Some(b) = b.filter(|b| self.rg(*b)) {
            let gb = acc(grads, b, outc);
            for di in dy.chunks(out_per) {
                for (o, plane) in di.chunks(ccols).enumerate() {
                    gb[o] += plane.iter().copied().sum::<F>();
                }
            }
        }
        for bi in 0..bsz {
            let dyi = MatRef::new(&dy[bi * out_per..(bi + 1) * out_per], outc, ccols);
            let xi = &vx.data()[bi * in_per..(bi + 1) * in_per];
            if want_w {
                let colm = if geom.is_pointwise() {
                    MatRef::new(xi, crows, ccols)
                } else {
                    im2col(xi, geom, &mut cols);
                    MatRef::new(&cols, crows, ccols)
                };
                gemm(F::one(), dyi, colm.t(), F::one(), acc(grads, w, vw.len()));
            }
            if want_x {
                let gx = &mut acc(grads, x, vx.len())[bi * in_per..(bi + 1) * in_per];
                if geom.is_pointwise() {
                    gemm(F::one(), wm.t(), dyi, F::one(), gx);
                } else {
                    gemm(F::one(), wm.t(), dyi, F::zero(), &mut dcols);
                    col2im(&dcols, geom, gx);
                }
            }
        }
    }
}
