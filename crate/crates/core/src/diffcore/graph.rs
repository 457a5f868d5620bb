//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order; [`Graph::backward`]
//! walks the tape in reverse. Parameters enter through [`Graph::param`], which
//! caches one node per parameter so weights reused by several branches (the
//! twin extractor) accumulate their gradients into a single slot.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::kernels::{self, ConvGeom, LinearTaps};
use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// One anchor row with its positive and negative rows, all indices into the
/// row matrix handed to [`Graph::contrastive`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastTerm {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<T>,
    /// Unbiased variance.
    pub batch_var: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Max,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// Per channel: subtracted mean and multiplier `1/sqrt(var+eps)`.
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Abs(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MeanAll(NodeId),
    AdaptiveAvgPool(NodeId),
    Upsample(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Narrow {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Matmul(NodeId, NodeId),
    L2Normalize {
        x: NodeId,
        norms: Vec<T>,
    },
    ChannelReduce {
        x: NodeId,
        kind: Reduce,
        argmax: Vec<usize>,
    },
    SpatialReduce {
        x: NodeId,
        kind: Reduce,
        argmax: Vec<usize>,
    },
    SoftmaxCe {
        logits: NodeId,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
    BceLogits {
        logits: NodeId,
        targets: Vec<T>,
    },
    ToRows(NodeId),
    SegmentMean {
        x: NodeId,
        groups: Vec<Vec<usize>>,
    },
    Contrastive {
        x: NodeId,
        terms: Vec<ContrastTerm>,
        tau: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, NodeId>,
    param_order: Vec<(ParamId, NodeId)>,
    bn_updates: Vec<BnUpdate<T>>,
}

/// Gradients of a scalar output with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }
}

/// Offsets into a (possibly broadcast) rank-4 operand.
struct Broadcast {
    out: [usize; 4],
    sa: [usize; 4],
    sb: [usize; 4],
}

fn pad4(shape: &[usize]) -> [usize; 4] {
    let mut s = [1; 4];
    let off = 4 - shape.len();
    s[off..].copy_from_slice(shape);
    s
}

fn strides_for(shape: [usize; 4], out: [usize; 4]) -> [usize; 4] {
    let mut st = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        st[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    st
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Self, Vec<usize>)> {
        if a.len() != b.len() {
            return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
        }
        let mut out_shape = Vec::with_capacity(a.len());
        for (&x, &y) in a.iter().zip(b) {
            if x == y || y == 1 {
                out_shape.push(x);
            } else if x == 1 {
                out_shape.push(y);
            } else {
                return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
            }
        }
        let out = pad4(&out_shape);
        let bc = Broadcast {
            out,
            sa: strides_for(pad4(a), out),
            sb: strides_for(pad4(b), out),
        };
        Ok((bc, out_shape))
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let o = self.out;
        let mut idx = 0;
        for i0 in 0..o[0] {
            for i1 in 0..o[1] {
                for i2 in 0..o[2] {
                    let base_a = i0 * self.sa[0] + i1 * self.sa[1] + i2 * self.sa[2];
                    let base_b = i0 * self.sb[0] + i1 * self.sb[1] + i2 * self.sb[2];
                    for i3 in 0..o[3] {
                        f(idx, base_a + i3 * self.sa[3], base_b + i3 * self.sb[3]);
                        idx += 1;
                    }
                }
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameter nodes in first-use order.
    pub fn param_nodes(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.param_order.iter().copied()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Input tensor; gradients are tracked only when `requires_grad`.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.input(value, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let p = store.get(id);
        let n = self.push(p.value.clone(), Op::Param, p.trainable);
        self.params.insert(id, n);
        self.param_order.push((id, n));
        n
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} vs weight {:?}", self.value(x).shape(), self.value(w).shape()),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {cout} outputs", self.value(b).shape())));
            }
        }
        let geom = ConvGeom::new(cin, h, wd, kh, kw, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {kh}x{kw} pad {pad} on {h}x{wd}")))?;
        let (k, p) = (geom.rows(), geom.cols());
        let mut out = vec![T::zero(); n * cout * p];
        let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { k * p }];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            let img = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
            let dst = &mut out[s * cout * p..(s + 1) * cout * p];
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (o, row) in dst.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v = bv[o]);
                }
            }
            if geom.is_pointwise() {
                kernels::gemm_nn(cout, k, p, wv, img, dst);
            } else {
                kernels::im2col(&geom, img, &mut cols);
                kernels::gemm_nn(cout, k, p, wv, &cols, dst);
            }
        }
        let value = Tensor::from_vec(&[n, cout, geom.oh, geom.ow], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, ng))
    }

    /// Batch normalization over `N,H,W` per channel. In training mode the
    /// batch statistics are used and queued as a running-stat update.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        store: &ParamStore<T>,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        mode: Mode,
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if store.value(gamma).len() != c {
            return Err(Error::shape("batch_norm", format!("{c} channels vs gamma {:?}", store.value(gamma).shape())));
        }
        let g = self.param(store, gamma);
        let b = self.param(store, beta);
        let hw = h * w;
        let m = n * hw;
        let eps = T::lit(BN_EPS);
        let xv = self.value(x).data();
        let mut pending = None;
        let (mean, inv_std) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for s_i in 0..n {
                        s += xv[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    let mu = s / T::lit(m as f64);
                    let mut v = T::zero();
                    for s_i in 0..n {
                        for &e in &xv[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw] {
                            v += (e - mu) * (e - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = v / T::lit(m as f64);
                }
                let unbiased = if m > 1 {
                    var.iter().map(|&v| v * T::lit(m as f64 / (m - 1) as f64)).collect()
                } else {
                    var.clone()
                };
                pending = Some(BnUpdate {
                    running_mean,
                    running_var,
                    batch_mean: mean.clone(),
                    batch_var: unbiased,
                });
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv)
            }
            Mode::Eval => {
                let mean = store.value(running_mean).data().to_vec();
                let inv = store.value(running_var).data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv)
            }
        };
        let xv = self.value(x).data();
        let gv = self.value(g).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); xv.len()];
        for s_i in 0..n {
            for ch in 0..c {
                let off = (s_i * c + ch) * hw;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                for i in off..off + hw {
                    out[i] = ga * (xv[i] - mu) * is + be;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        self.bn_updates.extend(pending);
        let ng = self.ng(&[x, g, b]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma: g,
                beta: b,
                mean,
                inv_std,
                train: mode == Mode::Train,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| if e > T::zero() { e } else { T::zero() });
        let ng = self.ng(&[x]);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        let ng = self.ng(&[x]);
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| e.abs());
        let ng = self.ng(&[x]);
        self.push(v, Op::Abs(x), ng)
    }

    fn binary(&mut self, name: &'static str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (bc, shape) = Broadcast::new(name, self.value(a).shape(), self.value(b).shape())?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); shape.iter().product()];
        bc.for_each(|o, ia, ib| out[o] = f(av[ia], bv[ib]));
        Tensor::from_vec(&shape, out)
    }

    /// Elementwise sum; size-1 dimensions broadcast.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let v = self.value(x).map(|e| e * s);
        let ng = self.ng(&[x]);
        self.push(v, Op::Scale(x, s), ng)
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::lit(t.len() as f64));
        let ng = self.ng(&[x]);
        self.push(v, Op::MeanAll(x), ng)
    }

    /// Weighted sum of scalar nodes; zero weights are dropped from the tape.
    pub fn weighted_sum(&mut self, terms: &[(T, NodeId)]) -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for &(w, id) in terms {
            if w == T::zero() {
                continue;
            }
            let s = if w == T::one() { id } else { self.scale(id, w) };
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s)?,
            });
        }
        Ok(acc.unwrap_or_else(|| self.constant(Tensor::scalar(T::zero()))))
    }

    pub fn adaptive_avg_pool(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(Error::shape("adaptive_avg_pool", format!("{h}x{w} -> {oh}x{ow}")));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            let src = &xv[nc * h * w..(nc + 1) * h * w];
            for i in 0..oh {
                let (y0, y1) = kernels::adaptive_bin(i, h, oh);
                for j in 0..ow {
                    let (x0, x1) = kernels::adaptive_bin(j, w, ow);
                    let mut s = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            s += src[y * w + xx];
                        }
                    }
                    out[(nc * oh + i) * ow + j] = s / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::AdaptiveAvgPool(x), ng))
    }

    /// Bilinear resize with half-pixel centers (no corner alignment).
    pub fn upsample_bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if oh == 0 || ow == 0 {
            return Err(Error::shape("upsample_bilinear", format!("target {oh}x{ow}")));
        }
        let ty = LinearTaps::new(h, oh);
        let tx = LinearTaps::new(w, ow);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            let src = &xv[nc * h * w..(nc + 1) * h * w];
            for i in 0..oh {
                let fy = T::lit(ty.frac[i]);
                let (r0, r1) = (ty.lo[i] * w, ty.hi[i] * w);
                for j in 0..ow {
                    let fx = T::lit(tx.frac[j]);
                    let (c0, c1) = (tx.lo[j], tx.hi[j]);
                    let top = src[r0 + c0] * (T::one() - fx) + src[r0 + c1] * fx;
                    let bot = src[r1 + c0] * (T::one() - fx) + src[r1 + c1] * fx;
                    out[(nc * oh + i) * ow + j] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Upsample(x), ng))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.value(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &id in inputs {
                let t = self.value(id);
                let mid = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * mid * inner..(o + 1) * mid * inner]);
            }
        }
        let value = Tensor::from_vec(&shape, out)?;
        let ng = self.ng(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("narrow", format!("{shape:?} axis {axis} [{start}, {})", start + len)));
        }
        let (outer, mid, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * mid + start) * inner..(o * mid + start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let value = Tensor::from_vec(&new_shape, out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Narrow { x, axis, start }, ng))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::from_vec(&[m, n], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Matmul(a, b), ng))
    }

    /// Unit-normalizes along axis 1 (channels of `N×C×H×W`, columns of `R×D`).
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("l2_normalize", format!("{shape:?}")));
        }
        let (outer, mid, inner) = split_axis(&shape, 1);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut norms = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = T::zero();
                for c in 0..mid {
                    let e = xv[(o * mid + c) * inner + i];
                    s += e * e;
                }
                let nrm = s.sqrt().max(T::lit(NORM_EPS));
                norms[o * inner + i] = nrm;
                for c in 0..mid {
                    let idx = (o * mid + c) * inner + i;
                    out[idx] = xv[idx] / nrm;
                }
            }
        }
        let value = Tensor::from_vec(&shape, out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::L2Normalize { x, norms }, ng))
    }

    /// Mean or max across channels: `N×C×H×W → N×1×H×W`.
    pub fn channel_reduce(&mut self, x: NodeId, kind: Reduce) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * hw];
        let mut argmax = Vec::new();
        if kind == Reduce::Max {
            argmax = vec![0; n * hw];
        }
        for s in 0..n {
            for p in 0..hw {
                match kind {
                    Reduce::Mean => {
                        let mut acc = T::zero();
                        for ch in 0..c {
                            acc += xv[(s * c + ch) * hw + p];
                        }
                        out[s * hw + p] = acc / T::lit(c as f64);
                    }
                    Reduce::Max => {
                        let mut best = 0;
                        for ch in 1..c {
                            if xv[(s * c + ch) * hw + p] > xv[(s * c + best) * hw + p] {
                                best = ch;
                            }
                        }
                        argmax[s * hw + p] = best;
                        out[s * hw + p] = xv[(s * c + best) * hw + p];
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, 1, h, w], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::ChannelReduce { x, kind, argmax }, ng))
    }

    /// Global mean or max over the spatial axes: `N×C×H×W → N×C×1×1`.
    pub fn spatial_reduce(&mut self, x: NodeId, kind: Reduce) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        let mut argmax = Vec::new();
        for (nc, o) in out.iter_mut().enumerate() {
            let src = &xv[nc * hw..(nc + 1) * hw];
            match kind {
                Reduce::Mean => *o = src.iter().copied().sum::<T>() / T::lit(hw as f64),
                Reduce::Max => {
                    let mut best = 0;
                    for (i, &v) in src.iter().enumerate() {
                        if v > src[best] {
                            best = i;
                        }
                    }
                    argmax.push(best);
                    *o = src[best];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, 1, 1], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::SpatialReduce { x, kind, argmax }, ng))
    }

    /// Mean softmax cross-entropy of `N×K×H×W` logits against per-pixel class
    /// ids laid out as `n·H·W + y·W + x`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (n, k, h, w) = self.value(logits).dims4()?;
        let hw = h * w;
        if targets.len() != n * hw {
            return Err(Error::shape("softmax_cross_entropy", format!("{} targets for {n}x{h}x{w}", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Validation(format!("class id {bad} >= num_classes {k}")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for s in 0..n {
            for p in 0..hw {
                let idx = |c: usize| (s * k + c) * hw + p;
                let m = (0..k).map(|c| lv[idx(c)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for c in 0..k {
                    let e = (lv[idx(c)] - m).exp();
                    probs[idx(c)] = e;
                    z += e;
                }
                for c in 0..k {
                    probs[idx(c)] /= z;
                }
                let t = targets[s * hw + p];
                loss += z.ln() + m - lv[idx(t)];
            }
        }
        let value = Tensor::scalar(loss / T::lit((n * hw) as f64));
        let ng = self.ng(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy on logits, `max(z,0) − z·y + ln(1+e^{−|z|})`.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[T]) -> Result<NodeId> {
        let lv = self.value(logits).data();
        if targets.len() != lv.len() {
            return Err(Error::shape("bce_with_logits", format!("{} targets for {} logits", targets.len(), lv.len())));
        }
        let mut loss = T::zero();
        for (&z, &y) in lv.iter().zip(targets) {
            loss += z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar(loss / T::lit(lv.len() as f64));
        let ng = self.ng(&[logits]);
        Ok(self.push(
            value,
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// `N×D×H×W → (N·H·W)×D`, row index `(n·H + y)·W + x`.
    pub fn to_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, d, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * hw * d];
        for s in 0..n {
            for c in 0..d {
                for p in 0..hw {
                    out[(s * hw + p) * d + c] = xv[(s * d + c) * hw + p];
                }
            }
        }
        let value = Tensor::from_vec(&[n * hw, d], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::ToRows(x), ng))
    }

    /// Row means of each group of a `R×D` matrix, giving `G×D`.
    pub fn segment_mean(&mut self, x: NodeId, groups: &[Vec<usize>]) -> Result<NodeId> {
        let (r, d) = self.value(x).dims2()?;
        if groups.is_empty() || groups.iter().any(|g| g.is_empty() || g.iter().any(|&i| i >= r)) {
            return Err(Error::shape("segment_mean", format!("invalid groups over {r} rows")));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); groups.len() * d];
        for (gi, g) in groups.iter().enumerate() {
            let inv = T::one() / T::lit(g.len() as f64);
            let dst = &mut out[gi * d..(gi + 1) * d];
            for &row in g {
                for (o, &v) in dst.iter_mut().zip(&xv[row * d..(row + 1) * d]) {
                    *o += v * inv;
                }
            }
        }
        let value = Tensor::from_vec(&[groups.len(), d], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(
            value,
            Op::SegmentMean {
                x,
                groups: groups.to_vec(),
            },
            ng,
        ))
    }

    /// Mean InfoNCE over `terms`, each scored by dot products of rows of the
    /// `R×D` matrix `x` divided by `tau`. Zero when `terms` is empty.
    pub fn contrastive(&mut self, x: NodeId, terms: Vec<ContrastTerm>, tau: T) -> Result<NodeId> {
        let (r, d) = self.value(x).dims2()?;
        if tau <= T::zero() {
            return Err(Error::Validation("temperature must be positive".into()));
        }
        for t in &terms {
            if t.anchor >= r || t.positive >= r || t.negatives.iter().any(|&j| j >= r) {
                return Err(Error::shape("contrastive", format!("row index out of range for {r} rows")));
            }
        }
        let xv = self.value(x).data();
        let row = |i: usize| &xv[i * d..(i + 1) * d];
        let mut total = T::zero();
        let mut logits = Vec::new();
        for t in &terms {
            logits.clear();
            let a = row(t.anchor);
            logits.push(dot(a, row(t.positive)) / tau);
            logits.extend(t.negatives.iter().map(|&j| dot(a, row(j)) / tau));
            total += kernels::neg_log_softmax_first(&logits);
        }
        let v = if terms.is_empty() {
            T::zero()
        } else {
            total / T::lit(terms.len() as f64)
        };
        let ng = self.ng(&[x]) && !terms.is_empty();
        Ok(self.push(Tensor::scalar(v), Op::Contrastive { x, terms, tau }, ng))
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.wants(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn zeros_like(&self, id: NodeId) -> Tensor<T> {
        Tensor::zeros(self.value(id).shape())
    }

    fn backprop(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b, geom } => {
                let (n, cin, h, wd) = self.value(*x).dims4()?;
                let cout = self.value(*w).shape()[0];
                let (k, p) = (geom.rows(), geom.cols());
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dw = vec![T::zero(); cout * k];
                let mut dx = vec![T::zero(); if self.wants(*x) { xv.len() } else { 0 }];
                let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { k * p }];
                let mut dcols = vec![T::zero(); k * p];
                let img_len = cin * h * wd;
                for s in 0..n {
                    let go = &gd[s * cout * p..(s + 1) * cout * p];
                    let img = &xv[s * img_len..(s + 1) * img_len];
                    if self.wants(*w) {
                        if geom.is_pointwise() {
                            kernels::gemm_nt(cout, p, k, go, img, &mut dw);
                        } else {
                            kernels::im2col(geom, img, &mut cols);
                            kernels::gemm_nt(cout, p, k, go, &cols, &mut dw);
                        }
                    }
                    if self.wants(*x) {
                        let dimg = &mut dx[s * img_len..(s + 1) * img_len];
                        if geom.is_pointwise() {
                            kernels::gemm_tn(k, cout, p, wv, go, dimg);
                        } else {
                            dcols.iter_mut().for_each(|v| *v = T::zero());
                            kernels::gemm_tn(k, cout, p, wv, go, &mut dcols);
                            kernels::col2im(geom, &dcols, dimg);
                        }
                    }
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); cout];
                    for s in 0..n {
                        for (o, dbo) in db.iter_mut().enumerate() {
                            *dbo += gd[(s * cout + o) * p..(s * cout + o + 1) * p].iter().copied().sum::<T>();
                        }
                    }
                    self.accum(grads, *b, Tensor::from_vec(&[cout], db)?);
                }
                self.accum(grads, *w, Tensor::from_vec(self.value(*w).shape(), dw)?);
                if self.wants(*x) {
                    self.accum(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx)?);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let m = T::lit((n * hw) as f64);
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xv.len()];
                for ch in 0..c {
                    let (mu, is) = (mean[ch], inv_std[ch]);
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xhat = T::zero();
                    for s in 0..n {
                        let off = (s * c + ch) * hw;
                        for i in off..off + hw {
                            let xhat = (xv[i] - mu) * is;
                            sum_dy += gd[i];
                            sum_dy_xhat += gd[i] * xhat;
                        }
                    }
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    let ga = gv[ch];
                    for s in 0..n {
                        let off = (s * c + ch) * hw;
                        for i in off..off + hw {
                            dx[i] = if *train {
                                let xhat = (xv[i] - mu) * is;
                                ga * is / m * (m * gd[i] - sum_dy - xhat * sum_dy_xhat)
                            } else {
                                ga * is * gd[i]
                            };
                        }
                    }
                }
                self.accum(grads, *gamma, Tensor::from_vec(&[c], dgamma)?);
                self.accum(grads, *beta, Tensor::from_vec(&[c], dbeta)?);
                self.accum(grads, *x, Tensor::from_vec(&[n, c, h, w], dx)?);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accum(grads, *x, Tensor::from_vec(out.shape(), d)?);
            }
            Op::Sigmoid(x) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                self.accum(grads, *x, Tensor::from_vec(out.shape(), d)?);
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accum(grads, *x, Tensor::from_vec(out.shape(), d)?);
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (bc, _) = Broadcast::new("backward", self.value(*a).shape(), self.value(*b).shape())?;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut da = self.zeros_like(*a);
                let mut db = self.zeros_like(*b);
                {
                    let dad = da.data_mut();
                    let dbd = db.data_mut();
                    match op {
                        Op::Add(..) => bc.for_each(|o, ia, ib| {
                            dad[ia] += gd[o];
                            dbd[ib] += gd[o];
                        }),
                        Op::Sub(..) => bc.for_each(|o, ia, ib| {
                            dad[ia] += gd[o];
                            dbd[ib] -= gd[o];
                        }),
                        _ => bc.for_each(|o, ia, ib| {
                            dad[ia] += gd[o] * bv[ib];
                            dbd[ib] += gd[o] * av[ia];
                        }),
                    }
                }
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::Scale(x, s) => self.accum(grads, *x, g.map(|v| v * *s)),
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                let v = gd[0] / T::lit(n as f64);
                self.accum(grads, *x, Tensor::full(self.value(*x).shape(), v));
            }
            Op::AdaptiveAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (_, _, oh, ow) = out.dims4()?;
                let mut dx = vec![T::zero(); n * c * h * w];
                for nc in 0..n * c {
                    let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
                    for i in 0..oh {
                        let (y0, y1) = kernels::adaptive_bin(i, h, oh);
                        for j in 0..ow {
                            let (x0, x1) = kernels::adaptive_bin(j, w, ow);
                            let v = gd[(nc * oh + i) * ow + j] / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    dst[y * w + xx] += v;
                                }
                            }
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(&[n, c, h, w], dx)?);
            }
            Op::Upsample(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (_, _, oh, ow) = out.dims4()?;
                let ty = LinearTaps::new(h, oh);
                let tx = LinearTaps::new(w, ow);
                let mut dx = vec![T::zero(); n * c * h * w];
                for nc in 0..n * c {
                    let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
                    for i in 0..oh {
                        let fy = T::lit(ty.frac[i]);
                        let (r0, r1) = (ty.lo[i] * w, ty.hi[i] * w);
                        for j in 0..ow {
                            let fx = T::lit(tx.frac[j]);
                            let (c0, c1) = (tx.lo[j], tx.hi[j]);
                            let v = gd[(nc * oh + i) * ow + j];
                            let top = v * (T::one() - fy);
                            let bot = v * fy;
                            dst[r0 + c0] += top * (T::one() - fx);
                            dst[r0 + c1] += top * fx;
                            dst[r1 + c0] += bot * (T::one() - fx);
                            dst[r1 + c1] += bot * fx;
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(&[n, c, h, w], dx)?);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &id in inputs {
                    let shape = self.value(id).shape().to_vec();
                    let mid = shape[*axis];
                    if self.wants(id) {
                        let mut d = Vec::with_capacity(outer * mid * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[s..s + mid * inner]);
                        }
                        self.accum(grads, id, Tensor::from_vec(&shape, d)?);
                    }
                    offset += mid;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.value(*x).shape().to_vec();
                let (outer, mid, inner) = split_axis(&shape, *axis);
                let len = out.shape()[*axis];
                let mut d = vec![T::zero(); shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accum(grads, *x, Tensor::from_vec(&shape, d)?);
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_nt(m, n, k, gd, self.value(*b).data(), &mut da);
                    self.accum(grads, *a, Tensor::from_vec(&[m, k], da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm_tn(k, m, n, self.value(*a).data(), gd, &mut db);
                    self.accum(grads, *b, Tensor::from_vec(&[k, n], db)?);
                }
            }
            Op::L2Normalize { x, norms } => {
                let shape = out.shape();
                let (outer, mid, inner) = split_axis(shape, 1);
                let yv = out.data();
                let mut d = vec![T::zero(); yv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut yg = T::zero();
                        for c in 0..mid {
                            let idx = (o * mid + c) * inner + i;
                            yg += yv[idx] * gd[idx];
                        }
                        let nrm = norms[o * inner + i];
                        for c in 0..mid {
                            let idx = (o * mid + c) * inner + i;
                            d[idx] = (gd[idx] - yv[idx] * yg) / nrm;
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(shape, d)?);
            }
            Op::ChannelReduce { x, kind, argmax } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let mut d = vec![T::zero(); n * c * hw];
                for s in 0..n {
                    for p in 0..hw {
                        let gv = gd[s * hw + p];
                        match kind {
                            Reduce::Mean => {
                                let v = gv / T::lit(c as f64);
                                for ch in 0..c {
                                    d[(s * c + ch) * hw + p] += v;
                                }
                            }
                            Reduce::Max => d[(s * c + argmax[s * hw + p]) * hw + p] += gv,
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(&[n, c, h, w], d)?);
            }
            Op::SpatialReduce { x, kind, argmax } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let mut d = vec![T::zero(); n * c * hw];
                for nc in 0..n * c {
                    match kind {
                        Reduce::Mean => {
                            let v = gd[nc] / T::lit(hw as f64);
                            d[nc * hw..(nc + 1) * hw].iter_mut().for_each(|e| *e = v);
                        }
                        Reduce::Max => d[nc * hw + argmax[nc]] = gd[nc],
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(&[n, c, h, w], d)?);
            }
            Op::SoftmaxCe { logits, probs, targets } => {
                let (n, k, h, w) = self.value(*logits).dims4()?;
                let hw = h * w;
                let scale = gd[0] / T::lit((n * hw) as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for s in 0..n {
                    for p in 0..hw {
                        d[(s * k + targets[s * hw + p]) * hw + p] -= scale;
                    }
                }
                self.accum(grads, *logits, Tensor::from_vec(&[n, k, h, w], d)?);
            }
            Op::BceLogits { logits, targets } => {
                let lv = self.value(*logits);
                let scale = gd[0] / T::lit(lv.len() as f64);
                let d = lv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                    .collect();
                self.accum(grads, *logits, Tensor::from_vec(lv.shape(), d)?);
            }
            Op::ToRows(x) => {
                let (n, d, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let mut dx = vec![T::zero(); n * d * hw];
                for s in 0..n {
                    for c in 0..d {
                        for p in 0..hw {
                            dx[(s * d + c) * hw + p] = gd[(s * hw + p) * d + c];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(&[n, d, h, w], dx)?);
            }
            Op::SegmentMean { x, groups } => {
                let (r, d) = self.value(*x).dims2()?;
                let mut dx = vec![T::zero(); r * d];
                for (gi, grp) in groups.iter().enumerate() {
                    let inv = T::one() / T::lit(grp.len() as f64);
                    let src = &gd[gi * d..(gi + 1) * d];
                    for &row in grp {
                        for (o, &v) in dx[row * d..(row + 1) * d].iter_mut().zip(src) {
                            *o += v * inv;
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(&[r, d], dx)?);
            }
            Op::Contrastive { x, terms, tau } => {
                let (r, d) = self.value(*x).dims2()?;
                let xv = self.value(*x).data();
                let row = |i: usize| &xv[i * d..(i + 1) * d];
                let mut dx = vec![T::zero(); r * d];
                let weight = gd[0] / T::lit(terms.len() as f64);
                let mut logits = Vec::new();
                let mut others = Vec::new();
                for t in terms {
                    let a = row(t.anchor);
                    others.clear();
                    others.push(t.positive);
                    others.extend_from_slice(&t.negatives);
                    logits.clear();
                    logits.extend(others.iter().map(|&j| dot(a, row(j)) / *tau));
                    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
                    let z: T = logits.iter().map(|&l| (l - m).exp()).sum();
                    for (slot, (&j, &l)) in others.iter().zip(&logits).enumerate() {
                        let p = (l - m).exp() / z;
                        let coef = if slot == 0 { p - T::one() } else { p } * weight / *tau;
                        if coef == T::zero() {
                            continue;
                        }
                        let vj = row(j);
                        for c in 0..d {
                            dx[t.anchor * d + c] += coef * vj[c];
                            dx[j * d + c] += coef * a[c];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(&[r, d], dx)?);
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}
