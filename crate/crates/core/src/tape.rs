//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations append nodes in
//! topological order; [`Tape::backward`] walks the records once in reverse and
//! accumulates adjoints into per-node gradient buffers.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{
    broadcast_shape, broadcast_strides, for_each_broadcast2, strides, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    MatMul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId, f64),
    Exp(TensorId),
    Log(TensorId),
    Sqrt(TensorId),
    Gelu(TensorId),
    Softplus(TensorId),
    Softmax { x: TensorId, axis: usize },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Conv2dSame { x: TensorId, k: TensorId },
    RopeRotate { x: TensorId, cos: TensorId, sin: TensorId },
    WhereMask { mask: TensorId, a: TensorId, b: TensorId },
    Permute { x: TensorId, axes: Vec<usize> },
    Reshape(TensorId),
    SumAxis { x: TensorId, axis: usize },
    SumAll(TensorId),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Element count beyond which elementwise kernels fan out over the pool.
const PAR_ELEMS: usize = 1 << 16;

/// True when `shape` (ignoring leading 1s) equals the trailing extents of
/// `out`, i.e. broadcasting is a plain cyclic repeat.
fn is_suffix(shape: &[usize], out: &[usize]) -> bool {
    let trimmed: Vec<usize> = shape.iter().copied().skip_while(|d| *d == 1).collect();
    trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..]
}

/// Exact Gaussian-CDF GELU: x·Φ(x).
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// d/dx gelu(x) = Φ(x) + x·φ(x)
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

/// log(1+eˣ), linear for large x to avoid overflow.
pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> TensorId {
        self.nodes.push(Node { op, shape, data, requires_grad });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Bind a value tensor as a differentiable input (honors `requires_grad`).
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    /// Bind a value tensor as a non-differentiable input.
    pub fn constant(&mut self, t: &Tensor) -> TensorId {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("constant shape {:?} vs {} elems", shape, data.len())));
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), data, false))
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.push(Op::Leaf, vec![], vec![v], false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Detached copy of a node's value.
    pub fn value(&self, id: TensorId) -> Tensor {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            data: self.nodes[id.0].data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar_value(&self, id: TensorId) -> Result<f64> {
        let n = &self.nodes[id.0];
        if n.data.len() != 1 {
            return Err(Error::Usage(format!("node is not scalar: shape {:?}", n.shape)));
        }
        Ok(n.data[0])
    }

    /// Gradient buffer populated by [`Tape::backward`].
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    // ── elementwise / broadcast binary ops ──────────────────────────────

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64 + Sync,
        op: Op,
    ) -> Result<TensorId> {
        let out_shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let asr = broadcast_strides(self.shape(a), &out_shape);
        let bsr = broadcast_strides(self.shape(b), &out_shape);
        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0; numel];
        {
            let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
            if self.nodes[a.0].shape == self.nodes[b.0].shape {
                if numel >= PAR_ELEMS {
                    use rayon::prelude::*;
                    data.par_chunks_mut(PAR_ELEMS / 4).enumerate().for_each(|(ci, chunk)| {
                        let base = ci * (PAR_ELEMS / 4);
                        for (j, o) in chunk.iter_mut().enumerate() {
                            *o = f(ad[base + j], bd[base + j]);
                        }
                    });
                } else {
                    for ((o, &x), &y) in data.iter_mut().zip(ad.iter()).zip(bd.iter()) {
                        *o = f(x, y);
                    }
                }
            } else if is_suffix(&self.nodes[b.0].shape, &out_shape)
                && self.nodes[a.0].shape == out_shape
            {
                // cycle b over contiguous chunks of a
                let blen = bd.len().max(1);
                for (ochunk, achunk) in data.chunks_mut(blen).zip(ad.chunks(blen)) {
                    for ((o, &x), &y) in ochunk.iter_mut().zip(achunk).zip(bd.iter()) {
                        *o = f(x, y);
                    }
                }
            } else {
                for_each_broadcast2(&out_shape, &asr, &bsr, |o, ai, bi| {
                    data[o] = f(ad[ai], bd[bi]);
                });
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, out_shape, data, rg))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let data = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::Scale(x, c), shape, data, rg)
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let data = self.nodes[x.0].data.iter().map(|v| v + c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::AddScalar(x, c), shape, data, rg)
    }

    fn unary(&mut self, x: TensorId, f: impl Fn(f64) -> f64 + Sync, op: Op) -> TensorId {
        let xd = &self.nodes[x.0].data;
        let data: Vec<f64> = if xd.len() >= PAR_ELEMS {
            use rayon::prelude::*;
            xd.par_iter().with_min_len(PAR_ELEMS / 4).map(|&v| f(v)).collect()
        } else {
            xd.iter().map(|&v| f(v)).collect()
        };
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(op, shape, data, rg)
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        if let Some(v) = self.nodes[x.0].data.iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain(format!("log of nonpositive value {}", v)));
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn sqrt(&mut self, x: TensorId) -> Result<TensorId> {
        if let Some(v) = self.nodes[x.0].data.iter().find(|v| **v < 0.0) {
            return Err(Error::Domain(format!("sqrt of negative value {}", v)));
        }
        Ok(self.unary(x, f64::sqrt, Op::Sqrt(x)))
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, gelu_scalar, Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: TensorId) -> TensorId {
        self.unary(x, softplus_scalar, Op::Softplus(x))
    }

    // ── matmul ──────────────────────────────────────────────────────────

    /// Per-batch (a_off, b_off) pairs for broadcast batched matmul.
    fn batch_offsets(
        a_shape: &[usize],
        b_shape: &[usize],
    ) -> Result<(Vec<usize>, Vec<(usize, usize)>, usize, usize, usize)> {
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(Error::Shape(format!(
                "matmul needs rank >= 2, got {:?} x {:?}",
                a_shape, b_shape
            )));
        }
        let (m, ka) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (kb, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner extents disagree: {:?} x {:?}",
                a_shape, b_shape
            )));
        }
        let abatch = &a_shape[..a_shape.len() - 2];
        let bbatch = &b_shape[..b_shape.len() - 2];
        let batch = broadcast_shape(abatch, bbatch)?;
        let asr = broadcast_strides(abatch, &batch);
        let bsr = broadcast_strides(bbatch, &batch);
        let mut offsets = Vec::with_capacity(batch.iter().product::<usize>().max(1));
        for_each_broadcast2(&batch, &asr, &bsr, |_, ai, bi| {
            offsets.push((ai * m * ka, bi * kb * n));
        });
        Ok((batch, offsets, m, ka, n))
    }

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]` with
    /// broadcastable batch extents.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (batch, offsets, m, k, n) = Self::batch_offsets(self.shape(a), self.shape(b))?;
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![0.0; out_shape.iter().product()];
        kernels::matmul_batched(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            &mut data,
            &offsets,
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), out_shape, data, rg))
    }

    // ── structured ops ──────────────────────────────────────────────────

    /// Numerically stabilized softmax along `axis`. Lanes that are entirely
    /// `-inf` are a caller bug and raise a numeric fault.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Usage(format!("softmax axis {} out of range for {:?}", axis, shape)));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0; xd.len()];
        if inner == 1 && xd.len() >= PAR_ELEMS {
            use rayon::prelude::*;
            let bad = std::sync::atomic::AtomicBool::new(false);
            data.par_chunks_mut(len).zip(xd.par_chunks(len)).for_each(|(out, lane)| {
                let mx = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    bad.store(true, std::sync::atomic::Ordering::Relaxed);
                    return;
                }
                let mut sum = 0.0;
                for (o, &v) in out.iter_mut().zip(lane) {
                    let e = (v - mx).exp();
                    *o = e;
                    sum += e;
                }
                for o in out.iter_mut() {
                    *o /= sum;
                }
            });
            if bad.load(std::sync::atomic::Ordering::Relaxed) {
                return Err(Error::Numeric("softmax over a fully masked (all -inf) lane".into()));
            }
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for l in 0..len {
                        mx = mx.max(xd[base + l * inner]);
                    }
                    if mx == f64::NEG_INFINITY {
                        return Err(Error::Numeric(
                            "softmax over a fully masked (all -inf) lane".into(),
                        ));
                    }
                    let mut sum = 0.0;
                    for l in 0..len {
                        let e = (xd[base + l * inner] - mx).exp();
                        data[base + l * inner] = e;
                        sum += e;
                    }
                    for l in 0..len {
                        data[base + l * inner] /= sum;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::Softmax { x, axis }, shape, data, rg))
    }

    /// Layer normalization over the last axis: zero mean, unit variance
    /// (population, epsilon-guarded), then affine `gamma`/`beta`.
    pub fn layernorm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| Error::Usage("layernorm on rank-0 tensor".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layernorm affine params must be [{}], got {:?} / {:?}",
                d,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut data = vec![0.0; xd.len()];
        let lane_body = |lane: &[f64], out: &mut [f64]| {
            let mean = lane.iter().sum::<f64>() / d as f64;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[j] = (lane[j] - mean) * inv * gd[j] + bd[j];
            }
        };
        if xd.len() >= PAR_ELEMS {
            use rayon::prelude::*;
            data.par_chunks_mut(d).zip(xd.par_chunks(d)).for_each(|(out, lane)| lane_body(lane, out));
        } else {
            for (lane, out) in xd.chunks(d).zip(data.chunks_mut(d)) {
                lane_body(lane, out);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, shape, data, rg))
    }

    /// Zero-padded "same" cross-correlation over the last two axes.
    /// `k` is either one `[k1,k2]` kernel (shared across the batch) or
    /// `[.., k1, k2]` with leading extents equal to `x`'s.
    pub fn conv2d_same(&mut self, x: TensorId, k: TensorId) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        let ks = self.nodes[k.0].shape.clone();
        if xs.len() < 2 || ks.len() < 2 {
            return Err(Error::Shape("conv2d_same needs rank >= 2 inputs".into()));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let (k1, k2) = (ks[ks.len() - 2], ks[ks.len() - 1]);
        if k1 % 2 == 0 || k2 % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d_same kernel extents must be odd, got {}x{}",
                k1, k2
            )));
        }
        let shared = ks.len() == 2;
        if !shared && ks[..ks.len() - 2] != xs[..xs.len() - 2] {
            return Err(Error::Shape(format!(
                "per-batch kernels {:?} must match input batch dims {:?}",
                ks, xs
            )));
        }
        let nb: usize = xs[..xs.len() - 2].iter().product();
        let mut data = vec![0.0; self.nodes[x.0].data.len()];
        kernels::conv2d_batched(
            &self.nodes[x.0].data,
            &self.nodes[k.0].data,
            &mut data,
            nb.max(1),
            h,
            w,
            k1,
            k2,
            shared,
        );
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(Op::Conv2dSame { x, k }, xs, data, rg))
    }

    /// Rotate interleaved pairs of the last axis by per-pair angles given as
    /// `cos`/`sin` tables broadcastable to `[.., last/2]`. Tables are
    /// non-differentiable inputs.
    pub fn rope_rotate(&mut self, x: TensorId, cos: TensorId, sin: TensorId) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        let d = *xs.last().ok_or_else(|| Error::Usage("rope_rotate on rank-0 tensor".into()))?;
        if d % 2 != 0 {
            return Err(Error::Config(format!("rope_rotate needs even last extent, got {}", d)));
        }
        let mut pair_shape = xs.clone();
        *pair_shape.last_mut().unwrap() = d / 2;
        if self.shape(cos) != self.shape(sin) {
            return Err(Error::Shape("cos/sin tables must share a shape".into()));
        }
        let csr = broadcast_strides(self.shape(cos), &pair_shape);
        // validate broadcastability
        broadcast_shape(self.shape(cos), &pair_shape)?;
        let zeros = vec![0usize; pair_shape.len()];
        let xd = &self.nodes[x.0].data;
        let cd = &self.nodes[cos.0].data;
        let sd = &self.nodes[sin.0].data;
        let mut data = vec![0.0; xd.len()];
        for_each_broadcast2(&pair_shape, &csr, &zeros, |p, ci, _| {
            let (c, s) = (cd[ci], sd[ci]);
            let x0 = xd[2 * p];
            let x1 = xd[2 * p + 1];
            data[2 * p] = c * x0 - s * x1;
            data[2 * p + 1] = s * x0 + c * x1;
        });
        let rg = self.rg(x);
        Ok(self.push(Op::RopeRotate { x, cos, sin }, xs, data, rg))
    }

    /// Elementwise select: `mask != 0 ? a : b`. The mask never receives
    /// gradient; `a` and `b` receive it on their selected positions only.
    pub fn where_mask(&mut self, mask: TensorId, a: TensorId, b: TensorId) -> Result<TensorId> {
        let s1 = broadcast_shape(self.shape(mask), self.shape(a))?;
        let out_shape = broadcast_shape(&s1, self.shape(b))?;
        let msr = broadcast_strides(self.shape(mask), &out_shape);
        let asr = broadcast_strides(self.shape(a), &out_shape);
        let bsr = broadcast_strides(self.shape(b), &out_shape);
        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0; numel];
        {
            let md = &self.nodes[mask.0].data;
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            if self.nodes[a.0].shape == out_shape
                && bd.len() == 1
                && is_suffix(&self.nodes[mask.0].shape, &out_shape)
            {
                let fill = bd[0];
                let mlen = md.len().max(1);
                for (ochunk, achunk) in data.chunks_mut(mlen).zip(ad.chunks(mlen)) {
                    for ((o, &x), &m) in ochunk.iter_mut().zip(achunk).zip(md.iter()) {
                        *o = if m != 0.0 { x } else { fill };
                    }
                }
            } else {
                for_each_broadcast2(&out_shape, &msr, &asr, |o, mi, ai| {
                    data[o] = if md[mi] != 0.0 { ad[ai] } else { f64::NAN };
                });
                // second pass fills the `else` branch (two-stride walker)
                for_each_broadcast2(&out_shape, &msr, &bsr, |o, mi, bi| {
                    if md[mi] == 0.0 {
                        data[o] = bd[bi];
                    }
                });
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::WhereMask { mask, a, b }, out_shape, data, rg))
    }

    /// `mask != 0 ? x : value`
    pub fn masked_fill(&mut self, x: TensorId, mask: TensorId, value: f64) -> Result<TensorId> {
        let v = self.scalar_const(value);
        self.where_mask(mask, x, v)
    }

    pub fn permute(&mut self, x: TensorId, axes: &[usize]) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if axes.len() != xs.len() {
            return Err(Error::Usage(format!("permute axes {:?} vs rank {}", axes, xs.len())));
        }
        let mut seen = vec![false; xs.len()];
        for &a in axes {
            if a >= xs.len() || seen[a] {
                return Err(Error::Usage(format!("invalid permutation {:?}", axes)));
            }
            seen[a] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let data = permute_data(&self.nodes[x.0].data, &xs, axes);
        let rg = self.rg(x);
        Ok(self.push(Op::Permute { x, axes: axes.to_vec() }, out_shape, data, rg))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, x: TensorId) -> Result<TensorId> {
        let nd = self.nodes[x.0].shape.len();
        if nd < 2 {
            return Err(Error::Usage("transpose_last2 needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {:?}",
                self.nodes[x.0].shape, shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), shape.to_vec(), data, rg))
    }

    /// Sum over one axis (axis removed from the shape).
    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if axis >= xs.len() {
            return Err(Error::Usage(format!("sum axis {} out of range for {:?}", axis, xs)));
        }
        let len = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let outer: usize = xs[..axis].iter().product();
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = o * len * inner + l * inner;
                let dst = o * inner;
                for i in 0..inner {
                    data[dst + i] += xd[src + i];
                }
            }
        }
        let mut out_shape = xs.clone();
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Op::SumAxis { x, axis }, out_shape, data, rg))
    }

    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let len = self.nodes[x.0].shape[axis] as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len))
    }

    /// Sum of all elements, producing a rank-0 scalar.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let total: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(x);
        self.push(Op::SumAll(x), vec![], vec![total], rg)
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].data.len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Visits each record exactly once in
    /// reverse topological order.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || self.grads[idx].is_none() {
                continue;
            }
            let dy = self.grads[idx].take().unwrap();
            self.step_backward(idx, &dy)?;
            self.grads[idx] = Some(dy);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: TensorId) -> &mut Vec<f64> {
        if self.grads[id.0].is_none() {
            self.grads[id.0] = Some(vec![0.0; self.nodes[id.0].data.len()]);
        }
        self.grads[id.0].as_mut().unwrap()
    }

    /// Accumulate `contrib` (shaped like the out node) into `input`'s grad,
    /// reducing over broadcast axes.
    fn accumulate_broadcast(&mut self, input: TensorId, out_shape: &[usize], contrib: &[f64]) {
        if !self.rg(input) {
            return;
        }
        let in_shape = self.nodes[input.0].shape.clone();
        let isr = broadcast_strides(&in_shape, out_shape);
        let zeros = vec![0usize; out_shape.len()];
        let g = self.ensure_grad(input);
        if in_shape[..] == out_shape[..] {
            for (gv, &c) in g.iter_mut().zip(contrib) {
                *gv += c;
            }
        } else {
            for_each_broadcast2(out_shape, &isr, &zeros, |o, ii, _| {
                g[ii] += contrib[o];
            });
        }
    }

    fn step_backward(&mut self, idx: usize, dy: &[f64]) -> Result<()> {
        let op = self.nodes[idx].op.clone();
        let out_shape = self.nodes[idx].shape.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_broadcast(a, &out_shape, dy);
                self.accumulate_broadcast(b, &out_shape, dy);
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(a, &out_shape, dy);
                let neg: Vec<f64> = dy.iter().map(|v| -v).collect();
                self.accumulate_broadcast(b, &out_shape, &neg);
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let bd = broadcast_gather(&self.nodes[b.0].data, self.shape(b), &out_shape);
                    let contrib: Vec<f64> = dy.iter().zip(&bd).map(|(d, v)| d * v).collect();
                    self.accumulate_broadcast(a, &out_shape, &contrib);
                }
                if self.rg(b) {
                    let ad = broadcast_gather(&self.nodes[a.0].data, self.shape(a), &out_shape);
                    let contrib: Vec<f64> = dy.iter().zip(&ad).map(|(d, v)| d * v).collect();
                    self.accumulate_broadcast(b, &out_shape, &contrib);
                }
            }
            Op::Div(a, b) => {
                let bd = broadcast_gather(&self.nodes[b.0].data, self.shape(b), &out_shape);
                if self.rg(a) {
                    let contrib: Vec<f64> = dy.iter().zip(&bd).map(|(d, v)| d / v).collect();
                    self.accumulate_broadcast(a, &out_shape, &contrib);
                }
                if self.rg(b) {
                    let yd = &self.nodes[idx].data;
                    let contrib: Vec<f64> =
                        dy.iter().zip(yd).zip(&bd).map(|((d, y), v)| -d * y / v).collect();
                    self.accumulate_broadcast(b, &out_shape, &contrib);
                }
            }
            Op::MatMul(a, b) => self.backward_matmul(a, b, dy)?,
            Op::Scale(x, c) => {
                let contrib: Vec<f64> = dy.iter().map(|v| v * c).collect();
                self.accumulate_broadcast(x, &out_shape, &contrib);
            }
            Op::AddScalar(x, c) => {
                debug_assert!(c.is_finite());
                self.accumulate_broadcast(x, &out_shape, dy);
            }
            Op::Exp(x) => {
                let contrib: Vec<f64> =
                    dy.iter().zip(&self.nodes[idx].data).map(|(d, y)| d * y).collect();
                self.accumulate_broadcast(x, &out_shape, &contrib);
            }
            Op::Log(x) => {
                let contrib: Vec<f64> =
                    dy.iter().zip(&self.nodes[x.0].data).map(|(d, v)| d / v).collect();
                self.accumulate_broadcast(x, &out_shape, &contrib);
            }
            Op::Sqrt(x) => {
                let contrib: Vec<f64> = dy
                    .iter()
                    .zip(&self.nodes[idx].data)
                    .map(|(d, y)| if *y == 0.0 { 0.0 } else { d * 0.5 / y })
                    .collect();
                self.accumulate_broadcast(x, &out_shape, &contrib);
            }
            Op::Gelu(x) => {
                let contrib: Vec<f64> = dy
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(d, v)| d * gelu_grad_scalar(*v))
                    .collect();
                self.accumulate_broadcast(x, &out_shape, &contrib);
            }
            Op::Softplus(x) => {
                let contrib: Vec<f64> = dy
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(d, v)| d * sigmoid_scalar(*v))
                    .collect();
                self.accumulate_broadcast(x, &out_shape, &contrib);
            }
            Op::Softmax { x, axis } => {
                if self.rg(x) {
                    let y = &self.nodes[idx].data;
                    let len = out_shape[axis];
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let outer: usize = out_shape[..axis].iter().product();
                    let mut contrib = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for l in 0..len {
                                let p = base + l * inner;
                                dot += dy[p] * y[p];
                            }
                            for l in 0..len {
                                let p = base + l * inner;
                                contrib[p] = y[p] * (dy[p] - dot);
                            }
                        }
                    }
                    self.accumulate_broadcast(x, &out_shape, &contrib);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                self.backward_layernorm(x, gamma, beta, eps, idx, dy);
            }
            Op::Conv2dSame { x, k } => self.backward_conv(x, k, idx, dy),
            Op::RopeRotate { x, cos, sin, .. } => {
                if self.rg(x) {
                    let d = *out_shape.last().unwrap();
                    let mut pair_shape = out_shape.clone();
                    *pair_shape.last_mut().unwrap() = d / 2;
                    let csr = broadcast_strides(self.shape(cos), &pair_shape);
                    let zeros = vec![0usize; pair_shape.len()];
                    let cd = &self.nodes[cos.0].data;
                    let sd = &self.nodes[sin.0].data;
                    let mut contrib = vec![0.0; dy.len()];
                    for_each_broadcast2(&pair_shape, &csr, &zeros, |p, ci, _| {
                        let (c, s) = (cd[ci], sd[ci]);
                        let d0 = dy[2 * p];
                        let d1 = dy[2 * p + 1];
                        contrib[2 * p] = c * d0 + s * d1;
                        contrib[2 * p + 1] = -s * d0 + c * d1;
                    });
                    self.accumulate_broadcast(x, &out_shape, &contrib);
                }
            }
            Op::WhereMask { mask, a, b } => {
                let msr = broadcast_strides(self.shape(mask), &out_shape);
                let zeros = vec![0usize; out_shape.len()];
                let md = self.nodes[mask.0].data.clone();
                if self.rg(a) {
                    let mut contrib = vec![0.0; dy.len()];
                    for_each_broadcast2(&out_shape, &msr, &zeros, |o, mi, _| {
                        if md[mi] != 0.0 {
                            contrib[o] = dy[o];
                        }
                    });
                    self.accumulate_broadcast(a, &out_shape, &contrib);
                }
                if self.rg(b) {
                    let mut contrib = vec![0.0; dy.len()];
                    for_each_broadcast2(&out_shape, &msr, &zeros, |o, mi, _| {
                        if md[mi] == 0.0 {
                            contrib[o] = dy[o];
                        }
                    });
                    self.accumulate_broadcast(b, &out_shape, &contrib);
                }
            }
            Op::Permute { x, axes } => {
                if self.rg(x) {
                    let mut inv = vec![0usize; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    let contrib = permute_data(dy, &out_shape, &inv);
                    let in_shape = self.nodes[x.0].shape.clone();
                    self.accumulate_broadcast(x, &in_shape, &contrib);
                }
            }
            Op::Reshape(x) => {
                if self.rg(x) {
                    let in_shape = self.nodes[x.0].shape.clone();
                    self.accumulate_broadcast(x, &in_shape, dy);
                }
            }
            Op::SumAxis { x, axis } => {
                if self.rg(x) {
                    let in_shape = self.nodes[x.0].shape.clone();
                    let len = in_shape[axis];
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let outer: usize = in_shape[..axis].iter().product();
                    let mut contrib = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = o * len * inner + l * inner;
                            let src = o * inner;
                            for i in 0..inner {
                                contrib[dst + i] = dy[src + i];
                            }
                        }
                    }
                    self.accumulate_broadcast(x, &in_shape, &contrib);
                }
            }
            Op::SumAll(x) => {
                if self.rg(x) {
                    let g = dy[0];
                    let grad = self.ensure_grad(x);
                    for v in grad.iter_mut() {
                        *v += g;
                    }
                }
            }
        }
        Ok(())
    }

    fn backward_matmul(&mut self, a: TensorId, b: TensorId, dy: &[f64]) -> Result<()> {
        let (_, offsets, m, k, n) = Self::batch_offsets(self.shape(a), self.shape(b))?;
        if self.rg(a) {
            let bdat = self.nodes[b.0].data.clone();
            let g = self.ensure_grad(a);
            for (bi, &(ao, bo)) in offsets.iter().enumerate() {
                kernels::matmul_2d_acc_abt(
                    &dy[bi * m * n..(bi + 1) * m * n],
                    &bdat[bo..bo + k * n],
                    &mut g[ao..ao + m * k],
                    m,
                    k,
                    n,
                );
            }
        }
        if self.rg(b) {
            let adat = self.nodes[a.0].data.clone();
            let g = self.ensure_grad(b);
            for (bi, &(ao, bo)) in offsets.iter().enumerate() {
                kernels::matmul_2d_acc_atb(
                    &adat[ao..ao + m * k],
                    &dy[bi * m * n..(bi + 1) * m * n],
                    &mut g[bo..bo + k * n],
                    m,
                    k,
                    n,
                );
            }
        }
        Ok(())
    }

    fn backward_layernorm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
        idx: usize,
        dy: &[f64],
    ) {
        let d = *self.nodes[idx].shape.last().unwrap();
        let xd = self.nodes[x.0].data.clone();
        let gd = self.nodes[gamma.0].data.clone();
        let lanes = xd.len() / d;
        // recompute lane statistics
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; lanes];
        for (li, lane) in xd.chunks(d).enumerate() {
            let mean = lane.iter().sum::<f64>() / d as f64;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[li] = inv;
            for j in 0..d {
                xhat[li * d + j] = (lane[j] - mean) * inv;
            }
        }
        if self.rg(gamma) {
            let g = self.ensure_grad(gamma);
            for li in 0..lanes {
                for j in 0..d {
                    g[j] += dy[li * d + j] * xhat[li * d + j];
                }
            }
        }
        if self.rg(beta) {
            let g = self.ensure_grad(beta);
            for li in 0..lanes {
                for j in 0..d {
                    g[j] += dy[li * d + j];
                }
            }
        }
        if self.rg(x) {
            let g = self.ensure_grad(x);
            for li in 0..lanes {
                let base = li * d;
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for j in 0..d {
                    let dxh = dy[base + j] * gd[j];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xhat[base + j];
                }
                mean_dxhat /= d as f64;
                mean_dxhat_xhat /= d as f64;
                for j in 0..d {
                    let dxh = dy[base + j] * gd[j];
                    g[base + j] +=
                        (dxh - mean_dxhat - xhat[base + j] * mean_dxhat_xhat) * inv_std[li];
                }
            }
        }
    }

    fn backward_conv(&mut self, x: TensorId, k: TensorId, idx: usize, dy: &[f64]) {
        let xs = self.nodes[x.0].shape.clone();
        let ks = self.nodes[k.0].shape.clone();
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let (k1, k2) = (ks[ks.len() - 2], ks[ks.len() - 1]);
        let shared = ks.len() == 2;
        let nb: usize = xs[..xs.len() - 2].iter().product::<usize>().max(1);
        let img = h * w;
        let _ = idx;
        if self.rg(x) {
            let kd = self.nodes[k.0].data.clone();
            let g = self.ensure_grad(x);
            kernels::conv2d_batched_dx(dy, &kd, g, nb, h, w, k1, k2, shared);
        }
        if self.rg(k) {
            let xd = self.nodes[x.0].data.clone();
            let g = self.ensure_grad(k);
            if shared {
                for bi in 0..nb {
                    kernels::conv2d_same_dk(
                        &xd[bi * img..(bi + 1) * img],
                        &dy[bi * img..(bi + 1) * img],
                        g,
                        h,
                        w,
                        k1,
                        k2,
                    );
                }
            } else {
                kernels::conv2d_batched_dk_per_batch(&xd, dy, g, nb, h, w, k1, k2);
            }
        }
    }
}

/// Materialize `data` (of `shape`) broadcast to `out_shape`.
fn broadcast_gather(data: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return data.to_vec();
    }
    if is_suffix(shape, out_shape) && !data.is_empty() {
        let numel: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(numel);
        while out.len() + data.len() <= numel {
            out.extend_from_slice(data);
        }
        debug_assert_eq!(out.len(), numel);
        return out;
    }
    let sr = broadcast_strides(shape, out_shape);
    let zeros = vec![0usize; out_shape.len()];
    let mut out = vec![0.0; out_shape.iter().product()];
    for_each_broadcast2(out_shape, &sr, &zeros, |o, i, _| {
        out[o] = data[i];
    });
    out
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let nd = shape.len();
    let numel = data.len();
    let mut out = vec![0.0; numel];
    if nd == 0 {
        out.copy_from_slice(data);
        return out;
    }
    // walk output in row-major order, tracking the source offset
    let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = data[src];
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += perm_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= perm_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(&t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_contraction() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(&t(&[2, 2], &[0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::uniform(&[3, 4], 1.0, &mut rng).param();
        let bmat = Tensor::uniform(&[4, 2], 1.0, &mut rng);
        let err = grad_check(
            |tape, x| {
                let b = tape.constant(&bmat);
                let y = tape.matmul(x, b)?;
                Ok(tape.sum_all(y))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "matmul grad err {err}");
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.data(y) {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let big = tape.leaf(&t(&[2], &[1000.0, 1000.0]));
        let yb = tape.softmax(big, 0).unwrap();
        assert_abs_diff_eq!(tape.data(yb)[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn softmax_closed_form_quarter() {
        // [0, ln 3] -> [1/4, 3/4]
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[0.0, 3.0f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        assert_abs_diff_eq!(tape.data(y)[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.data(y)[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn softmax_all_masked_lane_is_numeric_fault() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[f64::NEG_INFINITY, f64::NEG_INFINITY]));
        assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softplus_and_gelu_anchors() {
        assert_abs_diff_eq!(softplus_scalar(0.0), 2f64.ln(), epsilon = 1e-15);
        assert!((softplus_scalar(50.0) - 50.0).abs() < 1e-12);
        assert_eq!(gelu_scalar(0.0), 0.0);
    }

    #[test]
    fn log_domain_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, -1.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let k = tape.leaf(&t(&[1, 1], &[1.0]));
        let y = tape.conv2d_same(x, k).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn conv_box_kernel_on_constant_input() {
        // constant 7 with a 3x3 averaging kernel: 7 in the interior,
        // smaller on borders due to zero padding
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[4, 4], 7.0));
        let k = tape.leaf(&Tensor::full(&[3, 3], 1.0 / 9.0));
        let y = tape.conv2d_same(x, k).unwrap();
        let yd = tape.data(y);
        assert_abs_diff_eq!(yd[5], 7.0, epsilon = 1e-12); // interior (1,1)
        assert_abs_diff_eq!(yd[0], 7.0 * 4.0 / 9.0, epsilon = 1e-12); // corner
        assert!(yd[1] < 7.0); // edge
    }

    #[test]
    fn conv_even_kernel_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[3, 3]));
        let k = tape.leaf(&Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.conv2d_same(x, k), Err(Error::Config(_))));
    }

    #[test]
    fn conv_kernel_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xval = Tensor::uniform(&[4, 5], 1.0, &mut rng);
        let kval = Tensor::uniform(&[3, 3], 1.0, &mut rng).param();
        let err = grad_check(
            |tape, k| {
                let x = tape.constant(&xval);
                let y = tape.conv2d_same(x, k)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &kval,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "conv dk err {err}");
    }

    #[test]
    fn conv_input_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xval = Tensor::uniform(&[2, 4, 4], 1.0, &mut rng).param();
        let kval = Tensor::uniform(&[2, 3, 3], 1.0, &mut rng);
        let err = grad_check(
            |tape, x| {
                let k = tape.constant(&kval);
                let y = tape.conv2d_same(x, k)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &xval,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "conv dx err {err}");
    }

    #[test]
    fn layernorm_constant_row_zeroes() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[4], 3.5));
        let g = tape.leaf(&Tensor::full(&[4], 1.0));
        let b = tape.leaf(&Tensor::zeros(&[4]));
        let y = tape.layernorm(x, g, b, 1e-5).unwrap();
        for v in tape.data(y) {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn layernorm_two_point_closed_form() {
        // [1,-1]: mean 0, var 1 -> c = 1/sqrt(1+eps)
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, -1.0]));
        let g = tape.leaf(&Tensor::full(&[2], 1.0));
        let b = tape.leaf(&Tensor::zeros(&[2]));
        let y = tape.layernorm(x, g, b, 1e-5).unwrap();
        let c = 1.0 / (1.0 + 1e-5f64).sqrt();
        assert_abs_diff_eq!(tape.data(y)[0], c, epsilon = 1e-14);
        assert_abs_diff_eq!(tape.data(y)[1], -c, epsilon = 1e-14);
    }

    #[test]
    fn layernorm_output_mean_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::uniform(&[3, 6], 2.0, &mut rng));
        let g = tape.leaf(&Tensor::full(&[6], 1.0));
        let b = tape.leaf(&Tensor::zeros(&[6]));
        let y = tape.layernorm(x, g, b, 1e-5).unwrap();
        for lane in tape.data(y).chunks(6) {
            let mean: f64 = lane.iter().sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn backward_sum_gives_ones_and_squares_give_2x() {
        let mut tape = Tape::new();
        let xv = t(&[3], &[1.0, -2.0, 0.5]).param();
        let x = tape.leaf(&xv);
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(&xv);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).param());
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let xv = Tensor::uniform(&[4, 4], 1.0, &mut rng).param();
            let mut tape = Tape::new();
            let x = tape.leaf(&xv);
            let y = tape.matmul(x, x).unwrap();
            let sm = tape.softmax(y, 1).unwrap();
            let s = tape.sum_all(sm);
            tape.backward(s).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rope_rotate_quarter_turn() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 0.0]));
        let angle = std::f64::consts::FRAC_PI_2;
        let cos = tape.leaf(&t(&[1], &[angle.cos()]));
        let sin = tape.leaf(&t(&[1], &[angle.sin()]));
        let y = tape.rope_rotate(x, cos, sin).unwrap();
        assert_abs_diff_eq!(tape.data(y)[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.data(y)[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn where_mask_selects_and_routes_grads() {
        let mut tape = Tape::new();
        let mask = tape.leaf(&t(&[4], &[1.0, 0.0, 1.0, 0.0]));
        let a = tape.leaf(&t(&[4], &[1.0, 2.0, 3.0, 4.0]).param());
        let b = tape.leaf(&t(&[4], &[10.0, 20.0, 30.0, 40.0]).param());
        let y = tape.where_mask(mask, a, b).unwrap();
        assert_eq!(tape.data(y), &[1.0, 20.0, 3.0, 40.0]);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(tape.grad(b).unwrap(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn masked_fill_with_neg_infinity_feeds_softmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2], &[1.0, 5.0, 2.0, 3.0]).param());
        let tril = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 1.0, 1.0]));
        let m = tape.masked_fill(x, tril, f64::NEG_INFINITY).unwrap();
        let y = tape.softmax(m, 1).unwrap();
        let yd = tape.data(y);
        assert_eq!(yd[0], 1.0);
        assert_eq!(yd[1], 0.0);
        assert!((yd[2] + yd[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn permute_roundtrip_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xv = Tensor::uniform(&[2, 3, 4], 1.0, &mut rng).param();
        let err = grad_check(
            |tape, x| {
                let p = tape.permute(x, &[2, 0, 1])?;
                let sq = tape.mul(p, p)?;
                Ok(tape.sum_all(sq))
            },
            &xv,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6);
    }

    /// grad_check over every registered op on random small tensors.
    #[test]
    fn per_op_gradcheck_random_small_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..5 {
            let d0 = rng.gen_range(2..=5);
            let d1 = rng.gen_range(2..=5);
            let x = Tensor::uniform(&[d0, d1], 1.5, &mut rng).param();
            let other = Tensor::uniform(&[d0, d1], 1.5, &mut rng);
            let cases: Vec<(&str, Box<dyn Fn(&mut Tape, TensorId) -> Result<TensorId>>)> = vec![
                ("add", {
                    let o = other.clone();
                    Box::new(move |tp, x| {
                        let b = tp.constant(&o);
                        let y = tp.add(x, b)?;
                        let sq = tp.mul(y, y)?;
                        Ok(tp.sum_all(sq))
                    })
                }),
                ("sub_div", {
                    let o = other.clone();
                    Box::new(move |tp, x| {
                        let mut offs = o.clone();
                        for v in offs.data.iter_mut() {
                            *v = v.abs() + 2.0;
                        }
                        let b = tp.constant(&offs);
                        let y = tp.div(x, b)?;
                        let z = tp.sub(y, b)?;
                        let sq = tp.mul(z, z)?;
                        Ok(tp.sum_all(sq))
                    })
                }),
                ("exp_scale", Box::new(|tp, x| {
                    let y = tp.scale(x, 0.7);
                    let e = tp.exp(y);
                    Ok(tp.sum_all(e))
                })),
                ("log_softplus", Box::new(|tp, x| {
                    let sp = tp.softplus(x);
                    let shifted = tp.add_scalar(sp, 0.1);
                    let l = tp.log(shifted)?;
                    Ok(tp.sum_all(l))
                })),
                ("gelu", Box::new(|tp, x| {
                    let g = tp.gelu(x);
                    Ok(tp.sum_all(g))
                })),
                ("sqrt", Box::new(|tp, x| {
                    let sq = tp.mul(x, x)?;
                    let shifted = tp.add_scalar(sq, 1.0);
                    let r = tp.sqrt(shifted)?;
                    Ok(tp.sum_all(r))
                })),
                ("softmax", Box::new(|tp, x| {
                    let sm = tp.softmax(x, 1)?;
                    let sq = tp.mul(sm, sm)?;
                    Ok(tp.sum_all(sq))
                })),
                ("layernorm", Box::new(move |tp, x| {
                    // varying affine params keep the loss sensitive to x
                    let gv: Vec<f64> = (0..d1).map(|j| 0.5 + 0.4 * j as f64).collect();
                    let bv: Vec<f64> = (0..d1).map(|j| -0.3 + 0.2 * j as f64).collect();
                    let g = tp.leaf(&Tensor::new(vec![d1], gv).unwrap());
                    let b = tp.leaf(&Tensor::new(vec![d1], bv).unwrap());
                    let y = tp.layernorm(x, g, b, 1e-5)?;
                    let sq = tp.mul(y, y)?;
                    Ok(tp.sum_all(sq))
                })),
                ("sum_axis_mean", Box::new(|tp, x| {
                    let s = tp.sum_axis(x, 0)?;
                    let m = tp.mean_axis(s, 0)?;
                    let sq = tp.mul(m, m)?;
                    Ok(tp.sum_all(sq))
                })),
                ("matmul_both", {
                    let o = other.clone();
                    Box::new(move |tp, x| {
                        let bt = tp.constant(&o);
                        let b = tp.transpose_last2(bt)?;
                        let y = tp.matmul(x, b)?;
                        let sq = tp.mul(y, y)?;
                        Ok(tp.sum_all(sq))
                    })
                }),
            ];
            for (name, f) in &cases {
                let err = grad_check(f.as_ref(), &x, 1e-5).unwrap();
                assert!(err <= 1e-6, "op {name} trial {trial}: grad err {err}");
            }
        }
    }

    #[test]
    fn rope_and_conv_composite_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = Tensor::uniform(&[2, 3, 4], 1.0, &mut rng).param();
        let cos_t: Vec<f64> = (0..6).map(|i| ((i as f64) * 0.3).cos()).collect();
        let sin_t: Vec<f64> = (0..6).map(|i| ((i as f64) * 0.3).sin()).collect();
        let cosv = Tensor::new(vec![3, 2], cos_t).unwrap();
        let sinv = Tensor::new(vec![3, 2], sin_t).unwrap();
        let err = grad_check(
            |tp, x| {
                let c = tp.constant(&cosv);
                let s = tp.constant(&sinv);
                let r = tp.rope_rotate(x, c, s)?;
                let k = tp.leaf(&Tensor::full(&[3, 3], 0.1));
                let y = tp.conv2d_same(r, k)?;
                let sq = tp.mul(y, y)?;
                Ok(tp.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "composite err {err}");
    }
}
