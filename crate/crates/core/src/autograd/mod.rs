//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Tape`] records eagerly-executed operations; [`Tape::backward`] walks
//! the record in reverse and accumulates gradients for every leaf created
//! with `requires_grad`. Tensors are row-major with explicit shapes; the only
//! implicit broadcast is the bias add over the last axis.

mod checkpoint;
mod gradcheck;
mod param;

pub use checkpoint::{
    entries_to_params, load_checkpoint, params_to_entries, save_checkpoint, CheckpointEntry,
};
pub use gradcheck::{grad_check, GradCheckReport};
pub use param::{Adam, Parameter};

use crate::error::{Error, Result};

/// Scalar storage type for tensors: f32 for training, f64 for tight
/// finite-difference checks.
pub trait Element:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).unwrap()
    }

    fn as_f64(self) -> f64 {
        <Self as num_traits::ToPrimitive>::to_f64(&self).unwrap()
    }
}

impl Element for f32 {}
impl Element for f64 {}

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    Matmul(usize, usize),
    Relu(usize),
    Abs(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Conv2d { x: usize, w: usize, b: usize, stride: (usize, usize), padding: (usize, usize) },
    GlobalMeanPool(usize),
    MeanLast(usize),
    Concat { axis: usize, inputs: Vec<usize> },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Narrow { x: usize, axis: usize, start: usize },
    Sum(usize),
    Mean(usize),
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op,
    grad_needed: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Gradients produced by one backward pass.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Record of executed operations in topological order.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn value_scalar(&self, v: Var) -> T {
        self.nodes[v.0].data[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op, grad_needed: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { shape, data, op, grad_needed });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes[v].grad_needed
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch { expected: shape.to_vec(), got: vec![data.len()] });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(vec![], vec![T::of(x)], Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                expected: self.shape(a).to_vec(),
                got: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let g = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a.0, b.0), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let g = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub(a.0, b.0), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let g = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a.0, b.0), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cc = T::of(c);
        let data = self.nodes[a.0].data.iter().map(|&x| x * cc).collect();
        let g = self.needs(a.0);
        self.push(self.shape(a).to_vec(), data, Op::Scale(a.0, c), g)
    }

    /// Broadcast add of a rank-1 bias over the last axis.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let last = *self.shape(a).last().ok_or_else(|| {
            Error::InvalidArgument("add_bias needs rank >= 1 input".into())
        })?;
        if self.shape(b) != [last] {
            return Err(Error::ShapeMismatch { expected: vec![last], got: self.shape(b).to_vec() });
        }
        let bias = &self.nodes[b.0].data;
        let data = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bias[i % last])
            .collect();
        let g = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(self.shape(a).to_vec(), data, Op::AddBias(a.0, b.0), g))
    }

    /// Matrix product: (m,k)x(k,n) or batched (B,m,k)x(B,k,n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) => {
                if sa[1] != sb[0] {
                    return Err(Error::ShapeMismatch { expected: sa, got: sb });
                }
                (1, sa[0], sa[1], sb[1])
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(Error::ShapeMismatch { expected: sa, got: sb });
                }
                (sa[0], sa[1], sa[2], sb[2])
            }
            _ => return Err(Error::ShapeMismatch { expected: sa, got: sb }),
        };
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            matmul_nn(
                &self.nodes[a.0].data[bi * m * k..(bi + 1) * m * k],
                &self.nodes[b.0].data[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let g = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(shape, out, Op::Matmul(a.0, b.0), g))
    }

    /// x W + b convenience.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let z = T::zero();
        let data = self.nodes[a.0].data.iter().map(|&x| if x > z { x } else { z }).collect();
        let g = self.needs(a.0);
        self.push(self.shape(a).to_vec(), data, Op::Relu(a.0), g)
    }

    /// Elementwise absolute value; subgradient 0 at x = 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x.abs()).collect();
        let g = self.needs(a.0);
        self.push(self.shape(a).to_vec(), data, Op::Abs(a.0), g)
    }

    /// Numerically-stable softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let last = *self
            .shape(a)
            .last()
            .ok_or_else(|| Error::InvalidArgument("softmax needs rank >= 1".into()))?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![T::zero(); src.len()];
        for (row_in, row_out) in src.chunks_exact(last).zip(data.chunks_exact_mut(last)) {
            let max = row_in.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                let e = (x - max).exp();
                *o = e;
                sum = sum + e;
            }
            for o in row_out.iter_mut() {
                *o = *o / sum;
            }
        }
        let g = self.needs(a.0);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Softmax(a.0), g))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let last = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::InvalidArgument("layer_norm needs rank >= 1".into()))?;
        if self.shape(gamma) != [last] || self.shape(beta) != [last] {
            return Err(Error::ShapeMismatch {
                expected: vec![last],
                got: self.shape(gamma).to_vec(),
            });
        }
        let src = &self.nodes[x.0].data;
        let gm = &self.nodes[gamma.0].data;
        let bt = &self.nodes[beta.0].data;
        let mut data = vec![T::zero(); src.len()];
        let nl = T::of(last as f64);
        let epsv = T::of(eps);
        for (row_in, row_out) in src.chunks_exact(last).zip(data.chunks_exact_mut(last)) {
            let mut mean = T::zero();
            for &v in row_in {
                mean = mean + v;
            }
            mean = mean / nl;
            let mut var = T::zero();
            for &v in row_in {
                var = var + (v - mean) * (v - mean);
            }
            var = var / nl;
            let rstd = (var + epsv).sqrt().recip();
            for (j, (o, &v)) in row_out.iter_mut().zip(row_in).enumerate() {
                *o = gm[j] * ((v - mean) * rstd) + bt[j];
            }
        }
        let g = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        Ok(self.push(
            self.shape(x).to_vec(),
            data,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps },
            g,
        ))
    }

    /// 2-D convolution: x (N,C,H,W), w (O,C,kh,kw), bias (O).
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch { expected: sx, got: sw });
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if self.shape(b) != [o] {
            return Err(Error::ShapeMismatch { expected: vec![o], got: self.shape(b).to_vec() });
        }
        let (sh, swd) = stride;
        if sh == 0 || swd == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (ph, pw) = padding;
        if h + 2 * ph < kh || wd + 2 * pw < kw {
            return Err(Error::ShapeMismatch { expected: vec![kh, kw], got: vec![h + 2 * ph, wd + 2 * pw] });
        }
        let ho = (h + 2 * ph - kh) / sh + 1;
        let wo = (wd + 2 * pw - kw) / swd + 1;

        let patch = c * kh * kw;
        let cols = ho * wo;
        let mut col = vec![T::zero(); patch * cols];
        let mut out = vec![T::zero(); n * o * cols];
        let bias = self.nodes[b.0].data.clone();
        for ni in 0..n {
            im2col(
                &self.nodes[x.0].data[ni * c * h * wd..(ni + 1) * c * h * wd],
                c,
                h,
                wd,
                kh,
                kw,
                (sh, swd),
                (ph, pw),
                ho,
                wo,
                &mut col,
            );
            let dst = &mut out[ni * o * cols..(ni + 1) * o * cols];
            matmul_nn(&self.nodes[w.0].data, &col, o, patch, cols, dst);
            for oi in 0..o {
                for v in &mut dst[oi * cols..(oi + 1) * cols] {
                    *v = *v + bias[oi];
                }
            }
        }
        let g = self.needs(x.0) || self.needs(w.0) || self.needs(b.0);
        Ok(self.push(vec![n, o, ho, wo], out, Op::Conv2d { x: x.0, w: w.0, b: b.0, stride, padding }, g))
    }

    /// Mean over the spatial axes: (N,C,H,W) -> (N,C).
    pub fn global_mean_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch { expected: vec![0, 0, 0, 0], got: s });
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = T::of(1.0 / hw as f64);
        let src = &self.nodes[x.0].data;
        let mut data = vec![T::zero(); n * c];
        for i in 0..n * c {
            let mut acc = T::zero();
            for &v in &src[i * hw..(i + 1) * hw] {
                acc = acc + v;
            }
            data[i] = acc * inv;
        }
        let g = self.needs(x.0);
        Ok(self.push(vec![n, c], data, Op::GlobalMeanPool(x.0), g))
    }

    /// Mean over the last axis, dropping it.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let last = *s.last().ok_or_else(|| Error::InvalidArgument("mean_last needs rank >= 1".into()))?;
        let rows = numel(&s) / last;
        let inv = T::of(1.0 / last as f64);
        let src = &self.nodes[x.0].data;
        let mut data = vec![T::zero(); rows];
        for i in 0..rows {
            let mut acc = T::zero();
            for &v in &src[i * last..(i + 1) * last] {
                acc = acc + v;
            }
            data[i] = acc * inv;
        }
        let g = self.needs(x.0);
        Ok(self.push(s[..s.len() - 1].to_vec(), data, Op::MeanLast(x.0), g))
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&mut self, axis: usize, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("concat needs >= 1 input".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArgument(format!("concat axis {axis} out of range")));
        }
        let mut total_axis = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(Error::ShapeMismatch { expected: first, got: s.to_vec() });
            }
            total_axis += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::zero(); numel(&shape)];
        let mut offset = 0;
        for &v in inputs {
            let a = self.shape(v)[axis];
            let src = &self.nodes[v.0].data;
            for oi in 0..outer {
                let dst_base = (oi * total_axis + offset) * inner;
                let src_base = oi * a * inner;
                data[dst_base..dst_base + a * inner]
                    .copy_from_slice(&src[src_base..src_base + a * inner]);
            }
            offset += a;
        }
        let g = inputs.iter().any(|&v| self.needs(v.0));
        Ok(self.push(shape, data, Op::Concat { axis, inputs: inputs.iter().map(|v| v.0).collect() }, g))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::ShapeMismatch { expected: self.shape(x).to_vec(), got: shape.to_vec() });
        }
        let data = self.nodes[x.0].data.clone();
        let g = self.needs(x.0);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x.0), g))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if perm.len() != s.len() || {
            let mut seen = vec![false; s.len()];
            perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
        } {
            return Err(Error::InvalidArgument(format!("bad permutation {perm:?} for rank {}", s.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let data = permute_data(&self.nodes[x.0].data, &s, perm);
        let g = self.needs(x.0);
        Ok(self.push(out_shape, data, Op::Permute { x: x.0, perm: perm.to_vec() }, g))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "narrow(axis={axis}, start={start}, len={len}) out of range for {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut shape = s.clone();
        shape[axis] = len;
        let src = &self.nodes[x.0].data;
        let mut data = vec![T::zero(); numel(&shape)];
        for oi in 0..outer {
            let src_base = (oi * s[axis] + start) * inner;
            let dst_base = oi * len * inner;
            data[dst_base..dst_base + len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let g = self.needs(x.0);
        Ok(self.push(shape, data, Op::Narrow { x: x.0, axis, start }, g))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in &self.nodes[x.0].data {
            acc = acc + v;
        }
        let g = self.needs(x.0);
        self.push(vec![], vec![acc], Op::Sum(x.0), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len();
        let mut acc = T::zero();
        for &v in &self.nodes[x.0].data {
            acc = acc + v;
        }
        let g = self.needs(x.0);
        self.push(vec![], vec![acc / T::of(n as f64)], Op::Mean(x.0), g)
    }

    /// Scaled dot-product attention softmax(Q K^T / sqrt(d_k)) V for 2-D
    /// Q (Tq,d), K (Tk,d), V (Tk,dv).
    pub fn scaled_dot_product_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let d = *self
            .shape(q)
            .last()
            .ok_or_else(|| Error::InvalidArgument("attention needs rank-2 inputs".into()))?;
        let kt = self.permute(k, &[1, 0])?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = self.softmax(scaled)?;
        self.matmul(attn, v)
    }

    /// Multi-head attention with K = V = `kv`: the last axis is split into
    /// `heads` slices attended independently, then re-concatenated. Input
    /// projections are the caller's business.
    pub fn multi_head_cross_attention(&mut self, q: Var, kv: Var, heads: usize) -> Result<Var> {
        let d = *self
            .shape(q)
            .last()
            .ok_or_else(|| Error::InvalidArgument("attention needs rank-2 inputs".into()))?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model dim {d} not divisible by {heads} heads"
            )));
        }
        if self.shape(kv).last() != Some(&d) {
            return Err(Error::ShapeMismatch {
                expected: self.shape(q).to_vec(),
                got: self.shape(kv).to_vec(),
            });
        }
        let hd = d / heads;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.narrow(q, 1, h * hd, hd)?;
            let kh = self.narrow(kv, 1, h * hd, hd)?;
            outs.push(self.scaled_dot_product_attention(qh, kh, kh)?);
        }
        self.concat(1, &outs)
    }

    /// Populate gradients of `loss` (a scalar) w.r.t. every grad-requiring
    /// tensor on the tape. Accumulation is additive across uses.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if !self.shape(loss).is_empty() && numel(self.shape(loss)) != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one(); 1]);

        macro_rules! grab {
            ($g:expr, $idx:expr, $len:expr) => {
                $g[$idx].get_or_insert_with(|| vec![T::zero(); $len])
            };
        }

        for i in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.grad_needed {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Add(a, b) => {
                    for p in [*a, *b] {
                        if self.needs(p) {
                            let g = grab!(grads, p, dy.len());
                            for (gi, &d) in g.iter_mut().zip(&dy) {
                                *gi = *gi + d;
                            }
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        let g = grab!(grads, *a, dy.len());
                        for (gi, &d) in g.iter_mut().zip(&dy) {
                            *gi = *gi + d;
                        }
                    }
                    if self.needs(*b) {
                        let g = grab!(grads, *b, dy.len());
                        for (gi, &d) in g.iter_mut().zip(&dy) {
                            *gi = *gi - d;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let bd: Vec<T> = self.nodes[*b].data.clone();
                        let g = grab!(grads, *a, dy.len());
                        for ((gi, &d), &bv) in g.iter_mut().zip(&dy).zip(&bd) {
                            *gi = *gi + d * bv;
                        }
                    }
                    if self.needs(*b) {
                        let ad: Vec<T> = self.nodes[*a].data.clone();
                        let g = grab!(grads, *b, dy.len());
                        for ((gi, &d), &av) in g.iter_mut().zip(&dy).zip(&ad) {
                            *gi = *gi + d * av;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if self.needs(*a) {
                        let cc = T::of(*c);
                        let g = grab!(grads, *a, dy.len());
                        for (gi, &d) in g.iter_mut().zip(&dy) {
                            *gi = *gi + d * cc;
                        }
                    }
                }
                Op::AddBias(a, b) => {
                    if self.needs(*a) {
                        let g = grab!(grads, *a, dy.len());
                        for (gi, &d) in g.iter_mut().zip(&dy) {
                            *gi = *gi + d;
                        }
                    }
                    if self.needs(*b) {
                        let last = self.nodes[*b].data.len();
                        let g = grab!(grads, *b, last);
                        for (j, &d) in dy.iter().enumerate() {
                            g[j % last] = g[j % last] + d;
                        }
                    }
                }
                Op::Matmul(a, b) => {
                    let (sa, sb) = (&self.nodes[*a].shape, &self.nodes[*b].shape);
                    let (batch, m, k, n) = if sa.len() == 2 {
                        (1, sa[0], sa[1], sb[1])
                    } else {
                        (sa[0], sa[1], sa[2], sb[2])
                    };
                    if self.needs(*a) {
                        let bd = &self.nodes[*b].data;
                        let g = grab!(grads, *a, batch * m * k);
                        for bi in 0..batch {
                            // dA = dC B^T
                            matmul_nt(
                                &dy[bi * m * n..(bi + 1) * m * n],
                                &bd[bi * k * n..(bi + 1) * k * n],
                                m,
                                n,
                                k,
                                &mut g[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                    }
                    if self.needs(*b) {
                        let ad = &self.nodes[*a].data;
                        let g = grab!(grads, *b, batch * k * n);
                        for bi in 0..batch {
                            // dB = A^T dC
                            matmul_tn(
                                &ad[bi * m * k..(bi + 1) * m * k],
                                &dy[bi * m * n..(bi + 1) * m * n],
                                m,
                                k,
                                n,
                                &mut g[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                    }
                }
                Op::Relu(a) => {
                    if self.needs(*a) {
                        let z = T::zero();
                        let src = &self.nodes[*a].data;
                        let g = grab!(grads, *a, dy.len());
                        for ((gi, &d), &x) in g.iter_mut().zip(&dy).zip(src) {
                            if x > z {
                                *gi = *gi + d;
                            }
                        }
                    }
                }
                Op::Abs(a) => {
                    if self.needs(*a) {
                        let z = T::zero();
                        let src = &self.nodes[*a].data;
                        let g = grab!(grads, *a, dy.len());
                        for ((gi, &d), &x) in g.iter_mut().zip(&dy).zip(src) {
                            if x > z {
                                *gi = *gi + d;
                            } else if x < z {
                                *gi = *gi - d;
                            }
                            // subgradient 0 at x == 0
                        }
                    }
                }
                Op::Softmax(a) => {
                    if self.needs(*a) {
                        let y = &node.data;
                        let last = *node.shape.last().unwrap();
                        let g = grab!(grads, *a, dy.len());
                        for r in 0..y.len() / last {
                            let ys = &y[r * last..(r + 1) * last];
                            let ds = &dy[r * last..(r + 1) * last];
                            let mut dot = T::zero();
                            for (&yv, &dv) in ys.iter().zip(ds) {
                                dot = dot + yv * dv;
                            }
                            for (j, (&yv, &dv)) in ys.iter().zip(ds).enumerate() {
                                g[r * last + j] = g[r * last + j] + yv * (dv - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let last = *node.shape.last().unwrap();
                    let xs = &self.nodes[*x].data;
                    let gm = &self.nodes[*gamma].data;
                    let nl = T::of(last as f64);
                    let epsv = T::of(*eps);
                    let rows = xs.len() / last;
                    // Recompute per-row statistics.
                    let mut dx = if self.needs(*x) { Some(vec![T::zero(); xs.len()]) } else { None };
                    let mut dgamma = if self.needs(*gamma) { Some(vec![T::zero(); last]) } else { None };
                    let mut dbeta = if self.needs(*beta) { Some(vec![T::zero(); last]) } else { None };
                    for r in 0..rows {
                        let xr = &xs[r * last..(r + 1) * last];
                        let dyr = &dy[r * last..(r + 1) * last];
                        let mut mean = T::zero();
                        for &v in xr {
                            mean = mean + v;
                        }
                        mean = mean / nl;
                        let mut var = T::zero();
                        for &v in xr {
                            var = var + (v - mean) * (v - mean);
                        }
                        var = var / nl;
                        let rstd = (var + epsv).sqrt().recip();
                        if let Some(dg) = dgamma.as_mut() {
                            for j in 0..last {
                                dg[j] = dg[j] + dyr[j] * ((xr[j] - mean) * rstd);
                            }
                        }
                        if let Some(db) = dbeta.as_mut() {
                            for j in 0..last {
                                db[j] = db[j] + dyr[j];
                            }
                        }
                        if let Some(dxv) = dx.as_mut() {
                            let mut mean_dxhat = T::zero();
                            let mut mean_dxhat_xhat = T::zero();
                            for j in 0..last {
                                let xhat = (xr[j] - mean) * rstd;
                                let dxhat = dyr[j] * gm[j];
                                mean_dxhat = mean_dxhat + dxhat;
                                mean_dxhat_xhat = mean_dxhat_xhat + dxhat * xhat;
                            }
                            mean_dxhat = mean_dxhat / nl;
                            mean_dxhat_xhat = mean_dxhat_xhat / nl;
                            for j in 0..last {
                                let xhat = (xr[j] - mean) * rstd;
                                let dxhat = dyr[j] * gm[j];
                                dxv[r * last + j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                            }
                        }
                    }
                    if let Some(dxv) = dx {
                        let g = grab!(grads, *x, dxv.len());
                        for (gi, d) in g.iter_mut().zip(dxv) {
                            *gi = *gi + d;
                        }
                    }
                    if let Some(dg) = dgamma {
                        let g = grab!(grads, *gamma, last);
                        for (gi, d) in g.iter_mut().zip(dg) {
                            *gi = *gi + d;
                        }
                    }
                    if let Some(db) = dbeta {
                        let g = grab!(grads, *beta, last);
                        for (gi, d) in g.iter_mut().zip(db) {
                            *gi = *gi + d;
                        }
                    }
                }
                Op::Conv2d { x, w, b, stride, padding } => {
                    self.conv2d_backward(*x, *w, *b, *stride, *padding, &node.shape, &dy, &mut grads);
                }
                Op::GlobalMeanPool(x) => {
                    if self.needs(*x) {
                        let s = &self.nodes[*x].shape;
                        let hw = s[2] * s[3];
                        let inv = T::of(1.0 / hw as f64);
                        let g = grab!(grads, *x, numel(s));
                        for (i, &d) in dy.iter().enumerate() {
                            let dv = d * inv;
                            for gi in &mut g[i * hw..(i + 1) * hw] {
                                *gi = *gi + dv;
                            }
                        }
                    }
                }
                Op::MeanLast(x) => {
                    if self.needs(*x) {
                        let s = &self.nodes[*x].shape;
                        let last = *s.last().unwrap();
                        let inv = T::of(1.0 / last as f64);
                        let g = grab!(grads, *x, numel(s));
                        for (i, &d) in dy.iter().enumerate() {
                            let dv = d * inv;
                            for gi in &mut g[i * last..(i + 1) * last] {
                                *gi = *gi + dv;
                            }
                        }
                    }
                }
                Op::Concat { axis, inputs } => {
                    let shape = &node.shape;
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let total_axis = shape[*axis];
                    let mut offset = 0;
                    for &p in inputs {
                        let a = self.nodes[p].shape[*axis];
                        if self.needs(p) {
                            let g = grab!(grads, p, numel(&self.nodes[p].shape));
                            for oi in 0..outer {
                                let src_base = (oi * total_axis + offset) * inner;
                                let dst_base = oi * a * inner;
                                for j in 0..a * inner {
                                    g[dst_base + j] = g[dst_base + j] + dy[src_base + j];
                                }
                            }
                        }
                        offset += a;
                    }
                }
                Op::Reshape(x) => {
                    if self.needs(*x) {
                        let g = grab!(grads, *x, dy.len());
                        for (gi, &d) in g.iter_mut().zip(&dy) {
                            *gi = *gi + d;
                        }
                    }
                }
                Op::Permute { x, perm } => {
                    if self.needs(*x) {
                        // Inverse permutation routes gradients back.
                        let mut inv = vec![0usize; perm.len()];
                        for (i, &p) in perm.iter().enumerate() {
                            inv[p] = i;
                        }
                        let back = permute_data(&dy, &node.shape, &inv);
                        let g = grab!(grads, *x, back.len());
                        for (gi, d) in g.iter_mut().zip(back) {
                            *gi = *gi + d;
                        }
                    }
                }
                Op::Narrow { x, axis, start } => {
                    if self.needs(*x) {
                        let s = &self.nodes[*x].shape;
                        let outer: usize = s[..*axis].iter().product();
                        let inner: usize = s[*axis + 1..].iter().product();
                        let len = node.shape[*axis];
                        let g = grab!(grads, *x, numel(s));
                        for oi in 0..outer {
                            let dst_base = (oi * s[*axis] + start) * inner;
                            let src_base = oi * len * inner;
                            for j in 0..len * inner {
                                g[dst_base + j] = g[dst_base + j] + dy[src_base + j];
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if self.needs(*x) {
                        let d = dy[0];
                        let g = grab!(grads, *x, self.nodes[*x].data.len());
                        for gi in g.iter_mut() {
                            *gi = *gi + d;
                        }
                    }
                }
                Op::Mean(x) => {
                    if self.needs(*x) {
                        let n = self.nodes[*x].data.len();
                        let d = dy[0] * T::of(1.0 / n as f64);
                        let g = grab!(grads, *x, n);
                        for gi in g.iter_mut() {
                            *gi = *gi + d;
                        }
                    }
                }
            }
        }

        Ok(Grads { grads })
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: usize,
        w: usize,
        b: usize,
        stride: (usize, usize),
        padding: (usize, usize),
        out_shape: &[usize],
        dy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let sx = &self.nodes[x].shape;
        let sw = &self.nodes[w].shape;
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let patch = c * kh * kw;
        let cols = ho * wo;
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let need_b = self.needs(b);

        if need_b {
            let g = grads[b].get_or_insert_with(|| vec![T::zero(); o]);
            for ni in 0..n {
                for oi in 0..o {
                    let base = (ni * o + oi) * cols;
                    let mut acc = T::zero();
                    for &d in &dy[base..base + cols] {
                        acc = acc + d;
                    }
                    g[oi] = g[oi] + acc;
                }
            }
        }

        let mut col = vec![T::zero(); patch * cols];
        let mut dcol = vec![T::zero(); patch * cols];
        let mut dw_acc = if need_w { Some(vec![T::zero(); o * patch]) } else { None };
        let mut dx_acc = if need_x { Some(vec![T::zero(); n * c * h * wd]) } else { None };
        for ni in 0..n {
            let dyn_ = &dy[ni * o * cols..(ni + 1) * o * cols];
            if need_w {
                im2col(
                    &self.nodes[x].data[ni * c * h * wd..(ni + 1) * c * h * wd],
                    c, h, wd, kh, kw, stride, padding, ho, wo, &mut col,
                );
                // dW += dY col^T
                matmul_nt(dyn_, &col, o, cols, patch, dw_acc.as_mut().unwrap());
            }
            if need_x {
                for v in dcol.iter_mut() {
                    *v = T::zero();
                }
                // dcol = W^T dY
                matmul_tn(&self.nodes[w].data, dyn_, o, patch, cols, &mut dcol);
                col2im(
                    &dcol,
                    c, h, wd, kh, kw, stride, padding, ho, wo,
                    &mut dx_acc.as_mut().unwrap()[ni * c * h * wd..(ni + 1) * c * h * wd],
                );
            }
        }
        if let Some(dw) = dw_acc {
            let g = grads[w].get_or_insert_with(|| vec![T::zero(); o * patch]);
            for (gi, d) in g.iter_mut().zip(dw) {
                *gi = *gi + d;
            }
        }
        if let Some(dx) = dx_acc {
            let g = grads[x].get_or_insert_with(|| vec![T::zero(); dx.len()]);
            for (gi, d) in g.iter_mut().zip(dx) {
                *gi = *gi + d;
            }
        }
    }
}

fn matmul_nn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov = *ov + av * bv;
            }
        }
    }
}

/// out (m,k) += a (m,n) * b^T where b is (k,n).
fn matmul_nt<T: Element>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, ov) in orow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *ov = *ov + acc;
        }
    }
}

/// out (k,n) += a^T * b where a is (m,k), b is (m,n).
fn matmul_tn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov = *ov + av * bv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    padding: (usize, usize),
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    let cols = ho * wo;
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * sh + u) as isize - ph as isize;
                    for ox in 0..wo {
                        let ix = (ox * sw + v) as isize - pw as isize;
                        dst[oy * wo + ox] = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            x[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    padding: (usize, usize),
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    let cols = ho * wo;
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * sh + u) as isize - ph as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * sw + v) as isize - pw as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let idx = (ci * h + iy as usize) * w + ix as usize;
                        x[idx] = x[idx] + src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![data[0]; data.len()];
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut src = 0;
        for d in 0..rank {
            src += idx[d] * in_strides[perm[d]];
        }
        *o = data[src];
        // increment multi-index over out_shape
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
