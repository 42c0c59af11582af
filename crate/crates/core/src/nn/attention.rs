use super::conv::kaiming;
use crate::error::{shape_err, Error, Result};
use crate::par;
use crate::tensor::linalg::{gemm, MatMut, MatRef};
use crate::tensor::{softmax_rows_inplace, transpose, Real, Tensor};

/// Query rows per block on the inference path, bounding score memory to
/// `ATTN_BLOCK × tokens` per task.
const ATTN_BLOCK: usize = 256;

/// Dense affine map on row vectors: `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(input: usize, output: usize, seed: u64) -> Result<Self> {
        // unit-gain (not ReLU-gain) scaling: 1/fan_in variance
        let mut weight = kaiming(&[input, output], input, seed)?;
        let k = T::of(std::f64::consts::FRAC_1_SQRT_2);
        weight.data_mut().iter_mut().for_each(|v| *v = *v * k);
        Ok(Self { weight, bias: Tensor::zeros(&[output])? })
    }

    pub fn zeroed(input: usize, output: usize) -> Result<Self> {
        Ok(Self { weight: Tensor::zeros(&[input, output])?, bias: Tensor::zeros(&[output])? })
    }

    pub fn input(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `x` holds `rows` contiguous input vectors.
    pub(crate) fn apply(&self, x: &[T], rows: usize) -> Vec<T> {
        let (i, o) = (self.input(), self.output());
        let mut y: Vec<T> = self.bias.data().iter().copied().cycle().take(rows * o).collect();
        gemm(T::one(), MatRef::new(x, 0, rows, i), MatRef::new(self.weight.data(), 0, i, o), T::one(), MatMut::new(&mut y, 0, rows, o));
        y
    }

    /// Accumulates weight/bias gradients and returns `dy·Wᵀ`.
    pub(crate) fn back(&mut self, x: &[T], dy: &[T], rows: usize) -> Vec<T> {
        let (i, o) = (self.input(), self.output());
        let mut dw = vec![T::zero(); i * o];
        gemm(T::one(), MatRef::new(x, 0, rows, i).t(), MatRef::new(dy, 0, rows, o), T::zero(), MatMut::new(&mut dw, 0, i, o));
        self.weight.accumulate_grad_slice(&dw);
        let mut db = vec![T::zero(); o];
        for row in dy.chunks(o) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d = *d + v;
            }
        }
        self.bias.accumulate_grad_slice(&db);
        let mut dx = vec![T::zero(); rows * i];
        gemm(T::one(), MatRef::new(dy, 0, rows, o), MatRef::new(self.weight.data(), 0, i, o).t(), T::zero(), MatMut::new(&mut dx, 0, rows, i));
        dx
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
}

impl AttentionConfig {
    pub fn inner_width(&self) -> usize {
        self.heads * self.d_head
    }

    /// Elements in one head's score matrix for a sequence of `tokens`.
    pub fn score_elements(tokens: usize) -> u128 {
        (tokens as u128) * (tokens as u128)
    }

    /// Multiply-accumulates spent on scores and value mixing, all heads.
    pub fn attention_macs(&self, tokens: usize) -> u128 {
        2 * Self::score_elements(tokens) * self.d_head as u128 * self.heads as u128
    }
}

/// Queries, keys and values, each `[N, tokens, d_model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionTriple<T: Real> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Real> ProjectionTriple<T> {
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let d = self.q.dims3()?;
        if self.k.shape() != self.q.shape() || self.v.shape() != self.q.shape() {
            return shape_err(format!("Q/K/V shapes differ: {:?} {:?} {:?}", self.q.shape(), self.k.shape(), self.v.shape()));
        }
        Ok(d)
    }
}

/// Multi-head scaled dot-product attention with learned per-head input maps
/// (`d_model → heads·d_head`) and an output map back to `d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention<T: Real> {
    pub config: AttentionConfig,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T: Real> {
    inputs: ProjectionTriple<T>,
    qp: Vec<T>,
    kp: Vec<T>,
    vp: Vec<T>,
    /// `[N, heads, tokens, tokens]`
    weights: Vec<T>,
    concat: Vec<T>,
    dims: (usize, usize),
}

impl<T: Real> AttentionCache<T> {
    /// Attention weights `[N, heads, tokens, tokens]` from the forward pass.
    pub fn weights(&self) -> Result<Tensor<T>> {
        let (n, t) = self.dims;
        let heads = self.weights.len() / (n * t * t);
        Tensor::from_vec(&[n, heads, t, t], self.weights.clone())
    }
}

impl<T: Real> MultiHeadAttention<T> {
    pub fn new(config: AttentionConfig, seed: u64) -> Result<Self> {
        if config.heads == 0 || config.d_head == 0 || config.d_model == 0 {
            return Err(Error::Parameter(format!("degenerate attention config {config:?}")));
        }
        let (d, w) = (config.d_model, config.inner_width());
        Ok(Self {
            config,
            query: Linear::new(d, w, crate::rng::derive(seed, 1))?,
            key: Linear::new(d, w, crate::rng::derive(seed, 2))?,
            value: Linear::new(d, w, crate::rng::derive(seed, 3))?,
            output: Linear::new(w, d, crate::rng::derive(seed, 4))?,
        })
    }

    fn scale(&self) -> T {
        T::of(1.0 / (self.config.d_head as f64).sqrt())
    }

    fn check(&self, t: &ProjectionTriple<T>) -> Result<(usize, usize)> {
        let (n, tokens, d) = t.dims()?;
        if d != self.config.d_model {
            return shape_err(format!("attention expects d_model {}, got {d}", self.config.d_model));
        }
        Ok((n, tokens))
    }

    fn head_views<'a>(&self, buf: &'a [T], n: usize, h: usize, tokens: usize) -> MatRef<'a, T> {
        let w = self.config.inner_width();
        MatRef::strided(buf, n * tokens * w + h * self.config.d_head, tokens, self.config.d_head, w, 1)
    }

    /// Writes per-head `[rows, d_head]` blocks into the concatenated layout.
    fn scatter_heads(&self, parts: &[(usize, usize, usize, Vec<T>)], tokens: usize, out: &mut [T]) {
        let (w, dh) = (self.config.inner_width(), self.config.d_head);
        for (n, h, r0, block) in parts {
            for (r, src) in block.chunks(dh).enumerate() {
                let base = (n * tokens + r0 + r) * w + h * dh;
                out[base..base + dh].copy_from_slice(src);
            }
        }
    }

    pub fn forward_train(&self, t: &ProjectionTriple<T>) -> Result<(Tensor<T>, AttentionCache<T>)> {
        let (n, tokens) = self.check(t)?;
        let rows = n * tokens;
        let (qp, kp, vp) = (self.query.apply(t.q.data(), rows), self.key.apply(t.k.data(), rows), self.value.apply(t.v.data(), rows));
        let (heads, dh) = (self.config.heads, self.config.d_head);
        let scale = self.scale();
        let per_head = par::map(n * heads, |i| {
            let (b, h) = (i / heads, i % heads);
            let mut scores = vec![T::zero(); tokens * tokens];
            gemm(scale, self.head_views(&qp, b, h, tokens), self.head_views(&kp, b, h, tokens).t(), T::zero(), MatMut::new(&mut scores, 0, tokens, tokens));
            softmax_rows_inplace(&mut scores, tokens);
            let mut out = vec![T::zero(); tokens * dh];
            gemm(T::one(), MatRef::new(&scores, 0, tokens, tokens), self.head_views(&vp, b, h, tokens), T::zero(), MatMut::new(&mut out, 0, tokens, dh));
            (scores, out)
        });
        let mut weights = Vec::with_capacity(n * heads * tokens * tokens);
        let mut parts = Vec::with_capacity(n * heads);
        for (i, (s, o)) in per_head.into_iter().enumerate() {
            weights.extend_from_slice(&s);
            parts.push((i / heads, i % heads, 0, o));
        }
        let mut concat = vec![T::zero(); rows * self.config.inner_width()];
        self.scatter_heads(&parts, tokens, &mut concat);
        let y = self.output.apply(&concat, rows);
        let cache = AttentionCache { inputs: t.clone(), qp, kp, vp, weights, concat, dims: (n, tokens) };
        Ok((Tensor::from_vec(&[n, tokens, self.config.d_model], y)?, cache))
    }

    /// Forward pass that streams query blocks instead of materializing every
    /// score matrix; equal to `forward_train(..).0` up to rounding.
    pub fn infer(&self, t: &ProjectionTriple<T>) -> Result<Tensor<T>> {
        let (n, tokens) = self.check(t)?;
        let rows = n * tokens;
        let (qp, kp, vp) = (self.query.apply(t.q.data(), rows), self.key.apply(t.k.data(), rows), self.value.apply(t.v.data(), rows));
        let (heads, dh) = (self.config.heads, self.config.d_head);
        let blocks = tokens.div_ceil(ATTN_BLOCK);
        let scale = self.scale();
        let parts = par::map(n * heads * blocks, |i| {
            let (b, h, blk) = (i / (heads * blocks), (i / blocks) % heads, i % blocks);
            let r0 = blk * ATTN_BLOCK;
            let len = ATTN_BLOCK.min(tokens - r0);
            let w = self.config.inner_width();
            let q = MatRef::strided(&qp, (b * tokens + r0) * w + h * dh, len, dh, w, 1);
            let mut scores = vec![T::zero(); len * tokens];
            gemm(scale, q, self.head_views(&kp, b, h, tokens).t(), T::zero(), MatMut::new(&mut scores, 0, len, tokens));
            softmax_rows_inplace(&mut scores, tokens);
            let mut out = vec![T::zero(); len * dh];
            gemm(T::one(), MatRef::new(&scores, 0, len, tokens), self.head_views(&vp, b, h, tokens), T::zero(), MatMut::new(&mut out, 0, len, dh));
            (b, h, r0, out)
        });
        let mut concat = vec![T::zero(); rows * self.config.inner_width()];
        self.scatter_heads(&parts, tokens, &mut concat);
        Tensor::from_vec(&[n, tokens, self.config.d_model], self.output.apply(&concat, rows))
    }

    /// Accumulates all map gradients and returns gradients for Q, K and V.
    pub fn backward(&mut self, cache: &AttentionCache<T>, dy: &Tensor<T>) -> Result<ProjectionTriple<T>> {
        let (n, tokens) = cache.dims;
        let d = self.config.d_model;
        if dy.shape() != [n, tokens, d] {
            return shape_err(format!("attention upstream {:?} vs [{n}, {tokens}, {d}]", dy.shape()));
        }
        let rows = n * tokens;
        let dconcat = self.output.back(&cache.concat, dy.data(), rows);
        let (heads, dh, w) = (self.config.heads, self.config.d_head, self.config.inner_width());
        let scale = self.scale();
        let tt = tokens * tokens;
        let grads = par::map(n * heads, |i| {
            let (b, h) = (i / heads, i % heads);
            let a = &cache.weights[i * tt..(i + 1) * tt];
            let a_mat = MatRef::new(a, 0, tokens, tokens);
            let d_out = MatRef::strided(&dconcat, b * tokens * w + h * dh, tokens, dh, w, 1);
            let mut da = vec![T::zero(); tt];
            gemm(T::one(), d_out, self.head_views(&cache.vp, b, h, tokens).t(), T::zero(), MatMut::new(&mut da, 0, tokens, tokens));
            let mut dv = vec![T::zero(); tokens * dh];
            gemm(T::one(), a_mat.t(), d_out, T::zero(), MatMut::new(&mut dv, 0, tokens, dh));
            // softmax backward, folded with the 1/√d scale
            for (drow, arow) in da.chunks_mut(tokens).zip(a.chunks(tokens)) {
                let s = drow.iter().zip(arow).fold(T::zero(), |acc, (&g, &p)| acc + g * p);
                for (g, &p) in drow.iter_mut().zip(arow) {
                    *g = p * (*g - s) * scale;
                }
            }
            let ds = MatRef::new(&da, 0, tokens, tokens);
            let mut dq = vec![T::zero(); tokens * dh];
            gemm(T::one(), ds, self.head_views(&cache.kp, b, h, tokens), T::zero(), MatMut::new(&mut dq, 0, tokens, dh));
            let mut dk = vec![T::zero(); tokens * dh];
            gemm(T::one(), ds.t(), self.head_views(&cache.qp, b, h, tokens), T::zero(), MatMut::new(&mut dk, 0, tokens, dh));
            (dq, dk, dv)
        });
        let mut dqp = vec![T::zero(); rows * w];
        let mut dkp = vec![T::zero(); rows * w];
        let mut dvp = vec![T::zero(); rows * w];
        let (mut pq, mut pk, mut pv) = (Vec::new(), Vec::new(), Vec::new());
        for (i, (dq, dk, dv)) in grads.into_iter().enumerate() {
            pq.push((i / heads, i % heads, 0, dq));
            pk.push((i / heads, i % heads, 0, dk));
            pv.push((i / heads, i % heads, 0, dv));
        }
        self.scatter_heads(&pq, tokens, &mut dqp);
        self.scatter_heads(&pk, tokens, &mut dkp);
        self.scatter_heads(&pv, tokens, &mut dvp);
        let shape = [n, tokens, d];
        Ok(ProjectionTriple {
            q: Tensor::from_vec(&shape, self.query.back(cache.inputs.q.data(), &dqp, rows))?,
            k: Tensor::from_vec(&shape, self.key.back(cache.inputs.k.data(), &dkp, rows))?,
            v: Tensor::from_vec(&shape, self.value.back(cache.inputs.v.data(), &dvp, rows))?,
        })
    }
}

/// `[N, C, H, W] → [N, H·W, C]`, tokens in row-major pixel order.
pub fn flatten_tokens<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    transpose(&x.reshape(&[n, c, h * w])?, &[0, 2, 1])
}

/// Inverse of [`flatten_tokens`].
pub fn unflatten_tokens<T: Real>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, tokens, c) = t.dims3()?;
    if tokens != h * w {
        return shape_err(format!("{tokens} tokens cannot fill a {h}x{w} map"));
    }
    transpose(t, &[0, 2, 1])?.into_reshaped(&[n, c, h, w])
}
