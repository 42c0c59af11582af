use super::kernels::{correlate, correlate_transpose, weight_grad, Geometry};
use crate::error::{shape_err, Error, Result};
use crate::par;
use crate::tensor::linalg::{gemm, MatMut, MatRef};
use crate::tensor::{Fill, Real, Tensor};

/// He-normal weights for a layer whose units see `fan_in` inputs.
pub(crate) fn kaiming<T: Real>(shape: &[usize], fan_in: usize, seed: u64) -> Result<Tensor<T>> {
    Tensor::new(shape, Fill::Normal { mean: 0.0, std: (2.0 / fan_in as f64).sqrt(), seed })
}

fn add_channel_bias<T: Real>(y: &mut [T], bias: &[T], plane: usize) {
    let c = bias.len();
    for (i, chunk) in y.chunks_mut(plane).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn channel_sums<T: Real>(dy: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for (i, chunk) in dy.chunks(plane).enumerate() {
        db[i % channels] = db[i % channels] + chunk.iter().copied().sum::<T>();
    }
    db
}

fn sum_in_order<T: Real>(parts: Vec<Vec<T>>, into: &mut [T]) {
    for part in parts {
        for (d, p) in into.iter_mut().zip(part) {
            *d = *d + p;
        }
    }
}

/// 2-D cross-correlation with square kernels and zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T: Real> {
    /// `[out, in, k, k]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize, seed: u64) -> Result<Self> {
        let weight = kaiming(&[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, seed)?;
        Self::from_params(weight, Tensor::zeros(&[out_ch])?, stride, padding)
    }

    pub fn from_params(weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let (o, _, kh, kw) = weight.dims4()?;
        if kh != kw {
            return Err(Error::Parameter(format!("kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Parameter("stride must be positive".into()));
        }
        if bias.shape() != [o] {
            return shape_err(format!("bias {:?} for {o} filters", bias.shape()));
        }
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        if h + 2 * self.padding < k || w + 2 * self.padding < k {
            return shape_err(format!("{h}x{w} input too small for a {k}x{k} kernel with padding {}", self.padding));
        }
        Ok(((h + 2 * self.padding - k) / self.stride + 1, (w + 2 * self.padding - k) / self.stride + 1))
    }

    fn geometry(&self, x: &Tensor<T>) -> Result<(usize, Geometry)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_channels() {
            return shape_err(format!("conv expects {} input channels, got {c}", self.in_channels()));
        }
        let (small_h, small_w) = self.output_size(h, w)?;
        let g = Geometry { big_c: c, big_h: h, big_w: w, small_h, small_w, k: self.kernel(), stride: self.stride, pad: self.padding };
        Ok((n, g))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, g) = self.geometry(x)?;
        let oc = self.out_channels();
        let (in_len, out_len) = (g.big_c * g.big_h * g.big_w, oc * g.small_h * g.small_w);
        let mut y = vec![T::zero(); n * out_len];
        par::for_each_chunk(&mut y, out_len, |i, out| {
            correlate(&g, &x.data()[i * in_len..(i + 1) * in_len], self.weight.data(), oc, out);
        });
        add_channel_bias(&mut y, self.bias.data(), g.small_h * g.small_w);
        Tensor::from_vec(&[n, oc, g.small_h, g.small_w], y)
    }

    /// Returns the input gradient; weight and bias gradients are accumulated.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, g) = self.geometry(x)?;
        let oc = self.out_channels();
        if dy.shape() != [n, oc, g.small_h, g.small_w] {
            return shape_err(format!("conv upstream {:?} does not match output", dy.shape()));
        }
        let (in_len, out_len) = (g.big_c * g.big_h * g.big_w, oc * g.small_h * g.small_w);
        let mut dx = vec![T::zero(); n * in_len];
        let weight = self.weight.data();
        par::for_each_chunk(&mut dx, in_len, |i, dxi| {
            correlate_transpose(&g, &dy.data()[i * out_len..(i + 1) * out_len], weight, oc, dxi);
        });
        let parts = par::map(n, |i| {
            let mut dw = vec![T::zero(); weight.len()];
            weight_grad(&g, &x.data()[i * in_len..(i + 1) * in_len], &dy.data()[i * out_len..(i + 1) * out_len], oc, &mut dw);
            dw
        });
        let mut dw = vec![T::zero(); weight.len()];
        sum_in_order(parts, &mut dw);
        self.weight.accumulate_grad_slice(&dw);
        let db = channel_sums(dy.data(), oc, g.small_h * g.small_w);
        self.bias.accumulate_grad_slice(&db);
        Tensor::from_vec(x.shape(), dx)
    }
}

/// Learned upsampling: the adjoint of a strided [`Conv2d`], plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d<T: Real> {
    /// `[in, out, k, k]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize, output_padding: usize, seed: u64) -> Result<Self> {
        // each output pixel receives about in·k²/stride² taps
        let fan_in = (in_ch * kernel * kernel / (stride * stride)).max(1);
        let weight = kaiming(&[in_ch, out_ch, kernel, kernel], fan_in, seed)?;
        Self::from_params(weight, Tensor::zeros(&[out_ch])?, stride, padding, output_padding)
    }

    pub fn from_params(weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize, output_padding: usize) -> Result<Self> {
        let (_, o, kh, kw) = weight.dims4()?;
        if kh != kw {
            return Err(Error::Parameter(format!("kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Parameter("stride must be positive".into()));
        }
        if output_padding >= stride {
            return Err(Error::Parameter(format!("output_padding {output_padding} must be smaller than stride {stride}")));
        }
        if bias.shape() != [o] {
            return shape_err(format!("bias {:?} for {o} filters", bias.shape()));
        }
        Ok(Self { weight, bias, stride, padding, output_padding })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// `(in − 1)·stride − 2·padding + k + output_padding` per axis.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = |v: usize| -> Option<usize> {
            ((v - 1) * self.stride + self.kernel() + self.output_padding).checked_sub(2 * self.padding).filter(|&o| o > 0)
        };
        match (f(h), f(w)) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => shape_err(format!("transposed conv output for {h}x{w} input is empty")),
        }
    }

    fn geometry(&self, x: &Tensor<T>) -> Result<(usize, Geometry)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_channels() {
            return shape_err(format!("transposed conv expects {} input channels, got {c}", self.in_channels()));
        }
        let (big_h, big_w) = self.output_size(h, w)?;
        let g = Geometry { big_c: self.out_channels(), big_h, big_w, small_h: h, small_w: w, k: self.kernel(), stride: self.stride, pad: self.padding };
        Ok((n, g))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, g) = self.geometry(x)?;
        let ic = self.in_channels();
        let (in_len, out_len) = (ic * g.small_h * g.small_w, g.big_c * g.big_h * g.big_w);
        let mut y = vec![T::zero(); n * out_len];
        for i in 0..n {
            correlate_transpose(&g, &x.data()[i * in_len..(i + 1) * in_len], self.weight.data(), ic, &mut y[i * out_len..(i + 1) * out_len]);
        }
        add_channel_bias(&mut y, self.bias.data(), g.big_h * g.big_w);
        Tensor::from_vec(&[n, g.big_c, g.big_h, g.big_w], y)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, g) = self.geometry(x)?;
        let ic = self.in_channels();
        if dy.shape() != [n, g.big_c, g.big_h, g.big_w] {
            return shape_err(format!("transposed conv upstream {:?} does not match output", dy.shape()));
        }
        let (in_len, out_len) = (ic * g.small_h * g.small_w, g.big_c * g.big_h * g.big_w);
        let weight = self.weight.data();
        let mut dx = vec![T::zero(); n * in_len];
        par::for_each_chunk(&mut dx, in_len, |i, dxi| {
            correlate(&g, &dy.data()[i * out_len..(i + 1) * out_len], weight, ic, dxi);
        });
        let parts = par::map(n, |i| {
            let mut dw = vec![T::zero(); weight.len()];
            weight_grad(&g, &dy.data()[i * out_len..(i + 1) * out_len], &x.data()[i * in_len..(i + 1) * in_len], ic, &mut dw);
            dw
        });
        let mut dw = vec![T::zero(); weight.len()];
        sum_in_order(parts, &mut dw);
        self.weight.accumulate_grad_slice(&dw);
        let db = channel_sums(dy.data(), g.big_c, g.big_h * g.big_w);
        self.bias.accumulate_grad_slice(&db);
        Tensor::from_vec(x.shape(), dx)
    }
}

/// 1×1 convolution: a per-pixel linear map across channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointwiseConv<T: Real> {
    /// `[out, in, 1, 1]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> PointwiseConv<T> {
    pub fn new(in_ch: usize, out_ch: usize, seed: u64) -> Result<Self> {
        Ok(Self { weight: kaiming(&[out_ch, in_ch, 1, 1], in_ch, seed)?, bias: Tensor::zeros(&[out_ch])? })
    }

    pub fn zeroed(in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self { weight: Tensor::zeros(&[out_ch, in_ch, 1, 1])?, bias: Tensor::zeros(&[out_ch])? })
    }

    pub fn from_params(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (o, _, kh, kw) = weight.dims4()?;
        if (kh, kw) != (1, 1) || bias.shape() != [o] {
            return shape_err(format!("pointwise conv needs [out,in,1,1] weights and [out] bias, got {:?} / {:?}", weight.shape(), bias.shape()));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_channels() {
            return shape_err(format!("pointwise conv expects {} channels, got {c}", self.in_channels()));
        }
        Ok((n, h, w))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, h, w) = self.check(x)?;
        let (ic, oc, hw) = (self.in_channels(), self.out_channels(), h * w);
        let mut y = vec![T::zero(); n * oc * hw];
        par::for_each_chunk(&mut y, oc * hw, |i, out| {
            gemm(
                T::one(),
                MatRef::new(self.weight.data(), 0, oc, ic),
                MatRef::new(x.data(), i * ic * hw, ic, hw),
                T::zero(),
                MatMut::new(out, 0, oc, hw),
            );
        });
        add_channel_bias(&mut y, self.bias.data(), hw);
        Tensor::from_vec(&[n, oc, h, w], y)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, h, w) = self.check(x)?;
        let (ic, oc, hw) = (self.in_channels(), self.out_channels(), h * w);
        if dy.shape() != [n, oc, h, w] {
            return shape_err(format!("pointwise upstream {:?} does not match output", dy.shape()));
        }
        let weight = self.weight.data();
        let mut dx = vec![T::zero(); n * ic * hw];
        par::for_each_chunk(&mut dx, ic * hw, |i, out| {
            gemm(T::one(), MatRef::new(weight, 0, oc, ic).t(), MatRef::new(dy.data(), i * oc * hw, oc, hw), T::zero(), MatMut::new(out, 0, ic, hw));
        });
        let parts = par::map(n, |i| {
            let mut dw = vec![T::zero(); oc * ic];
            gemm(
                T::one(),
                MatRef::new(dy.data(), i * oc * hw, oc, hw),
                MatRef::new(x.data(), i * ic * hw, ic, hw).t(),
                T::zero(),
                MatMut::new(&mut dw, 0, oc, ic),
            );
            dw
        });
        let mut dw = vec![T::zero(); oc * ic];
        sum_in_order(parts, &mut dw);
        self.weight.accumulate_grad_slice(&dw);
        self.bias.accumulate_grad_slice(&channel_sums(dy.data(), oc, hw));
        Tensor::from_vec(x.shape(), dx)
    }
}

/// Per-channel `k×k` convolution, stride 1, "same" zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseConv2d<T: Real> {
    /// `[C, 1, k, k]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> DepthwiseConv2d<T> {
    pub fn new(channels: usize, kernel: usize, seed: u64) -> Result<Self> {
        let weight = kaiming(&[channels, 1, kernel, kernel], kernel * kernel, seed)?;
        Self::from_params(weight, Tensor::zeros(&[channels])?)
    }

    pub fn from_params(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (c, one, kh, kw) = weight.dims4()?;
        if one != 1 || kh != kw || kh % 2 == 0 || bias.shape() != [c] {
            return shape_err(format!("depthwise conv needs [C,1,k,k] odd-k weights and [C] bias, got {:?}", weight.shape()));
        }
        Ok(Self { weight, bias })
    }

    /// Delta kernels and zero bias: the identity map.
    pub fn identity(channels: usize, kernel: usize) -> Result<Self> {
        let mut weight = Tensor::zeros(&[channels, 1, kernel, kernel])?;
        let centre = (kernel / 2) * kernel + kernel / 2;
        for c in 0..channels {
            weight.data_mut()[c * kernel * kernel + centre] = T::one();
        }
        Self::from_params(weight, Tensor::zeros(&[channels])?)
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels() {
            return shape_err(format!("depthwise conv expects {} channels, got {c}", self.channels()));
        }
        Ok((n, c, h, w))
    }

    /// Visits every (tap, dst, src) triple of one plane.
    #[inline]
    fn taps(k: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
        let r = (k / 2) as isize;
        for ky in 0..k {
            let dy = ky as isize - r;
            for kx in 0..k {
                let dx = kx as isize - r;
                let tap = ky * k + kx;
                let (y0, y1) = ((-dy).max(0) as usize, (h as isize - dy.max(0)).max(0) as usize);
                let (x0, x1) = ((-dx).max(0) as usize, (w as isize - dx.max(0)).max(0) as usize);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    for x in x0..x1 {
                        f(tap, y * w + x, sy * w + (x as isize + dx) as usize);
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.check(x)?;
        let (k, plane) = (self.kernel(), h * w);
        let mut y = vec![T::zero(); n * c * plane];
        par::for_each_chunk(&mut y, plane, |p, out| {
            let ch = p % c;
            let src = &x.data()[p * plane..(p + 1) * plane];
            let wt = &self.weight.data()[ch * k * k..(ch + 1) * k * k];
            let b = self.bias.data()[ch];
            out.iter_mut().for_each(|v| *v = b);
            Self::taps(k, h, w, |t, d, s| out[d] = out[d] + wt[t] * src[s]);
        });
        Tensor::from_vec(&[n, c, h, w], y)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.check(x)?;
        if dy.shape() != x.shape() {
            return shape_err(format!("depthwise upstream {:?} does not match output", dy.shape()));
        }
        let (k, plane) = (self.kernel(), h * w);
        let weight = self.weight.data();
        let mut dx = vec![T::zero(); n * c * plane];
        par::for_each_chunk(&mut dx, plane, |p, out| {
            let ch = p % c;
            let g = &dy.data()[p * plane..(p + 1) * plane];
            let wt = &weight[ch * k * k..(ch + 1) * k * k];
            Self::taps(k, h, w, |t, d, s| out[s] = out[s] + wt[t] * g[d]);
        });
        let parts = par::map(n * c, |p| {
            let src = &x.data()[p * plane..(p + 1) * plane];
            let g = &dy.data()[p * plane..(p + 1) * plane];
            let mut dw = vec![T::zero(); k * k];
            Self::taps(k, h, w, |t, d, s| dw[t] = dw[t] + g[d] * src[s]);
            dw
        });
        let mut dw = vec![T::zero(); c * k * k];
        for (p, part) in parts.into_iter().enumerate() {
            let ch = p % c;
            for (d, v) in dw[ch * k * k..(ch + 1) * k * k].iter_mut().zip(part) {
                *d = *d + v;
            }
        }
        self.weight.accumulate_grad_slice(&dw);
        self.bias.accumulate_grad_slice(&channel_sums(dy.data(), c, plane));
        Tensor::from_vec(x.shape(), dx)
    }
}
