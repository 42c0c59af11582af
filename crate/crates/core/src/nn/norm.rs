use crate::error::{shape_err, Error, Result};
use crate::tensor::{Fill, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates only.
    Eval,
}

/// Per-channel batch normalization over `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<T: Real> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

/// What the backward pass needs from a train-mode forward.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T: Real> {
    xhat: Vec<T>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
}

impl<T: Real> BatchNormCache<T> {
    /// Normalized input `x̂` of the cached forward, in the input layout.
    pub fn xhat(&self) -> &[T] {
        &self.xhat
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Parameter(format!("batch-norm momentum {momentum} outside (0, 1)")));
        }
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("batch-norm eps {eps} must be positive")));
        }
        Ok(Self {
            scale: Tensor::new(&[channels], Fill::Ones)?,
            shift: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::new(&[channels], Fill::Ones)?,
            momentum,
            eps,
        })
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels() {
            return shape_err(format!("batch-norm over {} channels got {c}", self.channels()));
        }
        Ok((n, c, h * w))
    }

    /// Eval-mode normalization; never touches the running statistics.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, plane) = self.check(x)?;
        let coef: Vec<(T, T)> = (0..c)
            .map(|ch| {
                let inv = 1.0 / (self.running_var.data()[ch].f64() + self.eps).sqrt();
                let a = self.scale.data()[ch].f64() * inv;
                (T::of(a), T::of(self.shift.data()[ch].f64() - a * self.running_mean.data()[ch].f64()))
            })
            .collect();
        let mut y = x.data().to_vec();
        for (i, chunk) in y.chunks_mut(plane).enumerate() {
            let (a, b) = coef[i % c];
            chunk.iter_mut().for_each(|v| *v = a * *v + b);
        }
        Tensor::from_vec(x.shape(), y)
    }

    /// Train-mode normalization with batch statistics.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        let (n, c, plane) = self.check(x)?;
        let count = n * plane;
        if count < 2 {
            return Err(Error::Statistics(format!("batch-norm in train mode needs at least 2 values per channel, got {count}")));
        }
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, chunk) in x.data().chunks(plane).enumerate() {
            mean[i % c] += chunk.iter().map(|v| v.f64()).sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for (i, chunk) in x.data().chunks(plane).enumerate() {
            let m = mean[i % c];
            sq[i % c] += chunk.iter().map(|v| (v.f64() - m).powi(2)).sum::<f64>();
        }
        let var: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let mut xhat = x.data().to_vec();
        let mut y = vec![T::zero(); xhat.len()];
        for (i, (xc, yc)) in xhat.chunks_mut(plane).zip(y.chunks_mut(plane)).enumerate() {
            let ch = i % c;
            let (m, inv) = (mean[ch], inv_std[ch]);
            let (g, b) = (self.scale.data()[ch], self.shift.data()[ch]);
            for (xv, yv) in xc.iter_mut().zip(yc.iter_mut()) {
                *xv = T::of((xv.f64() - m) * inv);
                *yv = g * *xv + b;
            }
        }

        let mom = self.momentum;
        let unbias = count as f64 / (count - 1) as f64;
        for ch in 0..c {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = T::of((1.0 - mom) * rm.f64() + mom * mean[ch]);
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = T::of((1.0 - mom) * rv.f64() + mom * var[ch] * unbias);
        }
        Ok((Tensor::from_vec(x.shape(), y)?, BatchNormCache { xhat, inv_std, shape: x.shape().to_vec() }))
    }

    pub fn backward(&mut self, cache: &BatchNormCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if dy.shape() != cache.shape.as_slice() {
            return shape_err(format!("batch-norm upstream {:?} vs {:?}", dy.shape(), cache.shape));
        }
        let (n, c, plane) = self.check(dy)?;
        let count = (n * plane) as f64;
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for (i, (g, xh)) in dy.data().chunks(plane).zip(cache.xhat.chunks(plane)).enumerate() {
            let ch = i % c;
            for (&gv, &xv) in g.iter().zip(xh) {
                sum_dy[ch] += gv.f64();
                sum_dy_xhat[ch] += gv.f64() * xv.f64();
            }
        }
        let mut dx = vec![T::zero(); dy.len()];
        for (i, ((out, g), xh)) in dx.chunks_mut(plane).zip(dy.data().chunks(plane)).zip(cache.xhat.chunks(plane)).enumerate() {
            let ch = i % c;
            let k = self.scale.data()[ch].f64() * cache.inv_std[ch] / count;
            for ((o, &gv), &xv) in out.iter_mut().zip(g).zip(xh) {
                *o = T::of(k * (count * gv.f64() - sum_dy[ch] - xv.f64() * sum_dy_xhat[ch]));
            }
        }
        let dscale: Vec<T> = sum_dy_xhat.iter().map(|&v| T::of(v)).collect();
        let dshift: Vec<T> = sum_dy.iter().map(|&v| T::of(v)).collect();
        self.scale.accumulate_grad_slice(&dscale);
        self.shift.accumulate_grad_slice(&dshift);
        Tensor::from_vec(dy.shape(), dx)
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Masks `upstream` by `x > 0`; the gradient at exactly zero is zero.
pub fn relu_backward<T: Real>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != upstream.shape() {
        return shape_err(format!("relu upstream {:?} vs {:?}", upstream.shape(), x.shape()));
    }
    let data = x.data().iter().zip(upstream.data()).map(|(&v, &u)| if v > T::zero() { u } else { T::zero() }).collect();
    Tensor::from_vec(x.shape(), data)
}

/// In-place ReLU. Non-finite values pass through so they can be reported by the caller.
pub(crate) fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    x.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}
