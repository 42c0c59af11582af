//! Central-difference gradient checking.
//!
//! The scalar probed is `Σ r ⊙ f(x)` for a fixed pseudo-random `r`, so a
//! single analytic backward call (with upstream `r`) is compared against the
//! numeric derivative of every input coordinate.

use super::{Fill, Real, Tensor};
use crate::error::{Error, Result};
use crate::tensor::Precision;

/// A function with a hand-written vector-Jacobian product.
pub trait Differentiable<T: Real> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    /// Gradient of `Σ upstream ⊙ forward(x)` with respect to `x`.
    fn backward(&self, x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Adapts a pair of closures into a [`Differentiable`].
pub struct FnDiff<F, B> {
    pub forward: F,
    pub backward: B,
}

impl<T, F, B> Differentiable<T> for FnDiff<F, B>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
    B: Fn(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
{
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        (self.forward)(x)
    }

    fn backward(&self, x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        (self.backward)(x, upstream)
    }
}

const PROJECTION_SEED: u64 = 0x5EED_0F_D1FF;

/// An analytic derivative this small is treated as structurally zero (a bias
/// feeding batch norm, a key bias under softmax shift invariance). Central
/// differences of such a coordinate are pure rounding noise, so it passes when
/// the numeric value stays below [`ZERO_NUMERIC`] instead of being compared
/// relatively.
pub const ZERO_ANALYTIC: f64 = 1e-10;
pub const ZERO_NUMERIC: f64 = 1e-8;

/// Errors are taken relative to `max(|analytic|, |numeric|)`, but never to less
/// than this fraction of the largest gradient magnitude in the same check: a
/// coordinate far below the gradient's scale carries central-difference
/// rounding noise comparable to its own size.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Max relative error between analytic and central-difference gradients over
/// all coordinates of `x`.
pub fn gradcheck<T: Real, D: Differentiable<T>>(f: &D, x: &Tensor<T>, epsilon: f64) -> Result<f64> {
    let all: Vec<usize> = (0..x.len()).collect();
    gradcheck_coords(f, x, epsilon, &all)
}

/// As [`gradcheck`], restricted to the listed coordinates of `x`.
pub fn gradcheck_coords<T: Real, D: Differentiable<T>>(
    f: &D,
    x: &Tensor<T>,
    epsilon: f64,
    coords: &[usize],
) -> Result<f64> {
    if T::PRECISION != Precision::Double {
        return Err(Error::Precision("gradient checking requires double precision".into()));
    }
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Parameter(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    if let Some(&bad) = coords.iter().find(|&&c| c >= x.len()) {
        return Err(Error::Parameter(format!("coordinate {bad} out of range for {} elements", x.len())));
    }
    let y = f.forward(x)?;
    let r = Tensor::<T>::new(y.shape(), Fill::Uniform { lo: -1.0, hi: 1.0, seed: PROJECTION_SEED })?;
    let analytic = f.backward(x, &r)?;
    if analytic.shape() != x.shape() {
        return Err(Error::Shape(format!("backward returned {:?} for input {:?}", analytic.shape(), x.shape())));
    }
    let mut probe = x.clone();
    let mut pairs = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::of(orig.f64() + epsilon);
        let plus = f.forward(&probe)?;
        probe.data_mut()[i] = T::of(orig.f64() - epsilon);
        let minus = f.forward(&probe)?;
        probe.data_mut()[i] = orig;
        // difference elementwise before projecting keeps cancellation error small
        let diff: f64 = plus
            .data()
            .iter()
            .zip(minus.data())
            .zip(r.data())
            .map(|((p, m), w)| (p.f64() - m.f64()) * w.f64())
            .sum();
        let numeric = diff / (2.0 * epsilon);
        pairs.push((analytic.data()[i].f64(), numeric));
    }
    let scale = pairs.iter().fold(0.0f64, |m, (a, n)| m.max(a.abs()).max(n.abs()));
    let worst = pairs
        .iter()
        .filter(|(a, n)| !(a.abs() <= ZERO_ANALYTIC && n.abs() <= ZERO_NUMERIC))
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(SCALE_FLOOR * scale).max(1e-12))
        .fold(0.0, f64::max);
    Ok(worst)
}
