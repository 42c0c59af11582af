use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `α_y (1 − p_t)^γ · CE`, averaged over every pixel of the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FocalLossConfig {
    /// Per-class weights indexed by the ground-truth class.
    pub alpha: Vec<f64>,
    pub gamma: f64,
}

impl FocalLossConfig {
    pub fn new(alpha: Vec<f64>, gamma: f64) -> Result<Self> {
        if alpha.is_empty() || alpha.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::Parameter(format!("focal alpha {alpha:?} must be non-empty and positive")));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::Parameter(format!("focal gamma {gamma} must be non-negative")));
        }
        Ok(Self { alpha, gamma })
    }

    pub fn uniform(classes: usize, gamma: f64) -> Result<Self> {
        Self::new(vec![1.0; classes], gamma)
    }

    /// Inverse class frequency normalized to mean one over the classes that occur.
    /// Classes that never occur get weight one.
    pub fn inverse_frequency(counts: &[u64], gamma: f64) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        let inv: Vec<Option<f64>> = counts.iter().map(|&c| (c > 0).then(|| total as f64 / c as f64)).collect();
        let present: Vec<f64> = inv.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Data("no labelled pixels to derive class weights from".into()));
        }
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        Self::new(inv.into_iter().map(|v| v.map_or(1.0, |v| v / mean)).collect(), gamma)
    }
}

struct Pixels {
    n: usize,
    c: usize,
    hw: usize,
}

fn layout<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> Result<Pixels> {
    let (n, c, h, w) = logits.dims4()?;
    if labels.len() != n * h * w {
        return Err(Error::Shape(format!("{} labels for logits {:?}", labels.len(), logits.shape())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Data(format!("label {bad} outside [0, {c})")));
    }
    Ok(Pixels { n, c, hw: h * w })
}

/// Log-softmax at one pixel; returns `(log p_label, probabilities)`.
fn log_softmax_at<T: Real>(logits: &[T], px: &Pixels, b: usize, p: usize, label: usize, probs: &mut [f64]) -> f64 {
    let base = b * px.c * px.hw + p;
    let z = |k: usize| logits[base + k * px.hw].f64();
    let m = (0..px.c).map(z).fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (k, q) in probs.iter_mut().enumerate() {
        *q = (z(k) - m).exp();
        s += *q;
    }
    probs.iter_mut().for_each(|q| *q /= s);
    z(label) - m - s.ln()
}

/// Per-pixel `−log softmax(logits)[label]`, shape `[N, H, W]`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> Result<Tensor<T>> {
    let px = layout(logits, labels)?;
    let (_, _, h, w) = logits.dims4()?;
    let mut probs = vec![0.0; px.c];
    let mut out = Vec::with_capacity(labels.len());
    for b in 0..px.n {
        for p in 0..px.hw {
            let y = labels[b * px.hw + p] as usize;
            out.push(T::of(-log_softmax_at(logits.data(), &px, b, p, y, &mut probs)));
        }
    }
    Tensor::from_vec(&[px.n, h, w], out)
}

/// Gradient of `Σ upstream · CE` with respect to the logits.
pub fn cross_entropy_backward<T: Real>(logits: &Tensor<T>, labels: &[u8], upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let px = layout(logits, labels)?;
    if upstream.len() != labels.len() {
        return Err(Error::Shape("cross-entropy upstream does not match the label map".into()));
    }
    let mut probs = vec![0.0; px.c];
    let mut grad = vec![T::zero(); logits.len()];
    for b in 0..px.n {
        for p in 0..px.hw {
            let i = b * px.hw + p;
            let y = labels[i] as usize;
            log_softmax_at(logits.data(), &px, b, p, y, &mut probs);
            let u = upstream.data()[i].f64();
            for (k, q) in probs.iter().enumerate() {
                let delta = if k == y { 1.0 } else { 0.0 };
                grad[b * px.c * px.hw + k * px.hw + p] = T::of(u * (q - delta));
            }
        }
    }
    Tensor::from_vec(logits.shape(), grad)
}

/// Mean focal loss and, when `with_grad`, its gradient with respect to the logits.
pub fn focal_loss_and_grad<T: Real>(
    logits: &Tensor<T>,
    labels: &[u8],
    cfg: &FocalLossConfig,
    with_grad: bool,
) -> Result<(f64, Option<Tensor<T>>)> {
    let px = layout(logits, labels)?;
    if cfg.alpha.len() != px.c {
        return Err(Error::Parameter(format!("{} focal weights for {} classes", cfg.alpha.len(), px.c)));
    }
    let count = labels.len() as f64;
    let g = cfg.gamma;
    let mut probs = vec![0.0; px.c];
    let mut grad = if with_grad { vec![T::zero(); logits.len()] } else { Vec::new() };
    let mut total = 0.0;
    for b in 0..px.n {
        for p in 0..px.hw {
            let y = labels[b * px.hw + p] as usize;
            let log_pt = log_softmax_at(logits.data(), &px, b, p, y, &mut probs);
            let a = cfg.alpha[y];
            let one_minus = -log_pt.exp_m1();
            let weight = one_minus.powf(g);
            total += a * weight * -log_pt;
            if with_grad {
                // dL/dz_k = α (δ_ky − p_k) [γ (1−p_t)^{γ−1} p_t log p_t − (1−p_t)^γ]
                let modulating = if g == 0.0 || one_minus == 0.0 { 0.0 } else { g * one_minus.powf(g - 1.0) * log_pt.exp() * log_pt };
                let common = a * (modulating - weight) / count;
                for (k, q) in probs.iter().enumerate() {
                    let delta = if k == y { 1.0 } else { 0.0 };
                    grad[b * px.c * px.hw + k * px.hw + p] = T::of(common * (delta - q));
                }
            }
        }
    }
    let grad = if with_grad { Some(Tensor::from_vec(logits.shape(), grad)?) } else { None };
    Ok((total / count, grad))
}

pub fn focal_loss<T: Real>(logits: &Tensor<T>, labels: &[u8], cfg: &FocalLossConfig) -> Result<f64> {
    Ok(focal_loss_and_grad(logits, labels, cfg, false)?.0)
}

/// Gradient of the mean focal loss scaled by `upstream`.
pub fn focal_loss_backward<T: Real>(logits: &Tensor<T>, labels: &[u8], cfg: &FocalLossConfig, upstream: f64) -> Result<Tensor<T>> {
    let mut g = focal_loss_and_grad(logits, labels, cfg, true)?.1.expect("requested");
    if upstream != 1.0 {
        g.data_mut().iter_mut().for_each(|v| *v = T::of(v.f64() * upstream));
    }
    Ok(g)
}
