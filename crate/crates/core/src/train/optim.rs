use crate::error::{Error, Result};
use crate::model::{ParamKind, Visit};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments of one named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T: Real> {
    pub name: String,
    pub first: Vec<T>,
    pub second: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub config: AdamConfig,
    pub step: u64,
    /// One entry per trainable tensor in visiting order; empty until the first step.
    pub moments: Vec<Moments<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: Vec::new() }
    }
}

/// One bias-corrected Adam update of every trainable tensor. Missing gradients count as zero.
pub fn adam_step<T: Real, M: Visit<T>>(model: &mut M, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    let fresh = state.moments.is_empty();
    let t = state.step + 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let (c1, c2) = (1.0 - beta1.powi(t as i32), 1.0 - beta2.powi(t as i32));
    // Validate before mutating so a mismatch leaves the model untouched.
    if !fresh {
        let mut i = 0;
        let mut err = None;
        model.visit("", &mut |name, kind, p| {
            if kind != ParamKind::Trainable || err.is_some() {
                return;
            }
            match state.moments.get(i) {
                Some(m) if m.name == name && m.first.len() == p.len() => {}
                Some(m) => err = Some(format!("moment '{}' ({}) does not match parameter '{name}' ({})", m.name, m.first.len(), p.len())),
                None => err = Some(format!("no moments for parameter '{name}'")),
            }
            i += 1;
        });
        if err.is_none() && i != state.moments.len() {
            err = Some(format!("{} moment buffers for {i} parameters", state.moments.len()));
        }
        if let Some(e) = err {
            return Err(Error::State(e));
        }
    }
    let mut i = 0;
    let moments = &mut state.moments;
    model.visit_mut("", &mut |name, kind, p: &mut Tensor<T>| {
        if kind != ParamKind::Trainable {
            return;
        }
        if fresh {
            moments.push(Moments { name: name.to_string(), first: vec![T::zero(); p.len()], second: vec![T::zero(); p.len()] });
        }
        let m = &mut moments[i];
        i += 1;
        let grad = p.grad().map(|g| g.to_vec());
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grad.as_ref().map_or(0.0, |g| g[j].f64());
            let m1 = beta1 * m.first[j].f64() + (1.0 - beta1) * g;
            let m2 = beta2 * m.second[j].f64() + (1.0 - beta2) * g * g;
            m.first[j] = T::of(m1);
            m.second[j] = T::of(m2);
            let update = lr * (m1 / c1) / ((m2 / c2).sqrt() + eps);
            *w = T::of(w.f64() - update);
        }
    });
    state.step = t;
    Ok(())
}

/// Step-decay schedule over 0-based epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { initial_lr: 1e-4, decay_factor: 0.5, decay_every: 10 }
    }
}

impl Schedule {
    /// `initial_lr · decay_factor^⌊epoch / decay_every⌋`
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * self.decay_factor.powi((epoch / self.decay_every.max(1)) as i32)
    }
}
