//! Finite-difference verification of every hand-written backward pass.
//!
//! Each component is checked in double precision against central differences,
//! for the input gradient and, where the component has parameters, for every
//! trainable tensor.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::{ConvTr, ModelConfig, ParamKind, Variant, Visit};
use crate::nn::{relu, relu_backward, AttentionConfig, BatchNorm2d, Conv2d, ConvProjection, ConvTranspose2d, MultiHeadAttention, ProjectionTriple};
use crate::rng;
use crate::tensor::{gradcheck, gradcheck_coords, matmul, matmul_backward, softmax, softmax_backward, Fill, FnDiff, Precision, Tensor};
use crate::train::{focal_loss_and_grad, FocalLossConfig};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPSILON: f64 = 1e-5;

/// Component names, in report order.
pub const COMPONENTS: [&str; 10] =
    ["conv2d", "conv_transpose2d", "batch_norm", "relu", "softmax", "matmul", "conv_projection", "attention", "focal_loss", "convtr_tiny"];

/// Coordinates probed per trainable tensor of the end-to-end model.
const MODEL_COORDS_PER_TENSOR: usize = 12;

/// Every ReLU input of the end-to-end check must sit at least this many probe
/// steps from the kink, or a central difference straddles it.
const KINK_MARGIN_STEPS: f64 = 10.0;
const KINK_REDRAWS: u64 = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub component: String,
    pub seeds: usize,
    pub max_rel_error: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

impl fmt::Display for GradcheckRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "pass" } else { "FAIL" };
        write!(f, "{:<18} seeds={:<3} max_rel_error={:.3e} {verdict}", self.component, self.seeds, self.max_rel_error)
    }
}

type T64 = Tensor<f64>;

fn normal(shape: &[usize], seed: u64) -> Result<T64> {
    Tensor::new(shape, Fill::Normal { mean: 0.0, std: 1.0, seed })
}

/// Multiplies an analytic gradient, to emulate a broken backward pass.
fn skew(g: T64, factor: f64) -> Result<T64> {
    if factor == 1.0 {
        return Ok(g);
    }
    let (shape, data) = (g.shape().to_vec(), g.into_data());
    Tensor::from_vec(&shape, data.into_iter().map(|v| v * factor).collect())
}

fn trainable_vector<L: Visit<f64>>(layer: &L) -> Vec<f64> {
    let mut out = Vec::new();
    layer.visit("", &mut |_, kind, t| {
        if kind == ParamKind::Trainable {
            out.extend_from_slice(t.data())
        }
    });
    out
}

fn load_trainables<L: Visit<f64>>(layer: &mut L, values: &[f64]) {
    let mut at = 0;
    layer.visit_mut("", &mut |_, kind, t| {
        if kind == ParamKind::Trainable {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[at..at + n]);
            t.clear_grad();
            at += n;
        }
    });
}

fn trainable_grads<L: Visit<f64>>(layer: &L) -> Vec<f64> {
    let mut out = Vec::new();
    layer.visit("", &mut |_, kind, t| {
        if kind == ParamKind::Trainable {
            match t.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
    });
    out
}

/// Offsets of `per_tensor` evenly spread coordinates in every trainable tensor.
fn sampled_coords<L: Visit<f64>>(layer: &L, per_tensor: usize, seed: u64) -> Vec<usize> {
    use rand::Rng as _;
    let mut g = rng::stream(seed, 0xc0de);
    let mut at = 0;
    let mut out = Vec::new();
    layer.visit("", &mut |_, kind, t| {
        if kind == ParamKind::Trainable {
            for _ in 0..per_tensor.min(t.len()) {
                out.push(at + g.random_range(0..t.len()));
            }
            at += t.len();
        }
    });
    out.sort_unstable();
    out.dedup();
    out
}

/// Input and parameter gradcheck of a layer. `fwd` runs the differentiated
/// forward; `bwd` runs forward then backward and returns the input gradient.
fn layer_check<L, F, B>(layer: &L, x: &T64, fwd: F, bwd: B, factor: f64, coords: Option<Vec<usize>>) -> Result<f64>
where
    L: Visit<f64> + Clone,
    F: Fn(&mut L, &T64) -> Result<T64>,
    B: Fn(&mut L, &T64, &T64) -> Result<T64>,
{
    let input = FnDiff {
        forward: |x: &T64| fwd(&mut layer.clone(), x),
        backward: |x: &T64, u: &T64| skew(bwd(&mut layer.clone(), x, u)?, factor),
    };
    let input_err = gradcheck(&input, x, GRADCHECK_EPSILON)?;
    let p0 = Tensor::from_vec(&[trainable_vector(layer).len()], trainable_vector(layer))?;
    let params = FnDiff {
        forward: |p: &T64| {
            let mut l = layer.clone();
            load_trainables(&mut l, p.data());
            fwd(&mut l, x)
        },
        backward: |p: &T64, u: &T64| {
            let mut l = layer.clone();
            load_trainables(&mut l, p.data());
            bwd(&mut l, x, u)?;
            skew(Tensor::from_vec(p.shape(), trainable_grads(&l))?, factor)
        },
    };
    let param_err = match coords {
        Some(c) => gradcheck_coords(&params, &p0, GRADCHECK_EPSILON, &c)?,
        None => gradcheck(&params, &p0, GRADCHECK_EPSILON)?,
    };
    Ok(input_err.max(param_err))
}

fn input_check<F, B>(x: &T64, fwd: F, bwd: B, factor: f64) -> Result<f64>
where
    F: Fn(&T64) -> Result<T64>,
    B: Fn(&T64, &T64) -> Result<T64>,
{
    let f = FnDiff { forward: |x: &T64| fwd(x), backward: |x: &T64, u: &T64| skew(bwd(x, u)?, factor) };
    gradcheck(&f, x, GRADCHECK_EPSILON)
}

fn stack(t: &ProjectionTriple<f64>) -> Result<T64> {
    let mut v = t.q.data().to_vec();
    v.extend_from_slice(t.k.data());
    v.extend_from_slice(t.v.data());
    let mut shape = vec![3];
    shape.extend_from_slice(t.q.shape());
    Tensor::from_vec(&shape, v)
}

fn unstack(x: &T64) -> Result<ProjectionTriple<f64>> {
    let shape = &x.shape()[1..];
    let n = x.len() / 3;
    let part = |i: usize| Tensor::from_vec(shape, x.data()[i * n..(i + 1) * n].to_vec());
    Ok(ProjectionTriple { q: part(0)?, k: part(1)?, v: part(2)? })
}

/// An input on which the tiny model is differentiable within a probe step.
fn smooth_point(model: &ConvTr<f64>, seed: u64) -> Result<T64> {
    for attempt in 0..KINK_REDRAWS {
        let x = normal(&[2, 2, 16, 16], rng::derive(seed, attempt))?;
        let (_, cache) = model.clone().forward_train(&x)?;
        if model.relu_margin(&cache) >= KINK_MARGIN_STEPS * GRADCHECK_EPSILON {
            return Ok(x);
        }
    }
    Err(Error::Parameter(format!("no input clear of ReLU kinks after {KINK_REDRAWS} draws")))
}

/// Tiny end-to-end configuration used by the `convtr_tiny` row.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        patch: 16,
        depth: 2,
        heads: 2,
        d_head: 4,
        widths: [4, 4, 6, 8],
        variant: Variant::ConvTr,
        precision: Precision::Double,
        ..ModelConfig::default()
    }
}

/// Max relative error of one component at one seed. `sabotaged` scales the
/// analytic gradient by 1.5, emulating a broken backward pass.
pub fn check_component(component: &str, seed: u64, sabotaged: bool) -> Result<f64> {
    let k = if sabotaged { 1.5 } else { 1.0 };
    let s = |tag: u64| rng::derive(seed, tag);
    match component {
        "conv2d" => {
            let conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, s(1))?;
            let x = normal(&[2, 2, 5, 6], s(2))?;
            layer_check(&conv, &x, |l, x| l.forward(x), |l, x, u| l.backward(x, u), k, None)
        }
        "conv_transpose2d" => {
            let conv = ConvTranspose2d::<f64>::new(3, 2, 3, 2, 1, 1, s(1))?;
            let x = normal(&[2, 3, 3, 4], s(2))?;
            layer_check(&conv, &x, |l, x| l.forward(x), |l, x, u| l.backward(x, u), k, None)
        }
        "batch_norm" => {
            let mut bn = BatchNorm2d::<f64>::new(3, 0.1, 1e-5)?;
            bn.scale = normal(&[3], s(1))?;
            bn.shift = normal(&[3], s(3))?;
            let x = normal(&[2, 3, 4, 4], s(2))?;
            layer_check(
                &bn,
                &x,
                |l, x| l.forward_train(x).map(|r| r.0),
                |l, x, u| {
                    let (_, cache) = l.forward_train(x)?;
                    l.backward(&cache, u)
                },
                k,
                None,
            )
        }
        "relu" => {
            let mut x = normal(&[3, 7], s(2))?;
            // keep samples away from the kink so central differences stay exact
            x.data_mut().iter_mut().for_each(|v| *v += if *v >= 0.0 { 1e-3 } else { -1e-3 });
            input_check(&x, |x| Ok(relu(x)), relu_backward, k)
        }
        "softmax" => {
            let x = normal(&[2, 3, 5], s(2))?;
            input_check(&x, |x| softmax(x, 1), |x, u| softmax_backward(&softmax(x, 1)?, u, 1), k)
        }
        "matmul" => {
            let a = normal(&[3, 4], s(1))?;
            let b = normal(&[4, 2], s(2))?;
            let da = input_check(&a, |a| matmul(a, &b), |a, u| matmul_backward(a, &b, u).map(|g| g.0), k)?;
            let db = input_check(&b, |b| matmul(&a, b), |b, u| matmul_backward(&a, b, u).map(|g| g.1), k)?;
            Ok(da.max(db))
        }
        "conv_projection" => {
            let proj = ConvProjection::<f64>::new(4, s(1))?;
            let x = normal(&[1, 4, 5, 5], s(2))?;
            layer_check(&proj, &x, |l, x| stack(&l.forward(x)?), |l, x, u| l.backward(x, &unstack(u)?), k, None)
        }
        "attention" => {
            let mha = MultiHeadAttention::<f64>::new(AttentionConfig { heads: 2, d_model: 8, d_head: 3 }, s(1))?;
            let x = normal(&[3, 1, 6, 8], s(2))?;
            layer_check(
                &mha,
                &x,
                |l, x| l.forward_train(&unstack(x)?).map(|r| r.0),
                |l, x, u| {
                    let (_, cache) = l.forward_train(&unstack(x)?)?;
                    stack(&l.backward(&cache, u)?)
                },
                k,
                None,
            )
        }
        "focal_loss" => {
            use rand::Rng as _;
            let logits = normal(&[1, 3, 4, 4], s(2))?;
            let mut g = rng::stream(seed, 3);
            let labels: Vec<u8> = (0..16).map(|_| g.random_range(0..3u8)).collect();
            let alpha: Vec<f64> = (0..3).map(|_| g.random_range(0.2..2.0)).collect();
            let cfg = FocalLossConfig::new(alpha, g.random_range(0.0..3.0))?;
            input_check(
                &logits,
                |x| Tensor::from_vec(&[1], vec![focal_loss_and_grad(x, &labels, &cfg, false)?.0]),
                |x, u| {
                    let grad = focal_loss_and_grad(x, &labels, &cfg, true)?.1.expect("requested");
                    skew(grad, u.data()[0])
                },
                k,
            )
        }
        "convtr_tiny" => {
            let model = ConvTr::<f64>::new(&tiny_model_config(), s(1))?;
            let x = smooth_point(&model, s(2))?;
            let coords = sampled_coords(&model, MODEL_COORDS_PER_TENSOR, seed);
            layer_check(
                &model,
                &x,
                |m, x| m.forward_train(x).map(|r| r.0),
                |m, x, u| {
                    let (_, cache) = m.forward_train(x)?;
                    m.backward(&cache, u)
                },
                k,
                Some(coords),
            )
        }
        other => Err(Error::Config(format!("unknown gradcheck component '{other}' (known: {})", COMPONENTS.join(", ")))),
    }
}

/// Runs every component over `seeds` seeds. `sabotage` names a component whose
/// backward is deliberately broken, for exercising the failure path.
pub fn gradcheck_suite(seeds: usize, sabotage: Option<&str>) -> Result<Vec<GradcheckRow>> {
    if let Some(name) = sabotage.filter(|n| !COMPONENTS.contains(n)) {
        return Err(Error::Config(format!("unknown gradcheck component '{name}'")));
    }
    COMPONENTS
        .iter()
        .map(|&c| {
            let mut worst = 0.0f64;
            for seed in 0..seeds as u64 {
                worst = worst.max(check_component(c, seed, sabotage == Some(c))?);
            }
            Ok(GradcheckRow { component: c.to_string(), seeds, max_rel_error: worst })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_passes_on_a_few_seeds() {
        let rows = gradcheck_suite(2, None).unwrap();
        assert_eq!(rows.len(), 10);
        for r in &rows {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn sabotage_fails_only_the_named_component() {
        let rows = gradcheck_suite(1, Some("batch_norm")).unwrap();
        let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.component.as_str()).collect();
        assert_eq!(failed, vec!["batch_norm"]);
        assert!(gradcheck_suite(1, Some("nope")).is_err());
    }
}

