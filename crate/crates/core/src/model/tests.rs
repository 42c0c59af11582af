use super::*;
use crate::tensor::{Fill, Precision, Tensor};

fn tiny(variant: Variant, patch: usize) -> ModelConfig {
    ModelConfig { patch, depth: 2, heads: 2, d_head: 4, widths: [4, 4, 6, 8], variant, ..ModelConfig::default() }
}

fn tiny64(variant: Variant, patch: usize) -> ModelConfig {
    ModelConfig { precision: Precision::Double, ..tiny(variant, patch) }
}

fn input<T: crate::Real>(n: usize, p: usize, seed: u64) -> Tensor<T> {
    Tensor::new(&[n, 2, p, p], Fill::Normal { mean: 0.0, std: 1.0, seed }).unwrap()
}

#[test]
fn defaults_follow_the_published_recipe() {
    let cfg = ModelConfig::default();
    assert_eq!((cfg.patch, cfg.depth, cfg.heads, cfg.classes), (512, 5, 5, 3));
    assert_eq!(cfg.widths, [32, 32, 64, 128]);
    assert_eq!(cfg.attention().inner_width(), 120);
    cfg.validate().unwrap();
}

#[test]
fn full_model_has_four_down_convs_five_blocks_three_tconvs_and_a_head() {
    let m = ConvTr::<f32>::new(&ModelConfig::default(), 0).unwrap();
    let names: Vec<String> = m.names().into_iter().map(|(n, _)| n).collect();
    let count = |prefix: &str, suffix: &str| names.iter().filter(|n| n.starts_with(prefix) && n.ends_with(suffix)).count();
    assert_eq!(count("down.", ".conv.weight"), 4);
    assert_eq!(count("up.", ".conv.weight"), 3);
    assert_eq!(count("core.", ".norm.scale"), 5);
    assert_eq!(count("head.", "weight"), 1);
    assert_eq!(m.up[0].conv.weight.shape(), &[128, 128, 3, 3]);
    assert_eq!(m.up[2].conv.weight.shape(), &[64, 32, 3, 3]);
    assert!(matches!(m.head, Head::Conv(ref c) if c.weight.shape() == [3, 32, 7, 7]));
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
}

#[test]
fn autoencoder_has_no_core_parameters() {
    let m = ConvTr::<f32>::new(&ModelConfig { variant: Variant::AutoEncoder, ..ModelConfig::default() }, 0).unwrap();
    assert!(m.core.is_empty());
    assert!(m.names().iter().all(|(n, _)| !n.starts_with("core")));
}

#[test]
fn initialization_is_deterministic_and_count_depends_only_on_config() {
    let cfg = tiny64(Variant::ConvTr, 16);
    let (a, b, c) = (ConvTr::<f64>::new(&cfg, 5).unwrap(), ConvTr::<f64>::new(&cfg, 5).unwrap(), ConvTr::<f64>::new(&cfg, 6).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.parameter_count(), c.parameter_count());
}

#[test]
fn precision_mismatch_is_rejected() {
    let cfg = ModelConfig { precision: Precision::Double, ..tiny(Variant::ConvTr, 16) };
    assert!(matches!(ConvTr::<f32>::new(&cfg, 0), Err(crate::Error::Precision(_))));
}

#[test]
fn transformer_only_is_capped_at_128_pixels() {
    let cfg = ModelConfig { variant: Variant::TransformerOnly, patch: 256, ..ModelConfig::default() };
    let err = cfg.validate().unwrap_err().to_string();
    assert!(err.contains("128x128"), "{err}");
    let m = ConvTr::<f32>::new(&tiny(Variant::TransformerOnly, 16), 0).unwrap();
    assert!(matches!(m.forward(&input(1, 136, 0)), Err(crate::Error::Config(_))));
}

#[test]
fn end_to_end_shapes() {
    let cfg = tiny(Variant::ConvTr, 8);
    let m = ConvTr::<f32>::new(&cfg, 1).unwrap();
    for p in [8, 16, 64] {
        for n in [1, 2] {
            assert_eq!(m.forward(&input(n, p, 2)).unwrap().shape(), &[n, 3, p, p]);
        }
    }
    let x = input(1, 8, 3);
    let f = m.downsample(&x).unwrap();
    assert_eq!(f.shape(), &[1, 8, 1, 1]);
    assert_eq!(m.transform(&f).unwrap().shape(), f.shape());
    assert_eq!(m.upsample(&f).unwrap().shape(), &[1, 3, 8, 8]);
    assert!(m.forward(&input(1, 12, 0)).is_err());
    let ae = ConvTr::<f32>::new(&tiny(Variant::AutoEncoder, 16), 1).unwrap();
    assert_eq!(ae.forward(&input(1, 16, 2)).unwrap().shape(), &[1, 3, 16, 16]);
    let tr = ConvTr::<f32>::new(&tiny(Variant::TransformerOnly, 16), 1).unwrap();
    assert_eq!(tr.forward(&input(1, 12, 2)).unwrap().shape(), &[1, 3, 12, 12]);
}

#[test]
fn zeroed_residual_maps_make_the_core_the_identity() {
    let mut m = ConvTr::<f64>::new(&tiny64(Variant::ConvTr, 16), 4).unwrap();
    m.core.iter_mut().for_each(|b| b.zero_residual_maps());
    let f = Tensor::new(&[2, 8, 3, 3], Fill::Normal { mean: 0.0, std: 1.0, seed: 9 }).unwrap();
    assert_eq!(m.transform(&f).unwrap(), f);
    m.core.clear();
    assert_eq!(m.transform(&f).unwrap(), f);
}

#[test]
fn eval_forward_is_bit_deterministic() {
    let m = ConvTr::<f32>::new(&tiny(Variant::ConvTr, 16), 7).unwrap();
    let x = input(2, 16, 8);
    assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
}

#[test]
fn logits_are_unnormalized_and_probabilities_sum_to_one() {
    let m = ConvTr::<f64>::new(&tiny64(Variant::ConvTr, 16), 7).unwrap();
    let x = input(1, 16, 8);
    let logits = m.forward(&x).unwrap();
    let sum0: f64 = (0..3).map(|c| logits.data()[c * 256]).sum();
    assert!((sum0 - 1.0).abs() > 1e-6);
    let pred = m.predict(&x).unwrap();
    for p in 0..256 {
        let s: f64 = (0..3).map(|c| pred.probs.data()[c * 256 + p]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert_eq!(pred.classes.shape, [1, 16, 16]);
}

#[test]
fn argmax_breaks_ties_toward_the_lowest_class() {
    let scores = Tensor::<f64>::from_vec(&[1, 3, 1, 3], vec![0.0, 1.0, 0.5, 0.0, 3.0, 0.5, 0.0, 2.0, 0.5]).unwrap();
    assert_eq!(ClassMap::argmax(&scores).unwrap().data, vec![0, 1, 0]);
}

#[test]
fn non_finite_values_name_the_layer() {
    let mut m = ConvTr::<f32>::new(&tiny(Variant::ConvTr, 16), 1).unwrap();
    m.up[1].conv.bias.data_mut()[0] = f32::NAN;
    match m.forward(&input(1, 16, 0)) {
        Err(crate::Error::NumericFault { location }) => assert_eq!(location, "up.1"),
        other => panic!("expected numeric fault, got {other:?}"),
    }
}

#[test]
fn one_backward_pass_reaches_every_parameter() {
    for variant in Variant::ALL {
        let cfg = tiny64(variant, 16);
        let mut m = ConvTr::<f64>::new(&cfg, 3).unwrap();
        let x = input::<f64>(2, 16, 4);
        let (logits, cache) = m.forward_train(&x).unwrap();
        let up = Tensor::new(logits.shape(), Fill::Normal { mean: 0.0, std: 1.0, seed: 5 }).unwrap();
        let dx = m.backward(&cache, &up).unwrap();
        assert_eq!(dx.shape(), x.shape());
        for (name, norm) in m.grad_norms() {
            assert!(norm > 0.0, "{variant}: {name} received no gradient");
        }
    }
}

#[test]
fn cast_preserves_structure() {
    let m = ConvTr::<f32>::new(&tiny(Variant::ConvTr, 16), 1).unwrap();
    let d = m.cast::<f64>().unwrap();
    assert_eq!(d.config.precision, Precision::Double);
    assert_eq!(d.parameter_count(), m.parameter_count());
    assert_eq!(d.down[0].conv.weight.data()[3] as f32, m.down[0].conv.weight.data()[3]);
}

#[test]
fn attention_score_counter() {
    let tr = ModelConfig { variant: Variant::TransformerOnly, patch: 128, ..ModelConfig::default() };
    assert_eq!(tr.score_elements_per_head(128, 128), 268_435_456);
    assert_eq!(ModelConfig::default().score_elements_per_head(512, 512), 16_777_216);
    let ae = ModelConfig { variant: Variant::AutoEncoder, ..ModelConfig::default() };
    assert_eq!(ae.attention_macs(512, 512), 0);
}
