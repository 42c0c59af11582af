use super::*;
use crate::tensor::{gradcheck, Fill, FnDiff, Tensor};

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::new(shape, Fill::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap()
}

fn ones(shape: &[usize]) -> Tensor<f64> {
    Tensor::new(shape, Fill::Ones).unwrap()
}

/// Gradcheck of a layer's parameter tensor. `get`/`set` select the tensor,
/// `run` performs forward (+ backward when an upstream is given).
fn param_check<L: Clone>(
    layer: &L,
    get: impl Fn(&L) -> &Tensor<f64>,
    set: impl Fn(&mut L, &Tensor<f64>),
    fwd: impl Fn(&L) -> Tensor<f64>,
    bwd: impl Fn(&mut L, &Tensor<f64>),
) -> f64 {
    let f = FnDiff {
        forward: |p: &Tensor<f64>| {
            let mut l = layer.clone();
            set(&mut l, p);
            Ok(fwd(&l))
        },
        backward: |p: &Tensor<f64>, u: &Tensor<f64>| {
            let mut l = layer.clone();
            set(&mut l, p);
            bwd(&mut l, u);
            Tensor::from_vec(p.shape(), get(&l).grad().unwrap().to_vec())
        },
    };
    gradcheck(&f, get(layer), 1e-5).unwrap()
}

#[test]
fn conv_all_ones_example() {
    let conv = Conv2d::from_params(ones(&[1, 1, 3, 3]), Tensor::zeros(&[1]).unwrap(), 1, 1).unwrap();
    let y = conv.forward(&ones(&[1, 1, 3, 3])).unwrap();
    assert_eq!(y.data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
}

#[test]
fn conv_delta_kernel_is_identity() {
    let mut w = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
    w.data_mut()[4] = 1.0;
    let conv = Conv2d::from_params(w, Tensor::zeros(&[1]).unwrap(), 1, 1).unwrap();
    let x = rand(&[2, 1, 5, 4], 1);
    assert_eq!(conv.forward(&x).unwrap(), x);
}

#[test]
fn conv_shape_formula_and_channel_error() {
    let conv = Conv2d::<f32>::new(3, 4, 3, 2, 1, 0).unwrap();
    for h in [5usize, 8, 9, 16] {
        let y = conv.forward(&Tensor::zeros(&[1, 3, h, h + 1]).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 4, (h + 2 - 3) / 2 + 1, (h + 1 + 2 - 3) / 2 + 1]);
    }
    assert!(matches!(conv.forward(&Tensor::zeros(&[1, 2, 8, 8]).unwrap()), Err(crate::Error::Shape(_))));
}

#[test]
#[ignore = "allocates ~1 GB; run with --ignored"]
fn first_layer_keeps_full_resolution_at_batch_16() {
    let conv = Conv2d::<f32>::new(2, 32, 7, 1, 3, 0).unwrap();
    let y = conv.forward(&Tensor::zeros(&[16, 2, 512, 512]).unwrap()).unwrap();
    assert_eq!(y.shape(), &[16, 32, 512, 512]);
}

#[test]
fn first_layer_keeps_full_resolution() {
    let conv = Conv2d::<f32>::new(2, 32, 7, 1, 3, 0).unwrap();
    let y = conv.forward(&Tensor::zeros(&[1, 2, 512, 512]).unwrap()).unwrap();
    assert_eq!(y.shape(), &[1, 32, 512, 512]);
}

#[test]
fn conv_gradcheck_input_weight_bias() {
    let conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, 9).unwrap();
    let x = rand(&[2, 2, 5, 6], 2);
    let f = FnDiff {
        forward: |x: &Tensor<f64>| conv.forward(x),
        backward: |x: &Tensor<f64>, u: &Tensor<f64>| conv.clone().backward(x, u),
    };
    assert!(gradcheck(&f, &x, 1e-5).unwrap() < 1e-6);
    let fwd = |l: &Conv2d<f64>| l.forward(&x).unwrap();
    let bwd = |l: &mut Conv2d<f64>, u: &Tensor<f64>| {
        l.backward(&x, u).unwrap();
    };
    assert!(param_check(&conv, |l| &l.weight, |l, p| l.weight = p.clone(), fwd, bwd) < 1e-6);
    assert!(param_check(&conv, |l| &l.bias, |l, p| l.bias = p.clone(), fwd, bwd) < 1e-6);
}

#[test]
fn tconv_upsamples_by_two() {
    let t = ConvTranspose2d::<f32>::new(128, 64, 3, 2, 1, 1, 0).unwrap();
    let y = t.forward(&Tensor::zeros(&[1, 128, 64, 64]).unwrap()).unwrap();
    assert_eq!(y.shape(), &[1, 64, 128, 128]);
}

#[test]
fn tconv_identity_and_invalid_output_padding() {
    let mut w = Tensor::zeros(&[3, 3, 1, 1]).unwrap();
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let t = ConvTranspose2d::from_params(w, Tensor::zeros(&[3]).unwrap(), 1, 0, 0).unwrap();
    let x = rand(&[1, 3, 4, 5], 3);
    assert_eq!(t.forward(&x).unwrap(), x);
    let err = ConvTranspose2d::<f64>::new(2, 2, 3, 2, 1, 2, 0);
    assert!(matches!(err, Err(crate::Error::Parameter(_))));
}

#[test]
fn tconv_is_the_adjoint_of_conv_for_twenty_instances() {
    for seed in 0..20u64 {
        let (cin, cout, k, stride, pad) = [(2, 3, 3, 2, 1), (3, 2, 3, 1, 1), (1, 4, 7, 1, 3), (2, 2, 1, 1, 0)][seed as usize % 4];
        let conv = Conv2d::<f64>::new(cin, cout, k, stride, pad, seed).unwrap();
        let h = 6 + seed as usize % 3;
        let x = rand(&[2, cin, h, h], 100 + seed);
        let cx = conv.forward(&x).unwrap();
        let y = rand(cx.shape(), 200 + seed);
        // the conv weight [out,in,k,k] read as a transposed-conv weight [in_t,out_t,k,k]
        let (_, _, ho, wo) = cx.dims4().unwrap();
        let output_padding = h + 2 * pad - k - (ho - 1) * stride;
        let t = ConvTranspose2d::from_params(conv.weight.clone(), Tensor::zeros(&[cin]).unwrap(), stride, pad, output_padding).unwrap();
        let ty = t.forward(&y).unwrap();
        assert_eq!(ty.shape(), x.shape());
        let lhs = cx.dot(&y).unwrap() - conv.bias.data().iter().enumerate().map(|(c, b)| {
            b * (0..2).map(|n| y.data()[(n * cout + c) * ho * wo..(n * cout + c + 1) * ho * wo].iter().sum::<f64>()).sum::<f64>()
        }).sum::<f64>();
        let rhs = x.dot(&ty).unwrap();
        assert!((lhs - rhs).abs() < 1e-6 * lhs.abs().max(1.0), "seed {seed}: {lhs} vs {rhs}");
    }
}

#[test]
fn tconv_gradcheck() {
    let t = ConvTranspose2d::<f64>::new(3, 2, 3, 2, 1, 1, 5).unwrap();
    let x = rand(&[2, 3, 3, 4], 4);
    let f = FnDiff {
        forward: |x: &Tensor<f64>| t.forward(x),
        backward: |x: &Tensor<f64>, u: &Tensor<f64>| t.clone().backward(x, u),
    };
    assert!(gradcheck(&f, &x, 1e-5).unwrap() < 1e-6);
    let fwd = |l: &ConvTranspose2d<f64>| l.forward(&x).unwrap();
    let bwd = |l: &mut ConvTranspose2d<f64>, u: &Tensor<f64>| {
        l.backward(&x, u).unwrap();
    };
    assert!(param_check(&t, |l| &l.weight, |l, p| l.weight = p.clone(), fwd, bwd) < 1e-6);
    assert!(param_check(&t, |l| &l.bias, |l, p| l.bias = p.clone(), fwd, bwd) < 1e-6);
}

#[test]
fn pointwise_matches_one_by_one_conv() {
    let pw = PointwiseConv::<f64>::new(4, 3, 7).unwrap();
    let mut bias = rand(&[3], 8);
    bias.data_mut()[0] = 0.25;
    let pw = PointwiseConv::from_params(pw.weight, bias).unwrap();
    let conv = Conv2d::from_params(pw.weight.clone(), pw.bias.clone(), 1, 0).unwrap();
    let x = rand(&[2, 4, 5, 3], 9);
    let (a, b) = (pw.forward(&x).unwrap(), conv.forward(&x).unwrap());
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn pointwise_identity_and_shape() {
    let branch = ProjectionBranch::<f64>::identity(3).unwrap();
    let x = rand(&[1, 3, 2, 2], 10);
    assert_eq!(branch.pointwise.forward(&x).unwrap(), x);
    let pw = PointwiseConv::<f32>::new(128, 128, 0).unwrap();
    assert_eq!(pw.forward(&Tensor::zeros(&[1, 128, 64, 64]).unwrap()).unwrap().shape(), &[1, 128, 64, 64]);
}

#[test]
fn pointwise_gradcheck() {
    let pw = PointwiseConv::<f64>::new(3, 4, 1).unwrap();
    let x = rand(&[2, 3, 3, 3], 11);
    let f = FnDiff {
        forward: |x: &Tensor<f64>| pw.forward(x),
        backward: |x: &Tensor<f64>, u: &Tensor<f64>| pw.clone().backward(x, u),
    };
    assert!(gradcheck(&f, &x, 1e-5).unwrap() < 1e-6);
    let fwd = |l: &PointwiseConv<f64>| l.forward(&x).unwrap();
    let bwd = |l: &mut PointwiseConv<f64>, u: &Tensor<f64>| {
        l.backward(&x, u).unwrap();
    };
    assert!(param_check(&pw, |l| &l.weight, |l, p| l.weight = p.clone(), fwd, bwd) < 1e-6);
}

#[test]
fn depthwise_gradcheck() {
    let dw = DepthwiseConv2d::<f64>::new(3, 3, 2).unwrap();
    let x = rand(&[2, 3, 4, 5], 12);
    let f = FnDiff {
        forward: |x: &Tensor<f64>| dw.forward(x),
        backward: |x: &Tensor<f64>, u: &Tensor<f64>| dw.clone().backward(x, u),
    };
    assert!(gradcheck(&f, &x, 1e-5).unwrap() < 1e-6);
    let fwd = |l: &DepthwiseConv2d<f64>| l.forward(&x).unwrap();
    let bwd = |l: &mut DepthwiseConv2d<f64>, u: &Tensor<f64>| {
        l.backward(&x, u).unwrap();
    };
    assert!(param_check(&dw, |l| &l.weight, |l, p| l.weight = p.clone(), fwd, bwd) < 1e-6);
    assert!(param_check(&dw, |l| &l.bias, |l, p| l.bias = p.clone(), fwd, bwd) < 1e-6);
}

#[test]
fn depthwise_matches_grouped_reference() {
    let dw = DepthwiseConv2d::<f64>::new(2, 3, 4).unwrap();
    let x = rand(&[1, 2, 4, 4], 13);
    let y = dw.forward(&x).unwrap();
    // each channel alone through a dense 1-channel conv
    for c in 0..2 {
        let w = Tensor::from_vec(&[1, 1, 3, 3], dw.weight.data()[c * 9..(c + 1) * 9].to_vec()).unwrap();
        let conv = Conv2d::from_params(w, Tensor::zeros(&[1]).unwrap(), 1, 1).unwrap();
        let xc = Tensor::from_vec(&[1, 1, 4, 4], x.data()[c * 16..(c + 1) * 16].to_vec()).unwrap();
        let yc = conv.forward(&xc).unwrap();
        for (a, b) in yc.data().iter().zip(&y.data()[c * 16..(c + 1) * 16]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn projection_shapes_at_full_scale() {
    let p = ConvProjection::<f32>::new(128, 0).unwrap();
    let t = p.forward(&Tensor::zeros(&[1, 128, 64, 64]).unwrap()).unwrap();
    for m in [&t.q, &t.k, &t.v] {
        assert_eq!(m.shape(), &[1, 4096, 128]);
    }
}

#[test]
fn identity_projection_is_a_pure_reshape() {
    let branch = ProjectionBranch::<f64>::identity(4).unwrap();
    let x = rand(&[2, 4, 3, 5], 14);
    let tokens = branch.forward(&x).unwrap();
    assert_eq!(tokens, flatten_tokens(&x).unwrap());
    assert_eq!(unflatten_tokens(&tokens, 3, 5).unwrap(), x);
}

#[test]
fn projection_branch_gradcheck() {
    let branch = ProjectionBranch::<f64>::new(4, 3).unwrap();
    let x = rand(&[1, 4, 5, 5], 15);
    let f = FnDiff {
        forward: |x: &Tensor<f64>| branch.forward(x),
        backward: |x: &Tensor<f64>, u: &Tensor<f64>| branch.clone().backward(x, u),
    };
    assert!(gradcheck(&f, &x, 1e-5).unwrap() < 1e-4);
}

fn stack(t: &ProjectionTriple<f64>) -> Tensor<f64> {
    let mut v = t.q.data().to_vec();
    v.extend_from_slice(t.k.data());
    v.extend_from_slice(t.v.data());
    let mut shape = vec![3];
    shape.extend_from_slice(t.q.shape());
    Tensor::from_vec(&shape, v).unwrap()
}

fn unstack(x: &Tensor<f64>) -> ProjectionTriple<f64> {
    let shape = &x.shape()[1..];
    let n = x.len() / 3;
    let part = |i: usize| Tensor::from_vec(shape, x.data()[i * n..(i + 1) * n].to_vec()).unwrap();
    ProjectionTriple { q: part(0), k: part(1), v: part(2) }
}

#[test]
fn attention_gradcheck_six_tokens_two_heads() {
    let cfg = AttentionConfig { heads: 2, d_model: 8, d_head: 3 };
    let mha = MultiHeadAttention::<f64>::new(cfg, 21).unwrap();
    let x = rand(&[3, 1, 6, 8], 16);
    let f = FnDiff {
        forward: |x: &Tensor<f64>| mha.forward_train(&unstack(x)).map(|r| r.0),
        backward: |x: &Tensor<f64>, u: &Tensor<f64>| {
            let mut m = mha.clone();
            let (_, cache) = m.forward_train(&unstack(x))?;
            Ok(stack(&m.backward(&cache, u)?))
        },
    };
    assert!(gradcheck(&f, &x, 1e-5).unwrap() < 1e-4);
    let t = unstack(&x);
    let fwd = |l: &MultiHeadAttention<f64>| l.forward_train(&t).unwrap().0;
    let bwd = |l: &mut MultiHeadAttention<f64>, u: &Tensor<f64>| {
        let (_, cache) = l.forward_train(&t).unwrap();
        l.backward(&cache, u).unwrap();
    };
    assert!(param_check(&mha, |l| &l.query.weight, |l, p| l.query.weight = p.clone(), fwd, bwd) < 1e-4);
    assert!(param_check(&mha, |l| &l.key.weight, |l, p| l.key.weight = p.clone(), fwd, bwd) < 1e-4);
    assert!(param_check(&mha, |l| &l.value.bias, |l, p| l.value.bias = p.clone(), fwd, bwd) < 1e-4);
    assert!(param_check(&mha, |l| &l.output.weight, |l, p| l.output.weight = p.clone(), fwd, bwd) < 1e-4);
}

#[test]
fn single_token_attends_to_itself() {
    let cfg = AttentionConfig { heads: 2, d_model: 4, d_head: 2 };
    let mha = MultiHeadAttention::<f64>::new(cfg, 1).unwrap();
    let t = unstack(&rand(&[3, 1, 1, 4], 17));
    let (y, cache) = mha.forward_train(&t).unwrap();
    assert!(cache.weights().unwrap().data().iter().all(|&w| w == 1.0));
    // output = out_map(value_map(v))
    let v = mha.value.apply(t.v.data(), 1);
    let want = mha.output.apply(&v, 1);
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn identical_keys_give_uniform_weights() {
    let cfg = AttentionConfig { heads: 2, d_model: 4, d_head: 3 };
    let mha = MultiHeadAttention::<f64>::new(cfg, 2).unwrap();
    let mut t = unstack(&rand(&[3, 1, 5, 4], 18));
    let row = t.k.data()[..4].to_vec();
    for r in 0..5 {
        t.k.data_mut()[r * 4..(r + 1) * 4].copy_from_slice(&row);
    }
    let (_, cache) = mha.forward_train(&t).unwrap();
    for w in cache.weights().unwrap().data() {
        assert!((w - 0.2).abs() < 1e-12);
    }
}

#[test]
fn attention_rows_sum_to_one_and_infer_matches_training_path() {
    let cfg = AttentionConfig { heads: 3, d_model: 6, d_head: 4 };
    let mha = MultiHeadAttention::<f64>::new(cfg, 3).unwrap();
    let t = unstack(&rand(&[3, 2, 300, 6], 19));
    let (y, cache) = mha.forward_train(&t).unwrap();
    for row in cache.weights().unwrap().data().chunks(300) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let streamed = mha.infer(&t).unwrap();
    for (a, b) in y.data().iter().zip(streamed.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_rejects_wrong_width() {
    let mha = MultiHeadAttention::<f64>::new(AttentionConfig { heads: 1, d_model: 4, d_head: 2 }, 0).unwrap();
    let t = unstack(&rand(&[3, 1, 2, 5], 20));
    assert!(mha.forward_train(&t).is_err());
}
