use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use convtr::data::{extract_sample, generate_scene, ChannelStats, CropSampler, Scene, SynthConfig, Window};
use convtr::eval::{miou, plan_tiles, ConfusionMatrix};
use convtr::model::{ConvTr, ModelConfig};
use convtr::nn::{AttentionConfig, Conv2d, ConvTranspose2d, MultiHeadAttention, ProjectionTriple};
use convtr::rng;
use convtr::tensor::{elementwise, matmul, softmax, BinaryOp};
use convtr::train::{focal_loss, focal_loss_backward, FocalLossConfig, Schedule, TrainConfig, Trainer};
use convtr::{Fill, Precision, Tensor};

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn small_scene(h: usize, w: usize, smoothness: f64, seed: u64) -> Scene {
    generate_scene(&SynthConfig { height: h, width: w, smoothness, seed, ..SynthConfig::default() }, format!("p{seed}")).unwrap()
}

fn window_classes(scene: &Scene, win: Window, patch: usize) -> usize {
    let mut seen = [false; 3];
    for r in win.row..win.row + patch {
        for c in win.col..win.col + patch {
            seen[scene.labels[r * scene.width + c] as usize] = true;
        }
    }
    seen.iter().filter(|&&s| s).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one(rows in 1usize..6, cols in 1usize..40, mag in 1.0f64..1e4, seed in any::<u64>(), axis in 0usize..2) {
        let x = uniform(&[rows, cols], -mag, mag, seed);
        let y = softmax(&x, axis).unwrap();
        let (outer, inner) = if axis == 1 { (rows, cols) } else { (cols, rows) };
        for o in 0..outer {
            let s: f64 = (0..inner).map(|i| if axis == 1 { y.data()[o * cols + i] } else { y.data()[i * cols + o] }).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let xf = Tensor::<f32>::from_vec(x.shape(), x.data().iter().map(|&v| v as f32).collect()).unwrap();
        let yf = softmax(&xf, axis).unwrap();
        if axis == 1 {
            for o in 0..rows {
                let s: f32 = yf.data()[o * cols..(o + 1) * cols].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn softmax_ignores_a_constant_shift(cols in 2usize..20, shift in -100.0f64..100.0, seed in any::<u64>()) {
        let x = uniform(&[3, cols], -20.0, 20.0, seed);
        let shifted = Tensor::from_vec(x.shape(), x.data().iter().map(|v| v + shift).collect()).unwrap();
        let (a, b) = (softmax(&x, 1).unwrap(), softmax(&shifted, 1).unwrap());
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn adding_zero_with_broadcast_is_an_identity(a in 1usize..4, b in 1usize..5, c in 1usize..6, seed in any::<u64>()) {
        let x = uniform(&[a, b, c], -1e3, 1e3, seed);
        let zero = Tensor::<f64>::zeros(&[b, c]).unwrap();
        prop_assert_eq!(elementwise(&x, &zero, BinaryOp::Add).unwrap(), x);
    }

    #[test]
    fn ops_are_deterministic(m in 1usize..12, k in 1usize..12, n in 1usize..12, seed in any::<u64>()) {
        let (a, b) = (uniform(&[m, k], -1.0, 1.0, seed), uniform(&[k, n], -1.0, 1.0, seed ^ 1));
        let (x, y) = (matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
        prop_assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn transposed_conv_is_the_adjoint_of_conv(
        cin in 1usize..4, cout in 1usize..4, k in prop::sample::select(vec![1usize, 3, 5, 7]),
        stride in 1usize..3, h in 7usize..12, seed in any::<u64>(),
    ) {
        let pad = k / 2;
        let mut conv = Conv2d::<f64>::new(cin, cout, k, stride, pad, seed).unwrap();
        conv.bias = Tensor::zeros(&[cout]).unwrap();
        let x = uniform(&[2, cin, h, h], -1.0, 1.0, seed ^ 2);
        let cx = conv.forward(&x).unwrap();
        let y = uniform(cx.shape(), -1.0, 1.0, seed ^ 3);
        let ho = cx.shape()[2];
        let output_padding = h + 2 * pad - k - (ho - 1) * stride;
        let t = ConvTranspose2d::from_params(conv.weight.clone(), Tensor::zeros(&[cin]).unwrap(), stride, pad, output_padding).unwrap();
        let ty = t.forward(&y).unwrap();
        prop_assert_eq!(ty.shape(), x.shape());
        let (lhs, rhs) = (cx.dot(&y).unwrap(), x.dot(&ty).unwrap());
        prop_assert!((lhs - rhs).abs() < 1e-6 * lhs.abs().max(1.0));
    }

    #[test]
    fn attention_rows_sum_to_one_and_ignore_key_bias_shifts(tokens in 1usize..20, heads in 1usize..4, seed in any::<u64>()) {
        let cfg = AttentionConfig { heads, d_model: 8, d_head: 3 };
        let mut mha = MultiHeadAttention::<f64>::new(cfg, seed).unwrap();
        let t = ProjectionTriple {
            q: uniform(&[2, tokens, 8], -2.0, 2.0, seed ^ 1),
            k: uniform(&[2, tokens, 8], -2.0, 2.0, seed ^ 2),
            v: uniform(&[2, tokens, 8], -2.0, 2.0, seed ^ 3),
        };
        let (out, cache) = mha.forward_train(&t).unwrap();
        let w = cache.weights().unwrap();
        for row in w.data().chunks(tokens) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        // a shared key offset adds q·c to every score of a row
        mha.key.bias = uniform(&[heads * 3], -5.0, 5.0, seed ^ 4);
        let shifted = mha.infer(&t).unwrap();
        for (p, q) in out.data().iter().zip(shifted.data()) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn tiles_partition_the_scene(h in 1usize..220, w in 1usize..220, p in prop::sample::select(vec![8usize, 16, 32, 64]), o in 0usize..32) {
        let overlap = (o.min(p - 2)) / 2 * 2;
        let plan = plan_tiles(h, w, p, overlap).unwrap();
        let mut cover = vec![0u8; h * w];
        for t in &plan.tiles {
            let k = t.keep;
            prop_assert!(k.row0 >= t.row && k.row1 <= t.row + p && k.col0 >= t.col && k.col1 <= t.col + p);
            prop_assert!(k.row1 <= h && k.col1 <= w);
            if h >= p { prop_assert!(t.row + p <= h); }
            if w >= p { prop_assert!(t.col + p <= w); }
            for r in k.row0..k.row1 {
                for c in k.col0..k.col1 {
                    cover[r * w + c] += 1;
                }
            }
        }
        prop_assert!(cover.iter().all(|&n| n == 1));
    }

    #[test]
    fn miou_matches_brute_force(pred in prop::collection::vec(0u8..3, 1..300), seed in any::<u64>(), flips in 0usize..300) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut truth = pred.clone();
        for _ in 0..flips.min(truth.len()) {
            let i = r.random_range(0..truth.len());
            truth[i] = r.random_range(0..3);
        }
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &truth).unwrap();
        let report = miou(&cm).unwrap();
        let mut ious = Vec::new();
        for c in 0..3u8 {
            let inter = pred.iter().zip(&truth).filter(|(p, t)| **p == c && **t == c).count();
            let union = pred.iter().zip(&truth).filter(|(p, t)| **p == c || **t == c).count();
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        prop_assert_eq!(report.miou, ious.iter().sum::<f64>() / ious.len() as f64);
        prop_assert!((0.0..=1.0).contains(&report.miou));
        prop_assert_eq!(report.miou == 1.0, pred == truth);
    }

    #[test]
    fn focal_loss_does_not_increase_with_the_true_class_probability(
        a in -15.0f64..15.0, b in -15.0f64..15.0, gamma in 0.0f64..5.0, alpha in 0.1f64..5.0,
    ) {
        let cfg = FocalLossConfig::new(vec![alpha, 1.0], gamma).unwrap();
        let loss = |z: f64| focal_loss(&Tensor::from_vec(&[1, 2, 1, 1], vec![z, 0.0]).unwrap(), &[0], &cfg).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(loss(lo) >= loss(hi));
    }

    #[test]
    fn scaling_alpha_scales_loss_and_gradient(j in -4i32..5, k in 0.1f64..10.0, gamma in 0.0f64..4.0, seed in any::<u64>()) {
        let logits = uniform(&[2, 3, 3, 4], -4.0, 4.0, seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 9);
        let labels: Vec<u8> = (0..24).map(|_| r.random_range(0..3)).collect();
        let alpha = vec![0.5, 1.3, 2.1];
        let base = FocalLossConfig::new(alpha.clone(), gamma).unwrap();
        let (l0, g0) = (focal_loss(&logits, &labels, &base).unwrap(), focal_loss_backward(&logits, &labels, &base, 1.0).unwrap());

        let pow2 = 2f64.powi(j);
        let cfg = FocalLossConfig::new(alpha.iter().map(|a| a * pow2).collect(), gamma).unwrap();
        prop_assert_eq!(focal_loss(&logits, &labels, &cfg).unwrap(), l0 * pow2);
        let g = focal_loss_backward(&logits, &labels, &cfg, 1.0).unwrap();
        prop_assert!(g.data().iter().zip(g0.data()).all(|(x, y)| *x == y * pow2));

        let cfg = FocalLossConfig::new(alpha.iter().map(|a| a * k).collect(), gamma).unwrap();
        let l = focal_loss(&logits, &labels, &cfg).unwrap();
        prop_assert!((l - k * l0).abs() <= 1e-12 * (k * l0).abs().max(1e-300));
        let g = focal_loss_backward(&logits, &labels, &cfg, 1.0).unwrap();
        prop_assert!(g.data().iter().zip(g0.data()).all(|(x, y)| (x - k * y).abs() <= 1e-12 * (k * y).abs().max(1e-300)));
    }

    #[test]
    fn learning_rate_steps_down_on_ten_epoch_spans(epoch in 0usize..400, lr in 1e-6f64..1.0, factor in 0.01f64..1.0) {
        let s = Schedule { initial_lr: lr, decay_factor: factor, ..Schedule::default() };
        prop_assert!(s.lr_at(epoch + 1) <= s.lr_at(epoch));
        prop_assert_eq!(s.lr_at(epoch), s.lr_at(epoch / 10 * 10));
        let d = Schedule::default();
        prop_assert!(d.lr_at(epoch + 1) <= d.lr_at(epoch));
        prop_assert_eq!(d.lr_at(epoch), d.lr_at(epoch - epoch % 10));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sampled_windows_always_hold_two_classes(h in 12usize..60, w in 12usize..60, patch in 4usize..12, smooth in 1.0f64..20.0, seed in any::<u64>()) {
        let scene = small_scene(h, w, smooth, seed);
        let sampler = CropSampler::new(&scene, patch);
        let mut r = rng::stream(seed, 1);
        let any_valid = (0..=h.saturating_sub(patch)).any(|row| (0..=w.saturating_sub(patch)).any(|col| window_classes(&scene, Window { row, col }, patch) >= 2));
        for _ in 0..40 {
            match sampler.draw(&mut r) {
                Ok(win) => prop_assert!(window_classes(&scene, win, patch) >= 2),
                Err(_) => {
                    prop_assert!(!any_valid);
                    break;
                }
            }
        }
    }

    #[test]
    fn channel_stats_ignore_scene_order(n in 2usize..5, seed in any::<u64>(), rotate in 0usize..5) {
        let scenes: Vec<Scene> = (0..n).map(|i| small_scene(20 + 7 * i, 31, 4.0, seed.wrapping_add(i as u64))).collect();
        let a = ChannelStats::compute(&scenes).unwrap();
        let mut shuffled = scenes.clone();
        shuffled.rotate_left(rotate % n);
        shuffled.reverse();
        let b = ChannelStats::compute(&shuffled).unwrap();
        let (c, d) = (ChannelStats::from_crops(&scenes, 8).unwrap(), ChannelStats::from_crops(&shuffled, 8).unwrap());
        for ch in 0..2 {
            prop_assert!((a.mean[ch] - b.mean[ch]).abs() <= 1e-12 * a.mean[ch].abs());
            prop_assert!((a.std[ch] - b.std[ch]).abs() <= 1e-12 * a.std[ch]);
            prop_assert!((c.mean[ch] - d.mean[ch]).abs() <= 1e-12 * c.mean[ch].abs());
            prop_assert!((c.std[ch] - d.std[ch]).abs() <= 1e-12 * c.std[ch]);
        }
    }

    #[test]
    fn generated_scenes_are_reproducible_and_separate_classes(seed in any::<u64>()) {
        let cfg = SynthConfig { height: 64, width: 64, smoothness: 8.0, seed, ..SynthConfig::default() };
        let (a, b) = (generate_scene(&cfg, "g").unwrap(), generate_scene(&cfg, "g").unwrap());
        prop_assert_eq!(&a, &b);
        let d = SynthConfig::default().hh_mean_db;
        for i in 0..3 {
            for j in i + 1..3 {
                prop_assert!((d[i] - d[j]).abs() >= 3.0);
            }
        }
        let mut sum = [0.0; 3];
        let mut count = [0usize; 3];
        for (v, &l) in a.hh.iter().zip(&a.labels) {
            sum[l as usize] += v;
            count[l as usize] += 1;
        }
        let means: Vec<f64> = (0..3).filter(|&c| count[c] > 30).map(|c| sum[c] / count[c] as f64).collect();
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                prop_assert!((means[i] - means[j]).abs() >= 3.0, "{means:?}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn normalized_crops_are_near_standard(seed in any::<u64>()) {
        let scenes: Vec<Scene> = (0..4).map(|i| small_scene(128, 128, 12.0, rng::derive(seed, i))).collect();
        let model = ModelConfig { patch: 32, depth: 1, heads: 1, d_head: 4, widths: [4, 4, 6, 8], precision: Precision::Single, ..ModelConfig::default() };
        let train = TrainConfig { crops_per_epoch: 2000, alpha: Some(vec![1.0; 3]), ..TrainConfig::default() };
        let trainer = Trainer::new(ConvTr::<f32>::new(&model, 0).unwrap(), train, scenes.clone(), Vec::new()).unwrap();
        let stats = trainer.stats;
        prop_assert_eq!(stats, ChannelStats::from_crops(&scenes, 32).unwrap());
        let mut acc = [(0.0f64, 0.0f64); 2];
        let mut n = 0usize;
        for (s, win) in trainer.epoch_windows(0).unwrap() {
            let sample = extract_sample::<f64>(&scenes[s], win, 32, &stats).unwrap();
            let px = 32 * 32;
            for (ch, a) in acc.iter_mut().enumerate() {
                for &v in &sample.x.data()[ch * px..(ch + 1) * px] {
                    a.0 += v;
                    a.1 += v * v;
                }
            }
            n += px;
        }
        for (s, s2) in acc {
            let mean = s / n as f64;
            let std = (s2 / n as f64 - mean * mean).sqrt();
            prop_assert!(mean.abs() < 0.05 && (0.9..=1.1).contains(&std), "mean {mean} std {std}");
        }
    }
}

#[test]
fn model_forward_is_a_pure_function() {
    let cfg = ModelConfig { patch: 16, depth: 1, heads: 2, d_head: 4, widths: [4, 4, 6, 8], precision: Precision::Double, ..ModelConfig::default() };
    let m = ConvTr::<f64>::new(&cfg, 4).unwrap();
    let x = Tensor::<f64>::new(&[2, 2, 16, 16], Fill::Normal { mean: 0.0, std: 1.0, seed: 8 }).unwrap();
    let (a, b) = (m.forward(&x).unwrap(), m.forward(&x).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}
