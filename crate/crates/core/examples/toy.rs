//! Runs the synthetic toy experiment for the hybrid and autoencoder variants.
//!
//! Usage: `cargo run --release --example toy -- [seeds] [crops_per_epoch] [epochs] [gain_jitter_db] [smoothness]`

use std::time::Instant;

use convtr::experiment::{run_toy, ToyConfig};
use convtr::model::Variant;

fn main() {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let seeds = args.first().map_or(5, |&s| s as u64);
    let mut cfg = ToyConfig::default();
    if let Some(&c) = args.get(1) {
        cfg.train.crops_per_epoch = c as usize;
    }
    if let Some(&e) = args.get(2) {
        cfg.train.epochs = e as usize;
    }
    if let Some(&g) = args.get(3) {
        cfg.scene.gain_jitter_db = g;
    }
    if let Some(&s) = args.get(4) {
        cfg.scene.smoothness = s;
    }
    let mut margins = Vec::new();
    for seed in 0..seeds {
        let mut scores = Vec::new();
        for variant in [Variant::ConvTr, Variant::AutoEncoder] {
            let start = Instant::now();
            let r = run_toy(&cfg, variant, seed, |l| eprintln!("  {variant} {l}")).expect("toy run");
            println!("seed={seed} variant={variant} held_out_miou={:.4} secs={:.1}", r.held_out_miou, start.elapsed().as_secs_f64());
            scores.push(r.held_out_miou);
        }
        margins.push(scores[0] - scores[1]);
    }
    println!("margins={margins:?}");
}
