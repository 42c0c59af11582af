//! Desk-scale learning experiment on synthetic scenes: train a variant on a
//! handful of generated scenes and score it on held-out ones.

use crate::data::{generate_scene, Scene, SynthConfig};
use crate::error::Result;
use crate::model::{ConvTr, ModelConfig, Variant};
use crate::rng;
use crate::train::{EpochLog, Schedule, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub scenes: usize,
    pub held_out: usize,
    pub scene: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Tile overlap for held-out inference.
    pub overlap: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            scenes: 8,
            held_out: 2,
            scene: SynthConfig { height: 256, width: 256, smoothness: 12.0, ..SynthConfig::default() },
            model: ModelConfig { patch: 64, depth: 2, heads: 2, ..ModelConfig::default() },
            train: TrainConfig {
                epochs: 15,
                batch_size: 8,
                crops_per_epoch: 128,
                schedule: Schedule { initial_lr: 1e-3, ..Schedule::default() },
                ..TrainConfig::default()
            },
            overlap: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyResult {
    pub variant: Variant,
    pub seed: u64,
    pub held_out_miou: f64,
    pub history: Vec<EpochLog>,
}

/// The generated scenes for `seed`, split into (train, held-out).
pub fn toy_scenes(cfg: &ToyConfig, seed: u64) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let mut all = Vec::with_capacity(cfg.scenes);
    for i in 0..cfg.scenes {
        let sc = SynthConfig { seed: rng::derive(seed, i as u64), ..cfg.scene.clone() };
        all.push(generate_scene(&sc, format!("toy-{seed}-{i}"))?);
    }
    let held = all.split_off(cfg.scenes - cfg.held_out);
    Ok((all, held))
}

/// Trains `variant` with seed `seed` and scores it on the held-out scenes.
/// Both variants see the same scenes, crops and initialization seed.
pub fn run_toy(cfg: &ToyConfig, variant: Variant, seed: u64, mut on_epoch: impl FnMut(&EpochLog)) -> Result<ToyResult> {
    let (train, held) = toy_scenes(cfg, seed)?;
    let model = ConvTr::<f32>::new(&ModelConfig { variant, ..cfg.model.clone() }, seed)?;
    let mut t = Trainer::new(model, TrainConfig { seed, ..cfg.train.clone() }, train, Vec::new())?;
    t.overlap = cfg.overlap;
    t.run(&mut on_epoch)?;
    let held_out_miou = t.evaluate(&held)?;
    Ok(ToyResult { variant, seed, held_out_miou, history: t.history })
}
