//! Scenes, the synthetic generator, crop sampling and normalization.

mod sampler;
mod scene;
mod stats;
mod synth;

pub use sampler::{CropSampler, SceneSkipped, Window, REJECTION_CAP};
pub use scene::{Scene, CLASS_NAMES, ICE, LAND, NUM_CLASSES, SCENE_MAGIC, SCENE_VERSION, SEA};
pub use stats::{normalize, ChannelStats, Welford, CLAMP_SIGMA};
pub use synth::{generate_scene, SynthConfig};

use rand::seq::SliceRandom;

use crate::error::{shape_err, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};

/// A normalized `[2, P, P]` crop with its labels and origin.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T: Real> {
    pub x: Tensor<T>,
    pub y: Vec<u8>,
    pub scene: String,
    pub window: Window,
}

/// Raw dB values of an `h × w` window as `[2, h, w]`.
pub fn raw_crop(scene: &Scene, row: usize, col: usize, h: usize, w: usize) -> Result<Tensor<f64>> {
    if row + h > scene.height || col + w > scene.width {
        return shape_err(format!("window {h}x{w} at ({row}, {col}) leaves the {}x{} scene", scene.height, scene.width));
    }
    let mut data = Vec::with_capacity(2 * h * w);
    for raster in [&scene.hh, &scene.hv] {
        for r in row..row + h {
            data.extend_from_slice(&raster[r * scene.width + col..r * scene.width + col + w]);
        }
    }
    Tensor::from_vec(&[2, h, w], data)
}

pub fn extract_sample<T: Real>(scene: &Scene, window: Window, patch: usize, stats: &ChannelStats) -> Result<Sample<T>> {
    let raw = raw_crop(scene, window.row, window.col, patch, patch)?;
    let x = normalize(&raw, stats)?.cast();
    let mut y = Vec::with_capacity(patch * patch);
    for r in window.row..window.row + patch {
        y.extend_from_slice(&scene.labels[r * scene.width + window.col..r * scene.width + window.col + patch]);
    }
    Ok(Sample { x, y, scene: scene.id.clone(), window })
}

/// Stacks samples into `[N, 2, P, P]` and the concatenated label map.
pub fn stack<T: Real>(samples: &[Sample<T>]) -> Result<(Tensor<T>, Vec<u8>)> {
    let Some(first) = samples.first() else {
        return shape_err("cannot stack an empty batch");
    };
    let shape = first.x.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.x.len());
    let mut labels = Vec::with_capacity(samples.len() * first.y.len());
    for s in samples {
        if s.x.shape() != shape.as_slice() {
            return shape_err("samples in a batch differ in shape");
        }
        data.extend_from_slice(s.x.data());
        labels.extend_from_slice(&s.y);
    }
    let mut full = vec![samples.len()];
    full.extend_from_slice(&shape);
    Ok((Tensor::from_vec(&full, data)?, labels))
}

const SPLIT_STREAM: u64 = 0x5011_7000;

/// Seeded scene-level split into `(train, validation)` indices;
/// `⌊n · fraction⌋` scenes are held out, never all of them.
pub fn split_scenes(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, SPLIT_STREAM));
    let held = ((n as f64 * fraction).floor() as usize).min(n.saturating_sub(1));
    let mut val = idx.split_off(n - held);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}
