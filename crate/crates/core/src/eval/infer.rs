use std::path::Path;

use super::tiling::{reflect, Tile, TilingPlan};
use crate::container::Container;
use crate::data::{ChannelStats, Scene};
use crate::error::{shape_err, Error, Result};
use crate::model::{ClassMap, ConvTr};
use crate::par;
use crate::tensor::{Real, Tensor};

pub const SEGM_MAGIC: &[u8; 4] = b"SEGM";
pub const SEGM_VERSION: u32 = 1;

/// Stitched full-scene prediction.
#[derive(Clone, Debug)]
pub struct SceneOutput<T: Real> {
    /// `[1, H, W]`
    pub classes: ClassMap,
    /// `[1, C, H, W]`
    pub probs: Tensor<T>,
}

/// Normalized `[1, 2, P, P]` input for a tile, reflect-padded where the scene is shorter than `P`.
pub fn tile_input<T: Real>(scene: &Scene, tile: &Tile, patch: usize, stats: &ChannelStats) -> Tensor<T> {
    let (h, w) = (scene.height, scene.width);
    let mut data = Vec::with_capacity(2 * patch * patch);
    for (ch, raster) in [&scene.hh, &scene.hv].into_iter().enumerate() {
        for r in 0..patch {
            let sr = if h < patch { reflect(r, h) } else { tile.row + r };
            for c in 0..patch {
                let sc = if w < patch { reflect(c, w) } else { tile.col + c };
                data.push(T::of(stats.normalize_value(ch, raster[sr * w + sc])));
            }
        }
    }
    Tensor::from_vec(&[1, 2, patch, patch], data).expect("sized above")
}

/// Predicts every tile and copies its kept region into the output.
/// Tiles run on up to `workers` threads (0 = all available).
pub fn tiled_inference<T: Real>(
    model: &ConvTr<T>,
    scene: &Scene,
    plan: &TilingPlan,
    stats: &ChannelStats,
    workers: usize,
) -> Result<SceneOutput<T>> {
    if plan.height != scene.height || plan.width != scene.width {
        return shape_err(format!(
            "plan for {}x{} used on a {}x{} scene",
            plan.height, plan.width, scene.height, scene.width
        ));
    }
    stats.validate()?;
    let p = plan.patch;
    let results = par::with_workers(workers, || {
        par::map(plan.tiles.len(), |i| {
            let tile = &plan.tiles[i];
            model.predict(&tile_input(scene, tile, p, stats)).map_err(|e| match e {
                Error::NumericFault { location } => {
                    Error::NumericFault { location: format!("{location} (tile at row {}, col {})", tile.row, tile.col) }
                }
                other => other,
            })
        })
    });
    let (h, w, c) = (scene.height, scene.width, model.config.classes);
    let mut classes = vec![0u8; h * w];
    let mut probs = vec![T::zero(); c * h * w];
    for (tile, result) in plan.tiles.iter().zip(results) {
        let pred = result?;
        let k = tile.keep;
        for r in k.row0..k.row1 {
            let tr = r - tile.row;
            for col in k.col0..k.col1 {
                let tc = col - tile.col;
                classes[r * w + col] = pred.classes.data[tr * p + tc];
                for ch in 0..c {
                    probs[(ch * h + r) * w + col] = pred.probs.data()[(ch * p + tr) * p + tc];
                }
            }
        }
    }
    Ok(SceneOutput { classes: ClassMap { shape: [1, h, w], data: classes }, probs: Tensor::from_vec(&[1, c, h, w], probs)? })
}

/// Writes an 8-bit class raster.
pub fn save_class_map(path: &Path, id: &str, height: usize, width: usize, classes: &[u8]) -> Result<()> {
    if classes.len() != height * width {
        return shape_err(format!("{} labels for a {height}x{width} raster", classes.len()));
    }
    let mut c = Container::new(SEGM_MAGIC, SEGM_VERSION);
    c.set("id", id);
    c.set("height", height);
    c.set("width", width);
    c.payload = classes.to_vec();
    c.save(path)
}

/// Reads an 8-bit class raster as `(id, height, width, labels)`.
pub fn load_class_map(path: &Path) -> Result<(String, usize, usize, Vec<u8>)> {
    let c = Container::load(path, SEGM_MAGIC, SEGM_VERSION)?;
    let (h, w): (usize, usize) = (c.parse("height")?, c.parse("width")?);
    if c.payload.len() != h * w {
        return Err(Error::Format(format!("header says {h}x{w} but the payload has {} bytes", c.payload.len())));
    }
    Ok((c.get("id")?.to_string(), h, w, c.payload))
}
