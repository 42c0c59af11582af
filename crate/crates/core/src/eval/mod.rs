//! Segmentation metrics, tiled full-scene inference and latency benchmarking.

mod bench;
mod infer;
mod metrics;
mod tiling;

pub use bench::{bench_tile, benchmark_inference, BenchReport};
pub use infer::{load_class_map, save_class_map, tile_input, tiled_inference, SceneOutput, SEGM_MAGIC, SEGM_VERSION};
pub use metrics::{miou, ConfusionMatrix, IouReport};
pub use tiling::{plan_tiles, reflect, Rect, Tile, TilingPlan};

#[cfg(test)]
mod tests;
