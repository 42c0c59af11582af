use std::fmt;
use std::time::Instant;

use super::infer::tiled_inference;
use super::tiling::plan_tiles;
use crate::data::{generate_scene, ChannelStats, SynthConfig};
use crate::error::{Error, Result};
use crate::model::{ConvTr, Variant, DOWNSAMPLE};
use crate::tensor::Real;

/// Wall-clock statistics of repeated full-scene inference.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub variant: Variant,
    pub size: usize,
    pub tile: usize,
    pub tiles: usize,
    pub warmup: usize,
    pub workers: usize,
    pub times_ms: Vec<f64>,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

impl BenchReport {
    pub fn from_times(variant: Variant, size: usize, tile: usize, tiles: usize, warmup: usize, workers: usize, times_ms: Vec<f64>) -> Self {
        let mut s = times_ms.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median_ms = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
        let mean_ms = s.iter().sum::<f64>() / n as f64;
        let p95_ms = s[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Self { variant, size, tile, tiles, warmup, workers, times_ms, median_ms, mean_ms, p95_ms }
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "variant={} size={} tile={} tiles={} repeats={} warmup={} workers={} median_ms={:.3} mean_ms={:.3} p95_ms={:.3}",
            self.variant,
            self.size,
            self.tile,
            self.tiles,
            self.times_ms.len(),
            self.warmup,
            self.workers,
            self.median_ms,
            self.mean_ms,
            self.p95_ms
        )
    }
}

/// Tile size for a `size × size` scene: the model's crop size, or the scene itself
/// when it is smaller and the variant accepts it directly.
pub fn bench_tile(model_patch: usize, variant: Variant, size: usize) -> usize {
    if size >= model_patch {
        return model_patch;
    }
    let fits = if variant.has_sampling() { size - size % DOWNSAMPLE } else { size };
    if fits == 0 {
        model_patch
    } else {
        fits
    }
}

/// Times tiled inference on a synthetic `size × size` scene; warmup runs are discarded.
pub fn benchmark_inference<T: Real>(
    model: &ConvTr<T>,
    size: usize,
    repeats: usize,
    warmup: usize,
    overlap: usize,
    workers: usize,
) -> Result<BenchReport> {
    if repeats < 3 || warmup < 1 {
        return Err(Error::Parameter(format!("benchmark needs repeats >= 3 and warmup >= 1, got {repeats} and {warmup}")));
    }
    let synth = SynthConfig { height: size, width: size, smoothness: (size as f64 / 40.0).max(2.0), seed: 0xbe9c, ..SynthConfig::default() };
    let scene = generate_scene(&synth, "bench")?;
    let stats = ChannelStats::compute([&scene])?;
    let tile = bench_tile(model.config.patch, model.variant(), size);
    let plan = plan_tiles(size, size, tile, overlap.min(tile.saturating_sub(2)) / 2 * 2)?;
    let workers = workers.max(1);
    let mut times = Vec::with_capacity(repeats);
    for i in 0..warmup + repeats {
        let start = Instant::now();
        let out = tiled_inference(model, &scene, &plan, &stats, workers)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(&out);
        if i >= warmup {
            times.push(ms);
        }
    }
    Ok(BenchReport::from_times(model.variant(), size, tile, plan.tiles.len(), warmup, workers, times))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statistics_of_times() {
        let r = BenchReport::from_times(Variant::ConvTr, 8, 8, 1, 2, 1, vec![5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!((r.median_ms, r.mean_ms, r.p95_ms), (3.0, 3.0, 5.0));
        assert_eq!(r.times_ms.len(), 5);
        assert!(r.to_string().starts_with("variant=convtr size=8"));
    }

    #[test]
    fn tile_choice() {
        assert_eq!(bench_tile(512, Variant::ConvTr, 1100), 512);
        assert_eq!(bench_tile(512, Variant::ConvTr, 128), 128);
        assert_eq!(bench_tile(512, Variant::ConvTr, 100), 96);
        assert_eq!(bench_tile(128, Variant::TransformerOnly, 100), 100);
    }
}
