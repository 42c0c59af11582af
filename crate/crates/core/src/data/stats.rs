use super::sampler::CropSampler;
use super::scene::Scene;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Normalized values are clamped to ±this many standard deviations.
pub const CLAMP_SIGMA: f64 = 10.0;

/// Per-channel (HH, HV) mean and standard deviation of the training split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

/// Running count, mean and sum of squared deviations.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Pairwise combination of two partial accumulations.
    pub fn merge(&self, other: &Welford) -> Welford {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let n = (self.count + other.count) as f64;
        let d = other.mean - self.mean;
        let (na, nb) = (self.count as f64, other.count as f64);
        Welford { count: self.count + other.count, mean: self.mean + d * nb / n, m2: self.m2 + other.m2 + d * d * na * nb / n }
    }

    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).sqrt()
        }
    }
}

impl ChannelStats {
    /// One streaming pass per scene, merged across scenes.
    pub fn compute<'a>(scenes: impl IntoIterator<Item = &'a Scene>) -> Result<Self> {
        let mut acc = [Welford::default(); 2];
        for s in scenes {
            for (a, raster) in acc.iter_mut().zip([&s.hh, &s.hv]) {
                let mut m = Welford::default();
                raster.iter().for_each(|&v| m.push(v));
                *a = a.merge(&m);
            }
        }
        if acc[0].count == 0 {
            return Err(Error::Statistics("no pixels to compute channel statistics from".into()));
        }
        let std = [acc[0].std(), acc[1].std()];
        for (name, s) in ["hh", "hv"].iter().zip(std) {
            if !(s > 0.0) {
                return Err(Error::Statistics(format!("channel {name} is constant")));
            }
        }
        Ok(Self { mean: [acc[0].mean, acc[1].mean], std })
    }

    /// Moments of the pixels seen by training crops: each scene with a valid window
    /// counts equally, and within a scene each pixel is weighted by the number of
    /// valid `patch × patch` windows covering it.
    pub fn from_crops<'a>(scenes: impl IntoIterator<Item = &'a Scene>, patch: usize) -> Result<Self> {
        let mut parts = Vec::new();
        for s in scenes {
            let cover = CropSampler::new(s, patch).coverage();
            let total: f64 = cover.iter().map(|&n| n as f64).sum();
            if total == 0.0 {
                continue;
            }
            let moments = [&s.hh, &s.hv].map(|raster| {
                let mean = raster.iter().zip(&cover).map(|(v, &n)| v * n as f64).sum::<f64>() / total;
                let var = raster.iter().zip(&cover).map(|(v, &n)| (v - mean).powi(2) * n as f64).sum::<f64>() / total;
                (mean, var)
            });
            parts.push(moments);
        }
        if parts.is_empty() {
            return Err(Error::Statistics(format!("no scene has a {patch}x{patch} window with two classes")));
        }
        let k = parts.len() as f64;
        let mut mean = [0.0; 2];
        let mut std = [0.0; 2];
        for ch in 0..2 {
            mean[ch] = parts.iter().map(|p| p[ch].0).sum::<f64>() / k;
            std[ch] = (parts.iter().map(|p| p[ch].1 + (p[ch].0 - mean[ch]).powi(2)).sum::<f64>() / k).sqrt();
        }
        for (name, s) in ["hh", "hv"].iter().zip(std) {
            if !(s > 0.0) {
                return Err(Error::Statistics(format!("channel {name} is constant over the training crops")));
            }
        }
        Ok(Self { mean, std })
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().all(|s| *s > 0.0 && s.is_finite()) && self.mean.iter().all(|m| m.is_finite()) {
            Ok(())
        } else {
            Err(Error::Statistics(format!("invalid channel statistics {self:?}")))
        }
    }

    pub fn normalize_value(&self, channel: usize, v: f64) -> f64 {
        ((v - self.mean[channel]) / self.std[channel]).clamp(-CLAMP_SIGMA, CLAMP_SIGMA)
    }
}

/// Per-channel z-score of a raw `[2, H, W]` (or `[N, 2, H, W]`) crop, clamped to ±10.
pub fn normalize<T: Real>(x: &Tensor<T>, stats: &ChannelStats) -> Result<Tensor<T>> {
    stats.validate()?;
    let shape = x.shape();
    let channel_axis = shape.len().checked_sub(3).filter(|_| shape.len() >= 3);
    let Some(axis) = channel_axis.filter(|&a| shape[a] == 2) else {
        return Err(Error::Shape(format!("normalize expects [.., 2, H, W], got {shape:?}")));
    };
    let plane = shape[axis + 1] * shape[axis + 2];
    let data = x.data().iter().enumerate().map(|(i, v)| T::of(stats.normalize_value(i / plane % 2, v.f64()))).collect();
    Tensor::from_vec(shape, data)
}
