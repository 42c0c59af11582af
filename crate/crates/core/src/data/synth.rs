use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::scene::{Scene, ICE, LAND, NUM_CLASSES, SEA};
use crate::error::{Error, Result};
use crate::rng;

/// Parameters of the synthetic scene generator. Backscatter figures are in dB,
/// indexed by class (sea, ice, land).
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Correlation length of the class-region fields, in pixels.
    pub smoothness: f64,
    pub land_fraction: f64,
    pub ice_fraction: f64,
    pub hh_mean_db: [f64; NUM_CLASSES],
    pub hv_mean_db: [f64; NUM_CLASSES],
    /// Amplitude of the smooth within-class texture.
    pub hh_std_db: [f64; NUM_CLASSES],
    pub hv_std_db: [f64; NUM_CLASSES],
    /// Correlation length of the texture field, in pixels.
    pub texture_scale: f64,
    /// Equivalent number of looks of the multiplicative speckle.
    pub looks: f64,
    /// Half-width of a uniform per-scene calibration offset added to both channels.
    pub gain_jitter_db: f64,
    /// Backscatter drop from the near to the far range edge (across columns).
    pub incidence_slope_db: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 1100,
            width: 1100,
            smoothness: 24.0,
            land_fraction: 0.2,
            ice_fraction: 0.4,
            hh_mean_db: [-20.0, -12.0, -5.0],
            hv_mean_db: [-28.0, -22.0, -14.0],
            hh_std_db: [1.5, 1.5, 2.0],
            hv_std_db: [1.0, 1.5, 2.0],
            texture_scale: 3.0,
            looks: 4.0,
            gain_jitter_db: 0.0,
            incidence_slope_db: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad("scene size must be positive".into());
        }
        if !(self.looks >= 1.0) {
            return bad(format!("data.looks = {} must be at least 1", self.looks));
        }
        if self.hh_std_db.iter().chain(&self.hv_std_db).any(|s| !(*s > 0.0)) {
            return bad("per-class backscatter spreads must be positive".into());
        }
        let (l, i) = (self.land_fraction, self.ice_fraction);
        if !(l >= 0.0 && i > 0.0 && l + i < 1.0) {
            return bad(format!("class fractions land={l}, ice={i} must leave room for sea"));
        }
        if !(self.smoothness > 0.0 && self.texture_scale > 0.0) {
            return bad("smoothness and texture scale must be positive".into());
        }
        if !(self.gain_jitter_db >= 0.0) {
            return bad("data.gain_jitter_db must be non-negative".into());
        }
        Ok(())
    }
}

/// Smooth zero-mean, unit-variance random field: white noise through three box blurs.
fn smooth_field(h: usize, w: usize, scale: f64, rng: &mut rng::Rng) -> Vec<f64> {
    let mut f: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    let radius = scale.round().max(1.0) as usize;
    let mut line = Vec::new();
    for _ in 0..3 {
        for r in 0..h {
            box_blur(&mut f[r * w..(r + 1) * w], radius, &mut line);
        }
        for c in 0..w {
            let mut col: Vec<f64> = (0..h).map(|r| f[r * w + c]).collect();
            box_blur(&mut col, radius, &mut line);
            (0..h).for_each(|r| f[r * w + c] = col[r]);
        }
    }
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let std = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-300);
    f.iter_mut().for_each(|v| *v = (*v - mean) / std);
    f
}

/// Moving average of width `2r+1` with clamped edges.
fn box_blur(x: &mut [f64], r: usize, scratch: &mut Vec<f64>) {
    let n = x.len();
    scratch.clear();
    scratch.extend_from_slice(x);
    let at = |i: isize| scratch[i.clamp(0, n as isize - 1) as usize];
    let width = (2 * r + 1) as f64;
    let mut sum: f64 = (-(r as isize)..=r as isize).map(at).sum();
    for i in 0..n {
        x[i] = sum / width;
        sum += at(i as isize + r as isize + 1) - at(i as isize - r as isize);
    }
}

/// Value below which a `q` fraction of `v` lies.
fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[((q * s.len() as f64) as usize).min(s.len() - 1)]
}

/// Generates one scene; the result is a pure function of `cfg`.
pub fn generate_scene(cfg: &SynthConfig, id: impl Into<String>) -> Result<Scene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = rng::stream(cfg.seed, 0);
    let land = smooth_field(h, w, 2.0 * cfg.smoothness, &mut rng);
    let ice = smooth_field(h, w, cfg.smoothness, &mut rng);
    let tex_hh = smooth_field(h, w, cfg.texture_scale, &mut rng);
    let tex_hv = smooth_field(h, w, cfg.texture_scale, &mut rng);

    let land_cut = quantile(&land, 1.0 - cfg.land_fraction);
    let water: Vec<f64> = (0..h * w).filter(|&i| land[i] < land_cut || cfg.land_fraction == 0.0).map(|i| ice[i]).collect();
    let ice_share = cfg.ice_fraction / (1.0 - cfg.land_fraction);
    let ice_cut = quantile(&water, 1.0 - ice_share);
    let labels: Vec<u8> = (0..h * w)
        .map(|i| {
            if cfg.land_fraction > 0.0 && land[i] >= land_cut {
                LAND
            } else if ice[i] >= ice_cut {
                ICE
            } else {
                SEA
            }
        })
        .collect();

    let gain = if cfg.gain_jitter_db > 0.0 { rng.random_range(-cfg.gain_jitter_db..=cfg.gain_jitter_db) } else { 0.0 };
    let speckle = Gamma::new(cfg.looks, 1.0 / cfg.looks).map_err(|e| Error::Config(format!("speckle: {e}")))?;
    let mut speckle_rng = rng::stream(cfg.seed, 1);
    let mut draw_db = || 10.0 * speckle.sample(&mut speckle_rng).max(f64::MIN_POSITIVE).log10();
    let mut hh = Vec::with_capacity(h * w);
    let mut hv = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let k = labels[i] as usize;
        let ramp = if w > 1 { -cfg.incidence_slope_db * ((i % w) as f64 / (w - 1) as f64 - 0.5) } else { 0.0 };
        let base = gain + ramp;
        hh.push(base + cfg.hh_mean_db[k] + cfg.hh_std_db[k] * tex_hh[i] + draw_db());
        hv.push(base + cfg.hv_mean_db[k] + cfg.hv_std_db[k] * tex_hv[i] + draw_db());
    }
    Scene::new(id, h, w, hh, hv, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig { height: 96, width: 80, smoothness: 8.0, seed, ..SynthConfig::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate_scene(&small(3), "a").unwrap(), generate_scene(&small(3), "a").unwrap());
        assert_ne!(generate_scene(&small(3), "a").unwrap().hh, generate_scene(&small(4), "a").unwrap().hh);
    }

    #[test]
    fn fractions_follow_the_configuration() {
        let s = generate_scene(&small(1), "a").unwrap();
        let f = s.class_fractions();
        assert!((f[LAND as usize] - 0.2).abs() < 0.01, "{f:?}");
        assert!((f[ICE as usize] - 0.4).abs() < 0.01, "{f:?}");
    }

    #[test]
    fn many_looks_remove_speckle() {
        let cfg = SynthConfig { looks: 1e9, hh_std_db: [1e-9; 3], ..small(2) };
        let s = generate_scene(&cfg, "a").unwrap();
        for (v, &l) in s.hh.iter().zip(&s.labels) {
            assert!((v - cfg.hh_mean_db[l as usize]).abs() < 1e-3);
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        assert!(generate_scene(&SynthConfig { looks: 0.5, ..small(0) }, "a").is_err());
        assert!(generate_scene(&SynthConfig { hv_std_db: [1.0, 0.0, 1.0], ..small(0) }, "a").is_err());
        assert!(generate_scene(&SynthConfig { land_fraction: 0.7, ice_fraction: 0.4, ..small(0) }, "a").is_err());
    }

    #[test]
    fn box_blur_preserves_constants() {
        let mut x = vec![2.5; 10];
        box_blur(&mut x, 3, &mut Vec::new());
        assert!(x.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }
}
