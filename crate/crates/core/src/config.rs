//! Run configuration: one flat `section.key = value` file plus overrides.
//!
//! ```text
//! # comment
//! seed = 7
//! model.variant = convtr
//! train.epochs = 15
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::train::{join_list, parse, parse_list, TrainConfig};

/// Overrides `io.output` when set.
pub const OUTPUT_ENV: &str = "CONVTR_OUT";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub synth: SynthConfig,
    /// Directory holding `*.scene` files.
    pub scenes_dir: PathBuf,
    /// Fraction of training scenes held out for checkpoint selection.
    pub val_fraction: f64,
    /// Scenes written by `synth`.
    pub count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { synth: SynthConfig::default(), scenes_dir: PathBuf::from("scenes"), val_fraction: 0.1, count: 8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub overlap: usize,
    pub workers: usize,
    pub bench_repeats: usize,
    pub bench_warmup: usize,
    pub bench_size: usize,
    pub bench_variants: Vec<Variant>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { overlap: 64, workers: 1, bench_repeats: 5, bench_warmup: 2, bench_size: 1100, bench_variants: vec![Variant::ConvTr, Variant::AutoEncoder] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            output: PathBuf::from("runs"),
        }
    }
}

/// One documented key.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyDoc {
    pub key: String,
    pub default: String,
    pub about: &'static str,
    /// Value taken from the published training recipe.
    pub recipe: bool,
}

const DOCS: &[(&str, &str, bool)] = &[
    ("seed", "root seed; model init, crops, splits and scenes derive from it", false),
    ("model.patch", "crop size P in pixels", true),
    ("model.classes", "number of output classes", true),
    ("model.depth", "transformer blocks L", true),
    ("model.heads", "attention heads", true),
    ("model.d_head", "width of one attention head", false),
    ("model.widths", "channels of the four downsampling convolutions", true),
    ("model.variant", "convtr | autoencoder | transformer_only", false),
    ("model.precision", "single | double", false),
    ("model.bn_eps", "batch-norm epsilon", false),
    ("model.bn_momentum", "batch-norm running-stat momentum", false),
    ("train.lr", "initial learning rate", true),
    ("train.decay_factor", "step decay factor", true),
    ("train.decay_every", "epochs between decays", true),
    ("train.epochs", "training epochs", true),
    ("train.batch_size", "crops per mini-batch", true),
    ("train.crops_per_epoch", "crops drawn per epoch", false),
    ("train.gamma", "focal exponent", false),
    ("train.alpha", "focal class weights, or auto for inverse frequency", false),
    ("train.beta1", "Adam first-moment decay", false),
    ("train.beta2", "Adam second-moment decay", false),
    ("train.adam_eps", "Adam epsilon", false),
    ("data.height", "synthetic scene height", false),
    ("data.width", "synthetic scene width", false),
    ("data.smoothness", "correlation length of class regions", false),
    ("data.land_fraction", "land share of each scene", false),
    ("data.ice_fraction", "ice share of each scene", false),
    ("data.hh_mean_db", "HH backscatter per class (sea,ice,land)", false),
    ("data.hv_mean_db", "HV backscatter per class", false),
    ("data.hh_std_db", "HH texture amplitude per class", false),
    ("data.hv_std_db", "HV texture amplitude per class", false),
    ("data.texture_scale", "correlation length of texture", false),
    ("data.looks", "speckle equivalent number of looks", false),
    ("data.gain_jitter_db", "per-scene calibration offset half-width", false),
    ("data.incidence_slope_db", "near-to-far range backscatter drop", false),
    ("data.scenes_dir", "directory of scene files", false),
    ("data.val_fraction", "share of training scenes held out for validation", false),
    ("data.count", "scenes written by synth", false),
    ("eval.overlap", "tile overlap in pixels", false),
    ("eval.workers", "tile workers; 0 uses every core", false),
    ("eval.bench_repeats", "timed benchmark runs", false),
    ("eval.bench_warmup", "untimed warmup runs", false),
    ("eval.bench_size", "benchmark scene side", false),
    ("eval.bench_variants", "variants compared by bench", false),
    ("io.output", "output directory (overridden by CONVTR_OUT)", false),
];

fn db3(key: &str, v: &str) -> Result<[f64; 3]> {
    parse_list(key, v)?.try_into().map_err(|_| Error::Config(format!("{key} needs three values")))
}

impl RunConfig {
    /// All keys with their current values, in documentation order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let s = &self.data.synth;
        let mut out = vec![("seed".to_string(), self.seed.to_string())];
        out.extend(self.model.pairs().into_iter().map(|(k, v)| (format!("model.{k}"), v)));
        out.extend(self.train.pairs().into_iter().map(|(k, v)| (format!("train.{k}"), v)));
        let data = [
            ("height", s.height.to_string()),
            ("width", s.width.to_string()),
            ("smoothness", s.smoothness.to_string()),
            ("land_fraction", s.land_fraction.to_string()),
            ("ice_fraction", s.ice_fraction.to_string()),
            ("hh_mean_db", join_list(&s.hh_mean_db)),
            ("hv_mean_db", join_list(&s.hv_mean_db)),
            ("hh_std_db", join_list(&s.hh_std_db)),
            ("hv_std_db", join_list(&s.hv_std_db)),
            ("texture_scale", s.texture_scale.to_string()),
            ("looks", s.looks.to_string()),
            ("gain_jitter_db", s.gain_jitter_db.to_string()),
            ("incidence_slope_db", s.incidence_slope_db.to_string()),
            ("scenes_dir", self.data.scenes_dir.display().to_string()),
            ("val_fraction", self.data.val_fraction.to_string()),
            ("count", self.data.count.to_string()),
        ];
        out.extend(data.into_iter().map(|(k, v)| (format!("data.{k}"), v)));
        let e = &self.eval;
        let eval = [
            ("overlap", e.overlap.to_string()),
            ("workers", e.workers.to_string()),
            ("bench_repeats", e.bench_repeats.to_string()),
            ("bench_warmup", e.bench_warmup.to_string()),
            ("bench_size", e.bench_size.to_string()),
            ("bench_variants", join_list(&e.bench_variants)),
        ];
        out.extend(eval.into_iter().map(|(k, v)| (format!("eval.{k}"), v)));
        out.push(("io.output".into(), self.output.display().to_string()));
        out
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let (section, name) = key.split_once('.').unwrap_or(("", key));
        let s = &mut self.data.synth;
        match (section, name) {
            ("", "seed") => self.seed = parse(key, v)?,
            ("model", k) => self.model.set(k, v)?,
            ("train", k) => self.train.set(k, v)?,
            ("data", "height") => s.height = parse(key, v)?,
            ("data", "width") => s.width = parse(key, v)?,
            ("data", "smoothness") => s.smoothness = parse(key, v)?,
            ("data", "land_fraction") => s.land_fraction = parse(key, v)?,
            ("data", "ice_fraction") => s.ice_fraction = parse(key, v)?,
            ("data", "hh_mean_db") => s.hh_mean_db = db3(key, v)?,
            ("data", "hv_mean_db") => s.hv_mean_db = db3(key, v)?,
            ("data", "hh_std_db") => s.hh_std_db = db3(key, v)?,
            ("data", "hv_std_db") => s.hv_std_db = db3(key, v)?,
            ("data", "texture_scale") => s.texture_scale = parse(key, v)?,
            ("data", "looks") => s.looks = parse(key, v)?,
            ("data", "gain_jitter_db") => s.gain_jitter_db = parse(key, v)?,
            ("data", "incidence_slope_db") => s.incidence_slope_db = parse(key, v)?,
            ("data", "scenes_dir") => self.data.scenes_dir = PathBuf::from(v),
            ("data", "val_fraction") => self.data.val_fraction = parse(key, v)?,
            ("data", "count") => self.data.count = parse(key, v)?,
            ("eval", "overlap") => self.eval.overlap = parse(key, v)?,
            ("eval", "workers") => self.eval.workers = parse(key, v)?,
            ("eval", "bench_repeats") => self.eval.bench_repeats = parse(key, v)?,
            ("eval", "bench_warmup") => self.eval.bench_warmup = parse(key, v)?,
            ("eval", "bench_size") => self.eval.bench_size = parse(key, v)?,
            ("eval", "bench_variants") => self.eval.bench_variants = v.split(',').map(|x| x.trim().parse()).collect::<Result<_>>()?,
            ("io", "output") => self.output = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override '{kv}' must look like key=value")))?;
        self.set(k.trim(), v)
    }

    /// Defaults, then the file, then the output environment override.
    pub fn load(path: Option<&Path>, env_output: Option<String>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::DataNotFound { what: "config file".into(), path: p.to_path_buf() },
                _ => e.into(),
            })?;
            cfg.apply_text(&text)?;
        }
        if let Some(out) = env_output.filter(|o| !o.is_empty()) {
            cfg.output = PathBuf::from(out);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.synth.validate()?;
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::Config(format!("data.val_fraction = {} must lie in [0, 1)", self.data.val_fraction)));
        }
        if self.eval.overlap % 2 != 0 || self.eval.overlap >= self.model.patch {
            return Err(Error::Config(format!("eval.overlap = {} must be even and below model.patch = {}", self.eval.overlap, self.model.patch)));
        }
        if self.eval.bench_repeats < 3 || self.eval.bench_warmup < 1 {
            return Err(Error::Config("eval.bench_repeats must be at least 3 and eval.bench_warmup at least 1".into()));
        }
        Ok(())
    }

    /// Every key with its default value and description.
    pub fn help_table() -> Vec<KeyDoc> {
        let defaults = Self::default().pairs();
        DOCS.iter()
            .map(|&(key, about, recipe)| {
                let default = defaults.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone()).expect("documented key has a default");
                KeyDoc { key: key.to_string(), default, about, recipe }
            })
            .collect()
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_unknown_keys() {
        let mut cfg = RunConfig { seed: 9, ..RunConfig::default() };
        cfg.set("model.variant", "autoencoder").unwrap();
        cfg.set("data.hh_mean_db", "-21,-11,-4").unwrap();
        cfg.set("eval.bench_variants", "convtr,transformer_only").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_string()).unwrap();
        assert_eq!(back, cfg);
        assert!(back.set("model.nonsense", "1").is_err());
        assert!(back.set("bogus", "1").is_err());
        assert!(back.apply_text("train.epochs 3").is_err());
    }

    #[test]
    fn comments_overrides_and_environment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# toy\ntrain.epochs = 3  # short\n\nio.output = a\n").unwrap();
        let mut cfg = RunConfig::load(Some(&path), Some("b".into())).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.output, PathBuf::from("b"));
        cfg.apply_override("train.epochs=4").unwrap();
        assert_eq!(cfg.train.epochs, 4);
        assert!(matches!(RunConfig::load(Some(&dir.path().join("none")), None), Err(Error::DataNotFound { .. })));
    }

    #[test]
    fn help_covers_every_key_and_marks_recipe_values() {
        let table = RunConfig::help_table();
        let keys: Vec<String> = RunConfig::default().pairs().into_iter().map(|(k, _)| k).collect();
        assert_eq!(table.iter().map(|d| d.key.clone()).collect::<Vec<_>>(), keys);
        let get = |k: &str| table.iter().find(|d| d.key == k).unwrap().clone();
        assert_eq!((get("train.lr").default.as_str(), get("train.lr").recipe), ("0.0001", true));
        assert_eq!(get("model.heads").default, "5");
        assert_eq!(get("train.decay_every").default, "10");
    }

    #[test]
    fn validation_rejects_bad_overlap_and_long_range_transformer() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.eval.overlap = 63;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.set("model.variant", "transformer_only").unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("128"), "{err}");
    }
}
