use std::fmt;
use std::path::Path;

use super::config::{join_list, parse, parse_list, TrainConfig};
use super::loss::FocalLossConfig;
use super::optim::{AdamState, Moments};
use crate::container::{write_named_buffer, ByteReader, Container};
use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::model::{ConvTr, ModelConfig, Visit};
use crate::tensor::{Precision, Real};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CVTR";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Summary of one training epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// mIoU of the training predictions made during the epoch.
    pub miou: f64,
    pub val_miou: Option<f64>,
    pub lr: f64,
    /// Not persisted in checkpoints, so reruns produce identical files.
    pub wall_ms: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} loss={:.6} miou={:.4}", self.epoch, self.loss, self.miou)?;
        if let Some(v) = self.val_miou {
            write!(f, " val_miou={v:.4}")?;
        }
        write!(f, " lr={:e} wall_ms={:.0}", self.lr, self.wall_ms)
    }
}

impl EpochLog {
    fn to_header(&self) -> String {
        let val = self.val_miou.map_or("none".into(), |v| v.to_string());
        format!("{};{};{};{};{}", self.epoch, self.loss, self.miou, val, self.lr)
    }

    fn from_header(s: &str) -> Result<Self> {
        let f: Vec<&str> = s.split(';').collect();
        if f.len() != 5 {
            return Err(Error::Format(format!("malformed epoch record '{s}'")));
        }
        let val_miou = if f[3] == "none" { None } else { Some(parse("history", f[3])?) };
        Ok(Self { epoch: parse("history", f[0])?, loss: parse("history", f[1])?, miou: parse("history", f[2])?, val_miou, lr: parse("history", f[4])?, wall_ms: 0.0 })
    }
}

/// Everything needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub model: ConvTr<T>,
    pub train: TrainConfig,
    pub adam: AdamState<T>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub stats: ChannelStats,
    pub focal: FocalLossConfig,
    pub best_miou: Option<f64>,
    pub history: Vec<EpochLog>,
}

fn header_error(e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Format(format!("checkpoint header: {m}")),
        other => other,
    }
}

fn pair(key: &str, v: &str) -> Result<[f64; 2]> {
    let l = parse_list(key, v).map_err(header_error)?;
    l.try_into().map_err(|_| Error::Format(format!("{key} needs two values")))
}

/// Reads the stored precision without decoding the buffers.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let c = Container::load(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    c.get("model.precision")?.parse().map_err(|_| Error::Format("bad model.precision".into()))
}

impl<T: Real> Checkpoint<T> {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        for (k, v) in self.model.config.pairs() {
            c.set(&format!("model.{k}"), v);
        }
        for (k, v) in self.train.pairs() {
            c.set(&format!("train.{k}"), v);
        }
        c.set("train.seed", self.train.seed);
        c.set("epoch", self.epoch);
        c.set("adam.step", self.adam.step);
        c.set("stats.mean", join_list(&self.stats.mean));
        c.set("stats.std", join_list(&self.stats.std));
        c.set("focal.alpha", join_list(&self.focal.alpha));
        c.set("focal.gamma", self.focal.gamma);
        c.set("best_miou", self.best_miou.map_or("none".into(), |v| v.to_string()));
        for h in &self.history {
            c.set("history", h.to_header());
        }
        let p = &mut c.payload;
        self.model.visit("", &mut |name, _, t| write_named_buffer(p, &format!("param:{name}"), t.data()));
        for m in &self.adam.moments {
            write_named_buffer(p, &format!("adam.first:{}", m.name), &m.first);
            write_named_buffer(p, &format!("adam.second:{}", m.name), &m.second);
        }
        c
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let mut mcfg = ModelConfig::default();
        let mut train = TrainConfig::default();
        let mut history = Vec::new();
        for (k, v) in &c.header {
            if let Some(key) = k.strip_prefix("model.") {
                mcfg.set(key, v).map_err(header_error)?;
            } else if k == "train.seed" {
                train.seed = parse(k, v).map_err(header_error)?;
            } else if let Some(key) = k.strip_prefix("train.") {
                train.set(key, v).map_err(header_error)?;
            } else if k == "history" {
                history.push(EpochLog::from_header(v)?);
            }
        }
        if mcfg.precision != T::PRECISION {
            return Err(Error::Precision(format!("checkpoint stores {} precision, requested {}", mcfg.precision, T::PRECISION)));
        }
        let mut model = ConvTr::<T>::new(&mcfg, 0).map_err(header_error)?;
        let mut r = ByteReader::new(&c.payload);
        let mut params = Vec::new();
        let mut expected = Vec::new();
        model.visit("", &mut |name, _, t| expected.push((format!("param:{name}"), t.len())));
        for (name, len) in &expected {
            let (found, values) = r.named_buffer::<T>()?;
            if &found != name || values.len() != *len {
                return Err(Error::Format(format!("expected buffer {name} ({len}), found {found} ({})", values.len())));
            }
            params.push(values);
        }
        let mut it = params.into_iter();
        model.visit_mut("", &mut |_, _, t| t.data_mut().copy_from_slice(&it.next().expect("counted")));
        let mut moments = Vec::new();
        while !r.is_empty() {
            let (first_name, first) = r.named_buffer::<T>()?;
            let (second_name, second) = r.named_buffer::<T>()?;
            let name = first_name
                .strip_prefix("adam.first:")
                .filter(|n| second_name.strip_prefix("adam.second:") == Some(*n))
                .ok_or_else(|| Error::Format(format!("unpaired optimizer buffers {first_name} / {second_name}")))?;
            moments.push(Moments { name: name.to_string(), first, second });
        }
        let best = c.get("best_miou")?;
        Ok(Self {
            model,
            adam: AdamState { config: train.adam, step: c.parse("adam.step")?, moments },
            epoch: c.parse("epoch")?,
            stats: ChannelStats { mean: pair("stats.mean", c.get("stats.mean")?)?, std: pair("stats.std", c.get("stats.std")?)? },
            focal: FocalLossConfig::new(parse_list("focal.alpha", c.get("focal.alpha")?).map_err(header_error)?, c.parse("focal.gamma")?)
                .map_err(|e| Error::Format(e.to_string()))?,
            best_miou: if best == "none" { None } else { Some(parse("best_miou", best).map_err(header_error)?) },
            history,
            train,
        })
    }
}
