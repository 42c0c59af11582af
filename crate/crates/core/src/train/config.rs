use super::optim::{AdamConfig, Schedule};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::tensor::Precision;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    /// Crops drawn (with replacement) per epoch.
    pub crops_per_epoch: usize,
    pub gamma: f64,
    /// Focal class weights; `None` derives them from the training labels.
    pub alpha: Option<Vec<f64>>,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            epochs: 50,
            batch_size: 16,
            crops_per_epoch: 512,
            gamma: 2.0,
            alpha: None,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

pub(crate) fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| Error::Config(format!("cannot parse {key} = '{value}'")))
}

pub(crate) fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

pub(crate) fn join_list<V: ToString>(v: &[V]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.crops_per_epoch == 0 {
            return Err(Error::Config("train.batch_size and train.crops_per_epoch must be positive".into()));
        }
        if self.schedule.decay_every == 0 || !(self.schedule.initial_lr >= 0.0) || !(self.schedule.decay_factor > 0.0) {
            return Err(Error::Config("learning-rate schedule is invalid".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("train.gamma = {} must be non-negative", self.gamma)));
        }
        if let Some(a) = &self.alpha {
            if a.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config(format!("train.alpha {a:?} must be positive")));
            }
        }
        Ok(())
    }

    /// `(key, value)` pairs without the section prefix.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.schedule.initial_lr.to_string()),
            ("decay_factor", self.schedule.decay_factor.to_string()),
            ("decay_every", self.schedule.decay_every.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("crops_per_epoch", self.crops_per_epoch.to_string()),
            ("gamma", self.gamma.to_string()),
            ("alpha", self.alpha.as_ref().map_or("auto".into(), |a| join_list(a))),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "lr" => self.schedule.initial_lr = parse(key, v)?,
            "decay_factor" => self.schedule.decay_factor = parse(key, v)?,
            "decay_every" => self.schedule.decay_every = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "crops_per_epoch" => self.crops_per_epoch = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "alpha" => self.alpha = if v.trim() == "auto" { None } else { Some(parse_list(key, v)?) },
            "beta1" => self.adam.beta1 = parse(key, v)?,
            "beta2" => self.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.adam.eps = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key train.{key}"))),
        }
        Ok(())
    }
}

impl ModelConfig {
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("patch", self.patch.to_string()),
            ("classes", self.classes.to_string()),
            ("depth", self.depth.to_string()),
            ("heads", self.heads.to_string()),
            ("d_head", self.d_head.to_string()),
            ("widths", join_list(&self.widths)),
            ("variant", self.variant.to_string()),
            ("precision", self.precision.to_string()),
            ("bn_eps", self.bn_eps.to_string()),
            ("bn_momentum", self.bn_momentum.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "patch" => self.patch = parse(key, v)?,
            "classes" => self.classes = parse(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "d_head" => self.d_head = parse(key, v)?,
            "widths" => {
                let w: Vec<usize> = v.split(',').map(|x| parse(key, x)).collect::<Result<_>>()?;
                self.widths = w.try_into().map_err(|_| Error::Config("model.widths needs exactly 4 entries".into()))?;
            }
            "variant" => self.variant = v.trim().parse::<Variant>()?,
            "precision" => self.precision = v.trim().parse::<Precision>().map_err(|_| Error::Config(format!("unknown precision '{v}'")))?,
            "bn_eps" => self.bn_eps = parse(key, v)?,
            "bn_momentum" => self.bn_momentum = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key model.{key}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_round_trip() {
        let mut t = TrainConfig { alpha: Some(vec![0.5, 1.25, 3.0]), ..TrainConfig::default() };
        t.schedule.initial_lr = 3.7e-5;
        let mut back = TrainConfig::default();
        for (k, v) in t.pairs() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, t);
        let m = ModelConfig { variant: Variant::TransformerOnly, patch: 64, bn_eps: 1.5e-7, ..ModelConfig::default() };
        let mut mb = ModelConfig::default();
        for (k, v) in m.pairs() {
            mb.set(k, &v).unwrap();
        }
        assert_eq!(mb, m);
        assert!(mb.set("nope", "1").is_err());
        assert!(mb.set("widths", "1,2").is_err());
    }
}
