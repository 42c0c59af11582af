use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng as _;

use super::checkpoint::{Checkpoint, EpochLog};
use super::config::TrainConfig;
use super::loss::{focal_loss_and_grad, FocalLossConfig};
use super::optim::{adam_step, AdamState};
use crate::data::{extract_sample, stack, ChannelStats, CropSampler, Scene, Window, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::eval::{miou, plan_tiles, tiled_inference, ConfusionMatrix};
use crate::model::{ClassMap, ConvTr};
use crate::par;
use crate::rng;
use crate::tensor::Real;

const EPOCH_STREAM: u64 = 0xe90c_0000;

/// Runs the optimization loop over crops drawn from a fixed set of scenes.
pub struct Trainer<T: Real> {
    pub model: ConvTr<T>,
    pub config: TrainConfig,
    pub adam: AdamState<T>,
    pub stats: ChannelStats,
    pub focal: FocalLossConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub best_miou: Option<f64>,
    pub history: Vec<EpochLog>,
    /// Where checkpoints and the epoch log go; nothing is written when `None`.
    pub output: Option<PathBuf>,
    /// Tile overlap used when scoring validation scenes.
    pub overlap: usize,
    pub workers: usize,
    train: Vec<Scene>,
    val: Vec<Scene>,
    samplers: Vec<CropSampler>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: ConvTr<T>, config: TrainConfig, train: Vec<Scene>, val: Vec<Scene>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Data("training needs at least one scene".into()));
        }
        let stats = ChannelStats::from_crops(&train, model.config.patch)?;
        let focal = match &config.alpha {
            Some(a) => FocalLossConfig::new(a.clone(), config.gamma)?,
            None => {
                let mut counts = vec![0u64; model.config.classes];
                for s in &train {
                    for (c, n) in s.class_counts().iter().enumerate().take(counts.len()) {
                        counts[c] += n;
                    }
                }
                FocalLossConfig::inverse_frequency(&counts, config.gamma)?
            }
        };
        let adam = AdamState::new(config.adam);
        Self::assemble(model, config, adam, stats, focal, 0, None, Vec::new(), train, val)
    }

    /// Continues from a checkpoint; the scenes must be the ones it was trained on.
    pub fn resume(ckpt: Checkpoint<T>, train: Vec<Scene>, val: Vec<Scene>) -> Result<Self> {
        let Checkpoint { model, train: config, adam, epoch, stats, focal, best_miou, history } = ckpt;
        Self::assemble(model, config, adam, stats, focal, epoch, best_miou, history, train, val)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        model: ConvTr<T>,
        config: TrainConfig,
        adam: AdamState<T>,
        stats: ChannelStats,
        focal: FocalLossConfig,
        epoch: usize,
        best_miou: Option<f64>,
        history: Vec<EpochLog>,
        train: Vec<Scene>,
        val: Vec<Scene>,
    ) -> Result<Self> {
        if focal.alpha.len() != model.config.classes || model.config.classes > NUM_CLASSES {
            return Err(Error::Config(format!("{} focal weights for a {}-class model", focal.alpha.len(), model.config.classes)));
        }
        let samplers: Vec<CropSampler> = train.iter().map(|s| CropSampler::new(s, model.config.patch)).collect();
        Ok(Self { model, config, adam, stats, focal, epoch, best_miou, history, output: None, overlap: 0, workers: 0, train, val, samplers })
    }

    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Self {
        self.output = Some(dir.into());
        self
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            train: self.config.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            stats: self.stats,
            focal: self.focal.clone(),
            best_miou: self.best_miou,
            history: self.history.clone(),
        }
    }

    /// Crop positions of one epoch, a pure function of the seed and the epoch index.
    pub fn epoch_windows(&self, epoch: usize) -> Result<Vec<(usize, Window)>> {
        let mut g = rng::stream(self.config.seed, EPOCH_STREAM + epoch as u64);
        let mut usable: Vec<usize> = (0..self.train.len()).collect();
        let mut out = Vec::with_capacity(self.config.crops_per_epoch);
        while out.len() < self.config.crops_per_epoch {
            if usable.is_empty() {
                return Err(Error::Data("no training scene contains a crop with more than one class".into()));
            }
            let pick = g.random_range(0..usable.len());
            match self.samplers[usable[pick]].draw(&mut g) {
                Ok(w) => out.push((usable[pick], w)),
                Err(_) => {
                    usable.remove(pick);
                }
            }
        }
        Ok(out)
    }

    fn fault(&self, epoch: usize, batch: usize, windows: &[(usize, Window)], what: &str) -> Error {
        if let Some(dir) = &self.output {
            let lines: Vec<String> = windows.iter().map(|(s, w)| format!("{} {} {}", self.train[*s].id, w.row, w.col)).collect();
            let record = format!("epoch={epoch} batch={batch} cause={what}\n{}\n", lines.join("\n"));
            // Best effort: the numeric fault is the error worth reporting.
            let _ = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(dir.join("fault.txt"), record));
        }
        Error::NumericFault { location: format!("{what} at epoch {epoch}, batch {batch}") }
    }

    /// One optimization pass over the epoch's crops.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let start = Instant::now();
        let epoch = self.epoch;
        let lr = self.config.schedule.lr_at(epoch);
        let windows = self.epoch_windows(epoch)?;
        let patch = self.model.config.patch;
        let mut cm = ConfusionMatrix::new(self.model.config.classes);
        let mut loss_sum = 0.0;
        let batches: Vec<&[(usize, Window)]> = windows.chunks(self.config.batch_size).collect();
        for (b, chunk) in batches.iter().enumerate() {
            let (train, stats) = (&self.train, &self.stats);
            let samples = par::map(chunk.len(), |i| extract_sample::<T>(&train[chunk[i].0], chunk[i].1, patch, stats));
            let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;
            let (x, y) = stack(&samples)?;
            let (logits, cache) = match self.model.forward_train(&x) {
                Err(Error::NumericFault { location }) => return Err(self.fault(epoch, b, chunk, &location)),
                other => other?,
            };
            let (loss, grad) = focal_loss_and_grad(&logits, &y, &self.focal, true)?;
            if !loss.is_finite() {
                return Err(self.fault(epoch, b, chunk, "loss"));
            }
            cm.accumulate(&ClassMap::argmax(&logits)?.data, &y)?;
            self.model.backward(&cache, &grad.expect("requested"))?;
            adam_step(&mut self.model, &mut self.adam, lr)?;
            self.model.zero_grad();
            loss_sum += loss * chunk.len() as f64;
        }
        let val_miou = if self.val.is_empty() { None } else { Some(self.evaluate(&self.val)?) };
        let train_miou = miou(&cm)?.miou;
        let log = EpochLog { epoch, loss: loss_sum / windows.len() as f64, miou: train_miou, val_miou, lr, wall_ms: start.elapsed().as_secs_f64() * 1e3 };
        self.epoch += 1;
        let score = val_miou.unwrap_or(train_miou);
        let improved = self.best_miou.is_none_or(|b| score > b);
        if improved {
            self.best_miou = Some(score);
        }
        self.history.push(log.clone());
        if let Some(dir) = self.output.clone() {
            std::fs::create_dir_all(&dir)?;
            let ckpt = self.checkpoint();
            ckpt.save(&dir.join(format!("epoch-{:03}.ckpt", log.epoch)))?;
            if improved {
                ckpt.save(&dir.join("best.ckpt"))?;
            }
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join("train.log"))?;
            writeln!(f, "{log}")?;
        }
        Ok(log)
    }

    /// Runs the remaining epochs up to `config.epochs`.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochLog)) -> Result<()> {
        while self.epoch < self.config.epochs {
            let log = self.run_epoch()?;
            on_epoch(&log);
        }
        Ok(())
    }

    /// mIoU of tiled inference over `scenes` with the current parameters.
    pub fn evaluate(&self, scenes: &[Scene]) -> Result<f64> {
        evaluate_scenes(&self.model, scenes, &self.stats, self.overlap, self.workers).and_then(|cm| Ok(miou(&cm)?.miou))
    }
}

/// Confusion matrix of tiled inference against the scenes' labels.
pub fn evaluate_scenes<T: Real>(model: &ConvTr<T>, scenes: &[Scene], stats: &ChannelStats, overlap: usize, workers: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.classes);
    for s in scenes {
        let plan = plan_tiles(s.height, s.width, model.config.patch, overlap)?;
        let out = tiled_inference(model, s, &plan, stats, workers)?;
        cm.accumulate(&out.classes.data, &s.labels)?;
    }
    Ok(cm)
}
