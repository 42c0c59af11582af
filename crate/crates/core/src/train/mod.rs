mod checkpoint;
mod config;
mod loss;
mod optim;
mod trainer;

pub use checkpoint::{checkpoint_precision, Checkpoint, EpochLog, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub(crate) use config::{join_list, parse, parse_list};
pub use loss::{cross_entropy, cross_entropy_backward, focal_loss, focal_loss_and_grad, focal_loss_backward, FocalLossConfig};
pub use optim::{adam_step, AdamConfig, AdamState, Moments, Schedule};
pub use trainer::{evaluate_scenes, Trainer};
