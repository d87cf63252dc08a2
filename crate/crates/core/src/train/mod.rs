//! Initialization, RMSprop, plateau scheduling, the epoch loop and checkpoints.

mod checkpoint;
mod config;
mod optim;
mod runner;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CKPT_MAGIC, CKPT_VERSION};
pub use config::{Monitor, TrainConfig};
pub use optim::{rmsprop_step, scale_lr, xavier_bound, xavier_init, OptimizerState, PlateauConfig, PlateauState};
pub use runner::{history_csv, train_loop, BestModel, EpochRecord, TrainOutcome, TrainState, HISTORY_HEADER};
