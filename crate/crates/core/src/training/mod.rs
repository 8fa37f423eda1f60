//! Two-stage training, checkpoints and inference.

mod batch;
mod checkpoint;
mod config;
mod infer;
mod schedule;
mod stages;

pub use batch::{pose_tensor, Batch, PreparedDataset, PreparedSample};
pub use checkpoint::{Checkpoint, EpochMetrics, Stage, FORMAT_VERSION};
pub use config::TrainConfig;
pub use infer::{infer_clothing_transfer, infer_pose_transfer, output_image, Synthesizer, TargetParsing};
pub use schedule::lr_at;
pub use stages::{
    check_parsing_compatible, gan_trainer_for_steps, train_generator, train_parsing, GanTrainer, GeneratorModel,
    ParsingModel, ParsingTrainer, RunOptions, StepMetrics, TrainOutput,
};
