//! Training loops for the auto-encoder, base and upsampler stages, their
//! checkpoints, and end-to-end generation from a silhouette.

mod config;
mod infer;
mod loss;
mod train;

pub use config::{LowresSource, Preset, TrainConfig, CONFIG_KEYS};
pub use infer::{generate, Generated};
pub use loss::{diffusion_loss, regularization_loss, LossParts, RegLoss, StepDraws, TrainSample};
pub use train::{
    files, load_autoencoder, load_denoiser, load_embeddings, read_meta, run_training, train_step, train_step_base,
    train_step_upsampler, upsampler_example, CheckpointMeta, Progress, RngState, RunOptions, Stage, StepLog,
    TrainingLock,
};
