//! The parameterized motion prior (PMP).
//!
//! A pre-norm transformer that maps a perturbed motion sequence to a corrected
//! one. Frames attend to each other (self-attention), then to a conditioning
//! memory made of text-token embeddings and a motion-strength embedding
//! (cross-attention), then pass through a GELU feed-forward block. One model
//! serves every category: inputs are zero-padded to `max_pose_dim` and tagged
//! with a category one-hot; the loss only sees un-padded channels.
//!
//! Gradients are derived by hand (see [`model`]) and checked against central
//! differences by [`grad_check`].

mod checkpoint;
mod config;
pub mod model;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{default_vocab, PmpConfig};
pub use model::{strength_features, Conditioning, Params, PmpModel};
pub use train::{
    conditioning_for, draw_example, evaluate_denoising, grad_check, pmp_loss, pmp_train, write_training_log,
    CorpusItem, DenoiseScore, Example, TrainConfig, TrainingLog, GRAD_CHECK_SAMPLES,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PmpError {
    #[error("invalid PMP config: {0}")]
    InvalidConfig(String),
    #[error("{frames} frames exceed max_frames {max}")]
    TooManyFrames { frames: usize, max: usize },
    #[error("pose_dim {pose_dim} exceeds max_pose_dim {max}")]
    PoseDimExceedsMax { pose_dim: usize, max: usize },
    #[error("unknown conditioning token {0:?}")]
    UnknownToken(String),
    #[error("token index {index} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { index: usize, vocab: usize },
    #[error("too many conditioning tokens: {0} (max 32)")]
    TooManyTokens(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Motion(#[from] crate::motion::MotionError),
    #[error(transparent)]
    Perturb(#[from] crate::perturb::PerturbError),
}
