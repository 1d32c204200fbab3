//! Adaptive latent chain-of-thought transformer engine.
//!
//! A decoder-only transformer that, before emitting each token, runs a
//! variable number of extra forward passes ("latent steps") at that position.
//! The last-layer hidden state of each pass is fed back as the input of the
//! next, a small router decides per step whether to continue, and the final
//! prediction mixes all per-step states by their halting probabilities.
//! Latent steps of different positions run in parallel under a 2D attention
//! mask instead of being spliced into the 1D sequence.
//!
//! The crate is organized so the probability flow ([`halting`]), the mask
//! ([`mask`]), the model itself ([`model`]), the losses ([`objective`]) and
//! the reference implementations ([`oracle`]) can each be tested in
//! isolation; [`trainer`], [`infer`] and [`analysis`] build on them.

pub mod analysis;
pub mod data;
pub mod halting;
pub mod infer;
pub mod mask;
pub mod math;
pub mod model;
pub mod objective;
pub mod oracle;
pub mod real;
pub mod trainer;

mod error;

pub use error::{Error, Result};
pub use halting::{GateVector, HaltingSchedule, LatentLen};
pub use mask::{GridIndex, ParallelMask, StepMask};
pub use model::{
    load_checkpoint, save_checkpoint, FeedKind, LatentModel, ModelConfig, RawCheckpoint,
    RouterKind, SeqUnroll, UnrollOptions, Weights,
};
pub use data::Corpus;
pub use infer::{generate, DecodeSession, DecodeTrace, GenerateConfig, Generated};
pub use objective::{seq_loss, seq_loss_and_grad, AdaptiveLossConfig, SeqLoss};
pub use real::{Precision, Real};
pub use trainer::{evaluate, EvalStats, TrainConfig, Trainer, TrainMetrics};

