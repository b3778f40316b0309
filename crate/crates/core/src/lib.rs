//! Decoupled multimodal contrastive learning at desk scale.
//!
//! Trains a text encoder and an image encoder into a shared space with a
//! combination of global and local (word–patch attention aligned) InfoNCE
//! losses plus a teacher-anchored distillation regularizer, then evaluates
//! sentence similarity and three-way inference using the text encoder
//! alone. Gradients come from a small reverse-mode tape and every loss is
//! certified against central finite differences.

pub mod data;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod objective;
pub mod trainer;
pub mod verify;

pub use data::{Corpus, EvalPair, Label, PairedSample, SynthConfig};
pub use diffcore::{
    cosine, grad_check, log_sum_exp, softmax_temp, DenseMatrix, GradCheckReport, Tape,
};
pub use encoders::{
    EncoderConfig, EncoderParams, ImageFeatures, PatchGrid, TeacherSnapshot, TextFeatures,
    TokenSequence,
};
pub use error::{Error, Result};
pub use evaluator::{EvalMode, EvalReport, Thresholds};
pub use objective::{AttentionMap, EnergyMatrix, LossBreakdown, LossWeights};
pub use trainer::{Checkpoint, TrainConfig};
