//! A desk-scale vision-language model for acute tuberculosis screening on
//! chest radiographs.
//!
//! The stack runs bottom-up: [`Tensor`] arithmetic and a reverse-mode
//! [`Tape`]; transformer blocks ([`nn`]); the visual and text encoders,
//! cross-modal fusion and the report decoder; the pretraining and
//! fine-tuning objectives and loops; and the evaluation suite. A synthetic
//! [`corpus`] of paired radiographs and notes stands in for clinical data.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::ModelConfig;
pub use corpus::{Annotation, Case, CorpusConfig, Pathology, Zone, N_PATHOLOGIES};
pub use error::{Error, Result, TensorError};
pub use fusion::Strategy;
pub use model::{describe_model, init_params, Model, ModelDescription};
pub use optim::{AdamWHyper, AdamWState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use text::{TokenSequence, Vocabulary};
pub use trainer::{finetune, pretrain, TrainConfig, TrainOutcome};
pub use eval::{evaluate_model, EvalReport};
