//! Core of the patchscopes laboratory: a small decoder-only transformer with
//! full residual access and interventions, its trainer, and the patching,
//! mapping and evaluation machinery built on top.

pub mod api;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod fixtures;
pub mod format;
pub mod intervention;
mod kernels;
pub mod model;
pub mod numerics;
pub mod patchscope;
pub mod tokenizer;
pub mod train;
pub mod zoo;

pub use engine::{forward, generate, project_to_vocab, Distribution, ForwardOptions, GenerateOptions, GenerationResult, HiddenTrace};
pub use error::{Error, Result};
pub use format::{load_model, save_model};
pub use intervention::{AttentionBlock, AttentionMask, EmbeddingCorruption, PatchPlan, ResidualPatch};
pub use model::{ModelBundle, ModelConfig, NormKind};
pub use numerics::{Matrix, Rng, Vector};
pub use tokenizer::{Tokenizer, TokenizerMode};
