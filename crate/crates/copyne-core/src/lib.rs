//! Contextual sequence transduction with span-level entity copying.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod dict;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod rng;
pub mod train;
pub mod vocab;

pub use autodiff::{grad_check, Gradients, Graph, NodeId, ParamSet, Tensor};
pub use config::RunConfig;
pub use corpus::{AcousticFrames, Lexicon, SynthConfig, Utterance};
pub use decode::{BeamConfig, DecodeResult, Hypothesis};
pub use dict::{CopyTargets, EntityDict};
pub use error::{Error, Result};
pub use eval::{Alignment, Scores};
pub use loss::LossBreakdown;
pub use model::{Mode, Model, ModelConfig};
pub use rng::StreamRng;
pub use train::TrainConfig;
pub use vocab::Vocab;
