//! Hierarchical cross-attention fusion of text, audio and video feature
//! sequences for comic-mischief classification, with matching and
//! contrastive pretraining, multi-task fine-tuning and an evaluation
//! harness.

pub mod autograd;
pub mod checkpoint;
pub mod data_model;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod hca;
pub mod heads;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod synth;
pub mod train_eval;

pub use error::{Error, Result};
