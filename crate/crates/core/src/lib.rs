//! Latent-mask sequence augmentation for small seq2seq models.
//!
//! SeqMix, its hard-mask variant, SwitchOut, WordDrop and a plain baseline
//! share one pipeline: draw a mask over two aligned token sequences, build
//! (possibly relaxed) inputs and targets, and train an LSTM encoder–decoder
//! on the soft negative log-likelihood.

pub mod data;
pub mod error;
pub mod mixer;
pub mod model;
pub mod numkit;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
pub use mixer::{MixedExample, SequencePair, SoftRow, SoftSequence, TokenId};
pub use sampling::{Method, MethodConfig, RngStream};
