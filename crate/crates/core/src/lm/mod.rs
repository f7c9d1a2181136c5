//! Tiny decoder-only autoregressive language model: tokenizer, forward pass,
//! reverse-mode gradients, Adam, temperature sampling and sequence
//! log-probability. Everything is f64 and deterministic per seed.
//!
//! Read-only operations (`forward_logits`, `sequence_logprob`, sampling) take
//! `&self` and share no mutable state, so a parameter snapshot can be used
//! from several threads; optimizer steps need `&mut` access.

mod adam;
mod checkpoint;
mod config;
mod grad;
mod model;
mod sample;
mod tensor;
mod vocab;

pub use adam::{adam_step, AdamState};
pub use checkpoint::Checkpoint;
pub use config::LmConfig;
pub use grad::SeqForward;
pub use model::{LayerParams, LmParams};
pub use sample::Decode;
pub use tensor::{
    entropy, log_sum_exp, softmax, softmax_temperature, softplus, sigmoid, Mat,
};
pub use vocab::{segment, TokenId, TokenSeq, Vocab, BOS, EOS, PAD};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("unknown token piece {0:?}")]
    UnknownToken(String),
    #[error("sequence length {len} exceeds context length {context_len}")]
    SeqTooLong { len: usize, context_len: usize },
    #[error("completion region is empty (boundary == length)")]
    EmptyCompletion,
    #[error("prompt region is empty; completions need a conditioning prefix")]
    EmptyPrompt,
    #[error("boundary {boundary} exceeds sequence length {len}")]
    InvalidBoundary { boundary: usize, len: usize },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}
