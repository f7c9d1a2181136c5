//! Desk-scale bias detection through specification-guided reasoning.
//!
//! A tiny from-scratch autoregressive model is trained in two stages to judge
//! text as biased or unbiased by reasoning through a loadable fairness
//! specification: supervised fine-tuning on correctness-filtered teacher
//! traces, then preference optimization over self-sampled traces against the
//! frozen stage-1 policy. An evaluation harness scores accuracy and
//! over-fairness across five ablation modes.
//!
//! Module map:
//! - [`lm`] — tokenizer, transformer forward/backward, Adam, sampling,
//!   checkpoints
//! - [`fairspec`] — the specification document, prompt assembly, trace
//!   parsing and rendering
//! - [`taskgen`] — synthetic corpus, labeling oracle, oracle teacher,
//!   external-dataset ingestion
//! - [`train`] — stage-1 SFT, stage-2 sampling/pairing/preference loss
//! - [`eval`] — metrics, ablation runner, reports
//! - [`pipeline`] — config, fingerprinting, artifact layout, orchestration

pub mod eval;
pub mod fairspec;
pub mod lm;
pub mod pipeline;
pub mod rng;
pub mod taskgen;
pub mod train;
