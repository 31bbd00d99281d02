//! Core library for the `kreplay` experiment framework.
//!
//! The crate builds a self-contained, CPU-scale testbed for knowledge-retaining
//! fine-tuning of a conditional caption generator:
//!
//! * [`corpus`] — vocabulary, word-level tokenization and the JSON Lines
//!   dataset schemas with loaders and validators.
//! * [`synthworld`] — deterministic generator of a synthetic data regime:
//!   a noisy knowledge-bearing pretraining corpus, an entity-free generic
//!   captioning set and a knowledge eval set with seen/unseen splits.
//! * [`model`] — a small causal decoder with cross-attention over image
//!   region features, teacher-forced scoring, greedy decoding and manual
//!   backprop (generic over `f32`/`f64`).
//! * [`losses`] — cross-entropy, accumulated keyword probability, coverage
//!   loss, degeneration penalty, temperature-softened KL distillation and
//!   the combined objective, all as pure differentiable functions.
//! * [`replay`] — keyword filtering of the pretraining corpus into a replay
//!   exemplar set, plus seen/unseen category splits.
//! * [`trainer`] — the three training stages (pretrain, vanilla fine-tune,
//!   knowledge replay fine-tune) with checkpointing and model selection.
//! * [`evalkit`] — corpus BLEU-1..4, ROUGE-L, CIDEr-D and keyword
//!   recognition accuracy, built from scratch.

pub mod corpus;
pub mod evalkit;
pub mod losses;
pub mod model;
pub mod replay;
pub mod synthworld;
pub mod trainer;
pub mod util;
