//! Pivot-based corpus extension and multi-source neural machine translation.
//!
//! The crate covers the full pipeline for a low-resource language pair:
//!
//! - [`corpus`]: parallel / N-way corpus data model, file I/O and the
//!   cleaning chain (length filter, deduplication, `<unk>` removal).
//! - [`subword`]: byte-pair-encoding training, application, inversion and
//!   a vocabulary coverage diagnostic.
//! - [`synth`]: synthetic-target and synthetic-source corpus construction
//!   through a pluggable translator, plus toy languages for verification.
//! - [`nmt`]: a from-scratch multi-encoder / multi-attention LSTM
//!   sequence-to-sequence model trained with SGD, with reverse-mode
//!   differentiation checked against finite differences.
//! - [`eval`]: tokenized corpus-level BLEU-4 with a pluggable segmenter.
//! - [`experiment`]: a seeded, resumable runner that trains the five
//!   model variants on toy languages and reports a score table.

pub mod corpus;
pub mod eval;
pub mod experiment;
pub mod nmt;
pub mod subword;
pub mod synth;
