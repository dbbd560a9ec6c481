//! Multi-source sequence-to-sequence translation, built from scratch.
//!
//! One bidirectional LSTM encoder and one bilinear ("general") attention
//! per source language feed a shared LSTM decoder: per-step attention
//! contexts are concatenated with the decoder state and projected through
//! tanh before the output layer. Sources absent from a row contribute a
//! zero context, so disjoint mixtures of bitexts train the same decoder.
//!
//! Everything runs in double precision, and training gradients come from
//! the reverse-mode [`tape`], which is verified against central finite
//! differences down to the acceptance tolerance.

pub mod batch;
pub mod model;
pub mod tape;
pub mod train;

pub use batch::{SourceBatch, TrainingBatch};
pub use model::{
    global_attention, Checkpoint, DecoderState, EncodedSource, MsnmtModel, StepOutput,
};
pub use train::{
    batch_loss, loss_and_gradients, sgd_step, train, write_training_log, EpochStats, ModelGrads,
    TrainSchedule,
};

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NmtError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("attention over fully masked positions")]
    AllPositionsMasked,
    #[error("translate needs at least one source sentence")]
    NoSourceProvided,
    #[error("batch contains no target tokens to predict")]
    EmptyTarget,
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Model and optimizer settings. The paper-scale values are the defaults;
/// tests and the toy experiments override them downwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub emb_dim: usize,
    /// Total bidirectional width; each encoder direction is half this.
    pub hidden_dim: usize,
    /// LSTM layers per encoder and for the decoder.
    pub enc_layers: usize,
    /// Per-source-language vocabulary sizes, specials included.
    pub vocab_size_src: Vec<usize>,
    pub vocab_size_tgt: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Hyperparams {
    /// Full-scale settings: 500-dim embeddings, 4-layer 1000-unit
    /// bidirectional LSTMs, SGD at learning rate 1, 20 epochs.
    pub fn full_scale(vocab_size_src: Vec<usize>, vocab_size_tgt: usize, seed: u64) -> Self {
        Hyperparams {
            emb_dim: 500,
            hidden_dim: 1000,
            enc_layers: 4,
            vocab_size_src,
            vocab_size_tgt,
            learning_rate: 1.0,
            epochs: 20,
            grad_clip_norm: 5.0,
            seed,
        }
    }

    pub fn validate(&self, n_sources: usize) -> Result<(), NmtError> {
        let fail = |m: &str| Err(NmtError::InvalidHyperparams(m.to_string()));
        if n_sources == 0 {
            return fail("need at least one source language");
        }
        if self.vocab_size_src.len() != n_sources {
            return fail("vocab_size_src must have one entry per source language");
        }
        if self.emb_dim == 0 || self.enc_layers == 0 {
            return fail("emb_dim and enc_layers must be >= 1");
        }
        if self.hidden_dim < 2 || self.hidden_dim % 2 != 0 {
            return fail("hidden_dim must be even (bidirectional halves)");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if !(self.grad_clip_norm > 0.0) {
            return fail("grad_clip_norm must be positive");
        }
        if self.vocab_size_tgt < Vocabulary::SPECIALS.len()
            || self.vocab_size_src.iter().any(|&v| v < Vocabulary::SPECIALS.len())
        {
            return fail("vocabularies must at least hold the special symbols");
        }
        Ok(())
    }
}

/// Symbol table with the four special ids pinned to the low indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;

impl Vocabulary {
    pub const SPECIALS: [&'static str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

    /// Builds a vocabulary from symbols in first-seen order, after the
    /// four specials.
    pub fn from_symbols<I, S>(symbols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary { symbols: Vec::new(), index: HashMap::new() };
        for s in Self::SPECIALS {
            v.push_symbol(s);
        }
        for s in symbols {
            let s = s.as_ref();
            if !v.index.contains_key(s) {
                v.push_symbol(s);
            }
        }
        v
    }

    fn push_symbol(&mut self, s: &str) {
        self.index.insert(s.to_string(), self.symbols.len() as u32);
        self.symbols.push(s.to_string());
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the specials are always present
    }

    pub fn id(&self, symbol: &str) -> u32 {
        self.index.get(symbol).copied().unwrap_or(UNK_ID)
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn encode_tokens<'a, I: IntoIterator<Item = &'a str>>(&self, tokens: I) -> Vec<u32> {
        tokens.into_iter().map(|t| self.id(t)).collect()
    }

    pub fn decode_ids(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.symbol(i).unwrap_or(Self::SPECIALS[1]).to_string()).collect()
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Vec<String> {
        v.symbols
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = NmtError;

    fn try_from(symbols: Vec<String>) -> Result<Self, NmtError> {
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i as u32).is_some() {
                return Err(NmtError::InvalidVocabulary(format!("symbol {s:?} repeats")));
            }
        }
        for (i, s) in Vocabulary::SPECIALS.iter().enumerate() {
            if symbols.get(i).map(String::as_str) != Some(*s) {
                return Err(NmtError::InvalidVocabulary(format!(
                    "special {s:?} must sit at index {i}"
                )));
            }
        }
        Ok(Vocabulary { symbols, index })
    }
}
