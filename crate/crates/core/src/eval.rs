//! Tokenized corpus-level BLEU-4 with a pluggable pre-scoring segmenter.
//!
//! The statistic follows the original corpus-level definition: clipped
//! n-gram matches and totals are summed over all segment pairs before the
//! precisions are combined, which matters for short sentences. A zero
//! precision at any order yields a score of exactly 0 unless add-one
//! smoothing is enabled.

use crate::corpus::Sentence;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

const MAX_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("hypothesis/reference length mismatch: {hyps} vs {refs}")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("cannot score an empty corpus")]
    EmptyCorpus,
}

/// Splits a sentence into scoring units. The default is whitespace; a
/// morphological tool can plug in here.
pub trait Segmenter: Send + Sync {
    fn segment(&self, sentence: &Sentence) -> Vec<String>;
}

/// Splits on Unicode whitespace runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceSegmenter;

pub fn whitespace_segmenter() -> WhitespaceSegmenter {
    WhitespaceSegmenter
}

impl Segmenter for WhitespaceSegmenter {
    fn segment(&self, sentence: &Sentence) -> Vec<String> {
        sentence.tokens().map(str::to_string).collect()
    }
}

/// Whitespace split, then greedily strips one matching suffix from each
/// word as a separate token (longest suffix wins). A crude stand-in for a
/// real morphological segmenter.
#[derive(Debug, Clone)]
pub struct SuffixStubSegmenter {
    suffixes: Vec<String>,
}

pub fn suffix_stub_segmenter(suffixes: &[&str]) -> SuffixStubSegmenter {
    let mut suffixes: Vec<String> =
        suffixes.iter().filter(|s| !s.is_empty()).map(|s| s.to_string()).collect();
    // Longest-match order.
    suffixes.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    SuffixStubSegmenter { suffixes }
}

impl Segmenter for SuffixStubSegmenter {
    fn segment(&self, sentence: &Sentence) -> Vec<String> {
        let mut out = Vec::new();
        for word in sentence.tokens() {
            let split = self.suffixes.iter().find_map(|suf| {
                if word.len() > suf.len() && word.ends_with(suf.as_str()) {
                    Some((&word[..word.len() - suf.len()], suf.as_str()))
                } else {
                    None
                }
            });
            match split {
                Some((stem, suf)) => {
                    out.push(stem.to_string());
                    out.push(suf.to_string());
                }
                None => out.push(word.to_string()),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Smoothing {
    /// Original metric: a zero n-gram precision annihilates the score.
    #[default]
    None,
    /// Add one to match and total counts for orders 2..4; useful on toy
    /// corpora with very short sentences.
    AddOne,
}

/// Corpus BLEU-4 plus the statistics it was computed from. `bleu` is in
/// [0, 1]; use [`BleuReport::percent`] for the conventional 0-100 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuReport {
    pub fn percent(&self) -> f64 {
        self.bleu * 100.0
    }

    /// Two-decimal percentage with half-up rounding: 0.2692 renders "26.92".
    pub fn percent_string(&self) -> String {
        format!("{:.2}", (self.percent() * 100.0).round() / 100.0)
    }
}

/// Scores hypotheses against single references, both segmented by `seg`,
/// without smoothing.
pub fn bleu4(
    hypotheses: &[Sentence],
    references: &[Sentence],
    seg: &dyn Segmenter,
) -> Result<BleuReport, EvalError> {
    bleu4_with(hypotheses, references, seg, Smoothing::None)
}

pub fn bleu4_with(
    hypotheses: &[Sentence],
    references: &[Sentence],
    seg: &dyn Segmenter,
    smoothing: Smoothing,
) -> Result<BleuReport, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::LengthMismatch { hyps: hypotheses.len(), refs: references.len() });
    }
    if hypotheses.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }

    let mut matches = [0u64; MAX_ORDER];
    let mut totals = [0u64; MAX_ORDER];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;

    for (hyp, rf) in hypotheses.iter().zip(references) {
        let h = seg.segment(hyp);
        let r = seg.segment(rf);
        hyp_len += h.len() as u64;
        ref_len += r.len() as u64;
        for n in 1..=MAX_ORDER {
            let (m, t) = clipped_ngram_matches(&h, &r, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }

    let mut precisions = [0.0f64; MAX_ORDER];
    for n in 0..MAX_ORDER {
        let (mut m, mut t) = (matches[n], totals[n]);
        if smoothing == Smoothing::AddOne && n > 0 {
            m += 1;
            t += 1;
        }
        precisions[n] = if t == 0 { 0.0 } else { m as f64 / t as f64 };
    }

    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };

    let bleu = if hyp_len == 0 || precisions.iter().any(|&p| p <= 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        brevity_penalty * log_mean.exp()
    };

    Ok(BleuReport { bleu, precisions, brevity_penalty, hyp_len, ref_len })
}

/// Clipped matches and hypothesis n-gram total for one segment pair.
fn clipped_ngram_matches(hyp: &[String], rf: &[String], n: usize) -> (u64, u64) {
    if hyp.len() < n {
        return (0, 0);
    }
    let total = (hyp.len() - n + 1) as u64;
    let mut ref_counts: HashMap<&[String], u64> = HashMap::new();
    if rf.len() >= n {
        for gram in rf.windows(n) {
            *ref_counts.entry(gram).or_insert(0) += 1;
        }
    }
    let mut hyp_counts: HashMap<&[String], u64> = HashMap::new();
    for gram in hyp.windows(n) {
        *hyp_counts.entry(gram).or_insert(0) += 1;
    }
    let matches = hyp_counts
        .iter()
        .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    (matches, total)
}
