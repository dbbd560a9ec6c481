//! Parallel and N-way corpus data model, filtering chain, and alignment.
//!
//! Corpora are immutable values: every operation returns a new corpus and
//! preserves the relative order of surviving pairs, so filters compose and
//! can be verified as order-preserving subsequences of their input.

mod io;

pub use io::{load_multiway, load_parallel, save_multiway, save_parallel};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line count mismatch: {src_lines} source lines vs {tgt_lines} target lines")]
    LineCountMismatch { src_lines: usize, tgt_lines: usize },
    #[error("invalid UTF-8 on line {line}")]
    Encoding { line: usize },
    #[error("sentence contains a line break")]
    LineBreakInSentence,
    #[error("sentence contains a tab and cannot be stored in a TSV cell")]
    TabInSentence,
    #[error("source language {0} appears more than once")]
    LanguageCollision(String),
    #[error("corpora do not share a target language: {0} vs {1}")]
    TargetMismatch(String, String),
    #[error("no corpora given to align")]
    NoCorpora,
    #[error("multi-way row {row} has no available source")]
    EmptySourceRow { row: usize },
    #[error("invalid filter config: {0}")]
    InvalidFilterConfig(String),
    #[error("malformed multi-way file: {0}")]
    MalformedMultiway(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A single sentence: UTF-8 text with no line breaks.
///
/// Tokens are derived by whitespace splitting; the pre-subword pipeline has
/// no other notion of a unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sentence(String);

impl Sentence {
    pub fn new(text: impl Into<String>) -> Result<Self, CorpusError> {
        let text = text.into();
        if text.contains('\n') || text.contains('\r') {
            return Err(CorpusError::LineBreakInSentence);
        }
        Ok(Sentence(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.0.split_whitespace()
    }

    pub fn token_count(&self) -> usize {
        self.tokens().count()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::fmt::Display for Sentence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Where a sentence pair came from.
///
/// Synthetic-source pairs keep their target verbatim from the original
/// bitext; synthetic-target pairs keep their source verbatim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Original,
    SyntheticSource,
    SyntheticTarget,
}

/// An aligned sentence pair. Provenance is fixed at construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    source: Sentence,
    target: Sentence,
    provenance: Provenance,
}

impl SentencePair {
    pub fn new(source: Sentence, target: Sentence, provenance: Provenance) -> Self {
        SentencePair { source, target, provenance }
    }

    pub fn source(&self) -> &Sentence {
        &self.source
    }

    pub fn target(&self) -> &Sentence {
        &self.target
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
}

/// An ordered parallel corpus for one language pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    src_lang: String,
    tgt_lang: String,
    pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(src_lang: impl Into<String>, tgt_lang: impl Into<String>) -> Self {
        Self::from_pairs(src_lang, tgt_lang, Vec::new())
    }

    pub fn from_pairs(
        src_lang: impl Into<String>,
        tgt_lang: impl Into<String>,
        pairs: Vec<SentencePair>,
    ) -> Self {
        ParallelCorpus { src_lang: src_lang.into(), tgt_lang: tgt_lang.into(), pairs }
    }

    pub fn src_lang(&self) -> &str {
        &self.src_lang
    }

    pub fn tgt_lang(&self) -> &str {
        &self.tgt_lang
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn push(&mut self, pair: SentencePair) {
        self.pairs.push(pair);
    }

    /// Keeps pairs whose token counts lie within the configured bounds and
    /// whose length ratio (either direction) does not exceed `max_ratio`.
    pub fn length_filter(&self, cfg: &FilterConfig) -> Result<ParallelCorpus, CorpusError> {
        cfg.validate()?;
        let pairs = self
            .pairs
            .iter()
            .filter(|p| {
                let s = p.source().token_count();
                let t = p.target().token_count();
                if s < cfg.min_len || s > cfg.max_len || t < cfg.min_len || t > cfg.max_len {
                    return false;
                }
                // min_len >= 1 guarantees both are nonzero here.
                let ratio = (s as f64 / t as f64).max(t as f64 / s as f64);
                ratio <= cfg.max_ratio
            })
            .cloned()
            .collect();
        Ok(ParallelCorpus::from_pairs(&self.src_lang, &self.tgt_lang, pairs))
    }

    /// Keeps the first occurrence of each exact (source, target) text pair.
    pub fn dedup(&self) -> ParallelCorpus {
        let mut seen: HashSet<(&str, &str)> = HashSet::new();
        let pairs = self
            .pairs
            .iter()
            .filter(|p| seen.insert((p.source().as_str(), p.target().as_str())))
            .cloned()
            .collect();
        ParallelCorpus::from_pairs(&self.src_lang, &self.tgt_lang, pairs)
    }

    /// Drops pairs where `unk_symbol` occurs as a substring on either side.
    pub fn unk_filter(&self, unk_symbol: &str) -> ParallelCorpus {
        let pairs = self
            .pairs
            .iter()
            .filter(|p| {
                !p.source().as_str().contains(unk_symbol)
                    && !p.target().as_str().contains(unk_symbol)
            })
            .cloned()
            .collect();
        ParallelCorpus::from_pairs(&self.src_lang, &self.tgt_lang, pairs)
    }

    /// Seeded uniform sample of `n` pairs with relative order preserved.
    /// Returns the corpus unchanged when `n >= len`.
    pub fn truncate(&self, n: usize, seed: u64) -> ParallelCorpus {
        if n >= self.pairs.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep: Vec<usize> = rand::seq::index::sample(&mut rng, self.pairs.len(), n).into_vec();
        keep.sort_unstable();
        let pairs = keep.into_iter().map(|i| self.pairs[i].clone()).collect();
        ParallelCorpus::from_pairs(&self.src_lang, &self.tgt_lang, pairs)
    }
}

/// Thresholds for the cleaning chain. The paper-style chain is
/// length filter, dedup, `<unk>` removal, in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub max_ratio: f64,
    pub unk_symbol: String,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { min_len: 1, max_len: 100, max_ratio: 3.0, unk_symbol: "<unk>".to_string() }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.min_len < 1 {
            return Err(CorpusError::InvalidFilterConfig("min_len must be >= 1".into()));
        }
        if self.min_len > self.max_len {
            return Err(CorpusError::InvalidFilterConfig("min_len > max_len".into()));
        }
        if !(self.max_ratio >= 1.0) {
            return Err(CorpusError::InvalidFilterConfig("max_ratio must be >= 1".into()));
        }
        Ok(())
    }
}

/// Runs the full cleaning chain: length filter, dedup, unk removal.
pub fn filter_chain(corpus: &ParallelCorpus, cfg: &FilterConfig) -> Result<ParallelCorpus, CorpusError> {
    Ok(corpus.length_filter(cfg)?.dedup().unk_filter(&cfg.unk_symbol))
}

/// One row of an N-way corpus: per-language optional sources plus a target.
/// The availability mask is derived: `mask[i]` is true iff `sources[i]` is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiRow {
    pub sources: Vec<Option<Sentence>>,
    pub target: Sentence,
}

impl MultiRow {
    pub fn mask(&self) -> Vec<bool> {
        self.sources.iter().map(Option::is_some).collect()
    }

    pub fn available_count(&self) -> usize {
        self.sources.iter().filter(|s| s.is_some()).count()
    }
}

/// N source-language sentence columns aligned to one target column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiWayCorpus {
    source_langs: Vec<String>,
    tgt_lang: String,
    rows: Vec<MultiRow>,
}

impl MultiWayCorpus {
    pub fn new(source_langs: Vec<String>, tgt_lang: impl Into<String>) -> Self {
        MultiWayCorpus { source_langs, tgt_lang: tgt_lang.into(), rows: Vec::new() }
    }

    pub fn source_langs(&self) -> &[String] {
        &self.source_langs
    }

    pub fn tgt_lang(&self) -> &str {
        &self.tgt_lang
    }

    pub fn rows(&self) -> &[MultiRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push_row(&mut self, row: MultiRow) -> Result<(), CorpusError> {
        if row.sources.len() != self.source_langs.len() || row.available_count() == 0 {
            return Err(CorpusError::EmptySourceRow { row: self.rows.len() });
        }
        self.rows.push(row);
        Ok(())
    }
}

/// How to combine several bitexts into one multi-way corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignMode {
    /// Inner join on exact target text; every mask column is true.
    ByTargetKey,
    /// Concatenate all pairs as rows with exactly one available source.
    Disjoint,
}

/// Combines bitexts that share a target language into a multi-way corpus.
///
/// `ByTargetKey` keeps targets that occur in every corpus (first occurrence
/// per corpus), in the order of the first corpus. `Disjoint` concatenates
/// all pairs in corpus order, producing one-hot availability masks.
pub fn align_multiway(
    corpora: &[ParallelCorpus],
    mode: AlignMode,
) -> Result<MultiWayCorpus, CorpusError> {
    let first = corpora.first().ok_or(CorpusError::NoCorpora)?;
    let tgt_lang = first.tgt_lang().to_string();
    let mut seen_langs = HashSet::new();
    for c in corpora {
        if c.tgt_lang() != tgt_lang {
            return Err(CorpusError::TargetMismatch(tgt_lang, c.tgt_lang().to_string()));
        }
        if !seen_langs.insert(c.src_lang().to_string()) {
            return Err(CorpusError::LanguageCollision(c.src_lang().to_string()));
        }
    }
    let source_langs: Vec<String> = corpora.iter().map(|c| c.src_lang().to_string()).collect();
    let mut out = MultiWayCorpus::new(source_langs, tgt_lang);

    match mode {
        AlignMode::Disjoint => {
            for (li, c) in corpora.iter().enumerate() {
                for p in c.pairs() {
                    let mut sources = vec![None; corpora.len()];
                    sources[li] = Some(p.source().clone());
                    out.push_row(MultiRow { sources, target: p.target().clone() })?;
                }
            }
        }
        AlignMode::ByTargetKey => {
            // First source sentence per distinct target, per corpus.
            let maps: Vec<HashMap<&str, &Sentence>> = corpora
                .iter()
                .map(|c| {
                    let mut m = HashMap::new();
                    for p in c.pairs() {
                        m.entry(p.target().as_str()).or_insert(p.source());
                    }
                    m
                })
                .collect();
            let mut emitted = HashSet::new();
            for p in first.pairs() {
                let key = p.target().as_str();
                if !emitted.insert(key) {
                    continue;
                }
                if maps.iter().all(|m| m.contains_key(key)) {
                    let sources = maps.iter().map(|m| Some((*m.get(key).unwrap()).clone())).collect();
                    out.push_row(MultiRow { sources, target: p.target().clone() })?;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(s: &str, t: &str) -> SentencePair {
        SentencePair::new(
            Sentence::new(s).unwrap(),
            Sentence::new(t).unwrap(),
            Provenance::Original,
        )
    }

    fn corpus_of(pairs: &[(&str, &str)]) -> ParallelCorpus {
        ParallelCorpus::from_pairs(
            "src",
            "tgt",
            pairs.iter().map(|(s, t)| pair(s, t)).collect(),
        )
    }

    #[test]
    fn sentence_rejects_line_breaks() {
        assert!(Sentence::new("a\nb").is_err());
        assert!(Sentence::new("a\rb").is_err());
        assert!(Sentence::new("a b").is_ok());
    }

    #[test]
    fn length_filter_examples() {
        let cfg = FilterConfig { min_len: 1, max_len: 80, max_ratio: 3.0, ..Default::default() };
        let c = corpus_of(&[("a b", "x y")]);
        assert_eq!(c.length_filter(&cfg).unwrap().len(), 1);

        // 9-token source vs 2-token target: ratio 4.5 exceeds 3.0.
        let c = corpus_of(&[("a a a a a a a a a", "x y")]);
        assert_eq!(c.length_filter(&cfg).unwrap().len(), 0);

        // Empty source after tokenization falls below min_len 1.
        let c = corpus_of(&[("", "x")]);
        assert_eq!(c.length_filter(&cfg).unwrap().len(), 0);
    }

    #[test]
    fn dedup_examples() {
        let c = corpus_of(&[("a", "x"), ("a", "x"), ("b", "y")]);
        let d = c.dedup();
        assert_eq!(d.len(), 2);
        assert_eq!(d.pairs()[0].source().as_str(), "a");
        assert_eq!(d.pairs()[1].source().as_str(), "b");

        // Same source, different target: a legitimate one-to-many pair.
        let c = corpus_of(&[("a", "x"), ("a", "y")]);
        assert_eq!(c.dedup().len(), 2);
    }

    #[test]
    fn unk_filter_examples() {
        let c = corpus_of(&[("the <unk> cat", "x"), ("the cat", "x")]);
        let f = c.unk_filter("<unk>");
        assert_eq!(f.len(), 1);
        assert_eq!(f.pairs()[0].source().as_str(), "the cat");
    }

    #[test]
    fn unk_filter_counts_either_side() {
        let mut pairs = Vec::new();
        for i in 0..10 {
            match i {
                0 | 4 => pairs.push(("bad <unk> here".to_string(), format!("t{i}"))),
                7 => pairs.push((format!("s{i}"), "<unk> target".to_string())),
                _ => pairs.push((format!("s{i}"), format!("t{i}"))),
            }
        }
        let c = ParallelCorpus::from_pairs(
            "src",
            "tgt",
            pairs
                .iter()
                .map(|(s, t)| pair(s, t))
                .collect(),
        );
        assert_eq!(c.unk_filter("<unk>").len(), 7);
    }

    #[test]
    fn truncate_is_seeded_and_order_preserving() {
        let pairs: Vec<(String, String)> =
            (0..50).map(|i| (format!("s{i}"), format!("t{i}"))).collect();
        let c = ParallelCorpus::from_pairs(
            "src",
            "tgt",
            pairs.iter().map(|(s, t)| pair(s, t)).collect(),
        );
        let a = c.truncate(10, 7);
        let b = c.truncate(10, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        // Survivors keep their original relative order.
        let ids: Vec<usize> = a
            .pairs()
            .iter()
            .map(|p| p.source().as_str()[1..].parse().unwrap())
            .collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));

        assert_eq!(c.truncate(0, 1).len(), 0);
        assert_eq!(c.truncate(60, 1), c);
    }

    #[test]
    fn align_disjoint_counts_and_masks() {
        let a = corpus_of(&[("a1", "x1"), ("a2", "x2")]);
        let b = ParallelCorpus::from_pairs("other", "tgt", vec![pair("b1", "y1")]);
        let m = align_multiway(&[a, b], AlignMode::Disjoint).unwrap();
        assert_eq!(m.len(), 3);
        for row in m.rows() {
            assert_eq!(row.available_count(), 1);
        }
        assert_eq!(m.rows()[2].sources[1].as_ref().unwrap().as_str(), "b1");
    }

    #[test]
    fn align_by_target_key_joins_shared_targets() {
        let a = corpus_of(&[("a1", "k1"), ("a2", "k2"), ("a3", "only-a")]);
        let b = ParallelCorpus::from_pairs(
            "other",
            "tgt",
            vec![pair("b2", "k2"), pair("b1", "k1"), pair("b9", "only-b")],
        );
        let m = align_multiway(&[a, b], AlignMode::ByTargetKey).unwrap();
        assert_eq!(m.len(), 2);
        assert!(m.rows().iter().all(|r| r.available_count() == 2));
        assert_eq!(m.rows()[0].target.as_str(), "k1");
        assert_eq!(m.rows()[0].sources[1].as_ref().unwrap().as_str(), "b1");
    }

    #[test]
    fn align_rejects_duplicate_source_language() {
        let a = corpus_of(&[("a", "x")]);
        let b = corpus_of(&[("b", "y")]);
        assert!(matches!(
            align_multiway(&[a, b], AlignMode::Disjoint),
            Err(CorpusError::LanguageCollision(_))
        ));
    }

    #[test]
    fn align_rejects_target_mismatch() {
        let a = corpus_of(&[("a", "x")]);
        let b = ParallelCorpus::from_pairs("other", "elsewhere", vec![pair("b", "y")]);
        assert!(matches!(
            align_multiway(&[a, b], AlignMode::Disjoint),
            Err(CorpusError::TargetMismatch(_, _))
        ));
    }

    #[test]
    fn single_corpus_disjoint_is_identity_on_rows() {
        let a = corpus_of(&[("a1", "x1"), ("a2", "x2")]);
        let m = align_multiway(std::slice::from_ref(&a), AlignMode::Disjoint).unwrap();
        assert_eq!(m.len(), a.len());
    }

    fn arb_corpus() -> impl Strategy<Value = ParallelCorpus> {
        let token = prop::sample::select(vec!["a", "b", "c", "<unk>"]);
        let sent = prop::collection::vec(token, 0..6).prop_map(|ts| ts.join(" "));
        prop::collection::vec((sent.clone(), sent), 0..30).prop_map(|pairs| {
            ParallelCorpus::from_pairs(
                "src",
                "tgt",
                pairs.into_iter().map(|(s, t)| pair(&s, &t)).collect(),
            )
        })
    }

    fn is_subsequence(sub: &ParallelCorpus, of: &ParallelCorpus) -> bool {
        let mut it = of.pairs().iter();
        sub.pairs().iter().all(|p| it.any(|q| q == p))
    }

    proptest! {
        #[test]
        fn filters_are_idempotent_order_preserving(c in arb_corpus()) {
            let cfg = FilterConfig { max_len: 4, ..Default::default() };
            let lf = c.length_filter(&cfg).unwrap();
            prop_assert_eq!(lf.length_filter(&cfg).unwrap(), lf.clone());
            prop_assert!(is_subsequence(&lf, &c));

            let dd = c.dedup();
            prop_assert_eq!(dd.dedup(), dd.clone());
            prop_assert!(is_subsequence(&dd, &c));

            let uk = c.unk_filter("<unk>");
            prop_assert_eq!(uk.unk_filter("<unk>"), uk.clone());
            prop_assert!(is_subsequence(&uk, &c));
        }

        #[test]
        fn dedup_and_unk_commute(c in arb_corpus()) {
            prop_assert_eq!(c.dedup().unk_filter("<unk>"), c.unk_filter("<unk>").dedup());
        }

        #[test]
        fn disjoint_row_count_is_sum_of_inputs(
            n1 in 0usize..20, n2 in 0usize..20
        ) {
            let a = ParallelCorpus::from_pairs("l1", "tgt",
                (0..n1).map(|i| pair(&format!("a{i}"), &format!("x{i}"))).collect());
            let b = ParallelCorpus::from_pairs("l2", "tgt",
                (0..n2).map(|i| pair(&format!("b{i}"), &format!("y{i}"))).collect());
            let m = align_multiway(&[a, b], AlignMode::Disjoint).unwrap();
            prop_assert_eq!(m.len(), n1 + n2);
        }
    }
}
