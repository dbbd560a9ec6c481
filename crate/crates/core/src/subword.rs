//! Byte-pair encoding: training, application, inversion, and a word
//! coverage diagnostic.
//!
//! This is the classic word-internal formulation: each whitespace word is
//! split into single-character symbols followed by an end-of-word marker,
//! and training repeatedly merges the most frequent adjacent symbol pair.
//! The marker is its own symbol and never takes part in a merge, so merge
//! operands are always producible from characters plus earlier merges.
//! Ties on pair frequency break lexicographically on (left, right), which
//! makes training fully deterministic.

use crate::corpus::Sentence;
use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const DEFAULT_EOW_MARKER: &str = "</w>";

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("corpus contains no words")]
    EmptyCorpus,
    #[error("target vocab size must exceed the initial alphabet size {alphabet_size}")]
    TargetTooSmall { alphabet_size: usize },
    #[error("end-of-word marker must be non-empty and contain no whitespace")]
    InvalidMarker,
    #[error("malformed model file at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An ordered merge-rule list plus the derived subword vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    eow_marker: String,
    merges: Vec<(String, String)>,
    alphabet: BTreeSet<String>,
}

impl BpeModel {
    pub fn eow_marker(&self) -> &str {
        &self.eow_marker
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// All symbols the model can emit: initial characters, the end-of-word
    /// marker, and every merge product.
    pub fn vocab(&self) -> BTreeSet<String> {
        let mut v = self.alphabet.clone();
        v.insert(self.eow_marker.clone());
        for (l, r) in &self.merges {
            v.insert(format!("{l}{r}"));
        }
        v
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab().len()
    }

    /// Splits each whitespace word into characters plus the marker, then
    /// applies the merges in training order. Characters outside the
    /// training alphabet pass through as single-character symbols.
    pub fn encode(&self, sentence: &Sentence) -> Vec<String> {
        let mut out = Vec::new();
        for word in sentence.tokens() {
            let mut symbols: Vec<String> = word.chars().map(String::from).collect();
            symbols.push(self.eow_marker.clone());
            for (l, r) in &self.merges {
                apply_merge(&mut symbols, l, r);
            }
            out.extend(symbols);
        }
        out
    }

    pub fn decode(&self, symbols: &[String]) -> Sentence {
        decode(symbols, &self.eow_marker)
    }

    /// Fraction of word occurrences in `sentences` that encode without any
    /// out-of-alphabet character and, when `vocab_limit` is given, using
    /// only the `vocab_limit` most frequent symbols of these encodings
    /// (ties broken lexicographically).
    pub fn coverage(&self, sentences: &[Sentence], vocab_limit: Option<usize>) -> CoverageReport {
        let encoded: Vec<Vec<Vec<String>>> = sentences
            .iter()
            .map(|s| {
                s.tokens()
                    .map(|w| {
                        let mut symbols: Vec<String> = w.chars().map(String::from).collect();
                        symbols.push(self.eow_marker.clone());
                        for (l, r) in &self.merges {
                            apply_merge(&mut symbols, l, r);
                        }
                        symbols
                    })
                    .collect()
            })
            .collect();

        let allowed: Option<BTreeSet<&String>> = vocab_limit.map(|limit| {
            let mut freq: HashMap<&String, u64> = HashMap::new();
            for sent in &encoded {
                for word in sent {
                    for sym in word {
                        *freq.entry(sym).or_insert(0) += 1;
                    }
                }
            }
            let mut ranked: Vec<(&String, u64)> = freq.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            ranked.into_iter().take(limit).map(|(s, _)| s).collect()
        });

        let mut total = 0u64;
        let mut covered = 0u64;
        for sent in &encoded {
            for word in sent {
                total += 1;
                let known = word.iter().all(|sym| {
                    sym == &self.eow_marker
                        || sym.chars().count() > 1
                        || self.alphabet.contains(sym)
                });
                let within = allowed
                    .as_ref()
                    .map(|a| word.iter().all(|sym| a.contains(sym)))
                    .unwrap_or(true);
                if known && within {
                    covered += 1;
                }
            }
        }
        CoverageReport {
            covered_tokens: covered,
            total_tokens: total,
            coverage: if total == 0 { 1.0 } else { covered as f64 / total as f64 },
        }
    }

    /// Model file: line 1 is the end-of-word marker, then one
    /// `left<SPACE>right` per merge, in order.
    pub fn save(&self, path: &Path) -> Result<(), BpeError> {
        let tmp = path.with_extension("tmp-write");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(self.to_file_string().as_bytes())?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.eow_marker);
        out.push('\n');
        for (l, r) in &self.merges {
            out.push_str(l);
            out.push(' ');
            out.push_str(r);
            out.push('\n');
        }
        out
    }

    /// Loads a model file. The file stores merges only, so the alphabet of
    /// a loaded model is the character closure of its merges: characters
    /// that never merged during training are forgotten and will count as
    /// unknown in [`BpeModel::coverage`].
    pub fn load(path: &Path) -> Result<Self, BpeError> {
        Self::from_file_string(&fs::read_to_string(path)?)
    }

    pub fn from_file_string(contents: &str) -> Result<Self, BpeError> {
        let mut lines = contents.lines();
        let marker = lines.next().ok_or(BpeError::Parse {
            line: 1,
            message: "missing end-of-word marker line".into(),
        })?;
        if marker.is_empty() || marker.contains(char::is_whitespace) {
            return Err(BpeError::InvalidMarker);
        }
        let mut merges = Vec::new();
        let mut alphabet = BTreeSet::new();
        for (i, line) in lines.enumerate() {
            let (l, r) = line.split_once(' ').ok_or_else(|| BpeError::Parse {
                line: i + 2,
                message: "expected `left right`".into(),
            })?;
            if l.is_empty() || r.is_empty() || r.contains(' ') {
                return Err(BpeError::Parse { line: i + 2, message: "expected `left right`".into() });
            }
            for ch in l.chars().chain(r.chars()) {
                alphabet.insert(ch.to_string());
            }
            merges.push((l.to_string(), r.to_string()));
        }
        Ok(BpeModel { eow_marker: marker.to_string(), merges, alphabet })
    }
}

/// Word coverage of a subword vocabulary, as a fraction of occurrences.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub covered_tokens: u64,
    pub total_tokens: u64,
    pub coverage: f64,
}

fn apply_merge(symbols: &mut Vec<String>, left: &str, right: &str) {
    if symbols.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Concatenates symbols, turns each end-of-word marker into a space, and
/// trims the trailing space.
pub fn decode(symbols: &[String], eow_marker: &str) -> Sentence {
    let joined: String = symbols.concat();
    let text = joined.replace(eow_marker, " ");
    Sentence::new(text.trim_end_matches(' ').to_string())
        .expect("decoded symbols contain no line breaks")
}

/// Trains a BPE model with the default `</w>` marker.
pub fn train_bpe(sentences: &[Sentence], target_vocab_size: usize) -> Result<BpeModel, BpeError> {
    train_bpe_with_marker(sentences, target_vocab_size, DEFAULT_EOW_MARKER)
}

/// Greedily merges the most frequent adjacent symbol pair (word-internal,
/// marker excluded) until the vocabulary reaches `target_vocab_size` or no
/// pair occurs at least twice.
pub fn train_bpe_with_marker(
    sentences: &[Sentence],
    target_vocab_size: usize,
    eow_marker: &str,
) -> Result<BpeModel, BpeError> {
    if eow_marker.is_empty() || eow_marker.contains(char::is_whitespace) {
        return Err(BpeError::InvalidMarker);
    }
    let mut word_counts: HashMap<&str, u64> = HashMap::new();
    for s in sentences {
        for w in s.tokens() {
            *word_counts.entry(w).or_insert(0) += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(BpeError::EmptyCorpus);
    }
    let mut alphabet = BTreeSet::new();
    for w in word_counts.keys() {
        for ch in w.chars() {
            alphabet.insert(ch.to_string());
        }
    }
    if target_vocab_size <= alphabet.len() {
        return Err(BpeError::TargetTooSmall { alphabet_size: alphabet.len() });
    }

    // Symbol sequences per distinct word, weighted by occurrence count.
    let mut words: Vec<(Vec<String>, u64)> = word_counts
        .iter()
        .map(|(w, &c)| {
            let mut symbols: Vec<String> = w.chars().map(String::from).collect();
            symbols.push(eow_marker.to_string());
            (symbols, c)
        })
        .collect();

    let mut merges: Vec<(String, String)> = Vec::new();
    let mut products: BTreeSet<String> = BTreeSet::new();
    // Alphabet + marker + distinct merge products.
    let mut vocab_size = alphabet.len() + 1;

    while vocab_size < target_vocab_size {
        let mut pair_counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, count) in &words {
            for pair in symbols.windows(2) {
                if pair[0] == eow_marker || pair[1] == eow_marker {
                    continue;
                }
                *pair_counts.entry((pair[0].as_str(), pair[1].as_str())).or_insert(0) += count;
            }
        }
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)));
        let Some((&(l, r), _)) = best else { break };
        let (l, r) = (l.to_string(), r.to_string());
        for (symbols, _) in &mut words {
            apply_merge(symbols, &l, &r);
        }
        if products.insert(format!("{l}{r}")) {
            vocab_size += 1;
        }
        merges.push((l, r));
    }

    Ok(BpeModel { eow_marker: eow_marker.to_string(), merges, alphabet })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sent(text: &str) -> Sentence {
        Sentence::new(text).unwrap()
    }

    #[test]
    fn training_merges_most_frequent_pair_with_lexicographic_ties() {
        // "low" x3 and "lower" x1: pairs (l,o) and (o,w) both occur 4 times;
        // the lexicographically smaller (l,o) merges first, after which
        // (lo,w) occurs 4 times and merges second.
        let corpus = vec![sent("low low low lower")];
        let model = train_bpe(&corpus, 26 + 1 + 2).unwrap();
        assert_eq!(
            model.merges(),
            &[("l".to_string(), "o".to_string()), ("lo".to_string(), "w".to_string())]
        );
    }

    #[test]
    fn target_too_small_is_rejected() {
        let corpus = vec![sent("abc abc")];
        match train_bpe(&corpus, 3) {
            Err(BpeError::TargetTooSmall { alphabet_size }) => assert_eq!(alphabet_size, 3),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn single_character_words_produce_no_merges() {
        // The only adjacency is with the marker, which never merges.
        let corpus = vec![sent("a a a")];
        let model = train_bpe(&corpus, 100).unwrap();
        assert!(model.merges().is_empty());
        assert_eq!(model.vocab_size(), 2); // "a" and the marker
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(train_bpe(&[sent("")], 10), Err(BpeError::EmptyCorpus)));
        assert!(matches!(train_bpe(&[], 10), Err(BpeError::EmptyCorpus)));
    }

    #[test]
    fn encode_applies_merges_in_order() {
        let corpus = vec![sent("low low low lower")];
        let model = train_bpe(&corpus, 26 + 1 + 2).unwrap();
        assert_eq!(model.encode(&sent("low")), vec!["low".to_string(), "</w>".to_string()]);
        assert_eq!(
            model.encode(&sent("lower")),
            vec!["low", "e", "r", "</w>"].into_iter().map(String::from).collect::<Vec<_>>()
        );
        assert!(model.encode(&sent("")).is_empty());
    }

    #[test]
    fn unknown_characters_pass_through() {
        let corpus = vec![sent("ab ab")];
        let model = train_bpe(&corpus, 10).unwrap();
        let symbols = model.encode(&sent("axb"));
        assert!(symbols.contains(&"x".to_string()));
        assert_eq!(model.decode(&symbols), sent("axb"));
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode(&["lo".into(), "w</w>".into()], "</w>"), sent("low"));
        assert_eq!(decode(&[], "</w>"), sent(""));
    }

    #[test]
    fn model_file_round_trip_is_byte_exact() {
        let corpus = vec![sent("low low low lower")];
        let model = train_bpe(&corpus, 26 + 1 + 2).unwrap();
        let text = model.to_file_string();
        assert_eq!(text, "</w>\nl o\nlo w\n");
        let loaded = BpeModel::from_file_string(&text).unwrap();
        assert_eq!(loaded.to_file_string(), text);
        assert_eq!(loaded.encode(&sent("low")), model.encode(&sent("low")));
    }

    #[test]
    fn coverage_full_vocab_on_training_corpus_is_one() {
        let corpus = vec![sent("the cat sat"), sent("the mat")];
        let model = train_bpe(&corpus, 50).unwrap();
        let report = model.coverage(&corpus, None);
        assert_eq!(report.coverage, 1.0);
        assert_eq!(report.total_tokens, 5);
    }

    #[test]
    fn coverage_novel_character_fixture() {
        let corpus = vec![sent("abc bca cab")];
        let model = train_bpe(&corpus, 20).unwrap();
        // 200 words, exactly one containing a character outside the
        // training alphabet.
        let mut words: Vec<String> = (0..199).map(|_| "abc".to_string()).collect();
        words.push("azc".to_string());
        let held_out = vec![sent(&words.join(" "))];
        let report = model.coverage(&held_out, None);
        assert_eq!(report.total_tokens, 200);
        assert_eq!(report.covered_tokens, 199);
        assert_eq!(report.coverage, 0.995);
    }

    #[test]
    fn coverage_is_monotone_in_vocab_limit() {
        let corpus: Vec<Sentence> =
            ["low lower lowest", "new newer newest", "wide wider widest"]
                .iter()
                .map(|s| sent(s))
                .collect();
        let model = train_bpe(&corpus, 40).unwrap();
        let mut last = 0.0;
        for limit in [1, 4, 8, 16, 40] {
            let c = model.coverage(&corpus, Some(limit)).coverage;
            assert!(c >= last, "coverage dropped at limit {limit}");
            last = c;
        }
    }

    #[test]
    fn more_merges_never_lengthen_encodings() {
        let corpus: Vec<Sentence> =
            vec![sent("banana bandana cabana"), sent("ban can cab")];
        let alphabet = 5; // a b c d n
        for small in alphabet + 1..alphabet + 8 {
            let m_small = train_bpe(&corpus, small).unwrap();
            let m_big = train_bpe(&corpus, small + 1).unwrap();
            for s in &corpus {
                assert!(m_big.encode(s).len() <= m_small.encode(s).len());
            }
        }
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(words in prop::collection::vec("[abcd]{1,6}", 1..8)) {
            let text = words.join(" ");
            let corpus = vec![sent("abcd dcba abab cdcd")];
            let model = train_bpe(&corpus, 4 + 1 + 5).unwrap();
            let s = sent(&text);
            prop_assert_eq!(model.decode(&model.encode(&s)), s);
        }
    }
}
