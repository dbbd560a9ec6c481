//! Toy languages for end-to-end verification.
//!
//! A toy language is a bijective lexicon from shared concept ids to
//! whitespace-free tokens plus a word-order rule. Because every language
//! renders the same concept sequence, exact translations are known by
//! construction, which gives the pipeline a ground-truth oracle and a
//! perfectly controllable "machine translation" system whose error rate is
//! a dial.

use super::{SynthError, Translator, TranslatorFailure};
use crate::corpus::{MultiRow, MultiWayCorpus, Sentence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

/// Word order applied when rendering a concept sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grammar {
    IdentityOrder,
    Reversed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyLanguageSpec {
    lang: String,
    lexicon: BTreeMap<u32, String>,
    reverse: HashMap<String, u32>,
    pub sentence_length_range: (usize, usize),
    pub grammar: Grammar,
}

impl ToyLanguageSpec {
    pub fn new(
        lang: impl Into<String>,
        lexicon: BTreeMap<u32, String>,
        sentence_length_range: (usize, usize),
        grammar: Grammar,
    ) -> Result<Self, SynthError> {
        if lexicon.is_empty() {
            return Err(SynthError::InvalidSpec("empty lexicon".into()));
        }
        let mut reverse = HashMap::new();
        for (&id, token) in &lexicon {
            if token.is_empty() || token.contains(char::is_whitespace) {
                return Err(SynthError::InvalidSpec(format!(
                    "token {token:?} for concept {id} contains whitespace or is empty"
                )));
            }
            if reverse.insert(token.clone(), id).is_some() {
                return Err(SynthError::InvalidSpec(format!(
                    "lexicon is not bijective: token {token:?} repeats"
                )));
            }
        }
        let (min, max) = sentence_length_range;
        if min < 1 || min > max {
            return Err(SynthError::InvalidSpec("bad sentence length range".into()));
        }
        Ok(ToyLanguageSpec { lang: lang.into(), lexicon, reverse, sentence_length_range, grammar })
    }

    /// Builds a spec with a synthesized lexicon: concept `i` becomes a
    /// fixed-width word over the given syllables, so distinct syllable sets
    /// give languages with disjoint surface forms.
    pub fn synthesize(
        lang: impl Into<String>,
        concept_count: u32,
        syllables: &[&str],
        sentence_length_range: (usize, usize),
        grammar: Grammar,
    ) -> Result<Self, SynthError> {
        if syllables.len() < 2 {
            return Err(SynthError::InvalidSpec("need at least two syllables".into()));
        }
        let base = syllables.len() as u32;
        let mut width = 1;
        let mut cap = base;
        while cap < concept_count {
            width += 1;
            cap *= base;
        }
        let mut lexicon = BTreeMap::new();
        for id in 0..concept_count {
            let mut word = String::new();
            let mut v = id;
            for _ in 0..width {
                word.insert_str(0, syllables[(v % base) as usize]);
                v /= base;
            }
            lexicon.insert(id, word);
        }
        Self::new(lang, lexicon, sentence_length_range, grammar)
    }

    pub fn lang(&self) -> &str {
        &self.lang
    }

    pub fn concept_ids(&self) -> Vec<u32> {
        self.lexicon.keys().copied().collect()
    }

    pub fn token_of(&self, concept: u32) -> Option<&str> {
        self.lexicon.get(&concept).map(String::as_str)
    }

    /// Tokens in concept-id order; a deterministic substitution pool.
    pub fn tokens(&self) -> Vec<&str> {
        self.lexicon.values().map(String::as_str).collect()
    }

    fn same_domain(&self, other: &ToyLanguageSpec) -> bool {
        self.lexicon.len() == other.lexicon.len()
            && self.lexicon.keys().zip(other.lexicon.keys()).all(|(a, b)| a == b)
    }

    /// Renders a concept sequence in this language's word order.
    pub fn render(&self, concepts: &[u32]) -> Result<Sentence, SynthError> {
        let mut tokens = Vec::with_capacity(concepts.len());
        for &c in concepts {
            tokens.push(
                self.lexicon.get(&c).ok_or(SynthError::UnknownConcept(c))?.as_str(),
            );
        }
        if self.grammar == Grammar::Reversed {
            tokens.reverse();
        }
        Ok(Sentence::new(tokens.join(" ")).expect("lexicon tokens contain no line breaks"))
    }

    /// Recovers the canonical concept sequence from a rendered sentence.
    pub fn concepts_of(&self, sentence: &Sentence) -> Result<Vec<u32>, TranslatorFailure> {
        let mut concepts = Vec::new();
        for token in sentence.tokens() {
            concepts.push(
                *self
                    .reverse
                    .get(token)
                    .ok_or_else(|| TranslatorFailure::UnknownToken(token.to_string()))?,
            );
        }
        if self.grammar == Grammar::Reversed {
            concepts.reverse();
        }
        Ok(concepts)
    }

    /// Spec file: `lang`, `grammar`, `length` header lines, then one
    /// `concept_id<TAB>token` per lexicon entry.
    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let mut out = String::new();
        out.push_str(&format!("lang {}\n", self.lang));
        out.push_str(match self.grammar {
            Grammar::IdentityOrder => "grammar identity\n",
            Grammar::Reversed => "grammar reversed\n",
        });
        out.push_str(&format!(
            "length {} {}\n",
            self.sentence_length_range.0, self.sentence_length_range.1
        ));
        for (id, token) in &self.lexicon {
            out.push_str(&format!("{id}\t{token}\n"));
        }
        let tmp = path.with_extension("tmp-write");
        fs::write(&tmp, out)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(path)?;
        let mut lang = None;
        let mut grammar = None;
        let mut range = None;
        let mut lexicon = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let err = |message: &str| SynthError::Parse { line: i + 1, message: message.into() };
            if let Some(rest) = line.strip_prefix("lang ") {
                lang = Some(rest.trim().to_string());
            } else if let Some(rest) = line.strip_prefix("grammar ") {
                grammar = Some(match rest.trim() {
                    "identity" => Grammar::IdentityOrder,
                    "reversed" => Grammar::Reversed,
                    other => return Err(err(&format!("unknown grammar {other:?}"))),
                });
            } else if let Some(rest) = line.strip_prefix("length ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 2 {
                    return Err(err("expected `length MIN MAX`"));
                }
                let min = parts[0].parse().map_err(|_| err("bad min length"))?;
                let max = parts[1].parse().map_err(|_| err("bad max length"))?;
                range = Some((min, max));
            } else if !line.trim().is_empty() {
                let (id, token) =
                    line.split_once('\t').ok_or_else(|| err("expected `id<TAB>token`"))?;
                let id: u32 = id.parse().map_err(|_| err("bad concept id"))?;
                if lexicon.insert(id, token.to_string()).is_some() {
                    return Err(err(&format!("concept {id} repeats")));
                }
            }
        }
        let lang = lang.ok_or(SynthError::Parse { line: 0, message: "missing lang".into() })?;
        let grammar =
            grammar.ok_or(SynthError::Parse { line: 0, message: "missing grammar".into() })?;
        let range =
            range.ok_or(SynthError::Parse { line: 0, message: "missing length".into() })?;
        Self::new(lang, lexicon, range, grammar)
    }
}

/// Exact translator between two toy languages over the same concept
/// domain: invert the source lexicon, re-render with the target lexicon
/// and word order.
#[derive(Debug, Clone)]
pub struct DictionaryTranslator {
    from: ToyLanguageSpec,
    to: ToyLanguageSpec,
}

pub fn dictionary_translator(
    from: &ToyLanguageSpec,
    to: &ToyLanguageSpec,
) -> Result<DictionaryTranslator, SynthError> {
    if !from.same_domain(to) {
        return Err(SynthError::LexiconDomainMismatch);
    }
    Ok(DictionaryTranslator { from: from.clone(), to: to.clone() })
}

impl DictionaryTranslator {
    pub fn inverse(&self) -> DictionaryTranslator {
        DictionaryTranslator { from: self.to.clone(), to: self.from.clone() }
    }
}

impl Translator for DictionaryTranslator {
    fn src_lang(&self) -> &str {
        self.from.lang()
    }
    fn tgt_lang(&self) -> &str {
        self.to.lang()
    }
    fn translate(&self, sentence: &Sentence) -> Result<Sentence, TranslatorFailure> {
        let concepts = self.from.concepts_of(sentence)?;
        self.to
            .render(&concepts)
            .map_err(|e| TranslatorFailure::Other(e.to_string()))
    }
    fn concurrent_ok(&self) -> bool {
        true
    }
}

/// Seeded corruption applied to a dictionary translation, modelling an
/// imperfect MT system: each output token is dropped with `drop_prob` and
/// otherwise replaced by a random target-lexicon token with `swap_prob`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub drop_prob: f64,
    pub swap_prob: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct NoisyDictionaryTranslator {
    inner: DictionaryTranslator,
    noise: NoiseConfig,
    pool: Vec<String>,
}

impl NoisyDictionaryTranslator {
    pub fn new(inner: DictionaryTranslator, noise: NoiseConfig) -> Self {
        let pool = inner.to.tokens().iter().map(|s| s.to_string()).collect();
        NoisyDictionaryTranslator { inner, noise, pool }
    }
}

/// FNV-1a, so per-sentence noise depends only on (seed, text) and is
/// stable no matter how rows are scheduled.
fn stable_hash(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Translator for NoisyDictionaryTranslator {
    fn src_lang(&self) -> &str {
        self.inner.src_lang()
    }
    fn tgt_lang(&self) -> &str {
        self.inner.tgt_lang()
    }
    fn translate(&self, sentence: &Sentence) -> Result<Sentence, TranslatorFailure> {
        let clean = self.inner.translate(sentence)?;
        if self.noise.drop_prob == 0.0 && self.noise.swap_prob == 0.0 {
            return Ok(clean);
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.noise.seed ^ stable_hash(sentence.as_str()));
        let mut tokens = Vec::new();
        for token in clean.tokens() {
            if rng.random_bool(self.noise.drop_prob) {
                continue;
            }
            if rng.random_bool(self.noise.swap_prob) {
                tokens.push(self.pool[rng.random_range(0..self.pool.len())].clone());
            } else {
                tokens.push(token.to_string());
            }
        }
        Ok(Sentence::new(tokens.join(" ")).expect("tokens contain no line breaks"))
    }
    fn concurrent_ok(&self) -> bool {
        true
    }
}

/// Knobs for toy corpus generation beyond the plain operation: restrict
/// concepts to a sub-domain and override the sampled length range.
#[derive(Debug, Clone)]
pub struct ToyGenOptions {
    pub n_rows: usize,
    pub seed: u64,
    pub concept_pool: Option<Vec<u32>>,
    pub length_range: Option<(usize, usize)>,
}

/// Samples fully aligned rows: one concept sequence per row, rendered in
/// every source language and the target language. Lengths come from the
/// target spec's range.
pub fn generate_toy_multiway(
    specs: &[ToyLanguageSpec],
    tgt_spec: &ToyLanguageSpec,
    n_rows: usize,
    seed: u64,
) -> Result<MultiWayCorpus, SynthError> {
    generate_toy_multiway_with(
        specs,
        tgt_spec,
        &ToyGenOptions { n_rows, seed, concept_pool: None, length_range: None },
    )
}

pub fn generate_toy_multiway_with(
    specs: &[ToyLanguageSpec],
    tgt_spec: &ToyLanguageSpec,
    opts: &ToyGenOptions,
) -> Result<MultiWayCorpus, SynthError> {
    for s in specs {
        if !s.same_domain(tgt_spec) {
            return Err(SynthError::LexiconDomainMismatch);
        }
    }
    let pool: Vec<u32> = match &opts.concept_pool {
        Some(pool) => {
            let domain: BTreeSet<u32> = tgt_spec.lexicon.keys().copied().collect();
            if pool.is_empty() || !pool.iter().all(|c| domain.contains(c)) {
                return Err(SynthError::LexiconDomainMismatch);
            }
            pool.clone()
        }
        None => tgt_spec.concept_ids(),
    };
    let (min_len, max_len) = opts.length_range.unwrap_or(tgt_spec.sentence_length_range);
    if min_len < 1 || min_len > max_len {
        return Err(SynthError::InvalidSpec("bad sentence length range".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let langs = specs.iter().map(|s| s.lang().to_string()).collect();
    let mut corpus = MultiWayCorpus::new(langs, tgt_spec.lang());
    for _ in 0..opts.n_rows {
        let len = rng.random_range(min_len..=max_len);
        let concepts: Vec<u32> =
            (0..len).map(|_| pool[rng.random_range(0..pool.len())]).collect();
        let sources = specs
            .iter()
            .map(|s| s.render(&concepts).map(Some))
            .collect::<Result<Vec<_>, _>>()?;
        corpus.push_row(MultiRow { sources, target: tgt_spec.render(&concepts)? })?;
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(lang: &str, grammar: Grammar) -> ToyLanguageSpec {
        let syllables = match lang {
            "alpha" => ["ka", "to", "mi", "su"],
            "beta" => ["ber", "gul", "dez", "rin"],
            _ => ["pa", "lo", "fi", "vu"],
        };
        ToyLanguageSpec::synthesize(lang, 16, &syllables, (2, 5), grammar).unwrap()
    }

    #[test]
    fn synthesized_lexicon_is_bijective_and_distinct() {
        let a = spec("alpha", Grammar::IdentityOrder);
        let b = spec("beta", Grammar::IdentityOrder);
        let a_tokens: BTreeSet<_> = a.tokens().into_iter().collect();
        assert_eq!(a_tokens.len(), 16);
        let b_tokens: BTreeSet<_> = b.tokens().into_iter().collect();
        assert!(a_tokens.is_disjoint(&b_tokens));
    }

    #[test]
    fn render_and_recover_respect_grammar() {
        let fwd = spec("alpha", Grammar::IdentityOrder);
        let rev = spec("beta", Grammar::Reversed);
        let concepts = vec![3, 1, 4];
        let f = fwd.render(&concepts).unwrap();
        let r = rev.render(&concepts).unwrap();
        // Reversed rendering is the token-wise reverse under the lexicon map.
        let f_tokens: Vec<&str> = f.as_str().split(' ').collect();
        let r_tokens: Vec<&str> = r.as_str().split(' ').collect();
        assert_eq!(f_tokens.len(), r_tokens.len());
        for (i, t) in r_tokens.iter().enumerate() {
            let concept = concepts[concepts.len() - 1 - i];
            assert_eq!(*t, rev.token_of(concept).unwrap());
        }
        assert_eq!(fwd.concepts_of(&f).unwrap(), concepts);
        assert_eq!(rev.concepts_of(&r).unwrap(), concepts);
    }

    #[test]
    fn dictionary_translator_round_trips() {
        let a = spec("alpha", Grammar::IdentityOrder);
        let b = spec("beta", Grammar::Reversed);
        let tr = dictionary_translator(&a, &b).unwrap();
        let back = tr.inverse();
        let s = a.render(&[0, 5, 2, 7]).unwrap();
        let translated = tr.translate(&s).unwrap();
        assert_eq!(back.translate(&translated).unwrap(), s);
        // Ground truth by construction.
        assert_eq!(translated, b.render(&[0, 5, 2, 7]).unwrap());
    }

    #[test]
    fn unknown_token_fails_the_row() {
        let a = spec("alpha", Grammar::IdentityOrder);
        let b = spec("beta", Grammar::IdentityOrder);
        let tr = dictionary_translator(&a, &b).unwrap();
        let bad = Sentence::new("definitely-not-a-token").unwrap();
        assert!(matches!(tr.translate(&bad), Err(TranslatorFailure::UnknownToken(_))));
    }

    #[test]
    fn domain_mismatch_is_rejected() {
        let a = spec("alpha", Grammar::IdentityOrder);
        let small =
            ToyLanguageSpec::synthesize("tiny", 4, &["xa", "yo"], (2, 5), Grammar::IdentityOrder)
                .unwrap();
        assert!(matches!(
            dictionary_translator(&a, &small),
            Err(SynthError::LexiconDomainMismatch)
        ));
    }

    #[test]
    fn noisy_translator_is_deterministic_and_degrades() {
        let a = spec("alpha", Grammar::IdentityOrder);
        let b = spec("beta", Grammar::IdentityOrder);
        let clean = dictionary_translator(&a, &b).unwrap();
        let noisy = NoisyDictionaryTranslator::new(
            clean.clone(),
            NoiseConfig { drop_prob: 0.4, swap_prob: 0.0, seed: 5 },
        );
        let s = a.render(&[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        assert_eq!(noisy.translate(&s).unwrap(), noisy.translate(&s).unwrap());
        let clean_len = clean.translate(&s).unwrap().token_count();
        let noisy_len = noisy.translate(&s).unwrap().token_count();
        assert!(noisy_len < clean_len);
    }

    #[test]
    fn toy_multiway_generation() {
        let a = spec("alpha", Grammar::IdentityOrder);
        let b = spec("beta", Grammar::Reversed);
        let t = spec("gamma", Grammar::IdentityOrder);
        let m = generate_toy_multiway(&[a.clone(), b.clone()], &t, 100, 11).unwrap();
        assert_eq!(m.len(), 100);
        assert!(m.rows().iter().all(|r| r.available_count() == 2));
        // Deterministic per seed.
        let m2 = generate_toy_multiway(&[a, b], &t, 100, 11).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn spec_file_round_trip() {
        let a = spec("alpha", Grammar::Reversed);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("alpha.lexicon");
        a.save(&p).unwrap();
        assert_eq!(ToyLanguageSpec::load(&p).unwrap(), a);
    }
}
