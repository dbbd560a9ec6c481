//! Pivot-based corpus extension.
//!
//! Given a source-pivot bitext and a pivot-to-target translator, a
//! synthetic-target corpus keeps every source sentence verbatim and
//! machine-translates the pivot side. Given a pivot-target bitext and a
//! pivot-to-source translator, a synthetic-source corpus keeps every target
//! sentence verbatim. Rows whose translation fails are dropped and counted;
//! filtering is a separate downstream step.

mod toy;

pub use toy::{
    dictionary_translator, generate_toy_multiway, generate_toy_multiway_with,
    DictionaryTranslator, Grammar, NoiseConfig, NoisyDictionaryTranslator, ToyGenOptions,
    ToyLanguageSpec,
};

use crate::corpus::{ParallelCorpus, Provenance, Sentence, SentencePair};
use rayon::prelude::*;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("translator expects {expected} input but corpus provides {found}")]
    LanguageMismatch { expected: String, found: String },
    #[error("cannot extend to {total}: base has {base} pairs and synthetic only {synthetic}")]
    InsufficientSynthetic { base: usize, synthetic: usize, total: usize },
    #[error("cannot extend to {total}: base alone has {base} pairs")]
    TotalBelowBase { base: usize, total: usize },
    #[error("toy lexicons do not share a concept domain")]
    LexiconDomainMismatch,
    #[error("invalid toy language spec: {0}")]
    InvalidSpec(String),
    #[error("concept {0} is not in the lexicon")]
    UnknownConcept(u32),
    #[error("malformed spec file at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Why a single sentence failed to translate. Failed rows are dropped by
/// the synthetic builders rather than aborting the run.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TranslatorFailure {
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("translator process: {0}")]
    Process(String),
    #[error("{0}")]
    Other(String),
}

/// A sentence-level machine translation system.
///
/// Implementations declare whether concurrent calls are safe; the pipeline
/// serializes calls to those that are not. Deterministic implementations
/// must be referentially transparent so reruns reproduce their output.
pub trait Translator: Send + Sync {
    fn src_lang(&self) -> &str;
    fn tgt_lang(&self) -> &str;
    fn translate(&self, sentence: &Sentence) -> Result<Sentence, TranslatorFailure>;
    fn concurrent_ok(&self) -> bool {
        false
    }
}

/// Copies input to output; useful for plumbing tests.
#[derive(Debug, Clone)]
pub struct IdentityTranslator {
    pub src_lang: String,
    pub tgt_lang: String,
}

impl Translator for IdentityTranslator {
    fn src_lang(&self) -> &str {
        &self.src_lang
    }
    fn tgt_lang(&self) -> &str {
        &self.tgt_lang
    }
    fn translate(&self, sentence: &Sentence) -> Result<Sentence, TranslatorFailure> {
        Ok(sentence.clone())
    }
    fn concurrent_ok(&self) -> bool {
        true
    }
}

/// A synthetic corpus plus the number of rows lost to translator failures.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub corpus: ParallelCorpus,
    pub dropped_rows: usize,
}

/// Builds a synthetic-target corpus: each (source, pivot) pair becomes
/// (source verbatim, translate(pivot)) with `SyntheticTarget` provenance.
pub fn build_synthetic_target(
    src_pivot: &ParallelCorpus,
    pivot_to_tgt: &dyn Translator,
) -> Result<SynthOutput, SynthError> {
    if src_pivot.tgt_lang() != pivot_to_tgt.src_lang() {
        return Err(SynthError::LanguageMismatch {
            expected: pivot_to_tgt.src_lang().to_string(),
            found: src_pivot.tgt_lang().to_string(),
        });
    }
    let translated = run_translator(src_pivot, pivot_to_tgt, |p| p.target());
    let mut corpus = ParallelCorpus::new(src_pivot.src_lang(), pivot_to_tgt.tgt_lang());
    let mut dropped = 0;
    for (pair, result) in src_pivot.pairs().iter().zip(translated) {
        match result {
            Ok(target) => corpus.push(SentencePair::new(
                pair.source().clone(),
                target,
                Provenance::SyntheticTarget,
            )),
            Err(_) => dropped += 1,
        }
    }
    Ok(SynthOutput { corpus, dropped_rows: dropped })
}

/// Builds a synthetic-source corpus: each (pivot, target) pair becomes
/// (translate(pivot), target verbatim) with `SyntheticSource` provenance.
/// The target column is never altered.
pub fn build_synthetic_source(
    pivot_tgt: &ParallelCorpus,
    pivot_to_src: &dyn Translator,
) -> Result<SynthOutput, SynthError> {
    if pivot_tgt.src_lang() != pivot_to_src.src_lang() {
        return Err(SynthError::LanguageMismatch {
            expected: pivot_to_src.src_lang().to_string(),
            found: pivot_tgt.src_lang().to_string(),
        });
    }
    let translated = run_translator(pivot_tgt, pivot_to_src, |p| p.source());
    let mut corpus = ParallelCorpus::new(pivot_to_src.tgt_lang(), pivot_tgt.tgt_lang());
    let mut dropped = 0;
    for (pair, result) in pivot_tgt.pairs().iter().zip(translated) {
        match result {
            Ok(source) => corpus.push(SentencePair::new(
                source,
                pair.target().clone(),
                Provenance::SyntheticSource,
            )),
            Err(_) => dropped += 1,
        }
    }
    Ok(SynthOutput { corpus, dropped_rows: dropped })
}

/// Translates one side of every pair, in parallel when the translator
/// allows it. Results come back in input order either way.
fn run_translator<'a>(
    corpus: &'a ParallelCorpus,
    translator: &dyn Translator,
    side: impl Fn(&'a SentencePair) -> &'a Sentence + Sync,
) -> Vec<Result<Sentence, TranslatorFailure>> {
    if translator.concurrent_ok() {
        corpus.pairs().par_iter().map(|p| translator.translate(side(p))).collect()
    } else {
        corpus.pairs().iter().map(|p| translator.translate(side(p))).collect()
    }
}

/// Extends `base` with a seeded sample of `synthetic` up to exactly
/// `total` pairs; base pairs come first and are kept in full.
pub fn extend(
    base: &ParallelCorpus,
    synthetic: &ParallelCorpus,
    total: usize,
    seed: u64,
) -> Result<ParallelCorpus, SynthError> {
    if base.src_lang() != synthetic.src_lang() || base.tgt_lang() != synthetic.tgt_lang() {
        return Err(SynthError::LanguageMismatch {
            expected: format!("{}-{}", base.src_lang(), base.tgt_lang()),
            found: format!("{}-{}", synthetic.src_lang(), synthetic.tgt_lang()),
        });
    }
    if total < base.len() {
        return Err(SynthError::TotalBelowBase { base: base.len(), total });
    }
    let need = total - base.len();
    if synthetic.len() < need {
        return Err(SynthError::InsufficientSynthetic {
            base: base.len(),
            synthetic: synthetic.len(),
            total,
        });
    }
    let sampled = synthetic.truncate(need, seed);
    let mut pairs = base.pairs().to_vec();
    pairs.extend(sampled.pairs().iter().cloned());
    Ok(ParallelCorpus::from_pairs(base.src_lang(), base.tgt_lang(), pairs))
}

/// Adapter for an external translator process: one sentence per line on
/// stdin, one translation per line on stdout. The child is spawned once
/// and kept alive; calls are serialized.
pub struct ExternalProcessTranslator {
    src_lang: String,
    tgt_lang: String,
    child: Mutex<(Child, BufReader<std::process::ChildStdout>)>,
}

impl ExternalProcessTranslator {
    pub fn spawn(
        program: &str,
        args: &[String],
        src_lang: &str,
        tgt_lang: &str,
    ) -> Result<Self, SynthError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdout = child.stdout.take().expect("stdout was piped");
        Ok(ExternalProcessTranslator {
            src_lang: src_lang.to_string(),
            tgt_lang: tgt_lang.to_string(),
            child: Mutex::new((child, BufReader::new(stdout))),
        })
    }
}

impl Translator for ExternalProcessTranslator {
    fn src_lang(&self) -> &str {
        &self.src_lang
    }
    fn tgt_lang(&self) -> &str {
        &self.tgt_lang
    }
    fn translate(&self, sentence: &Sentence) -> Result<Sentence, TranslatorFailure> {
        let mut guard = self.child.lock().expect("translator mutex poisoned");
        let (child, reader) = &mut *guard;
        let stdin = child.stdin.as_mut().ok_or_else(|| {
            TranslatorFailure::Process("child stdin closed".into())
        })?;
        writeln!(stdin, "{}", sentence.as_str())
            .and_then(|_| stdin.flush())
            .map_err(|e| TranslatorFailure::Process(e.to_string()))?;
        let mut line = String::new();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| TranslatorFailure::Process(e.to_string()))?;
        if n == 0 {
            return Err(TranslatorFailure::Process("child closed its output".into()));
        }
        let trimmed = line.trim_end_matches('\n').trim_end_matches('\r');
        Sentence::new(trimmed).map_err(|e| TranslatorFailure::Process(e.to_string()))
    }
}

impl Drop for ExternalProcessTranslator {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.child.lock() {
            // Closing stdin lets well-behaved children exit on their own.
            drop(guard.0.stdin.take());
            let _ = guard.0.wait();
        }
    }
}

/// Parses a toy language spec file and hands back the spec.
pub fn load_toy_spec(path: &Path) -> Result<ToyLanguageSpec, SynthError> {
    ToyLanguageSpec::load(path)
}
