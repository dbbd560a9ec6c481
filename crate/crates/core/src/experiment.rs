//! Seeded, resumable end-to-end experiment on toy languages.
//!
//! The runner builds a small world of five toy languages (one source, one
//! pivot, two auxiliary sources, one target), derives training corpora for
//! the five model variants, trains and evaluates each on an in-domain and
//! an out-of-domain test set, and reports a score table:
//!
//! 1. baseline bitext
//! 2. baseline + multi-source model over four disjoint bitexts
//! 3. baseline extended with a synthetic-target corpus
//! 4. baseline extended with a synthetic-source corpus
//! 5. the synthetic-source extension plus the multi-source model
//!
//! Every stage output is written under the run directory next to a digest
//! of the configuration and its input artifacts; rerunning with an
//! unchanged setup reuses the artifacts instead of recomputing them.

use crate::corpus::{
    align_multiway, filter_chain, load_multiway, load_parallel, save_multiway, save_parallel,
    AlignMode, FilterConfig, MultiRow, MultiWayCorpus, ParallelCorpus, Sentence,
};
use crate::eval::{bleu4_with, Smoothing, WhitespaceSegmenter};
use crate::nmt::{
    batch_loss, train, Checkpoint, Hyperparams, MsnmtModel, TrainSchedule, TrainingBatch,
    Vocabulary,
};
use crate::subword::{train_bpe, BpeModel};
use crate::synth::{
    build_synthetic_source, build_synthetic_target, dictionary_translator, extend,
    generate_toy_multiway_with, Grammar, NoiseConfig, NoisyDictionaryTranslator, ToyGenOptions,
    ToyLanguageSpec,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

impl ExperimentError {
    fn at<E: std::error::Error + Send + Sync + 'static>(
        stage: &str,
    ) -> impl Fn(E) -> ExperimentError + '_ {
        move |e| ExperimentError::Stage { stage: stage.to_string(), source: Box::new(e) }
    }

    /// True when the failure chain bottoms out in numerical divergence.
    pub fn is_numerical(&self) -> bool {
        match self {
            ExperimentError::Stage { source, .. } => matches!(
                source.downcast_ref::<crate::nmt::NmtError>(),
                Some(crate::nmt::NmtError::NonFiniteLoss { .. })
            ),
            _ => false,
        }
    }
}

/// Toy-language world shape: one shared concept domain, three overlapping
/// sub-domains with their own length ranges. The baseline bitext and the
/// in-domain test set draw from the first sub-domain, the synthetic-source
/// pool from the broad one, and the auxiliary multi-source bitexts plus
/// the out-of-domain test set from the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySettings {
    pub concept_count: u32,
    pub in_domain_concepts: u32,
    pub broad_domain_start: u32,
    pub out_domain_start: u32,
    pub in_len: (usize, usize),
    pub broad_len: (usize, usize),
    pub out_len: (usize, usize),
}

impl Default for ToySettings {
    fn default() -> Self {
        ToySettings {
            concept_count: 60,
            in_domain_concepts: 40,
            broad_domain_start: 10,
            out_domain_start: 30,
            in_len: (3, 8),
            broad_len: (4, 10),
            out_len: (6, 12),
        }
    }
}

/// Corpus sizes per variant. Defaults are the full-scale experiment:
/// a 150K baseline, 150K per auxiliary language for the multi-source
/// model, 450K synthetic pools extending variants to 600K, and 500K per
/// language for the combined variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SizeSettings {
    pub baseline: usize,
    pub msm_per_lang: usize,
    pub msm_large_per_lang: usize,
    pub synthetic_target_pool: usize,
    pub synthetic_source_pool: usize,
    pub variant_total: usize,
    pub msm_extended_total: usize,
    pub dev: usize,
    pub test_in: usize,
    pub test_out: usize,
}

impl Default for SizeSettings {
    fn default() -> Self {
        SizeSettings {
            baseline: 150_000,
            msm_per_lang: 150_000,
            msm_large_per_lang: 500_000,
            synthetic_target_pool: 450_000,
            synthetic_source_pool: 450_000,
            variant_total: 600_000,
            msm_extended_total: 500_000,
            dev: 3_865,
            test_in: 4_000,
            test_out: 2_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct NoisePair {
    pub drop_prob: f64,
    pub swap_prob: f64,
}

/// Translator corruption. The asymmetry (a noisier pivot-to-target system
/// than pivot-to-source) is what the synthetic-source method exploits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSettings {
    pub pivot_to_target: NoisePair,
    pub pivot_to_source: NoisePair,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        NoiseSettings {
            pivot_to_target: NoisePair { drop_prob: 0.3, swap_prob: 0.0 },
            pivot_to_source: NoisePair { drop_prob: 0.0, swap_prob: 0.0 },
        }
    }
}

/// Subword vocabulary sizes: 8K for source languages, 10K for the target
/// at full scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpeSettings {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl Default for BpeSettings {
    fn default() -> Self {
        BpeSettings { src_vocab: 8_000, tgt_vocab: 10_000 }
    }
}

/// Network and optimizer settings. Defaults are the full-scale model:
/// 500-dim embeddings, 4-layer 1000-unit bidirectional LSTMs, SGD at
/// learning rate 1 for 20 epochs with clipping at norm 5 and halving the
/// rate from epoch 10.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub enc_layers: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub lr_decay: f64,
    pub lr_decay_start_epoch: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            emb_dim: 500,
            hidden_dim: 1000,
            enc_layers: 4,
            learning_rate: 1.0,
            epochs: 20,
            grad_clip_norm: 5.0,
            batch_size: 16,
            lr_decay: 0.5,
            lr_decay_start_epoch: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub smoothing: bool,
    pub max_len: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { smoothing: false, max_len: 100 }
    }
}

/// Full experiment configuration, loadable from a TOML file. Defaults are
/// the full-scale values; [`ExperimentConfig::toy`] is the desk-scale
/// setup the acceptance runs use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub toy: ToySettings,
    pub sizes: SizeSettings,
    pub noise: NoiseSettings,
    pub bpe: BpeSettings,
    pub model: ModelSettings,
    pub eval: EvalSettings,
    pub filter: FilterConfig,
}

impl ExperimentConfig {
    /// Desk-scale configuration: same structure at roughly 1/1000 of the
    /// full corpus sizes, small network, a few minutes of CPU.
    pub fn toy() -> Self {
        ExperimentConfig {
            seed: 1,
            toy: ToySettings::default(),
            sizes: SizeSettings {
                baseline: 150,
                msm_per_lang: 150,
                msm_large_per_lang: 500,
                synthetic_target_pool: 540,
                synthetic_source_pool: 540,
                variant_total: 600,
                msm_extended_total: 500,
                dev: 60,
                test_in: 120,
                test_out: 120,
            },
            noise: NoiseSettings::default(),
            bpe: BpeSettings { src_vocab: 120, tgt_vocab: 140 },
            model: ModelSettings {
                emb_dim: 16,
                hidden_dim: 32,
                enc_layers: 1,
                learning_rate: 1.0,
                epochs: 13,
                grad_clip_norm: 5.0,
                batch_size: 16,
                lr_decay: 0.5,
                lr_decay_start_epoch: 10,
            },
            eval: EvalSettings { smoothing: true, max_len: 24 },
            filter: FilterConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let fail = |m: String| Err(ExperimentError::Config(m));
        let t = &self.toy;
        if t.in_domain_concepts == 0 || t.in_domain_concepts > t.concept_count {
            return fail("in_domain_concepts must be in 1..=concept_count".into());
        }
        if t.broad_domain_start >= t.concept_count || t.out_domain_start >= t.concept_count {
            return fail("domain starts must lie inside the concept domain".into());
        }
        for (lo, hi) in [t.in_len, t.broad_len, t.out_len] {
            if lo < 1 || lo > hi {
                return fail(format!("bad length range ({lo}, {hi})"));
            }
        }
        let s = &self.sizes;
        if s.variant_total < s.baseline || s.msm_extended_total < s.baseline {
            return fail("variant totals cannot be below the baseline size".into());
        }
        if s.msm_per_lang > s.msm_large_per_lang {
            return fail("msm_per_lang cannot exceed msm_large_per_lang".into());
        }
        if s.baseline == 0 || s.test_in == 0 || s.test_out == 0 {
            return fail("baseline and test sizes must be positive".into());
        }
        if self.model.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        self.filter.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(())
    }
}

/// One (model variant, test set) score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub model: String,
    pub test_set: String,
    pub bleu: f64,
}

impl ScoreRow {
    /// Percentage with half-up rounding to two decimals.
    pub fn bleu_percent_string(&self) -> String {
        format!("{:.2}", (self.bleu * 100.0 * 100.0).round() / 100.0)
    }
}

/// Scores for every variant on every test set, in fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn get(&self, model_label: &str, test_label: &str) -> Option<&ScoreRow> {
        self.rows.iter().find(|r| r.model == model_label && r.test_set == test_label)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("model\ttest_set\tbleu\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}", r.model, r.test_set, r.bleu_percent_string());
        }
        out
    }

    /// Rendered table: one row per model, one column per test set.
    pub fn render(&self) -> String {
        let mut tests: Vec<&str> = Vec::new();
        let mut models: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !tests.contains(&r.test_set.as_str()) {
                tests.push(&r.test_set);
            }
            if !models.contains(&r.model.as_str()) {
                models.push(&r.model);
            }
        }
        let width = models.iter().map(|m| m.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}", "model");
        for t in &tests {
            let _ = write!(out, "  {t:>14}");
        }
        out.push('\n');
        for m in &models {
            let _ = write!(out, "{m:<width$}");
            for t in &tests {
                match self.get(m, t) {
                    Some(r) => {
                        let _ = write!(out, "  {:>14}", r.bleu_percent_string());
                    }
                    None => {
                        let _ = write!(out, "  {:>14}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Which stages were rebuilt and which were reused from the run directory.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub built: Vec<String>,
    pub reused: Vec<String>,
}

pub const VARIANT_LABELS: [&str; 5] = [
    "(1) baseline",
    "(2) (1) + multi-source",
    "(3) (1) + synthetic target",
    "(4) (1) + synthetic source",
    "(5) (4) + multi-source",
];

pub const TEST_LABELS: [&str; 2] = ["in-domain", "out-of-domain"];

const LANGS: [&str; 5] = ["src", "pvt", "aux1", "aux2", "tgt"];

fn hex_digest(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(out, "{b:02x}");
    }
    out
}

fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

struct Staged<T> {
    value: T,
    digest: String,
}

struct Stager {
    dir: PathBuf,
    config_digest: String,
    built: Mutex<Vec<String>>,
    reused: Mutex<Vec<String>>,
}

impl Stager {
    /// Runs or reuses one stage. `file` is the primary artifact (relative
    /// to the run directory); its `.digest` sidecar decides reuse.
    fn run<T>(
        &self,
        name: &str,
        inputs: &[&str],
        file: &str,
        build: impl FnOnce() -> Result<T, ExperimentError>,
        save: impl FnOnce(&T, &Path) -> Result<(), ExperimentError>,
        load: impl FnOnce(&Path) -> Result<T, ExperimentError>,
    ) -> Result<Staged<T>, ExperimentError> {
        let mut hasher = Sha256::new();
        hasher.update(self.config_digest.as_bytes());
        hasher.update(name.as_bytes());
        for i in inputs {
            hasher.update(i.as_bytes());
        }
        let digest = hex_digest(&hasher.finalize());
        let artifact = self.dir.join(file);
        let sidecar = self.dir.join(format!("{file}.digest"));

        if artifact.exists() {
            if let Ok(existing) = fs::read_to_string(&sidecar) {
                if existing.trim() == digest {
                    let value = load(&artifact)?;
                    self.reused.lock().unwrap().push(name.to_string());
                    return Ok(Staged { value, digest });
                }
            }
        }
        let value = build()?;
        if let Some(parent) = artifact.parent() {
            fs::create_dir_all(parent).map_err(ExperimentError::at(name))?;
        }
        save(&value, &artifact)?;
        write_atomic(&sidecar, digest.as_bytes()).map_err(ExperimentError::at(name))?;
        self.built.lock().unwrap().push(name.to_string());
        Ok(Staged { value, digest })
    }

    fn report(&self) -> RunReport {
        RunReport {
            built: self.built.lock().unwrap().clone(),
            reused: self.reused.lock().unwrap().clone(),
        }
    }
}

struct World {
    specs: Vec<ToyLanguageSpec>, // same order as LANGS
}

impl World {
    fn spec(&self, lang: &str) -> &ToyLanguageSpec {
        &self.specs[LANGS.iter().position(|l| *l == lang).expect("known language")]
    }
}

fn build_specs(config: &ExperimentConfig) -> Result<World, ExperimentError> {
    let syllables: [&[&str]; 5] = [
        &["ka", "to", "mi", "su", "ne"],
        &["ber", "gul", "dez", "rin", "vol"],
        &["pa", "lo", "fi", "vu", "cho"],
        &["zam", "kor", "wex", "tul", "nid"],
        &["sha", "ri", "mo", "ken", "ba"],
    ];
    let grammars = [
        Grammar::IdentityOrder,
        Grammar::Reversed,
        Grammar::IdentityOrder,
        Grammar::Reversed,
        Grammar::IdentityOrder,
    ];
    let specs = LANGS
        .iter()
        .zip(syllables)
        .zip(grammars)
        .map(|((lang, syl), grammar)| {
            ToyLanguageSpec::synthesize(*lang, config.toy.concept_count, syl, config.toy.in_len, grammar)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(ExperimentError::at("specs"))?;
    Ok(World { specs })
}

#[derive(Clone, Copy)]
enum Domain {
    InDomain,
    Broad,
    OutDomain,
}

fn domain_options(config: &ExperimentConfig, domain: Domain, n_rows: usize, seed: u64) -> ToyGenOptions {
    let t = &config.toy;
    let (pool, len) = match domain {
        Domain::InDomain => ((0..t.in_domain_concepts).collect(), t.in_len),
        Domain::Broad => ((t.broad_domain_start..t.concept_count).collect(), t.broad_len),
        Domain::OutDomain => ((t.out_domain_start..t.concept_count).collect(), t.out_len),
    };
    ToyGenOptions { n_rows, seed, concept_pool: Some(pool), length_range: Some(len) }
}

/// Renders one aligned bitext from freshly sampled concept sequences.
fn gen_bitext(
    world: &World,
    src: &str,
    tgt: &str,
    opts: &ToyGenOptions,
    stage: &str,
) -> Result<ParallelCorpus, ExperimentError> {
    let m = generate_toy_multiway_with(
        std::slice::from_ref(world.spec(src)),
        world.spec(tgt),
        opts,
    )
    .map_err(ExperimentError::at(stage))?;
    let mut corpus = ParallelCorpus::new(src, tgt);
    for row in m.rows() {
        corpus.push(crate::corpus::SentencePair::new(
            row.sources[0].clone().expect("generator always fills sources"),
            row.target.clone(),
            crate::corpus::Provenance::Original,
        ));
    }
    Ok(corpus)
}

/// Applies a subword model to every sentence of a corpus, rewriting each
/// side as space-joined symbols.
fn encode_corpus(
    corpus: &ParallelCorpus,
    src_bpe: &BpeModel,
    tgt_bpe: &BpeModel,
) -> ParallelCorpus {
    let pairs = corpus
        .pairs()
        .iter()
        .map(|p| {
            crate::corpus::SentencePair::new(
                Sentence::new(src_bpe.encode(p.source()).join(" ")).expect("no line breaks"),
                Sentence::new(tgt_bpe.encode(p.target()).join(" ")).expect("no line breaks"),
                p.provenance(),
            )
        })
        .collect();
    ParallelCorpus::from_pairs(corpus.src_lang(), corpus.tgt_lang(), pairs)
}

fn encode_multiway(
    corpus: &MultiWayCorpus,
    bpes: &[&BpeModel],
    tgt_bpe: &BpeModel,
) -> MultiWayCorpus {
    let mut out =
        MultiWayCorpus::new(corpus.source_langs().to_vec(), corpus.tgt_lang().to_string());
    for row in corpus.rows() {
        let sources = row
            .sources
            .iter()
            .zip(bpes)
            .map(|(cell, bpe)| {
                cell.as_ref().map(|s| {
                    Sentence::new(bpe.encode(s).join(" ")).expect("no line breaks")
                })
            })
            .collect();
        let target =
            Sentence::new(tgt_bpe.encode(&row.target).join(" ")).expect("no line breaks");
        out.push_row(MultiRow { sources, target }).expect("row keeps its sources");
    }
    out
}

/// Lifts a bitext into an N-language multi-way corpus with only the column
/// at `position` available.
fn bitext_as_multiway(
    bitext: &ParallelCorpus,
    langs: &[String],
    position: usize,
) -> MultiWayCorpus {
    let mut out = MultiWayCorpus::new(langs.to_vec(), bitext.tgt_lang().to_string());
    for pair in bitext.pairs() {
        let mut sources = vec![None; langs.len()];
        sources[position] = Some(pair.source().clone());
        out.push_row(MultiRow { sources, target: pair.target().clone() })
            .expect("one source is present");
    }
    out
}

struct VariantPlan {
    label: &'static str,
    /// Key used in artifact paths.
    key: &'static str,
    /// Source language names, in model encoder order.
    langs: Vec<String>,
    data: MultiWayCorpus,
    data_digest_inputs: Vec<String>,
    seed_stream: u64,
}

/// Trains and scores the five-variant matrix; returns the score table and
/// which stages were rebuilt.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<(ScoreTable, RunReport), ExperimentError> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(ExperimentError::at("setup"))?;
    let config_toml = config.to_toml();
    let config_digest = hex_digest(&Sha256::digest(config_toml.as_bytes()));
    write_atomic(&out_dir.join("config.toml"), config_toml.as_bytes())
        .map_err(ExperimentError::at("setup"))?;
    let stager = Stager {
        dir: out_dir.to_path_buf(),
        config_digest,
        built: Mutex::new(Vec::new()),
        reused: Mutex::new(Vec::new()),
    };

    let world = build_specs(config)?;
    let specs = stager.run(
        "specs",
        &[],
        "specs/tgt.lexicon",
        || Ok(world),
        |w, _| {
            for (lang, spec) in LANGS.iter().zip(&w.specs) {
                spec.save(&out_dir.join(format!("specs/{lang}.lexicon")))
                    .map_err(ExperimentError::at("specs"))?;
            }
            Ok(())
        },
        |_| {
            let specs = LANGS
                .iter()
                .map(|lang| ToyLanguageSpec::load(&out_dir.join(format!("specs/{lang}.lexicon"))))
                .collect::<Result<Vec<_>, _>>()
                .map_err(ExperimentError::at("specs"))?;
            Ok(World { specs })
        },
    )?;
    let world = &specs.value;

    // World corpora. Each is staged as a pair of line-aligned text files.
    let corpus_stage = |name: &'static str,
                        inputs: &[&str],
                        src: &'static str,
                        tgt: &'static str,
                        build: Box<dyn FnOnce() -> Result<ParallelCorpus, ExperimentError>>|
     -> Result<Staged<ParallelCorpus>, ExperimentError> {
        let file = format!("corpora/{name}.{src}.txt");
        let tgt_file = out_dir.join(format!("corpora/{name}.{tgt}.txt"));
        stager.run(
            name,
            inputs,
            &file,
            build,
            |c, path| {
                save_parallel(c, path, &tgt_file).map_err(ExperimentError::at(name))
            },
            |path| {
                load_parallel(path, &tgt_file, src, tgt).map_err(ExperimentError::at(name))
            },
        )
    };

    let seed = config.seed;
    let base = corpus_stage("base", &[&specs.digest], "src", "tgt", {
        let opts = domain_options(config, Domain::InDomain, config.sizes.baseline, derive_seed(seed, 1));
        Box::new(move || gen_bitext(world, "src", "tgt", &opts, "base"))
    })?;
    let src_pvt = corpus_stage("src-pvt", &[&specs.digest], "src", "pvt", {
        let opts = domain_options(
            config,
            Domain::InDomain,
            config.sizes.synthetic_target_pool,
            derive_seed(seed, 2),
        );
        Box::new(move || gen_bitext(world, "src", "pvt", &opts, "src-pvt"))
    })?;
    let pvt_tgt = corpus_stage("pvt-tgt", &[&specs.digest], "pvt", "tgt", {
        let opts = domain_options(
            config,
            Domain::Broad,
            config.sizes.synthetic_source_pool,
            derive_seed(seed, 3),
        );
        Box::new(move || gen_bitext(world, "pvt", "tgt", &opts, "pvt-tgt"))
    })?;
    let msm_pvt = corpus_stage("msm-pvt", &[&specs.digest], "pvt", "tgt", {
        let opts = domain_options(
            config,
            Domain::OutDomain,
            config.sizes.msm_large_per_lang,
            derive_seed(seed, 4),
        );
        Box::new(move || gen_bitext(world, "pvt", "tgt", &opts, "msm-pvt"))
    })?;
    let msm_aux1 = corpus_stage("msm-aux1", &[&specs.digest], "aux1", "tgt", {
        let opts = domain_options(
            config,
            Domain::OutDomain,
            config.sizes.msm_large_per_lang,
            derive_seed(seed, 5),
        );
        Box::new(move || gen_bitext(world, "aux1", "tgt", &opts, "msm-aux1"))
    })?;
    let msm_aux2 = corpus_stage("msm-aux2", &[&specs.digest], "aux2", "tgt", {
        let opts = domain_options(
            config,
            Domain::OutDomain,
            config.sizes.msm_large_per_lang,
            derive_seed(seed, 6),
        );
        Box::new(move || gen_bitext(world, "aux2", "tgt", &opts, "msm-aux2"))
    })?;
    let dev = corpus_stage("dev", &[&specs.digest], "src", "tgt", {
        let opts =
            domain_options(config, Domain::InDomain, config.sizes.dev, derive_seed(seed, 7));
        Box::new(move || gen_bitext(world, "src", "tgt", &opts, "dev"))
    })?;
    let test_in = corpus_stage("test-in", &[&specs.digest], "src", "tgt", {
        let opts =
            domain_options(config, Domain::InDomain, config.sizes.test_in, derive_seed(seed, 8));
        Box::new(move || gen_bitext(world, "src", "tgt", &opts, "test-in"))
    })?;
    let test_out = corpus_stage("test-out", &[&specs.digest], "src", "tgt", {
        let opts =
            domain_options(config, Domain::OutDomain, config.sizes.test_out, derive_seed(seed, 9));
        Box::new(move || gen_bitext(world, "src", "tgt", &opts, "test-out"))
    })?;

    // Synthetic pools, cleaned by the standard filter chain.
    let synth_target = corpus_stage(
        "synth-target",
        &[&specs.digest, &src_pvt.digest],
        "src",
        "tgt",
        Box::new(|| {
            let clean = dictionary_translator(world.spec("pvt"), world.spec("tgt"))
                .map_err(ExperimentError::at("synth-target"))?;
            let noisy = NoisyDictionaryTranslator::new(
                clean,
                NoiseConfig {
                    drop_prob: config.noise.pivot_to_target.drop_prob,
                    swap_prob: config.noise.pivot_to_target.swap_prob,
                    seed: derive_seed(seed, 10),
                },
            );
            let out = build_synthetic_target(&src_pvt.value, &noisy)
                .map_err(ExperimentError::at("synth-target"))?;
            filter_chain(&out.corpus, &config.filter).map_err(ExperimentError::at("synth-target"))
        }),
    )?;
    let synth_source = corpus_stage(
        "synth-source",
        &[&specs.digest, &pvt_tgt.digest],
        "src",
        "tgt",
        Box::new(|| {
            let clean = dictionary_translator(world.spec("pvt"), world.spec("src"))
                .map_err(ExperimentError::at("synth-source"))?;
            let noisy = NoisyDictionaryTranslator::new(
                clean,
                NoiseConfig {
                    drop_prob: config.noise.pivot_to_source.drop_prob,
                    swap_prob: config.noise.pivot_to_source.swap_prob,
                    seed: derive_seed(seed, 11),
                },
            );
            let out = build_synthetic_source(&pvt_tgt.value, &noisy)
                .map_err(ExperimentError::at("synth-source"))?;
            filter_chain(&out.corpus, &config.filter).map_err(ExperimentError::at("synth-source"))
        }),
    )?;

    // One subword model per language, trained on that language's text.
    let bpe_stage = |lang: &'static str,
                     vocab: usize,
                     texts: Vec<&ParallelCorpus>,
                     sides: Vec<bool>, // true = source side
                     inputs: &[&str]|
     -> Result<Staged<BpeModel>, ExperimentError> {
        let name = format!("bpe-{lang}");
        let file = format!("bpe/{lang}.bpe");
        stager.run(
            &name.clone(),
            inputs,
            &file,
            || {
                let mut sentences = Vec::new();
                for (corpus, is_src) in texts.iter().zip(&sides) {
                    for p in corpus.pairs() {
                        sentences
                            .push(if *is_src { p.source().clone() } else { p.target().clone() });
                    }
                }
                train_bpe(&sentences, vocab).map_err(ExperimentError::at(&name))
            },
            |m, path| m.save(path).map_err(ExperimentError::at(&name)),
            |path| BpeModel::load(path).map_err(ExperimentError::at(&name)),
        )
    };

    let bpe_src = bpe_stage(
        "src",
        config.bpe.src_vocab,
        vec![&base.value, &src_pvt.value],
        vec![true, true],
        &[&base.digest, &src_pvt.digest],
    )?;
    let bpe_pvt = bpe_stage(
        "pvt",
        config.bpe.src_vocab,
        vec![&src_pvt.value, &pvt_tgt.value, &msm_pvt.value],
        vec![false, true, true],
        &[&src_pvt.digest, &pvt_tgt.digest, &msm_pvt.digest],
    )?;
    let bpe_aux1 = bpe_stage(
        "aux1",
        config.bpe.src_vocab,
        vec![&msm_aux1.value],
        vec![true],
        &[&msm_aux1.digest],
    )?;
    let bpe_aux2 = bpe_stage(
        "aux2",
        config.bpe.src_vocab,
        vec![&msm_aux2.value],
        vec![true],
        &[&msm_aux2.digest],
    )?;
    let bpe_tgt = bpe_stage(
        "tgt",
        config.bpe.tgt_vocab,
        vec![&base.value, &pvt_tgt.value, &msm_pvt.value, &msm_aux1.value, &msm_aux2.value],
        vec![false, false, false, false, false],
        &[&base.digest, &pvt_tgt.digest, &msm_pvt.digest, &msm_aux1.digest, &msm_aux2.digest],
    )?;

    let vocab_of = |bpe: &BpeModel| Vocabulary::from_symbols(bpe.vocab().iter().map(String::as_str));
    let vocab_src = vocab_of(&bpe_src.value);
    let vocab_pvt = vocab_of(&bpe_pvt.value);
    let vocab_aux1 = vocab_of(&bpe_aux1.value);
    let vocab_aux2 = vocab_of(&bpe_aux2.value);
    let vocab_tgt = vocab_of(&bpe_tgt.value);

    // Variant training data, in their raw and subword-encoded forms.
    let single = |c: ParallelCorpus| -> Result<MultiWayCorpus, crate::corpus::CorpusError> {
        align_multiway(&[c], AlignMode::Disjoint)
    };
    let four_langs: Vec<String> = ["src", "pvt", "aux1", "aux2"].map(String::from).to_vec();

    let v1_raw = single(base.value.clone()).map_err(ExperimentError::at("variant1-data"))?;
    let v2_raw = align_multiway(
        &[
            base.value.clone(),
            msm_pvt.value.truncate(config.sizes.msm_per_lang, derive_seed(seed, 30)),
            msm_aux1.value.truncate(config.sizes.msm_per_lang, derive_seed(seed, 31)),
            msm_aux2.value.truncate(config.sizes.msm_per_lang, derive_seed(seed, 32)),
        ],
        AlignMode::Disjoint,
    )
    .map_err(ExperimentError::at("variant2-data"))?;
    let v3_raw = single(
        extend(&base.value, &synth_target.value, config.sizes.variant_total, derive_seed(seed, 33))
            .map_err(ExperimentError::at("variant3-data"))?,
    )
    .map_err(ExperimentError::at("variant3-data"))?;
    let v4_raw = single(
        extend(&base.value, &synth_source.value, config.sizes.variant_total, derive_seed(seed, 34))
            .map_err(ExperimentError::at("variant4-data"))?,
    )
    .map_err(ExperimentError::at("variant4-data"))?;
    let v5_raw = align_multiway(
        &[
            extend(
                &base.value,
                &synth_source.value,
                config.sizes.msm_extended_total,
                derive_seed(seed, 35),
            )
            .map_err(ExperimentError::at("variant5-data"))?,
            msm_pvt.value.clone(),
            msm_aux1.value.clone(),
            msm_aux2.value.clone(),
        ],
        AlignMode::Disjoint,
    )
    .map_err(ExperimentError::at("variant5-data"))?;

    let enc_multi_single = |m: &MultiWayCorpus| encode_multiway(m, &[&bpe_src.value], &bpe_tgt.value);
    let enc_multi_four = |m: &MultiWayCorpus| {
        encode_multiway(
            m,
            &[&bpe_src.value, &bpe_pvt.value, &bpe_aux1.value, &bpe_aux2.value],
            &bpe_tgt.value,
        )
    };

    let all_bpe_digests = [
        bpe_src.digest.clone(),
        bpe_pvt.digest.clone(),
        bpe_aux1.digest.clone(),
        bpe_aux2.digest.clone(),
        bpe_tgt.digest.clone(),
    ];
    let plans = vec![
        VariantPlan {
            label: VARIANT_LABELS[0],
            key: "variant1",
            langs: vec!["src".to_string()],
            data: enc_multi_single(&v1_raw),
            data_digest_inputs: vec![base.digest.clone(), all_bpe_digests[0].clone(), all_bpe_digests[4].clone()],
            seed_stream: 41,
        },
        VariantPlan {
            label: VARIANT_LABELS[1],
            key: "variant2",
            langs: four_langs.clone(),
            data: enc_multi_four(&v2_raw),
            data_digest_inputs: {
                let mut v = vec![base.digest.clone(), msm_pvt.digest.clone(), msm_aux1.digest.clone(), msm_aux2.digest.clone()];
                v.extend(all_bpe_digests.iter().cloned());
                v
            },
            seed_stream: 42,
        },
        VariantPlan {
            label: VARIANT_LABELS[2],
            key: "variant3",
            langs: vec!["src".to_string()],
            data: enc_multi_single(&v3_raw),
            data_digest_inputs: vec![base.digest.clone(), synth_target.digest.clone(), all_bpe_digests[0].clone(), all_bpe_digests[4].clone()],
            seed_stream: 43,
        },
        VariantPlan {
            label: VARIANT_LABELS[3],
            key: "variant4",
            langs: vec!["src".to_string()],
            data: enc_multi_single(&v4_raw),
            data_digest_inputs: vec![base.digest.clone(), synth_source.digest.clone(), all_bpe_digests[0].clone(), all_bpe_digests[4].clone()],
            seed_stream: 44,
        },
        VariantPlan {
            label: VARIANT_LABELS[4],
            key: "variant5",
            langs: four_langs,
            data: enc_multi_four(&v5_raw),
            data_digest_inputs: {
                let mut v = vec![base.digest.clone(), synth_source.digest.clone(), msm_pvt.digest.clone(), msm_aux1.digest.clone(), msm_aux2.digest.clone()];
                v.extend(all_bpe_digests.iter().cloned());
                v
            },
            seed_stream: 45,
        },
    ];

    let vocab_for = |lang: &str| -> Vocabulary {
        match lang {
            "src" => vocab_src.clone(),
            "pvt" => vocab_pvt.clone(),
            "aux1" => vocab_aux1.clone(),
            "aux2" => vocab_aux2.clone(),
            _ => vocab_tgt.clone(),
        }
    };

    // Train and evaluate variants; each is independent and deterministic,
    // so they can run on their own threads.
    let results: Vec<Result<Vec<ScoreRow>, ExperimentError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = plans
            .iter()
            .map(|plan| {
                let stager = &stager;
                let config = &config;
                let dev = &dev.value;
                let test_sets: Vec<(&str, &Staged<ParallelCorpus>)> =
                    vec![(TEST_LABELS[0], &test_in), (TEST_LABELS[1], &test_out)];
                let bpe_src = &bpe_src.value;
                let bpe_tgt = &bpe_tgt.value;
                let vocab_for = &vocab_for;
                scope.spawn(move || {
                    run_variant(stager, config, plan, dev, &test_sets, bpe_src, bpe_tgt, vocab_for)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("variant thread panicked")).collect()
    });

    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    let table = ScoreTable { rows };
    write_atomic(&out_dir.join("scores.tsv"), table.to_tsv().as_bytes())
        .map_err(ExperimentError::at("scores"))?;
    Ok((table, stager.report()))
}

#[allow(clippy::too_many_arguments)]
fn run_variant(
    stager: &Stager,
    config: &ExperimentConfig,
    plan: &VariantPlan,
    dev: &ParallelCorpus,
    test_sets: &[(&str, &Staged<ParallelCorpus>)],
    bpe_src: &BpeModel,
    bpe_tgt: &BpeModel,
    vocab_for: &dyn Fn(&str) -> Vocabulary,
) -> Result<Vec<ScoreRow>, ExperimentError> {
    let key = plan.key;
    let digest_inputs: Vec<&str> = plan.data_digest_inputs.iter().map(String::as_str).collect();

    // Stage the encoded training corpus so reruns can skip straight to it.
    let data = stager.run(
        &format!("{key}-data"),
        &digest_inputs,
        &format!("{key}/train.tsv"),
        || Ok(plan.data.clone()),
        |m, path| save_multiway(m, path).map_err(ExperimentError::at(key)),
        |path| load_multiway(path).map_err(ExperimentError::at(key)),
    )?;

    let src_vocabs: Vec<Vocabulary> = plan.langs.iter().map(|l| vocab_for(l)).collect();
    let tgt_vocab = vocab_for("tgt");
    let hp = Hyperparams {
        emb_dim: config.model.emb_dim,
        hidden_dim: config.model.hidden_dim,
        enc_layers: config.model.enc_layers,
        vocab_size_src: src_vocabs.iter().map(Vocabulary::len).collect(),
        vocab_size_tgt: tgt_vocab.len(),
        learning_rate: config.model.learning_rate,
        epochs: config.model.epochs,
        grad_clip_norm: config.model.grad_clip_norm,
        seed: derive_seed(config.seed, plan.seed_stream),
    };
    let schedule = TrainSchedule {
        batch_size: config.model.batch_size,
        lr_decay: config.model.lr_decay,
        lr_decay_start_epoch: config.model.lr_decay_start_epoch,
    };

    let train_stage = stager.run(
        &format!("{key}-train"),
        &[&data.digest],
        &format!("{key}/checkpoint.json"),
        || {
            let mut model =
                MsnmtModel::init(hp.clone(), plan.langs.len()).map_err(ExperimentError::at(key))?;
            let history = train(&mut model, &data.value, &src_vocabs, &tgt_vocab, &schedule)
                .map_err(ExperimentError::at(key))?;
            crate::nmt::write_training_log(
                &stager.dir.join(format!("{key}/train_log.tsv")),
                &history,
            )
            .map_err(ExperimentError::at(key))?;

            // Dev loss is logged for inspection; nothing selects on it.
            let dev_encoded = encode_corpus(dev, bpe_src, bpe_tgt);
            let dev_multi = bitext_as_multiway(&dev_encoded, &plan.langs, 0);
            let rows: Vec<&MultiRow> = dev_multi.rows().iter().collect();
            let dev_batch = TrainingBatch::from_rows(&rows, &src_vocabs, &tgt_vocab)
                .map_err(ExperimentError::at(key))?;
            let dev_loss = batch_loss(&model, &dev_batch).map_err(ExperimentError::at(key))?;
            write_atomic(
                &stager.dir.join(format!("{key}/metrics.tsv")),
                format!("dev_loss\t{dev_loss:.6}\n").as_bytes(),
            )
            .map_err(ExperimentError::at(key))?;

            Ok(Checkpoint {
                model,
                src_langs: plan.langs.clone(),
                tgt_lang: "tgt".to_string(),
                src_vocabs: src_vocabs.clone(),
                tgt_vocab: tgt_vocab.clone(),
            })
        },
        |ckpt, path| ckpt.save(path).map_err(ExperimentError::at(key)),
        |path| Checkpoint::load(path).map_err(ExperimentError::at(key)),
    )?;

    let mut rows = Vec::new();
    for (label, test) in test_sets {
        let eval_stage = stager.run(
            &format!("{key}-eval-{label}"),
            &[&train_stage.digest, &test.digest],
            &format!("{key}/eval-{label}.json"),
            || {
                let ckpt = &train_stage.value;
                let mut hyps = Vec::with_capacity(test.value.len());
                for pair in test.value.pairs() {
                    let symbols = bpe_src.encode(pair.source());
                    let ids =
                        ckpt.src_vocabs[0].encode_tokens(symbols.iter().map(String::as_str));
                    let mut sources = vec![None; ckpt.src_langs.len()];
                    sources[0] = Some(ids);
                    let out = ckpt
                        .model
                        .translate(&sources, config.eval.max_len)
                        .map_err(ExperimentError::at(key))?;
                    let out_symbols = ckpt.tgt_vocab.decode_ids(&out);
                    hyps.push(bpe_tgt.decode(&out_symbols));
                }
                let mut hyp_text = String::new();
                for h in &hyps {
                    hyp_text.push_str(h.as_str());
                    hyp_text.push('\n');
                }
                write_atomic(
                    &stager.dir.join(format!("{key}/hyp-{label}.txt")),
                    hyp_text.as_bytes(),
                )
                .map_err(ExperimentError::at(key))?;
                let refs: Vec<Sentence> =
                    test.value.pairs().iter().map(|p| p.target().clone()).collect();
                let smoothing =
                    if config.eval.smoothing { Smoothing::AddOne } else { Smoothing::None };
                bleu4_with(&hyps, &refs, &WhitespaceSegmenter, smoothing)
                    .map_err(ExperimentError::at(key))
            },
            |report, path| {
                let json =
                    serde_json::to_string_pretty(report).expect("report serializes");
                write_atomic(path, json.as_bytes()).map_err(ExperimentError::at(key))
            },
            |path| {
                let json = fs::read_to_string(path).map_err(ExperimentError::at(key))?;
                serde_json::from_str(&json)
                    .map_err(|e: serde_json::Error| ExperimentError::Stage {
                        stage: key.to_string(),
                        source: Box::new(e),
                    })
            },
        )?;
        rows.push(ScoreRow {
            model: plan.label.to_string(),
            test_set: label.to_string(),
            bleu: eval_stage.value.bleu,
        });
    }
    Ok(rows)
}
