//! SGD training with gradient clipping and stepwise learning-rate decay.

use super::batch::TrainingBatch;
use super::model::{bind, loss_graph, MsnmtModel};
use super::tape::Tape;
use super::{NmtError, Vocabulary};
use crate::corpus::{MultiRow, MultiWayCorpus};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

/// Batching and learning-rate schedule. The decay halves the rate at
/// `lr_decay_start_epoch` (1-based) and keeps multiplying each epoch after.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub batch_size: usize,
    pub lr_decay: f64,
    pub lr_decay_start_epoch: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule { batch_size: 16, lr_decay: 0.5, lr_decay_start_epoch: 10 }
    }
}

impl TrainSchedule {
    pub fn lr_at(&self, base_lr: f64, epoch: usize) -> f64 {
        if epoch < self.lr_decay_start_epoch {
            base_lr
        } else {
            base_lr * self.lr_decay.powi((epoch - self.lr_decay_start_epoch + 1) as i32)
        }
    }
}

/// Gradients for every parameter, in registry order.
pub struct ModelGrads {
    pub(super) grads: Vec<Array2<f64>>,
}

impl ModelGrads {
    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.grads.iter()
    }
}

/// Mean per-token teacher-forced cross-entropy of a batch, forward only.
pub fn batch_loss(model: &MsnmtModel, batch: &TrainingBatch) -> Result<f64, NmtError> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, model);
    let (loss, _) = loss_graph(&mut tape, &bound, model, batch)?;
    let value = tape.value(loss)[(0, 0)];
    if !value.is_finite() {
        return Err(NmtError::NonFiniteLoss { epoch: 0, step: 0 });
    }
    Ok(value)
}

/// Loss plus gradients for every parameter via the reverse-mode tape.
pub fn loss_and_gradients(
    model: &MsnmtModel,
    batch: &TrainingBatch,
) -> Result<(f64, ModelGrads), NmtError> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, model);
    let (loss, _) = loss_graph(&mut tape, &bound, model, batch)?;
    let value = tape.value(loss)[(0, 0)];
    if !value.is_finite() {
        return Err(NmtError::NonFiniteLoss { epoch: 0, step: 0 });
    }
    let grads = tape.backward(loss);
    let grads = bound.param_vars.iter().map(|&v| grads.of(v).clone()).collect();
    Ok((value, ModelGrads { grads }))
}

/// Clips the global gradient norm to `clip_norm`, then applies
/// `theta <- theta - lr * g` in place.
pub fn sgd_step(model: &mut MsnmtModel, grads: &ModelGrads, lr: f64, clip_norm: f64) {
    let norm = grads.global_norm();
    let factor = if norm > clip_norm && norm > 0.0 { clip_norm / norm } else { 1.0 };
    let step = lr * factor;
    for ((_, param), grad) in model.param_views_mut().into_iter().zip(&grads.grads) {
        param.zip_mut_with(grad, |p, &g| *p -= step * g);
    }
}

/// Per-epoch training statistics; `mean_loss` is token-weighted.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Writes the `epoch<TAB>mean_loss<TAB>lr` training log.
pub fn write_training_log(path: &Path, history: &[EpochStats]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch\tmean_loss\tlr")?;
    for e in history {
        writeln!(f, "{}\t{:.6}\t{}", e.epoch, e.mean_loss, e.lr)?;
    }
    Ok(())
}

fn derive_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 of the pair, so per-epoch shuffles are independent.
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Trains in place for `hp.epochs` epochs and returns the loss history.
///
/// Rows are shuffled per epoch with a seed derived from `hp.seed`, then
/// grouped by source-availability pattern so a batch only pays for the
/// encoders it actually uses; batch order is shuffled again across groups.
/// Single-threaded and bit-deterministic for a fixed seed.
pub fn train(
    model: &mut MsnmtModel,
    corpus: &MultiWayCorpus,
    src_vocabs: &[Vocabulary],
    tgt_vocab: &Vocabulary,
    schedule: &TrainSchedule,
) -> Result<Vec<EpochStats>, NmtError> {
    if corpus.is_empty() {
        return Err(NmtError::EmptyCorpus);
    }
    if corpus.source_langs().len() != model.n_sources() || src_vocabs.len() != model.n_sources() {
        return Err(NmtError::DimensionMismatch(format!(
            "corpus has {} source languages, model has {}",
            corpus.source_langs().len(),
            model.n_sources()
        )));
    }
    let hp = model.hyperparams().clone();
    let mut history = Vec::with_capacity(hp.epochs);

    for epoch in 1..=hp.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hp.seed, epoch as u64));
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);

        // Group shuffled rows by availability pattern, preserving shuffle
        // order within and across groups.
        let mut groups: Vec<(u64, Vec<usize>)> = Vec::new();
        for i in order {
            let pattern = corpus.rows()[i]
                .sources
                .iter()
                .enumerate()
                .fold(0u64, |acc, (l, s)| if s.is_some() { acc | (1 << l) } else { acc });
            match groups.iter_mut().find(|(p, _)| *p == pattern) {
                Some((_, rows)) => rows.push(i),
                None => groups.push((pattern, vec![i])),
            }
        }
        let mut batches: Vec<Vec<usize>> = Vec::new();
        for (_, rows) in &groups {
            for chunk in rows.chunks(schedule.batch_size.max(1)) {
                batches.push(chunk.to_vec());
            }
        }
        batches.shuffle(&mut rng);

        let lr = schedule.lr_at(hp.learning_rate, epoch);
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        for (step, batch_rows) in batches.iter().enumerate() {
            let rows: Vec<&MultiRow> = batch_rows.iter().map(|&i| &corpus.rows()[i]).collect();
            let batch = TrainingBatch::from_rows(&rows, src_vocabs, tgt_vocab)?;
            let tokens = batch.target_token_count();
            let (loss, grads) = loss_and_gradients(model, &batch).map_err(|e| match e {
                NmtError::NonFiniteLoss { .. } => NmtError::NonFiniteLoss { epoch, step },
                other => other,
            })?;
            sgd_step(model, &grads, lr, hp.grad_clip_norm);
            loss_sum += loss * tokens as f64;
            token_sum += tokens;
        }
        history.push(EpochStats { epoch, mean_loss: loss_sum / token_sum as f64, lr });
    }
    Ok(history)
}
