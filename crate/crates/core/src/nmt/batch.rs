//! Padded id batches built from multi-way corpus rows.

use super::{NmtError, Vocabulary, BOS_ID, EOS_ID, PAD_ID};
use crate::corpus::MultiRow;

/// One source language's side of a batch. Unavailable rows are recorded
/// with length zero and all-padding ids.
#[derive(Debug, Clone)]
pub struct SourceBatch {
    /// Row-major ids, every row padded to `max_len`.
    pub ids: Vec<Vec<u32>>,
    /// Real token count per row; zero for unavailable rows.
    pub lens: Vec<usize>,
    pub max_len: usize,
}

impl SourceBatch {
    pub fn any_available(&self) -> bool {
        self.lens.iter().any(|&l| l > 0)
    }
}

/// A padded training batch: per-language source ids with availability,
/// plus BOS/EOS-framed target ids.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub sources: Vec<SourceBatch>,
    /// Each row is `[BOS, w1..wm, EOS]` padded to the batch maximum.
    pub tgt_ids: Vec<Vec<u32>>,
    /// Real length per row, BOS and EOS included.
    pub tgt_lens: Vec<usize>,
    pub batch_size: usize,
}

impl TrainingBatch {
    pub fn from_rows(
        rows: &[&MultiRow],
        src_vocabs: &[Vocabulary],
        tgt_vocab: &Vocabulary,
    ) -> Result<Self, NmtError> {
        if rows.is_empty() {
            return Err(NmtError::EmptyCorpus);
        }
        let n_langs = src_vocabs.len();
        for (i, row) in rows.iter().enumerate() {
            if row.sources.len() != n_langs {
                return Err(NmtError::DimensionMismatch(format!(
                    "row {i} has {} source columns, expected {n_langs}",
                    row.sources.len()
                )));
            }
            if row.available_count() == 0 {
                return Err(NmtError::DimensionMismatch(format!("row {i} has no source")));
            }
        }

        let mut sources = Vec::with_capacity(n_langs);
        for (li, vocab) in src_vocabs.iter().enumerate() {
            let per_row: Vec<Vec<u32>> = rows
                .iter()
                .map(|row| match &row.sources[li] {
                    Some(sentence) => vocab.encode_tokens(sentence.tokens()),
                    None => Vec::new(),
                })
                .collect();
            let lens: Vec<usize> = per_row.iter().map(Vec::len).collect();
            let max_len = lens.iter().copied().max().unwrap_or(0);
            let ids = per_row
                .into_iter()
                .map(|mut r| {
                    r.resize(max_len, PAD_ID);
                    r
                })
                .collect();
            sources.push(SourceBatch { ids, lens, max_len });
        }

        let framed: Vec<Vec<u32>> = rows
            .iter()
            .map(|row| {
                let mut ids = vec![BOS_ID];
                ids.extend(tgt_vocab.encode_tokens(row.target.tokens()));
                ids.push(EOS_ID);
                ids
            })
            .collect();
        let tgt_lens: Vec<usize> = framed.iter().map(Vec::len).collect();
        let max_tgt = tgt_lens.iter().copied().max().unwrap();
        let tgt_ids = framed
            .into_iter()
            .map(|mut r| {
                r.resize(max_tgt, PAD_ID);
                r
            })
            .collect();

        Ok(TrainingBatch { sources, tgt_ids, tgt_lens, batch_size: rows.len() })
    }

    /// Number of supervised prediction targets: every position after BOS.
    pub fn target_token_count(&self) -> usize {
        self.tgt_lens.iter().map(|&l| l - 1).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sentence;

    fn sent(text: &str) -> Sentence {
        Sentence::new(text).unwrap()
    }

    #[test]
    fn padding_and_framing() {
        let v = Vocabulary::from_symbols(["a", "b", "c"]);
        let rows = [
            MultiRow { sources: vec![Some(sent("a b")), None], target: sent("c") },
            MultiRow { sources: vec![Some(sent("c")), Some(sent("a a a"))], target: sent("a b") },
        ];
        let refs: Vec<&MultiRow> = rows.iter().collect();
        let b = TrainingBatch::from_rows(&refs, &[v.clone(), v.clone()], &v).unwrap();

        assert_eq!(b.sources[0].lens, vec![2, 1]);
        assert_eq!(b.sources[0].ids[1], vec![6, PAD_ID]);
        assert_eq!(b.sources[1].lens, vec![0, 3]);
        assert_eq!(b.sources[1].ids[0], vec![PAD_ID; 3]);

        assert_eq!(b.tgt_lens, vec![3, 4]);
        assert_eq!(b.tgt_ids[0], vec![BOS_ID, 6, EOS_ID, PAD_ID]);
        assert_eq!(b.tgt_ids[1], vec![BOS_ID, 4, 5, EOS_ID]);
        assert_eq!(b.target_token_count(), 5);
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let v = Vocabulary::from_symbols(["a"]);
        let rows = [MultiRow { sources: vec![Some(sent("a zzz"))], target: sent("zzz") }];
        let refs: Vec<&MultiRow> = rows.iter().collect();
        let b = TrainingBatch::from_rows(&refs, std::slice::from_ref(&v), &v).unwrap();
        assert_eq!(b.sources[0].ids[0][1], super::super::UNK_ID);
        assert_eq!(b.tgt_ids[0][1], super::super::UNK_ID);
    }
}
