//! Plain-text corpus files: UTF-8, LF line endings, one sentence per line.
//!
//! Parallel data lives in two files aligned by line number. Multi-way data
//! is a TSV with header `lang1<TAB>...<TAB>langN<TAB>target`; an empty cell
//! marks an unavailable source.

use super::{
    CorpusError, MultiRow, MultiWayCorpus, ParallelCorpus, Provenance, Sentence, SentencePair,
};
use std::fs;
use std::io::Write;
use std::path::Path;

fn read_lines(path: &Path) -> Result<Vec<Sentence>, CorpusError> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let mut fragments: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    if bytes.ends_with(b"\n") {
        fragments.pop();
    }
    let mut out = Vec::with_capacity(fragments.len());
    for (i, raw) in fragments.into_iter().enumerate() {
        let text = std::str::from_utf8(raw).map_err(|_| CorpusError::Encoding { line: i + 1 })?;
        out.push(Sentence::new(text)?);
    }
    Ok(out)
}

/// Loads a parallel corpus from two line-aligned files; provenance is
/// `Original` for every pair.
pub fn load_parallel(
    src_path: &Path,
    tgt_path: &Path,
    src_lang: &str,
    tgt_lang: &str,
) -> Result<ParallelCorpus, CorpusError> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(CorpusError::LineCountMismatch { src_lines: src.len(), tgt_lines: tgt.len() });
    }
    let pairs = src
        .into_iter()
        .zip(tgt)
        .map(|(s, t)| SentencePair::new(s, t, Provenance::Original))
        .collect();
    Ok(ParallelCorpus::from_pairs(src_lang, tgt_lang, pairs))
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CorpusError> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes the two sides of a corpus as LF-terminated text files.
pub fn save_parallel(
    corpus: &ParallelCorpus,
    src_path: &Path,
    tgt_path: &Path,
) -> Result<(), CorpusError> {
    let mut src = String::new();
    let mut tgt = String::new();
    for p in corpus.pairs() {
        src.push_str(p.source().as_str());
        src.push('\n');
        tgt.push_str(p.target().as_str());
        tgt.push('\n');
    }
    write_atomic(src_path, src.as_bytes())?;
    write_atomic(tgt_path, tgt.as_bytes())?;
    Ok(())
}

pub fn save_multiway(corpus: &MultiWayCorpus, path: &Path) -> Result<(), CorpusError> {
    let mut out = String::new();
    for lang in corpus.source_langs() {
        out.push_str(lang);
        out.push('\t');
    }
    out.push_str(corpus.tgt_lang());
    out.push('\n');
    for row in corpus.rows() {
        for cell in &row.sources {
            if let Some(s) = cell {
                if s.as_str().contains('\t') {
                    return Err(CorpusError::TabInSentence);
                }
                out.push_str(s.as_str());
            }
            out.push('\t');
        }
        if row.target.as_str().contains('\t') {
            return Err(CorpusError::TabInSentence);
        }
        out.push_str(row.target.as_str());
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn load_multiway(path: &Path) -> Result<MultiWayCorpus, CorpusError> {
    let lines = read_lines(path)?;
    let header = lines
        .first()
        .ok_or_else(|| CorpusError::MalformedMultiway("missing header".into()))?;
    let mut cols: Vec<String> = header.as_str().split('\t').map(str::to_string).collect();
    if cols.len() < 2 {
        return Err(CorpusError::MalformedMultiway("header needs >= 2 columns".into()));
    }
    let tgt_lang = cols.pop().unwrap();
    let n = cols.len();
    let mut corpus = MultiWayCorpus::new(cols, tgt_lang);
    for (i, line) in lines.iter().enumerate().skip(1) {
        let cells: Vec<&str> = line.as_str().split('\t').collect();
        if cells.len() != n + 1 {
            return Err(CorpusError::MalformedMultiway(format!(
                "row {}: expected {} columns, found {}",
                i + 1,
                n + 1,
                cells.len()
            )));
        }
        let sources = cells[..n]
            .iter()
            .map(|c| if c.is_empty() { Ok(None) } else { Sentence::new(*c).map(Some) })
            .collect::<Result<Vec<_>, _>>()?;
        corpus.push_row(MultiRow { sources, target: Sentence::new(cells[n])? })?;
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn load_matching_lines() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("s.txt");
        let t = dir.path().join("t.txt");
        fs::write(&s, "a b\nc\nd e f\n").unwrap();
        fs::write(&t, "x\ny z\nw\n").unwrap();
        let c = load_parallel(&s, &t, "src", "tgt").unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.pairs().iter().all(|p| p.provenance() == Provenance::Original));
        assert_eq!(c.pairs()[2].source().as_str(), "d e f");
    }

    #[test]
    fn load_mismatch_reports_counts() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("s.txt");
        let t = dir.path().join("t.txt");
        fs::write(&s, "a\nb\nc\n").unwrap();
        fs::write(&t, "x\ny\n").unwrap();
        match load_parallel(&s, &t, "src", "tgt") {
            Err(CorpusError::LineCountMismatch { src_lines, tgt_lines }) => {
                assert_eq!((src_lines, tgt_lines), (3, 2));
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn load_empty_files() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("s.txt");
        let t = dir.path().join("t.txt");
        fs::write(&s, "").unwrap();
        fs::write(&t, "").unwrap();
        assert_eq!(load_parallel(&s, &t, "src", "tgt").unwrap().len(), 0);
    }

    #[test]
    fn invalid_utf8_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("s.txt");
        let t = dir.path().join("t.txt");
        fs::write(&s, b"ok\n\xff\xfe\n").unwrap();
        fs::write(&t, "x\ny\n").unwrap();
        match load_parallel(&s, &t, "src", "tgt") {
            Err(CorpusError::Encoding { line }) => assert_eq!(line, 2),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn parallel_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("s.txt");
        let t = dir.path().join("t.txt");
        fs::write(&s, "a b\n\nc\n").unwrap();
        fs::write(&t, "x\ny\nz\n").unwrap();
        let c = load_parallel(&s, &t, "src", "tgt").unwrap();
        let s2 = dir.path().join("s2.txt");
        let t2 = dir.path().join("t2.txt");
        save_parallel(&c, &s2, &t2).unwrap();
        assert_eq!(fs::read(&s).unwrap(), fs::read(&s2).unwrap());
        assert_eq!(fs::read(&t).unwrap(), fs::read(&t2).unwrap());
        assert_eq!(load_parallel(&s2, &t2, "src", "tgt").unwrap(), c);
    }

    #[test]
    fn multiway_round_trip() {
        let mut m = MultiWayCorpus::new(vec!["l1".into(), "l2".into()], "tgt");
        m.push_row(MultiRow {
            sources: vec![Some(Sentence::new("a").unwrap()), None],
            target: Sentence::new("x").unwrap(),
        })
        .unwrap();
        m.push_row(MultiRow {
            sources: vec![Some(Sentence::new("b").unwrap()), Some(Sentence::new("c").unwrap())],
            target: Sentence::new("y").unwrap(),
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        save_multiway(&m, &p).unwrap();
        let loaded = load_multiway(&p).unwrap();
        assert_eq!(loaded, m);
        // Saving the loaded corpus reproduces the file byte for byte.
        let p2 = dir.path().join("m2.tsv");
        save_multiway(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn multiway_rejects_all_empty_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        fs::write(&p, "l1\tl2\ttgt\n\t\tx\n").unwrap();
        assert!(matches!(load_multiway(&p), Err(CorpusError::EmptySourceRow { .. })));
    }
}
