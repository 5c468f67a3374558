//! Aligned plain-text corpus files.
//!
//! A corpus is two UTF-8 files with one sentence per line, line `i` of each
//! aligned. An optional provenance file holds one line per pair: `real`, or
//! `synthetic<TAB><confidence>`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{ParallelCorpus, Provenance, SentencePair};
use crate::error::CorpusError;

pub fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let file = fs::File::open(path)?;
    Ok(BufReader::new(file).lines().collect::<Result<_, _>>()?)
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<(), CorpusError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for l in lines {
        writeln!(out, "{l}")?;
    }
    out.flush()?;
    Ok(())
}

fn parse_provenance(line: &str, lineno: usize) -> Result<Provenance, CorpusError> {
    let bad = |msg: &str| CorpusError::Provenance {
        line: lineno,
        msg: msg.to_string(),
    };
    let mut fields = line.split('\t');
    match (fields.next(), fields.next(), fields.next()) {
        (Some("real"), None, None) => Ok(Provenance::Real),
        (Some("synthetic"), Some(c), None) => {
            let confidence: f64 = c.parse().map_err(|_| bad("bad confidence"))?;
            Ok(Provenance::Synthetic { confidence })
        }
        _ => Err(bad("expected 'real' or 'synthetic<TAB>confidence'")),
    }
}

/// Reads an aligned corpus; without a provenance file every pair is real.
pub fn read_corpus(
    source: &Path,
    target: &Path,
    provenance: Option<&Path>,
) -> Result<ParallelCorpus, CorpusError> {
    let src = read_lines(source)?;
    let tgt = read_lines(target)?;
    if src.len() != tgt.len() {
        return Err(CorpusError::LineCountMismatch {
            left: source.to_path_buf(),
            left_lines: src.len(),
            right: target.to_path_buf(),
            right_lines: tgt.len(),
        });
    }
    let prov: Vec<Provenance> = match provenance {
        Some(path) => {
            let lines = read_lines(path)?;
            if lines.len() != src.len() {
                return Err(CorpusError::LineCountMismatch {
                    left: source.to_path_buf(),
                    left_lines: src.len(),
                    right: path.to_path_buf(),
                    right_lines: lines.len(),
                });
            }
            lines
                .iter()
                .enumerate()
                .map(|(i, l)| parse_provenance(l, i + 1))
                .collect::<Result<_, _>>()?
        }
        None => vec![Provenance::Real; src.len()],
    };
    src.iter()
        .zip(&tgt)
        .zip(prov)
        .enumerate()
        .map(|(i, ((s, t), p))| {
            SentencePair::new(s, t, p).map_err(|e| {
                CorpusError::InvalidPair(format!("line {}: {e}", i + 1))
            })
        })
        .collect::<Result<Vec<_>, _>>()
        .map(ParallelCorpus::new)
}

/// Writes both sides, plus the provenance file when a path is given.
pub fn write_corpus(
    corpus: &ParallelCorpus,
    source: &Path,
    target: &Path,
    provenance: Option<&Path>,
) -> Result<(), CorpusError> {
    write_lines(source, &corpus.sources())?;
    write_lines(target, &corpus.targets())?;
    if let Some(path) = provenance {
        let lines: Vec<String> = corpus
            .iter()
            .map(|p| match p.provenance() {
                Provenance::Real => "real".to_string(),
                Provenance::Synthetic { confidence } => format!("synthetic\t{confidence:?}"),
            })
            .collect();
        write_lines(path, &lines)?;
    }
    Ok(())
}
