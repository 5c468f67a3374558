//! Parallel corpora: data model, hygiene filters, batching and statistics.

mod batch;
mod io;
mod langid;

use serde::{Deserialize, Serialize};

use crate::error::CorpusError;
use crate::subword::{normalize, SubwordModel};

pub use batch::{make_batches, pack_batches, Batch};
pub use io::{read_corpus, read_lines, write_corpus, write_lines};
pub use langid::{langid_filter, train_langid, LangIdModel, LANGID_ALPHA, MIN_SAMPLES_PER_LANGUAGE};

/// Default language-identification threshold for corpus filtering.
pub const DEFAULT_LANGID_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic { confidence: f64 },
}

impl Provenance {
    pub fn is_synthetic(&self) -> bool {
        matches!(self, Provenance::Synthetic { .. })
    }

    pub fn confidence(&self) -> Option<f64> {
        match self {
            Provenance::Real => None,
            Provenance::Synthetic { confidence } => Some(*confidence),
        }
    }
}

/// One aligned sentence pair. Both sides are stored whitespace-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentencePair {
    source: String,
    target: String,
    provenance: Provenance,
}

impl SentencePair {
    pub fn real(source: &str, target: &str) -> Result<Self, CorpusError> {
        Self::new(source, target, Provenance::Real)
    }

    pub fn synthetic(source: &str, target: &str, confidence: f64) -> Result<Self, CorpusError> {
        Self::new(source, target, Provenance::Synthetic { confidence })
    }

    pub fn new(source: &str, target: &str, provenance: Provenance) -> Result<Self, CorpusError> {
        let source = normalize(source);
        let target = normalize(target);
        if source.is_empty() || target.is_empty() {
            return Err(CorpusError::InvalidPair("empty side after normalization".into()));
        }
        if let Provenance::Synthetic { confidence } = provenance {
            if !(0.0..=1.0).contains(&confidence) {
                return Err(CorpusError::InvalidPair(format!(
                    "confidence {confidence} outside [0, 1]"
                )));
            }
        }
        Ok(SentencePair {
            source,
            target,
            provenance,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn side(&self, side: Side) -> &str {
        match side {
            Side::Source => &self.source,
            Side::Target => &self.target,
        }
    }

    /// Lowercased copy, for case ablations only.
    pub fn lowercased(&self) -> Self {
        SentencePair {
            source: self.source.to_lowercase(),
            target: self.target.to_lowercase(),
            provenance: self.provenance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Target,
}

/// Which side(s) a length filter inspects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SideSelector {
    Source,
    Target,
    #[default]
    Both,
}

impl SideSelector {
    fn sides(self) -> &'static [Side] {
        match self {
            SideSelector::Source => &[Side::Source],
            SideSelector::Target => &[Side::Target],
            SideSelector::Both => &[Side::Source, Side::Target],
        }
    }
}

/// Line-aligned bitext.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>) -> Self {
        ParallelCorpus { pairs }
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn into_pairs(self) -> Vec<SentencePair> {
        self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SentencePair> {
        self.pairs.iter()
    }

    pub fn sources(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.source.clone()).collect()
    }

    pub fn targets(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.target.clone()).collect()
    }

    pub fn all_real(&self) -> bool {
        self.pairs.iter().all(|p| !p.provenance.is_synthetic())
    }

    /// Retains pairs matching `keep`, preserving order.
    pub fn filter(&self, mut keep: impl FnMut(&SentencePair) -> bool) -> Self {
        ParallelCorpus {
            pairs: self.pairs.iter().filter(|p| keep(p)).cloned().collect(),
        }
    }

    pub fn lowercased(&self) -> Self {
        ParallelCorpus {
            pairs: self.pairs.iter().map(SentencePair::lowercased).collect(),
        }
    }
}

impl FromIterator<SentencePair> for ParallelCorpus {
    fn from_iter<I: IntoIterator<Item = SentencePair>>(iter: I) -> Self {
        ParallelCorpus {
            pairs: iter.into_iter().collect(),
        }
    }
}

impl<'a> IntoIterator for &'a ParallelCorpus {
    type Item = &'a SentencePair;
    type IntoIter = std::slice::Iter<'a, SentencePair>;

    fn into_iter(self) -> Self::IntoIter {
        self.pairs.iter()
    }
}

/// Counts tokens of one side of a pair.
pub trait TokenCounter {
    fn count(&self, side: Side, text: &str) -> usize;
}

/// Whitespace word counts.
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count(&self, _side: Side, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Subword token counts using one model per language.
pub struct SubwordCounter<'a> {
    pub source: &'a SubwordModel,
    pub target: &'a SubwordModel,
}

impl TokenCounter for SubwordCounter<'_> {
    fn count(&self, side: Side, text: &str) -> usize {
        match side {
            Side::Source => self.source.encode(text).len(),
            Side::Target => self.target.encode(text).len(),
        }
    }
}

/// Keeps pairs whose selected side(s) have between `min_tokens` and
/// `max_tokens` tokens, both inclusive. Use `usize::MAX` for no upper bound.
pub fn length_filter(
    corpus: &ParallelCorpus,
    min_tokens: usize,
    max_tokens: usize,
    side: SideSelector,
    counter: &dyn TokenCounter,
) -> Result<ParallelCorpus, CorpusError> {
    if min_tokens < 1 || min_tokens > max_tokens {
        return Err(CorpusError::BadSetting(format!(
            "length bounds must satisfy 1 ≤ min ≤ max, got ({min_tokens}, {max_tokens})"
        )));
    }
    Ok(corpus.filter(|p| {
        side.sides().iter().all(|&s| {
            let n = counter.count(s, p.side(s));
            (min_tokens..=max_tokens).contains(&n)
        })
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub pairs: usize,
    pub source_tokens: usize,
    pub target_tokens: usize,
}

/// Pair count and whitespace-token totals per side.
pub fn corpus_stats(corpus: &ParallelCorpus) -> CorpusStats {
    let mut stats = CorpusStats {
        pairs: corpus.len(),
        source_tokens: 0,
        target_tokens: 0,
    };
    for p in corpus {
        stats.source_tokens += p.source.split_whitespace().count();
        stats.target_tokens += p.target.split_whitespace().count();
    }
    stats
}
