//! Synthetic parallel data from target-side monolingual text.
//!
//! A reverse (target → source) model translates monolingual target
//! sentences; each output becomes the source side of a synthetic pair whose
//! target is the original sentence. Pairs are then filtered by translation
//! confidence and length and merged with the real bitext.

use std::path::PathBuf;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{length_filter, ParallelCorpus, SentencePair, SideSelector, TokenCounter};
use crate::decoding::Translator;
use crate::error::BacktranslationError;
use crate::tensor::Scalar;
use crate::training::Checkpoint;

type Result<T> = std::result::Result<T, BacktranslationError>;

pub const DEFAULT_CONFIDENCE: f64 = 0.3;
pub const DEFAULT_MIN_LEN: usize = 10;
pub const DEFAULT_MAX_LEN: usize = 30;
/// Source-side marker for [`MergePolicy::ConcatWithProvenanceTag`].
pub const SYNTHETIC_TAG: &str = "<bt>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MergePolicy {
    #[default]
    Concat,
    /// Also prefixes every synthetic source with [`SYNTHETIC_TAG`].
    ConcatWithProvenanceTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPlan {
    /// Reverse-direction checkpoint; produced by the pipeline when absent.
    pub reverse_checkpoint: Option<PathBuf>,
    pub monolingual: Option<PathBuf>,
    pub confidence_threshold: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Side whose subword length the bounds apply to.
    pub length_side: SideSelector,
    pub merge: MergePolicy,
}

impl Default for AugmentationPlan {
    fn default() -> Self {
        AugmentationPlan {
            reverse_checkpoint: None,
            monolingual: None,
            confidence_threshold: DEFAULT_CONFIDENCE,
            min_len: DEFAULT_MIN_LEN,
            max_len: DEFAULT_MAX_LEN,
            length_side: SideSelector::Source,
            merge: MergePolicy::Concat,
        }
    }
}

impl AugmentationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(BacktranslationError::BadPlan(format!(
                "length bounds must satisfy 1 ≤ min ≤ max, got ({}, {})",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(BacktranslationError::BadPlan(format!(
                "confidence threshold {} outside [0, 1]",
                self.confidence_threshold
            )));
        }
        Ok(())
    }
}

/// Rejects checkpoints that never took an optimizer step.
pub fn ensure_trained<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<()> {
    if ckpt.optimizer.step == 0 && ckpt.averaged_from.is_empty() {
        return Err(BacktranslationError::Untrained(
            "checkpoint has taken no optimizer steps".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BacktranslationStats {
    pub input: usize,
    pub produced: usize,
    /// Hypotheses that hit the length limit without eos.
    pub unfinished: usize,
    /// Finished hypotheses that decoded to empty text.
    pub empty: usize,
}

/// Translates each monolingual target sentence with `reverse` and pairs the
/// output (as source) with the original (as target).
pub fn backtranslate<T: Scalar>(
    reverse: &Translator<'_, T>,
    monolingual: &[String],
) -> Result<(ParallelCorpus, BacktranslationStats)> {
    let outputs: Vec<Option<(String, Option<f64>)>> = monolingual
        .par_iter()
        .map(|s| {
            if s.split_whitespace().next().is_none() {
                return Ok(None);
            }
            let t = reverse.translate(s)?;
            Ok(Some((t.text, t.confidence)))
        })
        .collect::<Result<_>>()?;
    let mut stats = BacktranslationStats {
        input: monolingual.len(),
        produced: 0,
        unfinished: 0,
        empty: 0,
    };
    let mut pairs = Vec::new();
    for (target, out) in monolingual.iter().zip(outputs) {
        match out {
            None => stats.empty += 1,
            Some((_, None)) => stats.unfinished += 1,
            Some((source, Some(conf))) => match SentencePair::synthetic(&source, target, conf) {
                Ok(p) => pairs.push(p),
                Err(_) => stats.empty += 1,
            },
        }
    }
    stats.produced = pairs.len();
    info!(
        "backtranslated {} sentences: {} pairs, {} unfinished, {} empty",
        stats.input, stats.produced, stats.unfinished, stats.empty
    );
    Ok((ParallelCorpus::new(pairs), stats))
}

/// Keeps synthetic pairs with confidence ≥ `threshold` whose selected side
/// has between `min_len` and `max_len` tokens inclusive.
pub fn filter_synthetic(
    corpus: &ParallelCorpus,
    threshold: f64,
    min_len: usize,
    max_len: usize,
    side: SideSelector,
    counter: &dyn TokenCounter,
) -> Result<ParallelCorpus> {
    if let Some(i) = corpus.iter().position(|p| !p.provenance().is_synthetic()) {
        return Err(BacktranslationError::RealPair(i));
    }
    let confident = corpus.filter(|p| p.provenance().confidence().is_some_and(|c| c >= threshold));
    Ok(length_filter(&confident, min_len, max_len, side, counter)?)
}

/// Real pairs first, then synthetic, provenance kept.
pub fn merge_corpora(
    real: &ParallelCorpus,
    synthetic: &ParallelCorpus,
    policy: MergePolicy,
) -> ParallelCorpus {
    let tagged = |p: &SentencePair| match policy {
        MergePolicy::Concat => p.clone(),
        MergePolicy::ConcatWithProvenanceTag => SentencePair::new(
            &format!("{SYNTHETIC_TAG} {}", p.source()),
            p.target(),
            p.provenance(),
        )
        .expect("tagging keeps both sides non-empty"),
    };
    real.iter()
        .cloned()
        .chain(synthetic.iter().map(tagged))
        .collect()
}
