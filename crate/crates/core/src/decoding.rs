//! Beam search with length-normalized ranking.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::DecodeError;
use crate::model::{ConvS2S, EncoderStates};
use crate::subword::{SubwordModel, BOS_ID, EOS_ID};
use crate::tensor::Scalar;

type Result<T> = std::result::Result<T, DecodeError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Bos-prefixed token ids, ending in eos when finished.
    pub tokens: Vec<usize>,
    /// Per-step log-probabilities of the chosen tokens.
    pub step_log_probs: Vec<f64>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn root() -> Self {
        Hypothesis {
            tokens: vec![BOS_ID],
            step_log_probs: Vec::new(),
            log_prob: 0.0,
            finished: false,
        }
    }

    /// Emitted tokens, eos included.
    pub fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tokens between bos and eos.
    pub fn output(&self) -> &[usize] {
        let end = if self.finished {
            self.tokens.len() - 1
        } else {
            self.tokens.len()
        };
        &self.tokens[1..end]
    }

    /// `log_prob / len^penalty`.
    pub fn normalized_score(&self, penalty: f64) -> f64 {
        self.log_prob / (self.len().max(1) as f64).powf(penalty)
    }
}

/// Per-token geometric-mean probability, `exp(log_prob / len)`.
pub fn translation_confidence(h: &Hypothesis) -> Result<f64> {
    if !h.finished {
        return Err(DecodeError::Unfinished);
    }
    Ok((h.log_prob / h.len() as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// Maximum emitted tokens, eos included.
    pub max_len: usize,
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_width: 10,
            max_len: 100,
            length_penalty: 1.0,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_len == 0 {
            return Err(DecodeError::BadSetting(
                "beam_width and max_len must be ≥ 1".into(),
            ));
        }
        if !(self.length_penalty >= 0.0) {
            return Err(DecodeError::BadSetting("length_penalty must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Anything that scores the next token given a bos-prefixed prefix.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// A model bound to one encoded source sentence.
pub struct BoundModel<'a, T> {
    model: &'a ConvS2S<T>,
    states: EncoderStates<T>,
}

impl<'a, T: Scalar> BoundModel<'a, T> {
    pub fn new(model: &'a ConvS2S<T>, source: &[usize]) -> Result<Self> {
        if source.is_empty() {
            return Err(DecodeError::EmptySource);
        }
        Ok(BoundModel {
            model,
            states: model.encode_states(source)?,
        })
    }
}

impl<T: Scalar> StepScorer for BoundModel<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.config().target_vocab
    }

    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self
            .model
            .next_log_probs(&self.states, prefix)?
            .into_iter()
            .map(Scalar::as_f64)
            .collect())
    }
}

fn by_score(penalty: f64) -> impl Fn(&Hypothesis, &Hypothesis) -> Ordering {
    move |a, b| {
        b.normalized_score(penalty)
            .total_cmp(&a.normalized_score(penalty))
            .then_with(|| a.tokens.cmp(&b.tokens))
    }
}

/// Beam search over any [`StepScorer`].
///
/// Each step expands every live hypothesis over the vocabulary and keeps the
/// `beam_width` best candidates by cumulative log-probability. Candidates
/// ending in eos are finished and set aside; search stops once
/// `beam_width` hypotheses are finished, no live ones remain, or `max_len`
/// tokens have been emitted. In the last case the unfinished survivors are
/// ranked alongside the finished ones by normalized score, best first.
pub fn beam_search_with(scorer: &dyn StepScorer, cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let mut live = vec![Hypothesis::root()];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for h in &live {
            let lp = scorer.log_probs(&h.tokens)?;
            for (tok, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut next = h.clone();
                next.tokens.push(tok);
                next.step_log_probs.push(l);
                next.log_prob += l;
                next.finished = tok == EOS_ID;
                candidates.push(next);
            }
        }
        candidates.sort_by(|a, b| {
            b.log_prob
                .total_cmp(&a.log_prob)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(cfg.beam_width);
        live.clear();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if finished.len() >= cfg.beam_width || live.is_empty() {
            live.clear();
            break;
        }
    }
    let mut all = finished;
    all.extend(live);
    all.sort_by(by_score(cfg.length_penalty));
    all.truncate(cfg.beam_width);
    Ok(all)
}

/// Beam search for one source sentence.
pub fn beam_search<T: Scalar>(
    model: &ConvS2S<T>,
    source: &[usize],
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    let bound = BoundModel::new(model, source)?;
    beam_search_with(&bound, cfg)
}

/// Greedy argmax rollout, for reference.
pub fn greedy_decode(scorer: &dyn StepScorer, max_len: usize) -> Result<Hypothesis> {
    let mut h = Hypothesis::root();
    while h.len() < max_len && !h.finished {
        let lp = scorer.log_probs(&h.tokens)?;
        let (tok, &l) = lp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(&a.0)))
            .expect("non-empty vocabulary");
        h.tokens.push(tok);
        h.step_log_probs.push(l);
        h.log_prob += l;
        h.finished = tok == EOS_ID;
    }
    Ok(h)
}

/// A model paired with its tokenizers, for text-in text-out translation.
pub struct Translator<'a, T> {
    pub model: &'a ConvS2S<T>,
    pub source: &'a SubwordModel,
    pub target: &'a SubwordModel,
    pub beam: BeamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    pub text: String,
    pub hypothesis: Hypothesis,
    /// `None` when the best hypothesis hit `max_len` without eos.
    pub confidence: Option<f64>,
}

impl<T: Scalar> Translator<'_, T> {
    pub fn translate(&self, sentence: &str) -> Result<Translation> {
        let ids = self.source.encode(sentence);
        let max = self.model.config().max_positions;
        let ids = &ids[..ids.len().min(max)];
        let mut beam = self.beam.clone();
        beam.max_len = beam.max_len.min(max - 1).max(1);
        let best = beam_search(self.model, ids, &beam)?
            .into_iter()
            .next()
            .expect("beam search returns at least one hypothesis");
        Ok(Translation {
            text: self.target.decode(best.output()).map_err(|e| {
                DecodeError::BadSetting(format!("target tokenizer rejected output: {e}"))
            })?,
            confidence: translation_confidence(&best).ok(),
            hypothesis: best,
        })
    }
}
