//! Character n-gram Naive Bayes language identification.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::ParallelCorpus;
use crate::error::CorpusError;
use crate::subword::normalize;

/// Additive smoothing constant.
pub const LANGID_ALPHA: f64 = 0.1;
pub const MIN_SAMPLES_PER_LANGUAGE: usize = 100;
const MAX_ORDER: usize = 3;

/// Smoothed distribution over n-grams of one order for one language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NgramTable {
    logp: HashMap<String, f64>,
    /// Log-probability of any n-gram absent from `logp`.
    unseen: f64,
    /// Number of n-grams sharing the `unseen` mass (global vocabulary
    /// entries not seen for this language, plus one open-class bucket).
    unseen_slots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangIdModel {
    languages: Vec<String>,
    log_prior: Vec<f64>,
    /// `tables[lang][n - 1]`.
    tables: Vec<Vec<NgramTable>>,
}

fn ngrams(text: &str, n: usize) -> Vec<String> {
    let norm = normalize(text);
    if norm.is_empty() {
        return Vec::new();
    }
    let chars: Vec<char> = format!(" {norm} ").chars().collect();
    chars.windows(n).map(|w| w.iter().collect()).collect()
}

/// Trains a smoothed character 1–3-gram Naive Bayes classifier.
pub fn train_langid(samples: &[(String, String)]) -> Result<LangIdModel, CorpusError> {
    let mut by_lang: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (text, lang) in samples {
        by_lang.entry(lang).or_default().push(text);
    }
    if by_lang.len() < 2 {
        return Err(CorpusError::TooFewLanguages(by_lang.len()));
    }
    for (lang, texts) in &by_lang {
        if texts.len() < MIN_SAMPLES_PER_LANGUAGE {
            return Err(CorpusError::TooFewSamples {
                lang: lang.to_string(),
                count: texts.len(),
                min: MIN_SAMPLES_PER_LANGUAGE,
            });
        }
    }

    let mut counts: Vec<Vec<HashMap<String, f64>>> = Vec::new();
    let mut vocab: Vec<HashSet<String>> = vec![HashSet::new(); MAX_ORDER];
    for texts in by_lang.values() {
        let mut per_order = vec![HashMap::new(); MAX_ORDER];
        for text in texts {
            for n in 1..=MAX_ORDER {
                for g in ngrams(text, n) {
                    vocab[n - 1].insert(g.clone());
                    *per_order[n - 1].entry(g).or_insert(0.0) += 1.0;
                }
            }
        }
        counts.push(per_order);
    }

    let total: f64 = samples.len() as f64;
    let log_prior = by_lang
        .values()
        .map(|t| (t.len() as f64 / total).ln())
        .collect();
    let tables = counts
        .into_iter()
        .map(|per_order| {
            per_order
                .into_iter()
                .enumerate()
                .map(|(k, c)| {
                    let v = vocab[k].len() as f64;
                    let n_total: f64 = c.values().sum();
                    let denom = n_total + LANGID_ALPHA * (v + 1.0);
                    NgramTable {
                        unseen: (LANGID_ALPHA / denom).ln(),
                        unseen_slots: vocab[k].len() - c.len() + 1,
                        logp: c
                            .into_iter()
                            .map(|(g, cnt)| (g, ((cnt + LANGID_ALPHA) / denom).ln()))
                            .collect(),
                    }
                })
                .collect()
        })
        .collect();
    Ok(LangIdModel {
        languages: by_lang.keys().map(|s| s.to_string()).collect(),
        log_prior,
        tables,
    })
}

impl LangIdModel {
    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    /// Posterior over languages, in [`languages`](Self::languages) order.
    /// Text without characters yields the prior.
    pub fn posterior(&self, text: &str) -> Vec<f64> {
        let grams: Vec<Vec<String>> = (1..=MAX_ORDER).map(|n| ngrams(text, n)).collect();
        let scores: Vec<f64> = self
            .tables
            .iter()
            .zip(&self.log_prior)
            .map(|(tables, prior)| {
                prior
                    + tables
                        .iter()
                        .zip(&grams)
                        .map(|(t, gs)| {
                            gs.iter()
                                .map(|g| t.logp.get(g).copied().unwrap_or(t.unseen))
                                .sum::<f64>()
                        })
                        .sum::<f64>()
            })
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / z).collect()
    }

    pub fn probability(&self, text: &str, lang: &str) -> Result<f64, CorpusError> {
        let i = self
            .languages
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| CorpusError::UnknownLanguage(lang.to_string()))?;
        Ok(self.posterior(text)[i])
    }

    pub fn prior(&self) -> Vec<f64> {
        self.log_prior.iter().map(|l| l.exp()).collect()
    }

    /// Most probable language and its posterior.
    pub fn classify(&self, text: &str) -> (&str, f64) {
        let post = self.posterior(text);
        let (i, p) = post
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("at least two languages");
        (&self.languages[i], *p)
    }

    /// `log Σ p(g)` over the full n-gram distribution of one language and
    /// order; 0 for a normalized table.
    pub fn log_normalizer(&self, lang: usize, order: usize) -> f64 {
        let t = &self.tables[lang][order - 1];
        let mut terms: Vec<f64> = t.logp.values().copied().collect();
        terms.push(t.unseen + (t.unseen_slots as f64).ln());
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + terms.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
    }
}

/// Keeps pairs whose source is `source_lang` and target is `target_lang`,
/// each with posterior at least `threshold`.
pub fn langid_filter(
    corpus: &ParallelCorpus,
    model: &LangIdModel,
    source_lang: &str,
    target_lang: &str,
    threshold: f64,
) -> Result<ParallelCorpus, CorpusError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(CorpusError::BadSetting(format!(
            "threshold must be in (0, 1], got {threshold}"
        )));
    }
    let index = |lang: &str| {
        model
            .languages
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| CorpusError::UnknownLanguage(lang.to_string()))
    };
    let (si, ti) = (index(source_lang)?, index(target_lang)?);
    Ok(corpus.filter(|p| {
        model.posterior(p.source())[si] >= threshold && model.posterior(p.target())[ti] >= threshold
    }))
}
