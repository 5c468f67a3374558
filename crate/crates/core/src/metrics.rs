//! Corpus BLEU and RIBES over whitespace tokens.

use std::collections::HashMap;
use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::MetricError;

type Result<T> = std::result::Result<T, MetricError>;

pub const MAX_ORDER: usize = 4;
pub const RIBES_ALPHA: f64 = 0.25;
pub const RIBES_BETA: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// 0–100.
    pub bleu: f64,
    /// Clipped n-gram precisions for n = 1..=4.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    /// Mean sentence RIBES, 0–1.
    pub ribes: f64,
    /// Sentences with fewer than two aligned words (scored 0).
    pub ribes_degenerate: usize,
    pub sentences: usize,
    pub hypothesis_tokens: usize,
    pub reference_tokens: usize,
}

impl EvalReport {
    /// Canonical machine-readable form: pretty JSON with fixed key order.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p: Vec<String> = self
            .precisions
            .iter()
            .map(|x| format!("{:.1}", 100.0 * x))
            .collect();
        writeln!(
            f,
            "BLEU = {:.2}, {} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.bleu,
            p.join("/"),
            self.brevity_penalty,
            self.hypothesis_tokens as f64 / self.reference_tokens.max(1) as f64,
            self.hypothesis_tokens,
            self.reference_tokens
        )?;
        write!(
            f,
            "RIBES = {:.4} ({} sentences, {} degenerate)",
            self.ribes, self.sentences, self.ribes_degenerate
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    /// Add-one smoothing of the 2–4-gram precisions.
    pub smooth: bool,
    pub ribes_alpha: f64,
    pub ribes_beta: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            smooth: false,
            ribes_alpha: RIBES_ALPHA,
            ribes_beta: RIBES_BETA,
        }
    }
}

fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn ngram_counts<'a, 'b>(words: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut m = HashMap::new();
    for w in words.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Pooled clipped-match statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add_sentence(&mut self, hypothesis: &str, reference: &str) {
        let (h, r) = (tokens(hypothesis), tokens(reference));
        self.hyp_len += h.len();
        self.ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            for (g, &c) in &hc {
                self.matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            self.totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }

    pub fn precisions(&self, smooth: bool) -> [f64; MAX_ORDER] {
        std::array::from_fn(|i| {
            let add = if smooth && i > 0 { 1.0 } else { 0.0 };
            let denom = self.totals[i] as f64 + add;
            if denom == 0.0 {
                0.0
            } else {
                (self.matches[i] as f64 + add) / denom
            }
        })
    }

    pub fn brevity_penalty(&self) -> f64 {
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        if c == 0.0 {
            0.0
        } else if c > r {
            1.0
        } else {
            (1.0 - r / c).exp()
        }
    }

    pub fn bleu(&self, smooth: bool) -> f64 {
        let p = self.precisions(smooth);
        if p.iter().any(|&x| x == 0.0) {
            return 0.0;
        }
        let log_mean = p.iter().map(|x| x.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * self.brevity_penalty() * log_mean.exp()
    }
}

fn check_lengths(hypotheses: &[String], references: &[String]) -> Result<()> {
    if hypotheses.len() != references.len() {
        return Err(MetricError::CountMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    Ok(())
}

/// Corpus BLEU statistics for aligned hypothesis and reference lists.
pub fn bleu_stats(hypotheses: &[String], references: &[String]) -> Result<BleuStats> {
    check_lengths(hypotheses, references)?;
    let mut stats = BleuStats::default();
    for (i, (h, r)) in hypotheses.iter().zip(references).enumerate() {
        if tokens(h).is_empty() && !tokens(r).is_empty() {
            warn!("hypothesis {i} is empty");
        }
        stats.add_sentence(h, r);
    }
    Ok(stats)
}

/// Corpus BLEU, 0–100, without smoothing.
pub fn bleu(hypotheses: &[String], references: &[String]) -> Result<f64> {
    Ok(bleu_stats(hypotheses, references)?.bleu(false))
}

/// `(concordant − discordant) / (n(n−1)/2)` for distinct ranks.
pub fn kendall_tau(ranks: &[usize]) -> Result<f64> {
    if ranks.len() < 2 {
        return Err(MetricError::TooShort(ranks.len()));
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(MetricError::DuplicateRanks);
    }
    Ok(tau_with_ties(ranks))
}

/// Kendall's τ where tied pairs count as discordant.
fn tau_with_ties(ranks: &[usize]) -> f64 {
    let n = ranks.len();
    let mut concordant = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            if ranks[i] < ranks[j] {
                concordant += 1;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as i64;
    (2 * concordant - pairs) as f64 / pairs as f64
}

fn count_ngram(words: &[&str], gram: &[&str]) -> usize {
    words.windows(gram.len()).filter(|w| *w == gram).count()
}

fn position_of(words: &[&str], gram: &[&str]) -> usize {
    words
        .windows(gram.len())
        .position(|w| w == gram)
        .expect("n-gram occurs")
}

/// Reference positions of hypothesis words. A word occurring once on each
/// side aligns directly. Otherwise the smallest surrounding context that
/// occurs exactly once on each side decides, trying the right context
/// before the left at each width, then contexts spanning both sides.
/// Unalignable words are skipped.
pub fn word_rank_alignment(reference: &[&str], hypothesis: &[&str]) -> Vec<usize> {
    let hyp_len = hypothesis.len();
    let unique = |gram: &[&str]| {
        gram.len() <= reference.len()
            && count_ngram(reference, gram) == 1
            && count_ngram(hypothesis, gram) == 1
    };
    let mut order = Vec::new();
    for (i, word) in hypothesis.iter().enumerate() {
        if !reference.contains(word) {
            continue;
        }
        let in_hyp = hypothesis.iter().filter(|w| *w == word).count();
        let in_ref = reference.iter().filter(|w| *w == word).count();
        if in_hyp == 1 && in_ref == 1 {
            order.push(reference.iter().position(|w| w == word).expect("present"));
            continue;
        }
        let one_sided = (1..i.max(hyp_len - i + 1)).find_map(|window| {
            if i + window < hyp_len && unique(&hypothesis[i..=i + window]) {
                return Some(position_of(reference, &hypothesis[i..=i + window]));
            }
            if window <= i && unique(&hypothesis[i - window..=i]) {
                return Some(position_of(reference, &hypothesis[i - window..=i]) + window);
            }
            None
        });
        // Periodic text such as "a b a b a b" defeats every one-sided
        // context; fall back to two-sided ones, shortest then leftmost.
        let aligned = one_sided.or_else(|| {
            (2..=hyp_len).find_map(|width| {
                let first = (i + 1).saturating_sub(width);
                let last = i.min(hyp_len - width);
                (first..=last).find_map(|lo| {
                    let gram = &hypothesis[lo..lo + width];
                    unique(gram).then(|| position_of(reference, gram) + (i - lo))
                })
            })
        });
        order.extend(aligned);
    }
    order
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SentenceRibes {
    pub score: f64,
    /// Fewer than two aligned words; `score` is 0.
    pub degenerate: bool,
}

/// Sentence RIBES: `NKT · P^α · BP^β`.
pub fn ribes(hypothesis: &str, reference: &str, alpha: f64, beta: f64) -> Result<SentenceRibes> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(MetricError::BadParameter(format!(
            "alpha and beta must be ≥ 0, got {alpha}, {beta}"
        )));
    }
    let (h, r) = (tokens(hypothesis), tokens(reference));
    let order = word_rank_alignment(&r, &h);
    if order.len() < 2 {
        return Ok(SentenceRibes {
            score: 0.0,
            degenerate: true,
        });
    }
    let nkt = (tau_with_ties(&order) + 1.0) / 2.0;
    let precision = order.len() as f64 / h.len() as f64;
    let bp = (1.0 - r.len() as f64 / h.len() as f64).exp().min(1.0);
    Ok(SentenceRibes {
        score: nkt * precision.powf(alpha) * bp.powf(beta),
        degenerate: false,
    })
}

/// BLEU and RIBES over a corpus.
pub fn evaluate(
    hypotheses: &[String],
    references: &[String],
    opts: &MetricOptions,
) -> Result<EvalReport> {
    let stats = bleu_stats(hypotheses, references)?;
    let mut ribes_sum = 0.0;
    let mut degenerate = 0;
    for (h, r) in hypotheses.iter().zip(references) {
        let s = ribes(h, r, opts.ribes_alpha, opts.ribes_beta)?;
        ribes_sum += s.score;
        degenerate += s.degenerate as usize;
    }
    Ok(EvalReport {
        bleu: stats.bleu(opts.smooth),
        precisions: stats.precisions(opts.smooth),
        brevity_penalty: stats.brevity_penalty(),
        ribes: ribes_sum / hypotheses.len() as f64,
        ribes_degenerate: degenerate,
        sentences: hypotheses.len(),
        hypothesis_tokens: stats.hyp_len,
        reference_tokens: stats.ref_len,
    })
}
