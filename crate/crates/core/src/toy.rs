//! Synthetic corpora for desk-scale experiments.
//!
//! Two tasks: token reversal over single-letter words, and a toy language
//! pair with Latin-script source and Devanagari-script target. In the
//! language pair, target sentences come from a sparse bigram chain over
//! the target lexicon and the source is the word-by-word dictionary
//! translation in reverse order, so translation needs both lexical mapping
//! and reordering while monolingual target text carries real structure.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelCorpus, SentencePair};

pub const SOURCE_LANG: &str = "src";
pub const TARGET_LANG: &str = "tgt";

const LATIN_ONSETS: &[&str] = &["k", "m", "t", "r", "s", "l", "n", "p", "d", "v", "b", "g"];
const LATIN_VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
const DEVA_ONSETS: &[&str] = &["क", "म", "त", "र", "स", "ल", "न", "प", "द", "व", "ब", "ग"];
const DEVA_VOWELS: &[&str] = &["", "ा", "ि", "ी", "ु", "े", "ो"];

/// Pairs whose target is the source word sequence reversed. Words are
/// drawn uniformly from the first `vocab` lowercase letters.
pub fn reversal_pairs(n: usize, vocab: usize, min_len: usize, max_len: usize, seed: u64) -> ParallelCorpus {
    let vocab = vocab.clamp(1, 26);
    let letters: Vec<char> = ('a'..='z').take(vocab).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(min_len..=max_len);
            let words: Vec<String> = (0..len)
                .map(|_| letters[rng.gen_range(0..vocab)].to_string())
                .collect();
            let reversed: Vec<String> = words.iter().rev().cloned().collect();
            SentencePair::real(&words.join(" "), &reversed.join(" ")).expect("non-empty")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LanguagePairSpec {
    pub lexicon: usize,
    /// Allowed successors per target word in the bigram chain.
    pub branching: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of bitext pairs whose target is replaced by source-script
    /// text, for language-identification filtering to remove.
    pub noise: f64,
}

impl Default for LanguagePairSpec {
    fn default() -> Self {
        LanguagePairSpec {
            lexicon: 40,
            branching: 4,
            min_len: 3,
            max_len: 10,
            noise: 0.05,
        }
    }
}

/// A generated toy language pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLanguagePair {
    pub spec: LanguagePairSpec,
    pub source_words: Vec<String>,
    pub target_words: Vec<String>,
    successors: Vec<Vec<usize>>,
}

fn pseudo_words(onsets: &[&str], vowels: &[&str], n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut syllables: Vec<String> = onsets
        .iter()
        .flat_map(|o| vowels.iter().map(move |v| format!("{o}{v}")))
        .collect();
    syllables.shuffle(rng);
    let mut words: Vec<String> = Vec::with_capacity(n);
    let mut i = 0;
    while words.len() < n {
        let w = format!(
            "{}{}",
            syllables[i % syllables.len()],
            syllables[(i * 7 + 3) % syllables.len()]
        );
        if !words.contains(&w) {
            words.push(w);
        }
        i += 1;
    }
    words
}

impl ToyLanguagePair {
    pub fn new(spec: LanguagePairSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let source_words = pseudo_words(LATIN_ONSETS, LATIN_VOWELS, spec.lexicon, &mut rng);
        let target_words = pseudo_words(DEVA_ONSETS, DEVA_VOWELS, spec.lexicon, &mut rng);
        let successors = (0..spec.lexicon)
            .map(|_| {
                let mut all: Vec<usize> = (0..spec.lexicon).collect();
                all.shuffle(&mut rng);
                all.truncate(spec.branching.clamp(1, spec.lexicon));
                all
            })
            .collect();
        ToyLanguagePair {
            spec,
            source_words,
            target_words,
            successors,
        }
    }

    fn target_ids(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let len = rng.gen_range(self.spec.min_len..=self.spec.max_len);
        let mut ids = vec![rng.gen_range(0..self.spec.lexicon)];
        while ids.len() < len {
            let succ = &self.successors[*ids.last().expect("non-empty")];
            ids.push(succ[rng.gen_range(0..succ.len())]);
        }
        ids
    }

    fn render(words: &[String], ids: impl Iterator<Item = usize>) -> String {
        ids.map(|i| words[i].as_str()).collect::<Vec<_>>().join(" ")
    }

    /// The source sentence corresponding to target word ids.
    fn source_for(&self, ids: &[usize]) -> String {
        Self::render(&self.source_words, ids.iter().rev().copied())
    }

    /// Clean parallel pairs.
    pub fn parallel(&self, n: usize, seed: u64) -> ParallelCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let ids = self.target_ids(&mut rng);
                let tgt = Self::render(&self.target_words, ids.iter().copied());
                SentencePair::real(&self.source_for(&ids), &tgt).expect("non-empty")
            })
            .collect()
    }

    /// Parallel pairs with a `spec.noise` fraction of wrong-language targets.
    pub fn noisy_parallel(&self, n: usize, seed: u64) -> ParallelCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let clean = self.parallel(n, seed);
        clean
            .iter()
            .map(|p| {
                if rng.gen::<f64>() < self.spec.noise {
                    let ids = self.target_ids(&mut rng);
                    let junk = Self::render(&self.source_words, ids.into_iter());
                    SentencePair::real(p.source(), &junk).expect("non-empty")
                } else {
                    p.clone()
                }
            })
            .collect()
    }

    /// Target-language sentences.
    pub fn monolingual_target(&self, n: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let ids = self.target_ids(&mut rng);
                Self::render(&self.target_words, ids.into_iter())
            })
            .collect()
    }

    /// The true source for a target sentence, when every word is known.
    pub fn true_source(&self, target: &str) -> Option<String> {
        let ids: Option<Vec<usize>> = target
            .split_whitespace()
            .map(|w| self.target_words.iter().position(|t| t == w))
            .collect();
        ids.map(|ids| self.source_for(&ids))
    }

    /// Labelled samples for language identification, `per_language` each.
    pub fn langid_samples(&self, per_language: usize, seed: u64) -> Vec<(String, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(2 * per_language);
        for _ in 0..per_language {
            let ids = self.target_ids(&mut rng);
            out.push((self.source_for(&ids), SOURCE_LANG.to_string()));
            let ids = self.target_ids(&mut rng);
            out.push((
                Self::render(&self.target_words, ids.into_iter()),
                TARGET_LANG.to_string(),
            ));
        }
        out
    }
}
