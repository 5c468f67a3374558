//! Token-budget batching.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ParallelCorpus, Side, TokenCounter};
use crate::error::CorpusError;

/// A group of pairs whose padded size fits the token budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    /// Indices into the corpus.
    pub pair_ids: Vec<usize>,
    /// Padded source + target tokens: `len(pair_ids) · (source_len + target_len)`.
    pub tokens: usize,
    pub source_len: usize,
    pub target_len: usize,
}

/// Packs pairs with the given `(source, target)` token lengths into batches.
///
/// Pairs are shuffled with `seed`, stably sorted by target then source
/// length, packed greedily so each padded batch stays within
/// `token_budget`, and the batch order is shuffled again.
pub fn pack_batches(
    lengths: &[(usize, usize)],
    token_budget: usize,
    seed: u64,
) -> Result<Vec<Batch>, CorpusError> {
    if let Some((index, &(s, t))) = lengths
        .iter()
        .enumerate()
        .find(|(_, &(s, t))| s + t > token_budget)
    {
        return Err(CorpusError::PairExceedsBudget {
            index,
            tokens: s + t,
            budget: token_budget,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| (lengths[i].1, lengths[i].0));

    let mut batches = Vec::new();
    let mut current: Option<Batch> = None;
    for i in order {
        let (s, t) = lengths[i];
        if let Some(b) = current.as_mut() {
            let (ms, mt) = (b.source_len.max(s), b.target_len.max(t));
            let cost = (b.pair_ids.len() + 1) * (ms + mt);
            if cost <= token_budget {
                b.pair_ids.push(i);
                b.source_len = ms;
                b.target_len = mt;
                b.tokens = cost;
                continue;
            }
            batches.push(current.take().expect("open batch"));
        }
        current = Some(Batch {
            pair_ids: vec![i],
            tokens: s + t,
            source_len: s,
            target_len: t,
        });
    }
    batches.extend(current);
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Batches a corpus using `counter` for token lengths.
pub fn make_batches(
    corpus: &ParallelCorpus,
    counter: &dyn TokenCounter,
    token_budget: usize,
    seed: u64,
) -> Result<Vec<Batch>, CorpusError> {
    let lengths: Vec<(usize, usize)> = corpus
        .iter()
        .map(|p| {
            (
                counter.count(Side::Source, p.source()),
                counter.count(Side::Target, p.target()),
            )
        })
        .collect();
    pack_batches(&lengths, token_budget, seed)
}
