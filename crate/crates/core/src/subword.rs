//! Subword tokenizers: greedy BPE and a unigram language model segmenter.
//!
//! Both models operate on whitespace-separated words, each prefixed by a
//! boundary marker (`▁` by default). Every character seen in training is a
//! piece, so any sentence over the training alphabet has a segmentation;
//! unseen characters become `<unk>`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::SubwordError;

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const SPECIAL_PIECES: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const NUM_SPECIALS: usize = SPECIAL_PIECES.len();
pub const DEFAULT_MARKER: char = '\u{2581}';
/// Text emitted when decoding `<unk>`.
pub const UNK_SURFACE: &str = "\u{2047}";
/// Lattice width bound: no piece is longer than this many characters.
pub const MAX_PIECE_CHARS: usize = 16;
pub const DEFAULT_VOCAB_BUDGET: usize = 8000;

const FORMAT_MAGIC: &str = "deskmt-subword";
const FORMAT_VERSION: u32 = 1;

/// NFKC normalization plus whitespace collapse. Case is preserved.
pub fn normalize(text: &str) -> String {
    let nfkc: String = text.nfkc().collect();
    nfkc.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Bpe,
    Unigram,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Bpe => "bpe",
            ModelKind::Unigram => "unigram",
        })
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bpe" => Ok(ModelKind::Bpe),
            "unigram" => Ok(ModelKind::Unigram),
            other => Err(format!("unknown tokenizer kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Piece {
    text: String,
    /// Unigram log-probability; 0 for specials and for BPE pieces.
    score: f64,
    /// BPE merge that produced this piece.
    merge: Option<(String, String)>,
}

/// A trained tokenizer. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct SubwordModel {
    kind: ModelKind,
    marker: char,
    pieces: Vec<Piece>,
    index: HashMap<String, usize>,
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), usize>,
    unk_score: f64,
}

impl SubwordModel {
    fn assemble(
        kind: ModelKind,
        marker: char,
        pieces: Vec<Piece>,
        merges: Vec<(String, String)>,
    ) -> Self {
        let index = pieces
            .iter()
            .enumerate()
            .skip(NUM_SPECIALS)
            .map(|(i, p)| (p.text.clone(), i))
            .collect();
        let merge_rank = merges
            .iter()
            .enumerate()
            .map(|(rank, pair)| (pair.clone(), rank))
            .collect();
        let min_score = pieces
            .iter()
            .skip(NUM_SPECIALS)
            .map(|p| p.score)
            .fold(0.0_f64, f64::min);
        SubwordModel {
            kind,
            marker,
            pieces,
            index,
            merges,
            merge_rank,
            unk_score: min_score - 10.0,
        }
    }

    fn specials() -> Vec<Piece> {
        SPECIAL_PIECES
            .iter()
            .map(|s| Piece {
                text: s.to_string(),
                score: 0.0,
                merge: None,
            })
            .collect()
    }

    /// Builds a unigram model from explicit `(piece, log-probability)` entries.
    pub fn unigram_from_pieces(
        pieces: &[(&str, f64)],
        marker: char,
    ) -> Result<Self, SubwordError> {
        let mut all = Self::specials();
        let mut seen = BTreeSet::new();
        for &(text, score) in pieces {
            if text.is_empty() || text.chars().count() > MAX_PIECE_CHARS {
                return Err(SubwordError::BadSetting(format!(
                    "piece '{text}' must have 1..={MAX_PIECE_CHARS} characters"
                )));
            }
            if !(score.is_finite() && score <= 0.0) {
                return Err(SubwordError::BadSetting(format!(
                    "piece '{text}' has log-probability {score}; need a finite value ≤ 0"
                )));
            }
            if SPECIAL_PIECES.contains(&text) || !seen.insert(text) {
                return Err(SubwordError::BadSetting(format!("duplicate piece '{text}'")));
            }
            all.push(Piece {
                text: text.to_string(),
                score,
                merge: None,
            });
        }
        Ok(Self::assemble(ModelKind::Unigram, marker, all, Vec::new()))
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn marker(&self) -> char {
        self.marker
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(|p| p.text.as_str())
    }

    pub fn piece_id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    /// Unigram log-probability of a piece (0 for BPE models and specials).
    pub fn score(&self, id: usize) -> Option<f64> {
        self.pieces.get(id).map(|p| p.score)
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Pieces excluding the reserved specials, in id order.
    pub fn pieces(&self) -> impl Iterator<Item = (usize, &str)> {
        self.pieces
            .iter()
            .enumerate()
            .skip(NUM_SPECIALS)
            .map(|(i, p)| (i, p.text.as_str()))
    }

    fn marked_words(&self, sentence: &str) -> Vec<String> {
        normalize(sentence)
            .split(' ')
            .filter(|w| !w.is_empty())
            .map(|w| format!("{}{}", self.marker, w))
            .collect()
    }

    /// Encodes a sentence into piece ids.
    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for word in self.marked_words(sentence) {
            match self.kind {
                ModelKind::Unigram => ids.extend(self.viterbi(&word).0),
                ModelKind::Bpe => ids.extend(self.bpe_word(&word)),
            }
        }
        ids
    }

    pub fn encode_pieces(&self, sentence: &str) -> Vec<String> {
        self.encode(sentence)
            .into_iter()
            .map(|id| self.pieces[id].text.clone())
            .collect()
    }

    /// Maximum log-probability segmentation of one (already marked) word.
    /// Characters without a piece become `<unk>` at a fixed penalty.
    pub fn viterbi(&self, word: &str) -> (Vec<usize>, f64) {
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(b, _)| b)
            .chain(std::iter::once(word.len()))
            .collect();
        let n = bounds.len() - 1;
        let mut best = vec![f64::NEG_INFINITY; n + 1];
        let mut back = vec![(0usize, UNK_ID); n + 1];
        best[0] = 0.0;
        for end in 1..=n {
            let lo = end.saturating_sub(MAX_PIECE_CHARS);
            for start in lo..end {
                if best[start] == f64::NEG_INFINITY {
                    continue;
                }
                let sub = &word[bounds[start]..bounds[end]];
                let candidate = match self.index.get(sub) {
                    Some(&id) => Some((id, self.pieces[id].score)),
                    None if end - start == 1 => Some((UNK_ID, self.unk_score)),
                    None => None,
                };
                if let Some((id, score)) = candidate {
                    let total = best[start] + score;
                    if total > best[end] {
                        best[end] = total;
                        back[end] = (start, id);
                    }
                }
            }
        }
        let mut ids = Vec::new();
        let mut pos = n;
        while pos > 0 {
            let (start, id) = back[pos];
            ids.push(id);
            pos = start;
        }
        ids.reverse();
        (ids, best[n])
    }

    fn bpe_word(&self, word: &str) -> Vec<usize> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let mut best: Option<(usize, usize)> = None;
            for i in 0..symbols.len().saturating_sub(1) {
                let key = (symbols[i].clone(), symbols[i + 1].clone());
                if let Some(&rank) = self.merge_rank.get(&key) {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (left, right) = &self.merges[rank];
            symbols = apply_merge(&symbols, left, right);
        }
        symbols
            .iter()
            .map(|s| self.index.get(s.as_str()).copied().unwrap_or(UNK_ID))
            .collect()
    }

    /// Inverse of [`encode`](Self::encode): pieces are concatenated and
    /// boundary markers become single spaces.
    pub fn decode(&self, ids: &[usize]) -> Result<String, SubwordError> {
        let mut text = String::new();
        for &id in ids {
            let piece = self.pieces.get(id).ok_or(SubwordError::IdOutOfRange {
                id,
                size: self.pieces.len(),
            })?;
            match id {
                PAD_ID | BOS_ID | EOS_ID => {}
                UNK_ID => text.push_str(UNK_SURFACE),
                _ => text.push_str(&piece.text),
            }
        }
        let spaced: String = text
            .chars()
            .map(|c| if c == self.marker { ' ' } else { c })
            .collect();
        Ok(spaced.split_whitespace().collect::<Vec<_>>().join(" "))
    }

    pub fn save(&self, path: &Path) -> Result<(), SubwordError> {
        let mut out = fs::File::create(path)?;
        out.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{FORMAT_MAGIC}\t{FORMAT_VERSION}\t{}\t{}\t{}\n",
            self.kind,
            self.pieces.len(),
            self.marker
        );
        for (id, p) in self.pieces.iter().enumerate() {
            match self.kind {
                ModelKind::Unigram => s.push_str(&format!("{}\t{id}\t{:?}\n", p.text, p.score)),
                ModelKind::Bpe => match &p.merge {
                    Some((l, r)) => {
                        let rank = self.merge_rank[&(l.clone(), r.clone())];
                        s.push_str(&format!("{}\t{id}\t{rank}\t{l}\t{r}\n", p.text));
                    }
                    None => s.push_str(&format!("{}\t{id}\t-\n", p.text)),
                },
            }
        }
        // Merges whose result duplicates an existing piece have no vocab line.
        for (rank, (l, r)) in self.merges.iter().enumerate() {
            let owner = self.index.get(&format!("{l}{r}")).map(|&i| &self.pieces[i]);
            if owner.and_then(|p| p.merge.as_ref()) != Some(&(l.clone(), r.clone())) {
                s.push_str(&format!("#merge\t{rank}\t{l}\t{r}\n"));
            }
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self, SubwordError> {
        let file = fs::File::open(path)?;
        let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
        Self::from_lines(lines.iter().map(String::as_str))
    }

    pub fn from_text(text: &str) -> Result<Self, SubwordError> {
        Self::from_lines(text.lines())
    }

    fn from_lines<'a>(mut lines: impl Iterator<Item = &'a str>) -> Result<Self, SubwordError> {
        let bad = |line: usize, msg: &str| SubwordError::Format {
            line,
            msg: msg.to_string(),
        };
        let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
        let fields: Vec<&str> = header.split('\t').collect();
        if fields.len() != 5 || fields[0] != FORMAT_MAGIC {
            return Err(bad(1, "not a subword model file"));
        }
        if fields[1] != FORMAT_VERSION.to_string() {
            return Err(bad(1, &format!("unsupported format version {}", fields[1])));
        }
        let kind: ModelKind = fields[2].parse().map_err(|e: String| bad(1, &e))?;
        let size: usize = fields[3].parse().map_err(|_| bad(1, "bad vocab size"))?;
        let mut marker_chars = fields[4].chars();
        let marker = match (marker_chars.next(), marker_chars.next()) {
            (Some(c), None) => c,
            _ => return Err(bad(1, "marker must be one character")),
        };

        let mut pieces = Vec::with_capacity(size);
        let mut ranked: BTreeMap<usize, (String, String)> = BTreeMap::new();
        for (n, line) in lines.enumerate() {
            let lineno = n + 2;
            let f: Vec<&str> = line.split('\t').collect();
            if f.first() == Some(&"#merge") {
                if f.len() != 4 || kind != ModelKind::Bpe {
                    return Err(bad(lineno, "bad merge record"));
                }
                let rank = f[1].parse().map_err(|_| bad(lineno, "bad merge rank"))?;
                ranked.insert(rank, (f[2].to_string(), f[3].to_string()));
                continue;
            }
            if f.len() < 3 {
                return Err(bad(lineno, "expected piece, id and value"));
            }
            let id: usize = f[1].parse().map_err(|_| bad(lineno, "bad id"))?;
            if id != pieces.len() {
                return Err(bad(lineno, "ids must be contiguous"));
            }
            if id < NUM_SPECIALS && f[0] != SPECIAL_PIECES[id] {
                return Err(bad(lineno, "reserved id holds the wrong special piece"));
            }
            let mut piece = Piece {
                text: f[0].to_string(),
                score: 0.0,
                merge: None,
            };
            match kind {
                ModelKind::Unigram => {
                    piece.score = f[2].parse().map_err(|_| bad(lineno, "bad log-probability"))?;
                    if !(piece.score.is_finite() && piece.score <= 0.0) {
                        return Err(bad(lineno, "log-probability must be finite and ≤ 0"));
                    }
                }
                ModelKind::Bpe if f[2] != "-" => {
                    if f.len() != 5 {
                        return Err(bad(lineno, "merged piece needs rank, left and right"));
                    }
                    let rank = f[2].parse().map_err(|_| bad(lineno, "bad merge rank"))?;
                    let pair = (f[3].to_string(), f[4].to_string());
                    if format!("{}{}", pair.0, pair.1) != piece.text {
                        return Err(bad(lineno, "merge does not spell the piece"));
                    }
                    ranked.insert(rank, pair.clone());
                    piece.merge = Some(pair);
                }
                ModelKind::Bpe => {}
            }
            pieces.push(piece);
        }
        if pieces.len() != size {
            return Err(bad(0, &format!("header says {size} pieces, found {}", pieces.len())));
        }
        if ranked.keys().copied().ne(0..ranked.len()) {
            return Err(bad(0, "merge ranks are not contiguous"));
        }
        let merges = ranked.into_values().collect();
        Ok(Self::assemble(kind, marker, pieces, merges))
    }
}

fn apply_merge(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Word frequency table of marked words, in sorted order.
fn count_words(corpus: &[String], marker: char) -> Result<Vec<(String, u64)>, SubwordError> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for sentence in corpus {
        for w in normalize(sentence).split(' ').filter(|w| !w.is_empty()) {
            *counts.entry(format!("{marker}{w}")).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(SubwordError::EmptyCorpus);
    }
    Ok(counts.into_iter().collect())
}

fn char_inventory(words: &[(String, u64)]) -> BTreeSet<char> {
    words.iter().flat_map(|(w, _)| w.chars()).collect()
}

fn check_budget(budget: usize, chars: usize) -> Result<(), SubwordError> {
    let required = NUM_SPECIALS + chars;
    if budget < required {
        return Err(SubwordError::BudgetTooSmall { budget, required });
    }
    Ok(())
}

/// Trains a BPE model: repeatedly merges the most frequent adjacent symbol
/// pair (ties go to the lexicographically smallest pair) until the
/// vocabulary reaches `vocab_budget` or no pair is left.
pub fn train_bpe(corpus: &[String], vocab_budget: usize) -> Result<SubwordModel, SubwordError> {
    train_bpe_with_marker(corpus, vocab_budget, DEFAULT_MARKER)
}

pub fn train_bpe_with_marker(
    corpus: &[String],
    vocab_budget: usize,
    marker: char,
) -> Result<SubwordModel, SubwordError> {
    let words = count_words(corpus, marker)?;
    let chars = char_inventory(&words);
    check_budget(vocab_budget, chars.len())?;

    let mut pieces = SubwordModel::specials();
    let mut known: BTreeSet<String> = BTreeSet::new();
    for c in &chars {
        pieces.push(Piece {
            text: c.to_string(),
            score: 0.0,
            merge: None,
        });
        known.insert(c.to_string());
    }

    let mut symbols: Vec<Vec<String>> = words
        .iter()
        .map(|(w, _)| w.chars().map(String::from).collect())
        .collect();
    let freqs: Vec<i64> = words.iter().map(|&(_, c)| c as i64).collect();
    let mut pair_counts: HashMap<(String, String), i64> = HashMap::new();
    let mut holders: HashMap<(String, String), BTreeSet<usize>> = HashMap::new();
    for (wi, syms) in symbols.iter().enumerate() {
        add_pairs(syms, freqs[wi], wi, &mut pair_counts, &mut holders);
    }

    let mut merges = Vec::new();
    while pieces.len() < vocab_budget {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            .map(|(p, _)| p.clone());
        let Some(pair) = best else { break };
        let affected: Vec<usize> = holders
            .get(&pair)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        for wi in affected {
            remove_pairs(&symbols[wi], freqs[wi], &mut pair_counts);
            symbols[wi] = apply_merge(&symbols[wi], &pair.0, &pair.1);
            add_pairs(&symbols[wi], freqs[wi], wi, &mut pair_counts, &mut holders);
        }
        let merged = format!("{}{}", pair.0, pair.1);
        if known.insert(merged.clone()) {
            pieces.push(Piece {
                text: merged,
                score: 0.0,
                merge: Some(pair.clone()),
            });
        }
        merges.push(pair);
    }
    Ok(SubwordModel::assemble(ModelKind::Bpe, marker, pieces, merges))
}

fn add_pairs(
    syms: &[String],
    freq: i64,
    wi: usize,
    counts: &mut HashMap<(String, String), i64>,
    holders: &mut HashMap<(String, String), BTreeSet<usize>>,
) {
    for w in syms.windows(2) {
        let key = (w[0].clone(), w[1].clone());
        *counts.entry(key.clone()).or_default() += freq;
        holders.entry(key).or_default().insert(wi);
    }
}

fn remove_pairs(syms: &[String], freq: i64, counts: &mut HashMap<(String, String), i64>) {
    for w in syms.windows(2) {
        if let Some(c) = counts.get_mut(&(w[0].clone(), w[1].clone())) {
            *c -= freq;
        }
    }
}

/// Settings of the unigram trainer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnigramConfig {
    pub vocab_budget: usize,
    /// Seed vocabulary size as a multiple of the budget.
    pub seed_multiplier: f64,
    /// Fraction of pieces dropped per pruning round.
    pub prune_fraction: f64,
    pub em_iterations: usize,
    /// Longest seed substring, in characters.
    pub max_piece_len: usize,
}

impl Default for UnigramConfig {
    fn default() -> Self {
        UnigramConfig {
            vocab_budget: DEFAULT_VOCAB_BUDGET,
            seed_multiplier: 4.0,
            prune_fraction: 0.2,
            em_iterations: 2,
            max_piece_len: 8,
        }
    }
}

/// Floor on expected counts so rarely used pieces keep a finite log-probability.
const COUNT_FLOOR: f64 = 1e-3;

/// Piece table used during unigram training.
#[derive(Debug, Clone)]
pub(crate) struct Lattice {
    pub texts: Vec<String>,
    pub logp: Vec<f64>,
    pub is_char: Vec<bool>,
    index: HashMap<String, usize>,
    max_len: usize,
}

impl Lattice {
    pub(crate) fn new(entries: Vec<(String, f64, bool)>) -> Self {
        let max_len = entries
            .iter()
            .map(|(t, _, _)| t.chars().count())
            .max()
            .unwrap_or(1);
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (t, _, _))| (t.clone(), i))
            .collect();
        let (mut texts, mut logp, mut is_char) = (Vec::new(), Vec::new(), Vec::new());
        for (t, l, c) in entries {
            texts.push(t);
            logp.push(l);
            is_char.push(c);
        }
        Lattice {
            texts,
            logp,
            is_char,
            index,
            max_len,
        }
    }

    /// Edges `(start, end, piece)` over character positions of `word`,
    /// optionally skipping one piece.
    fn edges(&self, word: &str, skip: Option<usize>) -> (usize, Vec<(usize, usize, usize)>) {
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(b, _)| b)
            .chain(std::iter::once(word.len()))
            .collect();
        let n = bounds.len() - 1;
        let mut edges = Vec::new();
        for start in 0..n {
            for end in start + 1..=(start + self.max_len).min(n) {
                if let Some(&id) = self.index.get(&word[bounds[start]..bounds[end]]) {
                    if Some(id) != skip {
                        edges.push((start, end, id));
                    }
                }
            }
        }
        (n, edges)
    }

    /// Expected piece counts for one word under the current log-probabilities
    /// (forward-backward), and the word's log marginal likelihood.
    pub(crate) fn expected_counts(&self, word: &str) -> (Vec<(usize, f64)>, f64) {
        let (n, edges) = self.edges(word, None);
        let mut alpha = vec![f64::NEG_INFINITY; n + 1];
        alpha[0] = 0.0;
        for end in 1..=n {
            let terms = edges
                .iter()
                .filter(|e| e.1 == end)
                .map(|&(s, _, id)| alpha[s] + self.logp[id]);
            alpha[end] = log_sum_exp(terms);
        }
        let mut beta = vec![f64::NEG_INFINITY; n + 1];
        beta[n] = 0.0;
        for start in (0..n).rev() {
            let terms = edges
                .iter()
                .filter(|e| e.0 == start)
                .map(|&(_, e, id)| beta[e] + self.logp[id]);
            beta[start] = log_sum_exp(terms);
        }
        let z = alpha[n];
        let counts = edges
            .iter()
            .map(|&(s, e, id)| (id, (alpha[s] + self.logp[id] + beta[e] - z).exp()))
            .collect();
        (counts, z)
    }

    fn viterbi(&self, word: &str, skip: Option<usize>) -> Option<Vec<usize>> {
        let (n, edges) = self.edges(word, skip);
        let mut best = vec![f64::NEG_INFINITY; n + 1];
        let mut back = vec![(0usize, 0usize); n + 1];
        best[0] = 0.0;
        for &(s, e, id) in &edges {
            // Edges are sorted by start, so best[s] is final when visited.
            let total = best[s] + self.logp[id];
            if total > best[e] {
                best[e] = total;
                back[e] = (s, id);
            }
        }
        if best[n] == f64::NEG_INFINITY {
            return None;
        }
        let mut out = Vec::new();
        let mut pos = n;
        while pos > 0 {
            let (s, id) = back[pos];
            out.push(id);
            pos = s;
        }
        out.reverse();
        Some(out)
    }

    /// One EM round: returns re-estimated log-probabilities and the corpus
    /// log-likelihood under the old ones.
    pub(crate) fn em_step(&self, words: &[(String, u64)]) -> (Vec<f64>, f64) {
        let mut counts = vec![0.0; self.texts.len()];
        let mut likelihood = 0.0;
        for (w, freq) in words {
            let (c, z) = self.expected_counts(w);
            likelihood += *freq as f64 * z;
            for (id, v) in c {
                counts[id] += *freq as f64 * v;
            }
        }
        let floored: Vec<f64> = counts.iter().map(|&c| c.max(COUNT_FLOOR)).collect();
        let total: f64 = floored.iter().sum();
        let logp = floored.iter().map(|&c| (c / total).ln().min(0.0)).collect();
        (logp, likelihood)
    }
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = terms.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Trains a unigram language-model tokenizer: seeds with frequent
/// substrings, then alternates EM re-estimation with pruning of the pieces
/// whose removal costs the least likelihood until the budget is met.
/// Single characters are never pruned.
pub fn train_unigram(corpus: &[String], config: &UnigramConfig) -> Result<SubwordModel, SubwordError> {
    train_unigram_with_marker(corpus, config, DEFAULT_MARKER)
}

pub fn train_unigram_with_marker(
    corpus: &[String],
    config: &UnigramConfig,
    marker: char,
) -> Result<SubwordModel, SubwordError> {
    if !(config.seed_multiplier > 1.0) {
        return Err(SubwordError::BadSetting(format!(
            "seed_multiplier must exceed 1, got {}",
            config.seed_multiplier
        )));
    }
    if !(config.prune_fraction > 0.0 && config.prune_fraction < 1.0) {
        return Err(SubwordError::BadSetting(format!(
            "prune_fraction must be in (0, 1), got {}",
            config.prune_fraction
        )));
    }
    if config.em_iterations == 0 || config.max_piece_len == 0 || config.max_piece_len > MAX_PIECE_CHARS
    {
        return Err(SubwordError::BadSetting(
            "em_iterations ≥ 1 and 1 ≤ max_piece_len ≤ 16 required".into(),
        ));
    }
    let words = count_words(corpus, marker)?;
    let chars = char_inventory(&words);
    check_budget(config.vocab_budget, chars.len())?;

    // Seed: every character plus the most frequent longer substrings.
    let mut char_freq: BTreeMap<char, u64> = BTreeMap::new();
    let mut sub_freq: HashMap<String, u64> = HashMap::new();
    for (w, f) in &words {
        let cs: Vec<char> = w.chars().collect();
        for &c in &cs {
            *char_freq.entry(c).or_default() += f;
        }
        for i in 0..cs.len() {
            for j in i + 2..=(i + config.max_piece_len).min(cs.len()) {
                // The marker only starts pieces.
                if cs[i + 1..j].contains(&marker) {
                    break;
                }
                *sub_freq.entry(cs[i..j].iter().collect()).or_default() += f;
            }
        }
    }
    let seed_size = (config.seed_multiplier * config.vocab_budget as f64).ceil() as usize;
    let mut subs: Vec<(String, u64)> = sub_freq.into_iter().collect();
    subs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    subs.truncate(seed_size);

    let total: f64 = char_freq.values().map(|&f| f as f64).sum::<f64>()
        + subs.iter().map(|&(_, f)| f as f64).sum::<f64>();
    let mut entries: Vec<(String, f64, bool)> = char_freq
        .iter()
        .map(|(c, &f)| (c.to_string(), (f as f64 / total).ln(), true))
        .collect();
    entries.extend(
        subs.into_iter()
            .map(|(s, f)| (s, (f as f64 / total).ln(), false)),
    );

    let mut lattice = Lattice::new(entries);
    loop {
        for _ in 0..config.em_iterations {
            let (logp, _) = lattice.em_step(&words);
            lattice.logp = logp;
        }
        let size = NUM_SPECIALS + lattice.texts.len();
        if size <= config.vocab_budget {
            break;
        }
        let target = ((size as f64 * (1.0 - config.prune_fraction)).floor() as usize)
            .max(config.vocab_budget);
        lattice = prune(&lattice, &words, target - NUM_SPECIALS);
    }

    let mut pieces = SubwordModel::specials();
    let mut order: Vec<usize> = (0..lattice.texts.len()).collect();
    // Characters first (sorted), then other pieces by descending probability.
    order.sort_by(|&a, &b| {
        lattice.is_char[b]
            .cmp(&lattice.is_char[a])
            .then_with(|| {
                if lattice.is_char[a] {
                    lattice.texts[a].cmp(&lattice.texts[b])
                } else {
                    lattice.logp[b]
                        .total_cmp(&lattice.logp[a])
                        .then_with(|| lattice.texts[a].cmp(&lattice.texts[b]))
                }
            })
    });
    for i in order {
        pieces.push(Piece {
            text: lattice.texts[i].clone(),
            score: lattice.logp[i],
            merge: None,
        });
    }
    Ok(SubwordModel::assemble(ModelKind::Unigram, marker, pieces, Vec::new()))
}

/// Keeps the `keep` most valuable pieces (all characters always survive).
fn prune(lattice: &Lattice, words: &[(String, u64)], keep: usize) -> Lattice {
    let n = lattice.texts.len();
    let mut freq = vec![0.0; n];
    for (w, f) in words {
        if let Some(seg) = lattice.viterbi(w, None) {
            for id in seg {
                freq[id] += *f as f64;
            }
        }
    }
    let sum: f64 = freq.iter().sum();
    let mut scored: Vec<(f64, usize)> = Vec::new();
    for i in (0..n).filter(|&i| !lattice.is_char[i]) {
        let score = if freq[i] == 0.0 {
            0.0
        } else {
            // Likelihood lost if every use of piece i were replaced by its
            // best segmentation into the remaining pieces.
            let alt = lattice
                .viterbi(&lattice.texts[i], Some(i))
                .expect("characters always segment a piece");
            let logprob_piece = freq[i].ln() - sum.ln();
            let logsum_alt = (sum + freq[i] * (alt.len() as f64 - 1.0)).ln();
            let logprob_alt: f64 = alt
                .iter()
                .map(|&a| (freq[a] + freq[i]).ln() - logsum_alt)
                .sum();
            freq[i] * (logprob_piece - logprob_alt)
        };
        scored.push((score, i));
    }
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| lattice.texts[a.1].cmp(&lattice.texts[b.1]))
    });
    let chars = lattice.is_char.iter().filter(|&&c| c).count();
    let keep_subs = keep.saturating_sub(chars);
    let kept: BTreeSet<usize> = scored.iter().take(keep_subs).map(|&(_, i)| i).collect();
    let entries = (0..n)
        .filter(|i| lattice.is_char[*i] || kept.contains(i))
        .map(|i| (lattice.texts[i].clone(), lattice.logp[i], lattice.is_char[i]))
        .collect();
    Lattice::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(lines: &[&str]) -> Vec<String> {
        lines.iter().map(|s| s.to_string()).collect()
    }

    /// Re-counts every pair from scratch each iteration.
    fn naive_bpe_merges(corpus: &[String], budget: usize) -> Vec<(String, String)> {
        let words = count_words(corpus, DEFAULT_MARKER).unwrap();
        let mut syms: Vec<(Vec<String>, u64)> = words
            .iter()
            .map(|(w, c)| (w.chars().map(String::from).collect(), *c))
            .collect();
        let mut vocab: BTreeSet<String> = char_inventory(&words)
            .iter()
            .map(|c| c.to_string())
            .collect();
        let mut merges = Vec::new();
        while NUM_SPECIALS + vocab.len() < budget {
            let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
            for (s, c) in &syms {
                for i in 0..s.len().saturating_sub(1) {
                    *counts.entry((s[i].clone(), s[i + 1].clone())).or_default() += c;
                }
            }
            // BTreeMap iterates in ascending pair order; keep the first maximum.
            let mut best: Option<((String, String), u64)> = None;
            for (p, c) in counts {
                if best.as_ref().map_or(true, |(_, bc)| c > *bc) {
                    best = Some((p, c));
                }
            }
            let Some((pair, _)) = best else { break };
            for (s, _) in syms.iter_mut() {
                *s = apply_merge(s, &pair.0, &pair.1);
            }
            vocab.insert(format!("{}{}", pair.0, pair.1));
            merges.push(pair);
        }
        merges
    }

    fn pair(a: &str, b: &str) -> (String, String) {
        (a.to_string(), b.to_string())
    }

    #[test]
    fn bpe_first_merges_on_repeated_letter() {
        let c = corpus(&["aaaa"]);
        // Inventory {▁, a}; budget = specials + chars + 2.
        let m = train_bpe(&c, NUM_SPECIALS + 2 + 2).unwrap();
        assert_eq!(m.merges(), &[pair("a", "a"), pair("aa", "aa")]);
        assert_eq!(naive_bpe_merges(&c, NUM_SPECIALS + 4), m.merges());
    }

    #[test]
    fn bpe_most_frequent_pair_wins() {
        let c = corpus(&["abab", "abab"]);
        let m = train_bpe(&c, NUM_SPECIALS + 3 + 1).unwrap();
        assert_eq!(m.merges(), &[pair("a", "b")]);
    }

    #[test]
    fn bpe_budget_at_inventory_gives_characters_only() {
        let c = corpus(&["a b c d"]);
        let m = train_bpe(&c, NUM_SPECIALS + 5).unwrap();
        assert!(m.merges().is_empty());
        assert_eq!(m.vocab_size(), NUM_SPECIALS + 5);
    }

    #[test]
    fn budget_below_inventory_reports_minimum() {
        let c = corpus(&["abc"]);
        match train_bpe(&c, 5) {
            Err(SubwordError::BudgetTooSmall { required, .. }) => assert_eq!(required, 8),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = UnigramConfig {
            vocab_budget: 5,
            ..Default::default()
        };
        assert!(matches!(
            train_unigram(&c, &cfg),
            Err(SubwordError::BudgetTooSmall { required: 8, .. })
        ));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(train_bpe(&[], 100), Err(SubwordError::EmptyCorpus)));
        assert!(matches!(
            train_bpe(&corpus(&["   "]), 100),
            Err(SubwordError::EmptyCorpus)
        ));
    }

    #[test]
    fn unigram_viterbi_prefers_whole_piece() {
        let m = SubwordModel::unigram_from_pieces(&[("▁a", -1.0), ("▁", -2.0), ("a", -2.0)], '▁')
            .unwrap();
        let ids = m.encode("a");
        assert_eq!(ids, vec![m.piece_id("▁a").unwrap()]);
        assert_eq!(m.viterbi("▁a").1, -1.0);
    }

    #[test]
    fn empty_sentence_encodes_to_nothing() {
        let m = train_bpe(&corpus(&["hello world"]), 30).unwrap();
        assert!(m.encode("").is_empty());
        assert!(m.encode("  \t ").is_empty());
        assert_eq!(m.decode(&[]).unwrap(), "");
    }

    #[test]
    fn unseen_character_becomes_unk_in_place() {
        let c = corpus(&["hello world", "hold the door"]);
        for m in [
            train_bpe(&c, 40).unwrap(),
            train_unigram(
                &c,
                &UnigramConfig {
                    vocab_budget: 40,
                    ..Default::default()
                },
            )
            .unwrap(),
        ] {
            let ids = m.encode("hello wQrld");
            assert!(ids.contains(&UNK_ID));
            assert_eq!(m.decode(&ids).unwrap(), format!("hello w{UNK_SURFACE}rld"));
        }
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let m = train_bpe(&corpus(&["ab"]), 20).unwrap();
        assert!(matches!(
            m.decode(&[m.vocab_size()]),
            Err(SubwordError::IdOutOfRange { .. })
        ));
    }

    #[test]
    fn round_trip_hello_world() {
        let c = corpus(&["hello world", "world of words"]);
        let m = train_unigram(
            &c,
            &UnigramConfig {
                vocab_budget: 30,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(m.decode(&m.encode("hello world")).unwrap(), "hello world");
        let b = train_bpe(&c, 30).unwrap();
        assert_eq!(b.decode(&b.encode("hello   world ")).unwrap(), "hello world");
    }

    #[test]
    fn em_on_two_characters_is_uniform() {
        let lattice = Lattice::new(vec![
            ("a".into(), (0.9f64).ln(), true),
            ("b".into(), (0.1f64).ln(), true),
        ]);
        let (logp, _) = lattice.em_step(&[("ab".to_string(), 1)]);
        assert!((logp[0].exp() - 0.5).abs() < 1e-12);
        assert!((logp[1].exp() - 0.5).abs() < 1e-12);
    }

    /// Enumerates every segmentation of `word` into lattice pieces.
    fn all_segmentations(lattice: &Lattice, word: &[char]) -> Vec<Vec<usize>> {
        if word.is_empty() {
            return vec![Vec::new()];
        }
        let mut out = Vec::new();
        for len in 1..=word.len() {
            let head: String = word[..len].iter().collect();
            if let Some(&id) = lattice.index.get(&head) {
                for mut rest in all_segmentations(lattice, &word[len..]) {
                    rest.insert(0, id);
                    out.push(rest);
                }
            }
        }
        out
    }

    #[test]
    fn forward_backward_matches_exhaustive_expectation() {
        let lattice = Lattice::new(vec![
            ("▁".into(), -2.0, true),
            ("a".into(), -1.5, true),
            ("b".into(), -1.7, true),
            ("▁a".into(), -2.2, false),
            ("ab".into(), -1.1, false),
            ("ba".into(), -2.5, false),
            ("▁ab".into(), -3.0, false),
        ]);
        let word = "▁abab";
        let segs = all_segmentations(&lattice, &word.chars().collect::<Vec<_>>());
        let weights: Vec<f64> = segs
            .iter()
            .map(|s| s.iter().map(|&i| lattice.logp[i]).sum::<f64>().exp())
            .collect();
        let z: f64 = weights.iter().sum();
        let mut oracle = vec![0.0; lattice.texts.len()];
        for (s, w) in segs.iter().zip(&weights) {
            for &i in s {
                oracle[i] += w / z;
            }
        }
        let (counts, logz) = lattice.expected_counts(word);
        let mut got = vec![0.0; lattice.texts.len()];
        for (i, c) in counts {
            got[i] += c;
        }
        assert!((logz - z.ln()).abs() < 1e-12);
        for (a, b) in got.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{got:?} vs {oracle:?}");
        }
        // "ab" carries more expected mass than "ba" on this lattice.
        assert!(oracle[4] > oracle[5]);
    }

    #[test]
    fn unigram_keeps_ab_over_ba() {
        let c: Vec<String> = (0..100).map(|_| "abab".to_string()).collect();
        let cfg = UnigramConfig {
            vocab_budget: NUM_SPECIALS + 3 + 1,
            max_piece_len: 2,
            ..Default::default()
        };
        let m = train_unigram(&c, &cfg).unwrap();
        assert!(m.piece_id("ab").is_some());
        assert!(m.piece_id("ba").is_none());
        assert!(m.vocab_size() <= cfg.vocab_budget);
    }

    #[test]
    fn unigram_invariants_hold() {
        let c = corpus(&[
            "the cat sat on the mat",
            "the dog sat on the log",
            "a cat and a dog",
            "cats and dogs are not logs",
        ]);
        let cfg = UnigramConfig {
            vocab_budget: 40,
            ..Default::default()
        };
        let m = train_unigram(&c, &cfg).unwrap();
        assert!(m.vocab_size() <= 40);
        for (id, _) in m.pieces() {
            let s = m.score(id).unwrap();
            assert!(s.is_finite() && s <= 0.0);
        }
        for ch in c.iter().flat_map(|s| s.chars()).filter(|c| *c != ' ') {
            assert!(m.piece_id(&ch.to_string()).is_some(), "missing {ch}");
        }
        for s in &c {
            let score: f64 = m
                .marked_words(s)
                .iter()
                .map(|w| m.viterbi(w).1)
                .sum();
            assert!(score.is_finite());
            assert_eq!(&m.decode(&m.encode(s)).unwrap(), s);
        }
    }

    #[test]
    fn bad_unigram_settings_rejected() {
        let c = corpus(&["ab"]);
        for cfg in [
            UnigramConfig {
                seed_multiplier: 1.0,
                ..Default::default()
            },
            UnigramConfig {
                prune_fraction: 1.0,
                ..Default::default()
            },
            UnigramConfig {
                prune_fraction: 0.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                train_unigram(&c, &cfg),
                Err(SubwordError::BadSetting(_))
            ));
        }
    }

    #[test]
    fn save_load_is_bit_exact() {
        let c = corpus(&[
            "Der schnelle braune Fuchs",
            "springt über den faulen Hund",
            "नमस्ते दुनिया",
        ]);
        let uni = train_unigram(
            &c,
            &UnigramConfig {
                vocab_budget: 70,
                ..Default::default()
            },
        )
        .unwrap();
        let bpe = train_bpe(&c, 70).unwrap();
        for m in [uni, bpe] {
            let text = m.to_text();
            let back = SubwordModel::from_text(&text).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn load_rejects_garbage() {
        assert!(SubwordModel::from_text("nope").is_err());
        assert!(SubwordModel::from_text("deskmt-subword\t9\tbpe\t4\t▁\n").is_err());
        let bad_order = "deskmt-subword\t1\tunigram\t5\t▁\n<pad>\t0\t0.0\n<s>\t1\t0.0\n</s>\t2\t0.0\n<unk>\t3\t0.0\na\t5\t-1.0\n";
        assert!(SubwordModel::from_text(bad_order).is_err());
    }

    #[test]
    fn normalization_collapses_whitespace_and_keeps_case() {
        assert_eq!(normalize("  Hello \t  World\n"), "Hello World");
        // NFKC folds the full-width letter.
        assert_eq!(normalize("Ａb"), "Ab");
    }

    fn random_sentence() -> impl Strategy<Value = String> {
        proptest::collection::vec("[a-e]{1,6}", 1..6).prop_map(|w| w.join(" "))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn bpe_matches_naive_trainer(lines in proptest::collection::vec(random_sentence(), 1..8), extra in 0usize..25) {
            let c: Vec<String> = lines;
            let chars = char_inventory(&count_words(&c, DEFAULT_MARKER).unwrap()).len();
            let budget = NUM_SPECIALS + chars + extra;
            let fast = train_bpe(&c, budget).unwrap();
            let naive = naive_bpe_merges(&c, budget);
            prop_assert_eq!(fast.merges(), naive.as_slice());
        }

        #[test]
        fn encode_decode_round_trip(lines in proptest::collection::vec(random_sentence(), 3..10), probe in random_sentence()) {
            let mut c = lines;
            c.push("a b c d e".into());
            let bpe = train_bpe(&c, 40).unwrap();
            let uni = train_unigram(&c, &UnigramConfig { vocab_budget: 40, ..Default::default() }).unwrap();
            for m in [&bpe, &uni] {
                prop_assert_eq!(m.decode(&m.encode(&probe)).unwrap(), normalize(&probe));
                prop_assert_eq!(m.encode(&probe), m.encode(&probe));
            }
        }
    }
}
