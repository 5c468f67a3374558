//! File-level operations shared by the subcommands and the pipeline.

use std::fs;
use std::path::Path;

use deskmt::corpus::{
    langid_filter, length_filter, read_lines, train_langid, write_lines, LangIdModel,
    ParallelCorpus, SideSelector, SubwordCounter,
};
use deskmt::decoding::{BeamConfig, Translation, Translator};
use deskmt::metrics::{evaluate, EvalReport, MetricOptions};
use deskmt::model::ConvS2S;
use deskmt::subword::{train_bpe, train_unigram, ModelKind, SubwordModel, UnigramConfig};
use deskmt::training::{encode_corpus, Checkpoint, TrainConfig, TrainOutcome, Trainer};
use deskmt::Scalar;
use log::info;
use rayon::prelude::*;

use crate::config::{FilterConfig, ModelSection};
use crate::error::{require_file, Category, CliError, Result};

pub fn train_tokenizer(kind: ModelKind, budget: usize, lines: &[String]) -> Result<SubwordModel> {
    let model = match kind {
        ModelKind::Bpe => train_bpe(lines, budget)?,
        ModelKind::Unigram => train_unigram(
            lines,
            &UnigramConfig {
                vocab_budget: budget,
                ..UnigramConfig::default()
            },
        )?,
    };
    info!(
        "trained {:?} tokenizer: {} pieces from {} lines",
        kind,
        model.vocab_size(),
        lines.len()
    );
    Ok(model)
}

pub fn load_tokenizer(path: &Path) -> Result<SubwordModel> {
    require_file(path)?;
    SubwordModel::load(path).map_err(|e| CliError::from(e).context(path.display()))
}

pub fn read_input(path: &Path) -> Result<Vec<String>> {
    require_file(path)?;
    Ok(read_lines(path)?)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    require_file(path)?;
    Checkpoint::load(path).map_err(|e| CliError::from(e).context(path.display()))
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    ckpt.save(path)
        .map_err(|e| CliError::from(e).context(path.display()))
}

/// Reads `language<TAB>sentence` lines.
pub fn read_langid_samples(path: &Path) -> Result<Vec<(String, String)>> {
    read_input(path)?
        .into_iter()
        .enumerate()
        .map(|(i, line)| {
            line.split_once('\t')
                .map(|(lang, text)| (text.to_string(), lang.to_string()))
                .ok_or_else(|| {
                    CliError::new(
                        Category::InvalidData,
                        format!("{}: line {} lacks a tab", path.display(), i + 1),
                    )
                })
        })
        .collect()
}

pub fn write_langid_samples(path: &Path, samples: &[(String, String)]) -> Result<()> {
    let lines: Vec<String> = samples
        .iter()
        .map(|(text, lang)| format!("{lang}\t{text}"))
        .collect();
    Ok(write_lines(path, &lines)?)
}

pub fn build_langid(samples: Option<&Path>) -> Result<Option<LangIdModel>> {
    samples
        .map(|p| Ok(train_langid(&read_langid_samples(p)?)?))
        .transpose()
}

/// Optional lowercasing, then the language filter, then length bounds.
pub fn filter_corpus(
    corpus: &ParallelCorpus,
    cfg: &FilterConfig,
    langid: Option<&LangIdModel>,
    source: &SubwordModel,
    target: &SubwordModel,
) -> Result<ParallelCorpus> {
    let mut c = if cfg.lowercase {
        corpus.lowercased()
    } else {
        corpus.clone()
    };
    if let Some(model) = langid {
        let before = c.len();
        c = langid_filter(&c, model, &cfg.source_lang, &cfg.target_lang, cfg.langid_threshold)?;
        info!("language filter kept {} of {} pairs", c.len(), before);
    }
    let before = c.len();
    let counter = SubwordCounter { source, target };
    c = length_filter(&c, cfg.min_len, cfg.max_len, cfg.length_side, &counter)?;
    info!(
        "length filter [{}, {}] on {:?} kept {} of {} pairs",
        cfg.min_len,
        cfg.max_len,
        cfg.length_side,
        c.len(),
        before
    );
    Ok(c)
}

pub fn flip(corpus: &ParallelCorpus) -> Result<ParallelCorpus> {
    corpus
        .iter()
        .map(|p| {
            deskmt::corpus::SentencePair::new(p.target(), p.source(), p.provenance())
                .map_err(CliError::from)
        })
        .collect()
}

fn check_fits(corpus: &ParallelCorpus, what: &str, model: &ModelSection, counter: &SubwordCounter) -> Result<()> {
    let max = model.max_positions;
    // The decoder input carries an extra bos position.
    let long = length_filter(corpus, max + 1, usize::MAX, SideSelector::Source, counter)?.len()
        + length_filter(corpus, max, usize::MAX, SideSelector::Target, counter)?.len();
    if long > 0 {
        return Err(CliError::new(
            Category::InvalidData,
            format!("{what}: {long} sentences exceed model.max_positions ({max}); filter the corpus first"),
        ));
    }
    Ok(())
}

pub fn train_model<T: Scalar>(
    train: &ParallelCorpus,
    valid: &ParallelCorpus,
    source: &SubwordModel,
    target: &SubwordModel,
    model: &ModelSection,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let counter = SubwordCounter { source, target };
    check_fits(train, "training corpus", model, &counter)?;
    check_fits(valid, "validation corpus", model, &counter)?;
    let model_config = model.model_config(source.vocab_size(), target.vocab_size());
    let init = ConvS2S::<T>::new(model_config, config.seed)?;
    info!(
        "training on {} pairs ({} parameters), validating on {}",
        train.len(),
        init.config().parameter_count(),
        valid.len()
    );
    let mut trainer = Trainer::new(init, config.clone())?;
    Ok(trainer.fit(&encode_corpus(train, source, target), &encode_corpus(valid, source, target))?)
}

pub fn model_of<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<ConvS2S<T>> {
    Ok(ConvS2S::from_params(ckpt.config.clone(), ckpt.params.clone())?)
}

pub fn check_vocab<T: Scalar>(model: &ConvS2S<T>, source: &SubwordModel, target: &SubwordModel) -> Result<()> {
    let c = model.config();
    if c.source_vocab != source.vocab_size() || c.target_vocab != target.vocab_size() {
        return Err(CliError::new(
            Category::Mismatch,
            format!(
                "checkpoint vocabularies ({}, {}) do not match the tokenizers ({}, {})",
                c.source_vocab,
                c.target_vocab,
                source.vocab_size(),
                target.vocab_size()
            ),
        ));
    }
    Ok(())
}

/// Beam-search translation of each line; empty lines stay empty.
pub fn translate_lines<T: Scalar>(
    model: &ConvS2S<T>,
    source: &SubwordModel,
    target: &SubwordModel,
    beam: &BeamConfig,
    lines: &[String],
) -> Result<Vec<Option<Translation>>> {
    check_vocab(model, source, target)?;
    let translator = Translator {
        model,
        source,
        target,
        beam: beam.clone(),
    };
    lines
        .par_iter()
        .map(|s| {
            if s.split_whitespace().next().is_none() {
                Ok(None)
            } else {
                Ok(Some(translator.translate(s)?))
            }
        })
        .collect()
}

pub fn evaluate_lines(hyps: &[String], refs: &[String], opts: &MetricOptions) -> Result<EvalReport> {
    Ok(evaluate(hyps, refs, opts)?)
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    fs::write(path, report.to_json() + "\n")?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    require_file(path)?;
    EvalReport::from_json(&fs::read_to_string(path)?)
        .map_err(|e| CliError::new(Category::InvalidData, format!("{}: {e}", path.display())))
}
