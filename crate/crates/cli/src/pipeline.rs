//! End-to-end run: tokenize, filter, train reverse, backtranslate, filter
//! synthetic, merge, train forward, evaluate. A baseline forward model on
//! the filtered real data is trained and evaluated alongside when enabled.
//!
//! Artifacts in `work_dir`:
//!
//! ```text
//! config.toml                       resolved configuration
//! tokenizer.src  tokenizer.tgt      subword models
//! filtered.{src,tgt,prov}           real pairs after filtering
//! reverse.ckpt                      target→source model
//! synthetic.{src,tgt,prov}          all backtranslated pairs
//! synthetic.filtered.{src,tgt,prov} synthetic pairs kept
//! merged.{src,tgt,prov}             forward training data
//! forward.ckpt  baseline.ckpt       forward models
//! {forward,baseline}.history.json   per-epoch losses
//! {forward,baseline}.hyp            test-set translations
//! {forward,baseline}.report.json    EvalReports
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use deskmt::backtranslation::{
    backtranslate, ensure_trained, filter_synthetic, merge_corpora, BacktranslationStats,
};
use deskmt::corpus::{read_corpus, write_corpus, ParallelCorpus, SubwordCounter};
use deskmt::decoding::Translator;
use deskmt::metrics::EvalReport;
use deskmt::subword::SubwordModel;
use deskmt::training::{Checkpoint, TrainOutcome};
use deskmt::Scalar;
use log::info;
use serde::Serialize;

use crate::config::{PipelineConfig, Precision};
use crate::error::{Category, CliError, Result};
use crate::ops;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineOutcome {
    pub forward: EvalReport,
    pub baseline: Option<EvalReport>,
    pub backtranslation: Option<BacktranslationStats>,
    pub synthetic_kept: usize,
    pub real_kept: usize,
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    match cfg.precision {
        Precision::F32 => run::<f32>(cfg),
        Precision::F64 => run::<f64>(cfg),
    }
}

fn corpus_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{stem}.src")),
        dir.join(format!("{stem}.tgt")),
        dir.join(format!("{stem}.prov")),
    )
}

fn save_corpus(dir: &Path, stem: &str, corpus: &ParallelCorpus) -> Result<()> {
    let (s, t, p) = corpus_paths(dir, stem);
    Ok(write_corpus(corpus, &s, &t, Some(&p))?)
}

fn load_pair(cfg: &PipelineConfig, source: &Path, target: &Path, prov: Option<&Path>) -> Result<ParallelCorpus> {
    let d = &cfg.data;
    let (s, t) = (d.resolve(source), d.resolve(target));
    crate::error::require_file(&s)?;
    crate::error::require_file(&t)?;
    let p = prov.map(|p| d.resolve(p));
    if let Some(p) = &p {
        crate::error::require_file(p)?;
    }
    Ok(read_corpus(&s, &t, p.as_deref())?)
}

fn save_training<T: Scalar>(work: &Path, stem: &str, outcome: &TrainOutcome<T>) -> Result<()> {
    ops::save_checkpoint(&outcome.model, &work.join(format!("{stem}.ckpt")))?;
    let history = serde_json::to_string_pretty(&outcome.history).expect("history serializes");
    fs::write(work.join(format!("{stem}.history.json")), history + "\n")?;
    Ok(())
}

fn evaluate_model<T: Scalar>(
    cfg: &PipelineConfig,
    work: &Path,
    stem: &str,
    ckpt: &Checkpoint<T>,
    tokenizers: (&SubwordModel, &SubwordModel),
    test: &ParallelCorpus,
) -> Result<EvalReport> {
    let model = ops::model_of(ckpt)?;
    let out = ops::translate_lines(&model, tokenizers.0, tokenizers.1, &cfg.decoding, &test.sources())?;
    let hyps: Vec<String> = out
        .into_iter()
        .map(|t| t.map(|t| t.text).unwrap_or_default())
        .collect();
    deskmt::corpus::write_lines(&work.join(format!("{stem}.hyp")), &hyps)?;
    let report = ops::evaluate_lines(&hyps, &test.targets(), &cfg.metrics)?;
    ops::write_report(&report, &work.join(format!("{stem}.report.json")))?;
    info!(
        "{stem} model on {} test sentences: BLEU {:.2} RIBES {:.4}",
        test.len(),
        report.bleu,
        report.ribes
    );
    Ok(report)
}

fn run<T: Scalar>(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let work = cfg.work_dir.as_path();
    fs::create_dir_all(work)?;
    fs::write(work.join("config.toml"), cfg.to_toml())?;
    let d = &cfg.data;
    let real = load_pair(cfg, &d.train_source, &d.train_target, d.train_provenance.as_deref())?;
    let valid = load_pair(cfg, &d.valid_source, &d.valid_target, None)?;
    let test = load_pair(cfg, &d.test_source, &d.test_target, None)?;
    let plan = &cfg.backtranslation;
    let mono = plan
        .monolingual
        .as_ref()
        .map(|p| ops::read_input(&d.resolve(p)))
        .transpose()?;
    info!(
        "loaded {} training, {} validation, {} test pairs, {} monolingual sentences",
        real.len(),
        valid.len(),
        test.len(),
        mono.as_ref().map_or(0, Vec::len)
    );

    info!("step 1: subword tokenizers");
    let src_tok = ops::train_tokenizer(cfg.tokenizer.kind, cfg.tokenizer.source_vocab, &real.sources())?;
    let mut tgt_text = real.targets();
    tgt_text.extend(mono.iter().flatten().cloned());
    let tgt_tok = ops::train_tokenizer(cfg.tokenizer.kind, cfg.tokenizer.target_vocab, &tgt_text)?;
    src_tok.save(&work.join("tokenizer.src"))?;
    tgt_tok.save(&work.join("tokenizer.tgt"))?;

    info!("step 2: corpus filtering");
    let langid = ops::build_langid(d.langid_samples.as_ref().map(|p| d.resolve(p)).as_deref())?;
    let filtered = ops::filter_corpus(&real, &cfg.filter, langid.as_ref(), &src_tok, &tgt_tok)?;
    if filtered.is_empty() {
        return Err(CliError::new(Category::InvalidData, "filtering removed every training pair"));
    }
    save_corpus(work, "filtered", &filtered)?;

    let (merged, stats) = match &mono {
        None => {
            info!("no monolingual data configured; skipping backtranslation");
            (filtered.clone(), None)
        }
        Some(mono) => {
            info!("step 3: reverse model");
            let reverse: Checkpoint<T> = match &plan.reverse_checkpoint {
                Some(p) => {
                    let c = ops::load_checkpoint(p)?;
                    ensure_trained(&c)?;
                    c
                }
                None => {
                    let outcome = ops::train_model::<T>(
                        &ops::flip(&filtered)?,
                        &ops::flip(&valid)?,
                        &tgt_tok,
                        &src_tok,
                        &cfg.model,
                        &cfg.training,
                    )?;
                    save_training(work, "reverse", &outcome)?;
                    outcome.model
                }
            };
            let reverse_model = ops::model_of(&reverse)?;
            ops::check_vocab(&reverse_model, &tgt_tok, &src_tok)?;

            info!("step 4: backtranslation");
            let translator = Translator {
                model: &reverse_model,
                source: &tgt_tok,
                target: &src_tok,
                beam: cfg.decoding.clone(),
            };
            let (synthetic, stats) = backtranslate(&translator, mono)?;
            save_corpus(work, "synthetic", &synthetic)?;

            info!("step 5: synthetic filtering");
            let counter = SubwordCounter {
                source: &src_tok,
                target: &tgt_tok,
            };
            let kept = filter_synthetic(
                &synthetic,
                plan.confidence_threshold,
                plan.min_len,
                plan.max_len,
                plan.length_side,
                &counter,
            )?;
            info!("kept {} of {} synthetic pairs", kept.len(), synthetic.len());
            save_corpus(work, "synthetic.filtered", &kept)?;

            info!("step 6: merge");
            let merged = merge_corpora(&filtered, &kept, plan.merge);
            save_corpus(work, "merged", &merged)?;
            (merged, Some(stats))
        }
    };

    info!("step 7: forward model on {} pairs", merged.len());
    let forward = ops::train_model::<T>(&merged, &valid, &src_tok, &tgt_tok, &cfg.model, &cfg.training)?;
    save_training(work, "forward", &forward)?;

    info!("step 8: evaluation");
    let tokenizers = (&src_tok, &tgt_tok);
    let forward_report = evaluate_model(cfg, work, "forward", &forward.model, tokenizers, &test)?;
    let baseline = if cfg.baseline && stats.is_some() {
        info!("baseline forward model on {} real pairs", filtered.len());
        let outcome = ops::train_model::<T>(&filtered, &valid, &src_tok, &tgt_tok, &cfg.model, &cfg.training)?;
        save_training(work, "baseline", &outcome)?;
        Some(evaluate_model(cfg, work, "baseline", &outcome.model, tokenizers, &test)?)
    } else {
        None
    };
    if let Some(b) = &baseline {
        info!(
            "BLEU forward {:.2} vs baseline {:.2}",
            forward_report.bleu, b.bleu
        );
    }
    Ok(PipelineOutcome {
        forward: forward_report,
        baseline,
        synthetic_kept: merged.len() - filtered.len(),
        real_kept: filtered.len(),
        backtranslation: stats,
    })
}
