//! Subcommand definitions and their implementations.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use deskmt::backtranslation::{backtranslate, filter_synthetic};
use deskmt::corpus::{read_corpus, write_corpus, write_lines, SubwordCounter};
use deskmt::decoding::Translator;
use deskmt::subword::ModelKind;
use deskmt::training::{average_checkpoints, Checkpoint};
use deskmt::Scalar;
use log::info;

use crate::config::{keys_help, PipelineConfig, Precision};
use crate::error::{exit_code_table, require_file, Category, CliError, Result};
use crate::ops;
use crate::pipeline::run_pipeline;
use crate::toydata::{make_toy_data, ToySizes, ToyTask};

#[derive(Debug, Parser)]
#[command(name = "deskmt", version, about = "Convolutional sequence-to-sequence translation at desk scale")]
pub struct Cli {
    /// Log filter when RUST_LOG is unset (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Pipeline configuration file (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. --set training.seed=3. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<PipelineConfig> {
        PipelineConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Debug, Clone, Args)]
pub struct TokenizerPair {
    /// Subword model of the input language.
    #[arg(long)]
    pub source_tokenizer: PathBuf,
    /// Subword model of the output language.
    #[arg(long)]
    pub target_tokenizer: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a BPE or unigram subword model on text files.
    TrainTokenizer {
        #[arg(long, value_parser = parse_kind, default_value = "bpe")]
        kind: ModelKind,
        /// Vocabulary budget, special symbols included.
        #[arg(long, default_value_t = deskmt::subword::DEFAULT_VOCAB_BUDGET)]
        vocab: usize,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Encode text to space-separated subword ids, or decode ids back to text.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Read ids and write text.
        #[arg(long)]
        decode: bool,
    },
    /// Filter a parallel corpus by language and subword length. With
    /// --min-confidence the input must be synthetic and the backtranslation
    /// bounds apply instead.
    FilterCorpus {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        tokenizers: TokenizerPair,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        provenance: Option<PathBuf>,
        /// Output stem; writes <stem>.src, <stem>.tgt and <stem>.prov.
        #[arg(long)]
        out_prefix: PathBuf,
        /// language<TAB>sentence samples enabling the language filter.
        #[arg(long)]
        langid_samples: Option<PathBuf>,
        #[arg(long)]
        min_confidence: Option<f64>,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        tokenizers: TokenizerPair,
        #[arg(long)]
        train_source: PathBuf,
        #[arg(long)]
        train_target: PathBuf,
        #[arg(long)]
        train_provenance: Option<PathBuf>,
        #[arg(long)]
        valid_source: PathBuf,
        #[arg(long)]
        valid_target: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write one checkpoint per epoch here.
        #[arg(long)]
        epoch_dir: Option<PathBuf>,
    },
    /// Beam-search translation of a text file.
    Translate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        tokenizers: TokenizerPair,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Per-line confidence, or "unfinished".
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Translate monolingual target text with a reverse model into synthetic
    /// pairs. --source-tokenizer is the monolingual language's model.
    Backtranslate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        tokenizers: TokenizerPair,
        /// Reverse-direction checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output stem; writes <stem>.src, <stem>.tgt and <stem>.prov.
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Elementwise mean of checkpoint parameters.
    AverageCheckpoints {
        #[arg(long, value_parser = parse_precision, default_value = "f32")]
        precision: Precision,
        #[arg(long)]
        output: PathBuf,
        #[arg(required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
    },
    /// Corpus BLEU and RIBES of hypotheses against references.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        hypotheses: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Write the machine-readable report (JSON) here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Tokenize, filter, train reverse, backtranslate, filter synthetic,
    /// merge, train forward and evaluate.
    RunPipeline {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate a synthetic corpus for the toy profile.
    MakeToyData {
        #[arg(long, value_enum, default_value = "translation")]
        task: ToyTask,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Training pairs (task default when omitted).
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        monolingual: Option<usize>,
    },
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    match s {
        "bpe" => Ok(ModelKind::Bpe),
        "unigram" => Ok(ModelKind::Unigram),
        _ => Err(format!("expected bpe or unigram, got '{s}'")),
    }
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("expected f32 or f64, got '{s}'")),
    }
}

/// The clap command with the configuration key table and exit codes
/// appended to the long help.
pub fn command() -> clap::Command {
    let epilog = format!("{}\n{}", keys_help(), exit_code_table());
    let mut cmd = Cli::command().after_long_help(epilog.clone());
    for name in ["filter-corpus", "train", "translate", "backtranslate", "evaluate", "run-pipeline"] {
        let e = epilog.clone();
        cmd = cmd.mut_subcommand(name, |c| c.after_long_help(e));
    }
    cmd
}

pub fn parse_from<I, S>(args: I) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = command().try_get_matches_from(args)?;
    Cli::from_arg_matches(&matches)
}

fn stem(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn load_corpus(source: &Path, target: &Path, prov: Option<&Path>) -> Result<deskmt::corpus::ParallelCorpus> {
    require_file(source)?;
    require_file(target)?;
    if let Some(p) = prov {
        require_file(p)?;
    }
    Ok(read_corpus(source, target, prov)?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTokenizer {
            kind,
            vocab,
            input,
            output,
        } => {
            let mut lines = Vec::new();
            for p in &input {
                lines.extend(ops::read_input(p)?);
            }
            ops::train_tokenizer(kind, vocab, &lines)?.save(&output)?;
        }
        Command::Encode {
            model,
            input,
            output,
            decode,
        } => {
            let tok = ops::load_tokenizer(&model)?;
            let lines = ops::read_input(&input)?;
            let out: Vec<String> = if decode {
                lines
                    .iter()
                    .enumerate()
                    .map(|(i, l)| {
                        let ids: Vec<usize> = l
                            .split_whitespace()
                            .map(|t| t.parse::<usize>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|e| {
                                CliError::new(Category::InvalidData, format!("line {}: {e}", i + 1))
                            })?;
                        Ok(tok.decode(&ids)?)
                    })
                    .collect::<Result<_>>()?
            } else {
                lines
                    .iter()
                    .map(|l| {
                        tok.encode(l)
                            .iter()
                            .map(usize::to_string)
                            .collect::<Vec<_>>()
                            .join(" ")
                    })
                    .collect()
            };
            write_lines(&output, &out)?;
        }
        Command::FilterCorpus {
            config,
            tokenizers,
            source,
            target,
            provenance,
            out_prefix,
            langid_samples,
            min_confidence,
        } => {
            let cfg = config.load()?;
            let src_tok = ops::load_tokenizer(&tokenizers.source_tokenizer)?;
            let tgt_tok = ops::load_tokenizer(&tokenizers.target_tokenizer)?;
            let corpus = load_corpus(&source, &target, provenance.as_deref())?;
            let kept = match min_confidence {
                Some(threshold) => {
                    let plan = &cfg.backtranslation;
                    let counter = SubwordCounter {
                        source: &src_tok,
                        target: &tgt_tok,
                    };
                    filter_synthetic(&corpus, threshold, plan.min_len, plan.max_len, plan.length_side, &counter)?
                }
                None => {
                    let langid = ops::build_langid(langid_samples.as_deref())?;
                    ops::filter_corpus(&corpus, &cfg.filter, langid.as_ref(), &src_tok, &tgt_tok)?
                }
            };
            info!("kept {} of {} pairs", kept.len(), corpus.len());
            write_corpus(
                &kept,
                &stem(&out_prefix, "src"),
                &stem(&out_prefix, "tgt"),
                Some(&stem(&out_prefix, "prov")),
            )?;
        }
        Command::Train {
            config,
            tokenizers,
            train_source,
            train_target,
            train_provenance,
            valid_source,
            valid_target,
            output,
            epoch_dir,
        } => {
            let cfg = config.load()?;
            let args = TrainArgs {
                tokenizers,
                train: (train_source, train_target, train_provenance),
                valid: (valid_source, valid_target),
                output,
                epoch_dir,
            };
            match cfg.precision {
                Precision::F32 => train::<f32>(&cfg, &args)?,
                Precision::F64 => train::<f64>(&cfg, &args)?,
            }
        }
        Command::Translate {
            config,
            tokenizers,
            checkpoint,
            input,
            output,
            scores,
        } => {
            let cfg = config.load()?;
            let files = (checkpoint, input, output, scores);
            match cfg.precision {
                Precision::F32 => translate::<f32>(&cfg, &tokenizers, &files)?,
                Precision::F64 => translate::<f64>(&cfg, &tokenizers, &files)?,
            }
        }
        Command::Backtranslate {
            config,
            tokenizers,
            checkpoint,
            input,
            out_prefix,
        } => {
            let cfg = config.load()?;
            let files = (checkpoint, input, out_prefix);
            match cfg.precision {
                Precision::F32 => backtranslate_file::<f32>(&cfg, &tokenizers, &files)?,
                Precision::F64 => backtranslate_file::<f64>(&cfg, &tokenizers, &files)?,
            }
        }
        Command::AverageCheckpoints {
            precision,
            output,
            inputs,
        } => match precision {
            Precision::F32 => average::<f32>(&inputs, &output)?,
            Precision::F64 => average::<f64>(&inputs, &output)?,
        },
        Command::Evaluate {
            config,
            hypotheses,
            references,
            report,
        } => {
            let cfg = config.load()?;
            let hyps = ops::read_input(&hypotheses)?;
            let refs = ops::read_input(&references)?;
            let r = ops::evaluate_lines(&hyps, &refs, &cfg.metrics)?;
            println!("{r}");
            if let Some(path) = report {
                ops::write_report(&r, &path)?;
            }
        }
        Command::RunPipeline { config } => {
            let cfg = config.load()?;
            let outcome = run_pipeline(&cfg)?;
            println!("forward: {}", outcome.forward);
            if let Some(b) = &outcome.baseline {
                println!("baseline: {b}");
            }
        }
        Command::MakeToyData {
            task,
            out,
            seed,
            train,
            monolingual,
        } => {
            let mut sizes = ToySizes::for_task(task);
            if let Some(n) = train {
                sizes.train = n;
            }
            if let Some(n) = monolingual {
                sizes.monolingual = n;
            }
            make_toy_data(task, &out, seed, &sizes)?;
        }
    }
    Ok(())
}

struct TrainArgs {
    tokenizers: TokenizerPair,
    train: (PathBuf, PathBuf, Option<PathBuf>),
    valid: (PathBuf, PathBuf),
    output: PathBuf,
    epoch_dir: Option<PathBuf>,
}

fn train<T: Scalar>(cfg: &PipelineConfig, a: &TrainArgs) -> Result<()> {
    let src_tok = ops::load_tokenizer(&a.tokenizers.source_tokenizer)?;
    let tgt_tok = ops::load_tokenizer(&a.tokenizers.target_tokenizer)?;
    let train = load_corpus(&a.train.0, &a.train.1, a.train.2.as_deref())?;
    let valid = load_corpus(&a.valid.0, &a.valid.1, None)?;
    let outcome = ops::train_model::<T>(&train, &valid, &src_tok, &tgt_tok, &cfg.model, &cfg.training)?;
    ops::save_checkpoint(&outcome.model, &a.output)?;
    if let Some(dir) = &a.epoch_dir {
        fs::create_dir_all(dir)?;
        for c in &outcome.epochs {
            ops::save_checkpoint(c, &dir.join(format!("{}.ckpt", c.label())))?;
        }
    }
    Ok(())
}

fn translate<T: Scalar>(
    cfg: &PipelineConfig,
    tokenizers: &TokenizerPair,
    (checkpoint, input, output, scores): &(PathBuf, PathBuf, PathBuf, Option<PathBuf>),
) -> Result<()> {
    let src_tok = ops::load_tokenizer(&tokenizers.source_tokenizer)?;
    let tgt_tok = ops::load_tokenizer(&tokenizers.target_tokenizer)?;
    let ckpt: Checkpoint<T> = ops::load_checkpoint(checkpoint)?;
    let model = ops::model_of(&ckpt)?;
    let lines = ops::read_input(input)?;
    let out = ops::translate_lines(&model, &src_tok, &tgt_tok, &cfg.decoding, &lines)?;
    let text: Vec<String> = out
        .iter()
        .map(|t| t.as_ref().map(|t| t.text.clone()).unwrap_or_default())
        .collect();
    write_lines(output, &text)?;
    if let Some(path) = scores {
        let s: Vec<String> = out
            .iter()
            .map(|t| match t.as_ref().and_then(|t| t.confidence) {
                Some(c) => format!("{c:?}"),
                None => "unfinished".to_string(),
            })
            .collect();
        write_lines(path, &s)?;
    }
    Ok(())
}

fn backtranslate_file<T: Scalar>(
    cfg: &PipelineConfig,
    tokenizers: &TokenizerPair,
    (checkpoint, input, out_prefix): &(PathBuf, PathBuf, PathBuf),
) -> Result<()> {
    let mono_tok = ops::load_tokenizer(&tokenizers.source_tokenizer)?;
    let other_tok = ops::load_tokenizer(&tokenizers.target_tokenizer)?;
    let ckpt: Checkpoint<T> = ops::load_checkpoint(checkpoint)?;
    deskmt::backtranslation::ensure_trained(&ckpt)?;
    let model = ops::model_of(&ckpt)?;
    ops::check_vocab(&model, &mono_tok, &other_tok)?;
    let lines = ops::read_input(input)?;
    let translator = Translator {
        model: &model,
        source: &mono_tok,
        target: &other_tok,
        beam: cfg.decoding.clone(),
    };
    let (synthetic, _) = backtranslate(&translator, &lines)?;
    write_corpus(
        &synthetic,
        &stem(out_prefix, "src"),
        &stem(out_prefix, "tgt"),
        Some(&stem(out_prefix, "prov")),
    )?;
    Ok(())
}

fn average<T: Scalar>(inputs: &[PathBuf], output: &Path) -> Result<()> {
    let ckpts: Vec<Checkpoint<T>> = inputs
        .iter()
        .map(|p| ops::load_checkpoint(p))
        .collect::<Result<_>>()?;
    let avg = average_checkpoints(&ckpts)?;
    info!("averaged {} checkpoints: {}", ckpts.len(), avg.averaged_from.join(", "));
    ops::save_checkpoint(&avg, output)
}
