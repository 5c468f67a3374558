//! Writes the synthetic corpora used by the toy profile.

use std::fs;
use std::path::Path;

use clap::ValueEnum;
use deskmt::corpus::{write_corpus, write_lines};
use deskmt::toy::{reversal_pairs, LanguagePairSpec, ToyLanguagePair};
use serde::Serialize;

use crate::error::Result;
use crate::ops::write_langid_samples;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyTask {
    /// Latin-script source, Devanagari-script target, with monolingual
    /// target text and language-identification samples.
    Translation,
    /// Single-letter words, target is the source reversed.
    Reversal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToySizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub monolingual: usize,
    pub langid_per_language: usize,
}

impl ToySizes {
    pub fn for_task(task: ToyTask) -> Self {
        match task {
            ToyTask::Translation => ToySizes {
                train: 200,
                valid: 100,
                test: 200,
                monolingual: 2000,
                langid_per_language: 150,
            },
            ToyTask::Reversal => ToySizes {
                train: 2000,
                valid: 200,
                test: 200,
                monolingual: 0,
                langid_per_language: 0,
            },
        }
    }
}

fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k)
}

/// Writes `{train,valid,test}.{src,tgt}`, plus `mono.tgt` and `langid.tsv`
/// for the translation task.
pub fn make_toy_data(task: ToyTask, out: &Path, seed: u64, sizes: &ToySizes) -> Result<()> {
    fs::create_dir_all(out)?;
    let splits: Vec<(&str, usize, u64)> = vec![
        ("train", sizes.train, 1),
        ("valid", sizes.valid, 2),
        ("test", sizes.test, 3),
    ];
    match task {
        ToyTask::Reversal => {
            for (name, n, k) in splits {
                let c = reversal_pairs(n, 26, 3, 10, sub_seed(seed, k));
                write_corpus(&c, &out.join(format!("{name}.src")), &out.join(format!("{name}.tgt")), None)?;
            }
        }
        ToyTask::Translation => {
            let lp = ToyLanguagePair::new(LanguagePairSpec::default(), seed);
            for (name, n, k) in splits {
                let c = if name == "train" {
                    lp.noisy_parallel(n, sub_seed(seed, k))
                } else {
                    lp.parallel(n, sub_seed(seed, k))
                };
                write_corpus(&c, &out.join(format!("{name}.src")), &out.join(format!("{name}.tgt")), None)?;
            }
            write_lines(&out.join("mono.tgt"), &lp.monolingual_target(sizes.monolingual, sub_seed(seed, 4)))?;
            write_langid_samples(
                &out.join("langid.tsv"),
                &lp.langid_samples(sizes.langid_per_language, sub_seed(seed, 5)),
            )?;
        }
    }
    Ok(())
}
