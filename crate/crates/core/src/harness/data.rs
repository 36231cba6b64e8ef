use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::corpus::{load_jsonl, load_samples, LoadOptions, Record, Schema, UserSample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::EncoderKind;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

/// Train and validation splits, an optional test split, and the vocabulary
/// built from the training split for the bag encoder.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<UserSample>,
    pub val: Vec<UserSample>,
    pub test: Option<Vec<UserSample>>,
    pub vocab: Option<Vocabulary>,
}

impl Dataset {
    /// Builds the vocabulary from `train` (bag encoder) and encodes all splits.
    pub fn from_records(train: &[Record], val: &[Record], test: Option<&[Record]>, cfg: &RunConfig) -> Dataset {
        let vocab = match cfg.model.encoder {
            EncoderKind::Bag => Some(Vocabulary::build(train, cfg.data.min_count)),
            EncoderKind::Vectors => None,
        };
        let encode = |rs: &[Record]| -> Vec<UserSample> {
            rs.iter()
                .map(|r| match &vocab {
                    Some(v) => v.encode(r),
                    None => Vocabulary::passthrough(r),
                })
                .collect()
        };
        Dataset {
            train: encode(train),
            val: encode(val),
            test: test.map(encode),
            vocab,
        }
    }

    pub fn vocab_size(&self) -> Option<usize> {
        self.vocab.as_ref().map(Vocabulary::size)
    }
}

pub fn schema(cfg: &RunConfig) -> Schema {
    match cfg.model.encoder {
        EncoderKind::Bag => Schema::Text,
        EncoderKind::Vectors => Schema::Vectors,
    }
}

pub fn load_options(cfg: &RunConfig) -> Result<LoadOptions> {
    let stopwords = match &cfg.data.stopwords {
        Some(path) => Some(
            fs::read_to_string(path)?
                .split_whitespace()
                .map(str::to_lowercase)
                .collect::<HashSet<String>>(),
        ),
        None => None,
    };
    Ok(LoadOptions {
        traits: cfg.model.traits,
        max_posts: cfg.data.max_posts,
        max_len: cfg.data.max_len,
        stopwords,
    })
}

pub fn load_split(path: &Path, cfg: &RunConfig, vocab: Option<&Vocabulary>) -> Result<Vec<UserSample>> {
    let samples = load_samples(path, schema(cfg), &load_options(cfg)?, vocab)?;
    if samples.is_empty() {
        return Err(Error::Schema(format!("{} holds no users", path.display())));
    }
    Ok(samples)
}

/// Reads `train.jsonl`, `val.jsonl` and, when present, `test.jsonl` from `dir`.
pub fn load_dataset(dir: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let path = |name: &str| -> PathBuf { dir.join(name) };
    for required in [TRAIN_FILE, VAL_FILE] {
        if !path(required).is_file() {
            return Err(Error::Config(format!("missing {}", path(required).display())));
        }
    }
    let vocab = match cfg.model.encoder {
        EncoderKind::Bag => {
            let records = load_jsonl(&path(TRAIN_FILE), Schema::Text, &load_options(cfg)?)?;
            Some(Vocabulary::build(&records, cfg.data.min_count))
        }
        EncoderKind::Vectors => None,
    };
    let train = load_split(&path(TRAIN_FILE), cfg, vocab.as_ref())?;
    let val = load_split(&path(VAL_FILE), cfg, vocab.as_ref())?;
    let test = if path(TEST_FILE).is_file() {
        Some(load_split(&path(TEST_FILE), cfg, vocab.as_ref())?)
    } else {
        None
    };
    Ok(Dataset {
        train,
        val,
        test,
        vocab,
    })
}
