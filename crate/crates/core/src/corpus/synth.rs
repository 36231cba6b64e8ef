//! Synthetic multi-trait corpora with planted signal tokens.
//!
//! Every trait owns two disjoint sets of signal tokens, one per class. A user
//! with label `y` on trait `t` gets one token from set `(t, y)` planted in each
//! of their signal posts. The remaining posts carry only noise tokens.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_jsonl, RawPosts, Record};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub train_users: usize,
    pub val_users: usize,
    pub test_users: usize,
    pub posts_per_user: usize,
    pub traits: usize,
    /// Total distinct tokens: signal tokens plus noise tokens.
    pub vocab: usize,
    /// Fraction of each user's posts that carry no signal.
    pub noise_ratio: f64,
    pub signal_per_class: usize,
    pub tokens_per_post: usize,
    /// Probability of class 1, per trait. Empty means 0.5 everywhere.
    pub positive_rates: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_users: 300,
            val_users: 100,
            test_users: 100,
            posts_per_user: 8,
            traits: 4,
            vocab: 200,
            noise_ratio: 0.5,
            signal_per_class: 2,
            tokens_per_post: 6,
            positive_rates: Vec::new(),
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub train: Vec<Record>,
    pub val: Vec<Record>,
    pub test: Vec<Record>,
}

pub fn signal_token(trait_idx: usize, class: u8, k: usize) -> String {
    format!("t{trait_idx}c{class}k{k}")
}

fn noise_token(i: usize) -> String {
    format!("w{i}")
}

impl SynthConfig {
    fn noise_tokens(&self) -> usize {
        self.vocab.saturating_sub(2 * self.traits * self.signal_per_class)
    }

    fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.traits == 0 || self.posts_per_user == 0 || self.signal_per_class == 0 {
            return cfg("traits, posts_per_user and signal_per_class must be positive".into());
        }
        if self.vocab < 2 * self.traits * self.signal_per_class + 1 {
            return cfg(format!(
                "vocab {} cannot hold {} disjoint signal tokens plus noise",
                self.vocab,
                2 * self.traits * self.signal_per_class
            ));
        }
        if self.tokens_per_post < self.traits {
            return cfg(format!(
                "tokens_per_post {} cannot fit one signal token per trait ({})",
                self.tokens_per_post, self.traits
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_ratio) {
            return cfg(format!("noise_ratio {} outside [0, 1]", self.noise_ratio));
        }
        if !self.positive_rates.is_empty() && self.positive_rates.len() != self.traits {
            return cfg("positive_rates needs one entry per trait".into());
        }
        if self.positive_rates.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return cfg("positive_rates must lie in [0, 1]".into());
        }
        Ok(())
    }

    fn positive_rate(&self, t: usize) -> f64 {
        self.positive_rates.get(t).copied().unwrap_or(0.5)
    }

    /// Signal posts per user: at least one unless the corpus is pure noise.
    fn signal_posts(&self) -> usize {
        let n = self.posts_per_user;
        let noisy = (self.noise_ratio * n as f64).round() as usize;
        if self.noise_ratio < 1.0 {
            n - noisy.min(n - 1)
        } else {
            0
        }
    }
}

fn user(cfg: &SynthConfig, id: String, rng: &mut ChaCha8Rng) -> Record {
    let noise = cfg.noise_tokens();
    let labels: Vec<u8> = (0..cfg.traits)
        .map(|t| u8::from(rng.gen_bool(cfg.positive_rate(t))))
        .collect();
    let mut order: Vec<usize> = (0..cfg.posts_per_user).collect();
    order.shuffle(rng);
    let signal_posts = cfg.signal_posts();
    let mut posts = vec![Vec::new(); cfg.posts_per_user];
    for (rank, &p) in order.iter().enumerate() {
        let mut tokens: Vec<String> = (0..cfg.tokens_per_post)
            .map(|_| noise_token(rng.gen_range(0..noise)))
            .collect();
        if rank < signal_posts {
            let mut slots: Vec<usize> = (0..cfg.tokens_per_post).collect();
            slots.shuffle(rng);
            for (t, &y) in labels.iter().enumerate() {
                let k = rng.gen_range(0..cfg.signal_per_class);
                tokens[slots[t]] = signal_token(t, y, k);
            }
        }
        posts[p] = tokens;
    }
    Record {
        id,
        posts: RawPosts::Text(posts),
        labels,
    }
}

/// Generates the three splits. Deterministic in `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut split =
        |name: &str, n: usize| -> Vec<Record> { (0..n).map(|i| user(cfg, format!("{name}-{i}"), &mut rng)).collect() };
    let train = split("train", cfg.train_users);
    let val = split("val", cfg.val_users);
    let test = split("test", cfg.test_users);
    Ok(SynthCorpus { train, val, test })
}

/// Writes `train.jsonl`, `val.jsonl` and, unless the test split is empty,
/// `test.jsonl` into `dir`.
pub fn synth_generate(cfg: &SynthConfig, dir: &Path) -> Result<SynthCorpus> {
    let corpus = generate(cfg)?;
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("train.jsonl"), &corpus.train)?;
    write_jsonl(&dir.join("val.jsonl"), &corpus.val)?;
    if !corpus.test.is_empty() {
        write_jsonl(&dir.join("test.jsonl"), &corpus.test)?;
    }
    Ok(corpus)
}

/// Reference classifier that reads the planted tokens directly: for each
/// trait, count class-0 and class-1 signal tokens and pick the majority
/// (ties go to class 0).
pub fn signal_vote(record: &Record, traits: usize) -> Vec<u8> {
    let mut votes = vec![[0usize; 2]; traits];
    if let RawPosts::Text(posts) = &record.posts {
        for tok in posts.iter().flatten() {
            if let Some((t, c)) = parse_signal(tok) {
                if t < traits {
                    votes[t][c as usize] += 1;
                }
            }
        }
    }
    votes.iter().map(|v| u8::from(v[1] > v[0])).collect()
}

fn parse_signal(tok: &str) -> Option<(usize, u8)> {
    let rest = tok.strip_prefix('t')?;
    let (t, rest) = rest.split_once('c')?;
    let (c, k) = rest.split_once('k')?;
    k.parse::<usize>().ok()?;
    let c: u8 = c.parse().ok()?;
    (c <= 1).then_some(())?;
    Some((t.parse().ok()?, c))
}

pub fn contains_signal(post: &[String]) -> bool {
    post.iter().any(|t| parse_signal(t).is_some())
}
