//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key must be known.
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `d`, `hid`, `depth`, `traits` | model widths, layers, trait count | 32, 16, 2, 4 |
//! | `mu`, `epsilon` | edge threshold and scaling guard | 0.5, 1e-6 |
//! | `dropout_encoder`, `dropout_other` | dropout rates | 0.1, 0.2 |
//! | `encoder` | `bag` or `vectors` | bag |
//! | `variant` | `ddgcn` or `gcn` | ddgcn |
//! | `l0` | `on` or `off` | on |
//! | `undirected`, `single_hop`, `no_special_node` | ablation switches | false |
//! | `fixed_graph` | `off` or a cosine cutoff | off |
//! | `epochs`, `batch_size`, `seed` | loop settings | 25, 8, 1 |
//! | `lr_encoder`, `lr_l2c`, `lr_other` | per-group Adam rates | 1e-5, 1e-5, 1e-3 |
//! | `adam_beta1`, `adam_beta2`, `adam_eps` | Adam constants | 0.9, 0.999, 1e-8 |
//! | `lambda_init`, `lr_lambda`, `lambda_ascent` | multiplier settings | 5.0, 1e-2, true |
//! | `max_posts`, `max_len`, `min_count` | ingestion limits | 50, 70, 1 |
//! | `stopwords` | path to a token list removed from posts | none |

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::{EncoderKind, ModelConfig, Propagation};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_encoder: f64,
    pub lr_l2c: f64,
    pub lr_other: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda_init: f64,
    pub lr_lambda: f64,
    /// `λ ← λ + lr·ce` when true, `λ ← λ − lr·ce` otherwise.
    pub lambda_ascent: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            batch_size: 8,
            seed: 1,
            lr_encoder: 1e-5,
            lr_l2c: 1e-5,
            lr_other: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda_init: 5.0,
            lr_lambda: 1e-2,
            lambda_ascent: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub max_posts: usize,
    pub max_len: usize,
    pub min_count: usize,
    pub stopwords: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            max_posts: 50,
            max_len: 70,
            min_count: 1,
            stopwords: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

/// Applies one model key. Returns `Ok(false)` for keys it does not own.
pub fn apply_model_key(m: &mut ModelConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "d" => m.d = parse_num(key, v)?,
        "hid" => m.hid = parse_num(key, v)?,
        "depth" => m.depth = parse_num(key, v)?,
        "traits" => m.traits = parse_num(key, v)?,
        "mu" => m.l2c.mu = parse_num(key, v)?,
        "epsilon" => m.l2c.eps = parse_num(key, v)?,
        "dropout_encoder" => m.dropout_encoder = parse_num(key, v)?,
        "dropout_other" => m.dropout_other = parse_num(key, v)?,
        "encoder" => {
            m.encoder = match v {
                "bag" => EncoderKind::Bag,
                "vectors" => EncoderKind::Vectors,
                _ => return Err(Error::Config(format!("encoder: unknown kind {v:?}"))),
            }
        }
        "variant" => {
            m.propagation = match v {
                "ddgcn" => Propagation::Decoupled,
                "gcn" => Propagation::PlainGcn,
                _ => return Err(Error::Config(format!("variant: unknown variant {v:?}"))),
            }
        }
        "l0" => m.l0_enabled = parse_bool(key, v)?,
        "undirected" => m.l2c.undirected = parse_bool(key, v)?,
        "single_hop" => m.l2c.single_hop = parse_bool(key, v)?,
        "no_special_node" => m.no_special_node = parse_bool(key, v)?,
        "fixed_graph" => {
            m.fixed_graph = match v {
                "off" | "none" => None,
                _ => Some(parse_num(key, v)?),
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

fn apply_key(c: &mut RunConfig, key: &str, v: &str) -> Result<()> {
    if apply_model_key(&mut c.model, key, v)? {
        return Ok(());
    }
    let t = &mut c.train;
    match key {
        "epochs" => t.epochs = parse_num(key, v)?,
        "batch_size" => t.batch_size = parse_num(key, v)?,
        "seed" => t.seed = parse_num(key, v)?,
        "lr_encoder" => t.lr_encoder = parse_num(key, v)?,
        "lr_l2c" => t.lr_l2c = parse_num(key, v)?,
        "lr_other" => t.lr_other = parse_num(key, v)?,
        "adam_beta1" => t.adam_beta1 = parse_num(key, v)?,
        "adam_beta2" => t.adam_beta2 = parse_num(key, v)?,
        "adam_eps" => t.adam_eps = parse_num(key, v)?,
        "lambda_init" => t.lambda_init = parse_num(key, v)?,
        "lr_lambda" => t.lr_lambda = parse_num(key, v)?,
        "lambda_ascent" => t.lambda_ascent = parse_bool(key, v)?,
        "max_posts" => c.data.max_posts = parse_num(key, v)?,
        "max_len" => c.data.max_len = parse_num(key, v)?,
        "min_count" => c.data.min_count = parse_num(key, v)?,
        "stopwords" => c.data.stopwords = Some(PathBuf::from(v)),
        _ => return Err(Error::Config(format!("unknown key {key:?}"))),
    }
    Ok(())
}

/// Splits `key = value` lines, skipping blanks and comments.
pub fn pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((i + 1, k.trim().to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

pub fn model_to_text(m: &ModelConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "d = {}", m.d);
    let _ = writeln!(s, "hid = {}", m.hid);
    let _ = writeln!(s, "depth = {}", m.depth);
    let _ = writeln!(s, "traits = {}", m.traits);
    let _ = writeln!(s, "mu = {:?}", m.l2c.mu);
    let _ = writeln!(s, "epsilon = {:?}", m.l2c.eps);
    let _ = writeln!(s, "dropout_encoder = {:?}", m.dropout_encoder);
    let _ = writeln!(s, "dropout_other = {:?}", m.dropout_other);
    let _ = writeln!(
        s,
        "encoder = {}",
        match m.encoder {
            EncoderKind::Bag => "bag",
            EncoderKind::Vectors => "vectors",
        }
    );
    let _ = writeln!(
        s,
        "variant = {}",
        match m.propagation {
            Propagation::Decoupled => "ddgcn",
            Propagation::PlainGcn => "gcn",
        }
    );
    let _ = writeln!(s, "l0 = {}", if m.l0_enabled { "on" } else { "off" });
    let _ = writeln!(s, "undirected = {}", m.l2c.undirected);
    let _ = writeln!(s, "single_hop = {}", m.l2c.single_hop);
    let _ = writeln!(s, "no_special_node = {}", m.no_special_node);
    match m.fixed_graph {
        Some(t) => {
            let _ = writeln!(s, "fixed_graph = {t:?}");
        }
        None => {
            let _ = writeln!(s, "fixed_graph = off");
        }
    }
    s
}

pub fn model_from_text(text: &str) -> Result<ModelConfig> {
    let mut m = ModelConfig::default();
    for (line, k, v) in pairs(text)? {
        if !apply_model_key(&mut m, &k, &v)? {
            return Err(Error::Config(format!("line {line}: unknown model key {k:?}")));
        }
    }
    Ok(m)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (line, k, v) in pairs(text)? {
            apply_key(&mut c, &k, &v).map_err(|e| {
                Error::Config(format!(
                    "line {line}: {}",
                    e.to_string().trim_start_matches("config error: ")
                ))
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        apply_key(self, key, value)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=crate::model::LAMBDA_MAX).contains(&t.lambda_init) {
            return Err(Error::Config(format!(
                "lambda_init {} outside [0, {}]",
                t.lambda_init,
                crate::model::LAMBDA_MAX
            )));
        }
        for (k, v) in [
            ("lr_encoder", t.lr_encoder),
            ("lr_l2c", t.lr_l2c),
            ("lr_other", t.lr_other),
            ("lr_lambda", t.lr_lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be a non-negative number")));
            }
        }
        if self.data.max_posts == 0 || self.data.max_len == 0 {
            return Err(Error::Config("max_posts and max_len must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = model_to_text(&self.model);
        let t = &self.train;
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "lr_encoder = {:?}", t.lr_encoder);
        let _ = writeln!(s, "lr_l2c = {:?}", t.lr_l2c);
        let _ = writeln!(s, "lr_other = {:?}", t.lr_other);
        let _ = writeln!(s, "adam_beta1 = {:?}", t.adam_beta1);
        let _ = writeln!(s, "adam_beta2 = {:?}", t.adam_beta2);
        let _ = writeln!(s, "adam_eps = {:?}", t.adam_eps);
        let _ = writeln!(s, "lambda_init = {:?}", t.lambda_init);
        let _ = writeln!(s, "lr_lambda = {:?}", t.lr_lambda);
        let _ = writeln!(s, "lambda_ascent = {}", t.lambda_ascent);
        let _ = writeln!(s, "max_posts = {}", self.data.max_posts);
        let _ = writeln!(s, "max_len = {}", self.data.max_len);
        let _ = writeln!(s, "min_count = {}", self.data.min_count);
        if let Some(p) = &self.data.stopwords {
            let _ = writeln!(s, "stopwords = {}", p.display());
        }
        s
    }
}
