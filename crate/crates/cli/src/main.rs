use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ddgcn::config::RunConfig;
use ddgcn::corpus::synth::{signal_vote, synth_generate, SynthConfig};
use ddgcn::corpus::Vocabulary;
use ddgcn::exec::Execution;
use ddgcn::harness::data::{TEST_FILE, VAL_FILE};
use ddgcn::harness::sparsity;
use ddgcn::harness::sweep::{self, DEFAULT_SEEDS};
use ddgcn::harness::train::{CHECKPOINT_FILE, CONFIG_FILE, VOCAB_FILE};
use ddgcn::harness::{
    depth_grid, evaluate_best, evaluate_checkpoint, load_dataset, load_split, sparsity_report, sweep_depth, train,
    write_artifacts, MetricsReport,
};
use ddgcn::model::checkpoint::Checkpoint;
use ddgcn::model::gradcheck::{model_gradcheck, GradcheckDims, GradcheckOptions};
use ddgcn::model::{EncoderKind, Propagation};
use ddgcn::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ddgcn",
    version,
    about = "Dynamic deep graph convolution for multi-trait user classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint, metrics and sparsity trace.
    Train(TrainArgs),
    /// Score a checkpoint on a data split.
    Eval(CheckpointArgs),
    /// Finite-difference check of the full model's gradients.
    Gradcheck(GradcheckArgs),
    /// Edge-sparsity ratios of a checkpoint on a data split.
    Sparsity(CheckpointArgs),
    /// Write a synthetic corpus with planted signal tokens.
    Synth(SynthArgs),
    /// Train every depth of the sweep grid over several seeds.
    SweepDepth(SweepArgs),
}

/// Flags that override the configuration file.
#[derive(Args)]
struct ModelFlags {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    traits: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = ["ddgcn", "gcn"])]
    variant: Option<String>,
    #[arg(long, value_parser = ["on", "off"])]
    l0: Option<String>,
    #[arg(long)]
    undirected: bool,
    #[arg(long)]
    single_hop: bool,
    /// Replace the learned graphs with a fixed cosine-similarity graph.
    #[arg(long, value_name = "COSINE_THRESHOLD")]
    fixed_graph: Option<f64>,
    #[arg(long)]
    no_special_node: bool,
    #[arg(long, value_parser = ["bag", "vectors"])]
    encoder: Option<String>,
}

impl ModelFlags {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(existing(path)?)?,
            None => RunConfig::default(),
        };
        let mut set = |k: &str, v: String| cfg.set(k, &v);
        if let Some(s) = self.seed {
            set("seed", s.to_string())?;
        }
        if let Some(d) = self.depth {
            set("depth", d.to_string())?;
        }
        if let Some(t) = self.traits {
            set("traits", t.to_string())?;
        }
        if let Some(e) = self.epochs {
            set("epochs", e.to_string())?;
        }
        if let Some(v) = &self.variant {
            set("variant", v.clone())?;
        }
        if let Some(v) = &self.l0 {
            set("l0", v.clone())?;
        }
        if self.undirected {
            set("undirected", "true".into())?;
        }
        if self.single_hop {
            set("single_hop", "true".into())?;
        }
        if let Some(t) = self.fixed_graph {
            set("fixed_graph", t.to_string())?;
        }
        if self.no_special_node {
            set("no_special_node", "true".into())?;
        }
        if let Some(e) = &self.encoder {
            set("encoder", e.clone())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding train.jsonl, val.jsonl and optionally test.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the run artifacts.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Checkpoint file or a run directory containing one.
    #[arg(long)]
    checkpoint: PathBuf,
    /// A JSONL split, or a directory (test.jsonl, else val.jsonl).
    #[arg(long)]
    data: PathBuf,
    /// Data options; defaults to the run directory's config.txt.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Vocabulary for the bag encoder; defaults to the run directory's vocab.txt.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    d: usize,
    #[arg(long, default_value_t = 5)]
    hid: usize,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 4)]
    posts: usize,
    #[arg(long, default_value_t = 2)]
    traits: usize,
    #[arg(long, value_parser = ["ddgcn", "gcn"], default_value = "ddgcn")]
    variant: String,
    #[arg(long)]
    undirected: bool,
    #[arg(long)]
    single_hop: bool,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    train_users: usize,
    #[arg(long, default_value_t = 100)]
    val_users: usize,
    #[arg(long, default_value_t = 100)]
    test_users: usize,
    #[arg(long, default_value_t = 8)]
    posts: usize,
    #[arg(long, default_value_t = 4)]
    traits: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 200)]
    vocab: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Write sweep_depth.csv into this directory as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated depths; defaults to 1-6 then every third up to 24.
    #[arg(long, value_delimiter = ',')]
    depths: Vec<usize>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[command(flatten)]
    model: ModelFlags,
}

fn existing(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Config(format!("{} does not exist", path.display())))
    }
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.model.resolve()?;
    let data = load_dataset(existing(&a.data)?, &cfg)?;
    let exec = Execution::default();
    let outcome = train(&cfg, &data, exec)?;
    for h in &outcome.history {
        eprintln!(
            "epoch {:>3}  loss {:.6}  ce {:.6}  l0 {:.1}  lambda {:.4}  val {:.4}",
            h.epoch, h.loss, h.ce, h.l0, h.lambda, h.val_average
        );
    }
    let test = match &data.test {
        Some(samples) => Some(evaluate_best(&outcome, samples, exec)?.metrics),
        None => None,
    };
    write_artifacts(&a.out, &cfg, &data, &outcome, test.as_ref())?;
    println!("{}", outcome.best_metrics.to_json());
    if let Some(t) = &test {
        eprintln!("test {}", t.to_json());
    }
    Ok(())
}

/// Resolves the checkpoint, its data options and vocabulary, and the samples to score.
fn checkpoint_inputs(a: &CheckpointArgs) -> Result<(Checkpoint, Vec<ddgcn::corpus::UserSample>)> {
    let path = existing(&a.checkpoint)?;
    let (file, run_dir) = if path.is_dir() {
        (path.join(CHECKPOINT_FILE), path.to_path_buf())
    } else {
        (
            path.to_path_buf(),
            path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        )
    };
    let checkpoint = Checkpoint::load(existing(&file)?)?;
    let mut cfg = match &a.config {
        Some(c) => RunConfig::load(existing(c)?)?,
        None if run_dir.join(CONFIG_FILE).is_file() => RunConfig::load(&run_dir.join(CONFIG_FILE))?,
        None => RunConfig::default(),
    };
    cfg.model = checkpoint.config.clone();
    let vocab = match cfg.model.encoder {
        EncoderKind::Bag => {
            let v = a.vocab.clone().unwrap_or_else(|| run_dir.join(VOCAB_FILE));
            let vocab = Vocabulary::load(existing(&v)?)?;
            Some(vocab)
        }
        EncoderKind::Vectors => None,
    };
    let data = existing(&a.data)?;
    let split = if data.is_dir() {
        [TEST_FILE, VAL_FILE]
            .iter()
            .map(|f| data.join(f))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::Config(format!("{} holds neither {TEST_FILE} nor {VAL_FILE}", data.display())))?
    } else {
        data.to_path_buf()
    };
    let samples = load_split(&split, &cfg, vocab.as_ref())?;
    Ok((checkpoint, samples))
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    print!("{text}");
    if let Some(p) = out {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(p, text)?;
    }
    Ok(())
}

fn run_eval(a: &CheckpointArgs) -> Result<()> {
    let (checkpoint, samples) = checkpoint_inputs(a)?;
    let ev = evaluate_checkpoint(&checkpoint, &samples, Execution::default())?;
    emit(&(ev.metrics.to_json() + "\n"), a.out.as_deref())
}

fn run_sparsity(a: &CheckpointArgs) -> Result<()> {
    let (checkpoint, samples) = checkpoint_inputs(a)?;
    let rows = sparsity_report(&checkpoint, &samples, Execution::default())?;
    emit(&sparsity::to_csv(&rows), a.out.as_deref())
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let opts = GradcheckOptions {
        dims: GradcheckDims {
            d: a.d,
            hid: a.hid,
            depth: a.depth,
            posts: a.posts,
            traits: a.traits,
            ..GradcheckDims::default()
        },
        seed: a.seed,
        propagation: if a.variant == "gcn" {
            Propagation::PlainGcn
        } else {
            Propagation::Decoupled
        },
        undirected: a.undirected,
        single_hop: a.single_hop,
        ..GradcheckOptions::default()
    };
    let report = model_gradcheck(&opts)?;
    for (name, err) in &report.per_param {
        println!("{name:<28} {err:.3e}");
    }
    let pass = report.passes(a.tolerance);
    println!(
        "max relative error {:.3e} (tolerance {:.0e}, seed {}, {} kept edges, {} evaluations): {}",
        report.max_rel_error,
        a.tolerance,
        report.seed,
        report.kept_edges,
        report.evaluations,
        if pass { "pass" } else { "FAIL" }
    );
    if let (false, Some((name, i, analytic, numeric))) = (pass, &report.worst) {
        println!("worst entry {name}[{i}]: analytic {analytic:.9e} numeric {numeric:.9e}");
    }
    Ok(pass)
}

fn run_synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        train_users: a.train_users,
        val_users: a.val_users,
        test_users: a.test_users,
        posts_per_user: a.posts,
        traits: a.traits,
        vocab: a.vocab,
        noise_ratio: a.noise,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let corpus = synth_generate(&cfg, &a.out)?;
    let labels: Vec<Vec<u8>> = corpus.test.iter().map(|r| r.labels.clone()).collect();
    let votes: Vec<Vec<u8>> = corpus.test.iter().map(|r| signal_vote(r, a.traits)).collect();
    if !labels.is_empty() {
        let oracle = MetricsReport::score(&labels, &votes, a.traits, a.seed, 0)?;
        eprintln!("signal-vote macro-F1 on test: {:.4}", oracle.average);
    }
    eprintln!(
        "wrote {} / {} / {} users to {}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        a.out.display()
    );
    Ok(())
}

fn run_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = a.model.resolve()?;
    let data = load_dataset(existing(&a.data)?, &cfg)?;
    let depths = if a.depths.is_empty() {
        depth_grid()
    } else {
        a.depths.clone()
    };
    let seeds = if a.seeds.is_empty() {
        DEFAULT_SEEDS.to_vec()
    } else {
        a.seeds.clone()
    };
    let rows = sweep_depth(&cfg, &data, &depths, &seeds, Execution::default())?;
    let out = a.out.as_ref().map(|d| d.join("sweep_depth.csv"));
    emit(&sweep::sweep_csv(&rows), out.as_deref())
}

fn exit_for(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(if err.is_usage() { 1 } else { 2 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Sparsity(a) => run_sparsity(a),
        Command::Synth(a) => run_synth(a),
        Command::SweepDepth(a) => run_sweep(a),
        Command::Gradcheck(a) => match run_gradcheck(a) {
            Ok(true) => return ExitCode::SUCCESS,
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit_for(&e),
    }
}
