use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::Dataset;
use super::metrics::{confusions, Confusion, MetricsReport};
use super::optim::{Adam, LambdaState};
use super::sparsity::{self, EdgeTally, SparsityRow};
use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::corpus::UserSample;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::checkpoint::Checkpoint;
use crate::model::{loss, ForwardTrace, Mode, Model, ParamStore};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.json";
pub const TEST_METRICS_FILE: &str = "test_metrics.json";
pub const SPARSITY_FILE: &str = "sparsity.csv";
pub const HISTORY_FILE: &str = "history.csv";

/// Metrics and per-cell edge counts of one pass over a dataset.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    /// `tallies[trait][layer]` summed over users.
    pub tallies: Vec<Vec<EdgeTally>>,
}

/// Eval-mode pass over `samples`, fanned out over users.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    samples: &[UserSample],
    seed: u64,
    epoch: usize,
    exec: Execution,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let cfg = model.config();
    let per_user = exec.map(samples, |s| -> Result<(Vec<u8>, Vec<Vec<EdgeTally>>)> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = model.forward(&mut g, &bound, s, Mode::Eval, &mut rng)?;
        let tallies = trace
            .traits
            .iter()
            .map(|tt| {
                tt.layers
                    .iter()
                    .map(|lg| EdgeTally::of(g.value(lg.adjacency)))
                    .collect()
            })
            .collect();
        Ok((trace.predict(&g), tallies))
    });
    let mut predictions = Vec::with_capacity(samples.len());
    let mut tallies = vec![vec![EdgeTally::default(); cfg.depth]; cfg.traits];
    for r in per_user {
        let (p, t) = r?;
        predictions.push(p);
        for (acc, user) in tallies.iter_mut().zip(&t) {
            for (a, u) in acc.iter_mut().zip(user) {
                a.merge(u);
            }
        }
    }
    let labels: Vec<Vec<u8>> = samples.iter().map(|s| s.labels.clone()).collect();
    let confusion: Vec<Confusion> = confusions(&labels, &predictions, cfg.traits)?;
    Ok(Evaluation {
        metrics: MetricsReport::from_confusion(confusion, seed, epoch),
        tallies,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub l0: f64,
    pub lambda: f64,
    pub val_average: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Parameters at the epoch with the best validation average.
    pub best: Checkpoint,
    pub best_metrics: MetricsReport,
    /// Parameters after the final epoch.
    pub last: ParamStore,
    pub history: Vec<EpochLog>,
    /// Validation-set sparsity after every epoch, epoch 0 being the
    /// initialization.
    pub sparsity: Vec<SparsityRow>,
    /// Multiplier after every optimizer step; empty when the edge penalty is
    /// off.
    pub lambda_trace: Vec<f64>,
}

fn snapshot(cfg: &RunConfig, store: &ParamStore, epoch: usize) -> Checkpoint {
    let mut meta = BTreeMap::new();
    meta.insert("epoch".to_owned(), epoch.to_string());
    meta.insert("seed".to_owned(), cfg.train.seed.to_string());
    Checkpoint {
        config: cfg.model.clone(),
        params: store.clone(),
        meta,
    }
}

/// Names the first trait and layer whose values went non-finite.
fn diagnose(g: &Graph, traces: &[ForwardTrace], epoch: usize, batch: usize) -> Error {
    let at = format!("epoch {epoch}, batch {batch}");
    for tr in traces {
        if !g.value(tr.nodes.h).is_finite() {
            return Error::Numeric(format!("non-finite loss at {at}: encoder output"));
        }
        for (t, tt) in tr.traits.iter().enumerate() {
            for (k, lg) in tt.layers.iter().enumerate() {
                if !g.value(lg.adjacency).is_finite() {
                    return Error::Numeric(format!("non-finite loss at {at}: trait {t} layer {} graph", k + 1));
                }
                if !g.value(tt.stack[k + 1]).is_finite() {
                    return Error::Numeric(format!("non-finite loss at {at}: trait {t} layer {} features", k + 1));
                }
            }
            if !g.value(tt.h_out).is_finite() {
                return Error::Numeric(format!("non-finite loss at {at}: trait {t} layer attention"));
            }
            if !g.value(tt.logits).is_finite() {
                return Error::Numeric(format!("non-finite loss at {at}: trait {t} classifier"));
            }
            if !g.value(tt.l0).is_finite() {
                return Error::Numeric(format!("non-finite loss at {at}: trait {t} edge penalty"));
            }
        }
    }
    Error::Numeric(format!("non-finite loss at {at}: loss assembly"))
}

fn check_labels(samples: &[UserSample], traits: usize, split: &str) -> Result<()> {
    for s in samples {
        if s.labels.len() != traits {
            return Err(Error::Schema(format!(
                "{split} user {} has {} labels, expected {traits}",
                s.id,
                s.labels.len()
            )));
        }
        if let Some(&l) = s.labels.iter().find(|&&l| l > 1) {
            return Err(Error::Label {
                label: l as usize,
                classes: 2,
            });
        }
    }
    Ok(())
}

/// Trains for the configured epochs and keeps the best validation checkpoint.
///
/// Initialization, batch order and dropout draw from three ChaCha8 streams of
/// the configured seed, so a run is a pure function of `(cfg, data)`.
pub fn train(cfg: &RunConfig, data: &Dataset, exec: Execution) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("training needs non-empty train and val splits".into()));
    }
    check_labels(&data.train, cfg.model.traits, "train")?;
    check_labels(&data.val, cfg.model.traits, "val")?;
    let seed = cfg.train.seed;
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s);
        rng
    };
    let (mut init_rng, mut order_rng, mut drop_rng) = (stream(0), stream(1), stream(2));

    let (model, mut store) = Model::init(cfg.model.clone(), data.vocab_size(), &mut init_rng)?;
    let mut adam = Adam::from_config(&store, &cfg.train);
    let mut lambda = LambdaState::new(cfg.train.lambda_init, cfg.train.lr_lambda, cfg.train.lambda_ascent);
    let l0_on = cfg.model.l0_enabled;

    let first = evaluate(&model, &store, &data.val, seed, 0, exec)?;
    let mut sparsity_rows = sparsity::rows(0, &first.tallies);
    let mut best_metrics = first.metrics;
    let mut best = snapshot(cfg, &store, 0);
    let mut history = Vec::with_capacity(cfg.train.epochs);
    let mut lambda_trace = Vec::new();

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.train.epochs {
        order.shuffle(&mut order_rng);
        let (mut sum_loss, mut sum_ce, mut sum_l0, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (b, batch) in order.chunks(cfg.train.batch_size).enumerate() {
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let traces = batch
                .iter()
                .map(|&i| model.forward(&mut g, &bound, &data.train[i], Mode::Train, &mut drop_rng))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<&[u8]> = batch.iter().map(|&i| data.train[i].labels.as_slice()).collect();
            let terms = loss(&mut g, &traces, &labels, lambda.value, &cfg.model)?;
            let total = g.value(terms.total).item();
            if !total.is_finite() {
                return Err(diagnose(&g, &traces, epoch, b));
            }
            g.backward(terms.total)?;
            let grads = bound.grads(&g);
            if let Some(((_, p), _)) = store.iter().zip(&grads).find(|(_, gr)| !gr.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at epoch {epoch}, batch {b}: parameter {}",
                    p.name
                )));
            }
            adam.step(&mut store, &grads)?;
            let ce = g.value(terms.ce).item();
            if l0_on {
                lambda.update(ce);
                lambda_trace.push(lambda.value);
            }
            sum_loss += total;
            sum_ce += ce;
            sum_l0 += g.value(terms.l0).item();
            batches += 1;
        }
        let ev = evaluate(&model, &store, &data.val, seed, epoch, exec)?;
        sparsity_rows.extend(sparsity::rows(epoch, &ev.tallies));
        let n = batches.max(1) as f64;
        history.push(EpochLog {
            epoch,
            loss: sum_loss / n,
            ce: sum_ce / n,
            l0: sum_l0 / n,
            lambda: lambda.value,
            val_average: ev.metrics.average,
        });
        if ev.metrics.average > best_metrics.average {
            best_metrics = ev.metrics;
            best = snapshot(cfg, &store, epoch);
        }
    }
    Ok(TrainOutcome {
        model,
        best,
        best_metrics,
        last: store,
        history,
        sparsity: sparsity_rows,
        lambda_trace,
    })
}

pub fn history_csv(history: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,ce,l0,lambda,val_average\n");
    for h in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            h.epoch, h.loss, h.ce, h.l0, h.lambda, h.val_average
        );
    }
    s
}

/// Evaluates the best checkpoint of `outcome` on `samples`.
pub fn evaluate_best(outcome: &TrainOutcome, samples: &[UserSample], exec: Execution) -> Result<Evaluation> {
    let epoch = outcome.best_metrics.epoch;
    evaluate(
        &outcome.model,
        &outcome.best.params,
        samples,
        outcome.best_metrics.seed,
        epoch,
        exec,
    )
}

/// Writes the checkpoint, vocabulary, configuration, metrics, sparsity trace
/// and loss history into `dir`.
pub fn write_artifacts(
    dir: &Path,
    cfg: &RunConfig,
    data: &Dataset,
    outcome: &TrainOutcome,
    test: Option<&MetricsReport>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    outcome.best.save(&dir.join(CHECKPOINT_FILE))?;
    if let Some(v) = &data.vocab {
        v.save(&dir.join(VOCAB_FILE))?;
    }
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    fs::write(dir.join(METRICS_FILE), outcome.best_metrics.to_json() + "\n")?;
    if let Some(m) = test {
        fs::write(dir.join(TEST_METRICS_FILE), m.to_json() + "\n")?;
    }
    fs::write(dir.join(SPARSITY_FILE), sparsity::to_csv(&outcome.sparsity))?;
    fs::write(dir.join(HISTORY_FILE), history_csv(&outcome.history))?;
    Ok(())
}

fn meta_num<T: std::str::FromStr + Default>(checkpoint: &Checkpoint, key: &str) -> T {
    checkpoint
        .meta
        .get(key)
        .and_then(|v| v.parse().ok())
        .unwrap_or_default()
}

/// Evaluates a saved checkpoint, tagging the report with its stored seed and epoch.
pub fn evaluate_checkpoint(checkpoint: &Checkpoint, samples: &[UserSample], exec: Execution) -> Result<Evaluation> {
    let model = Model::from_store(checkpoint.config.clone(), &checkpoint.params)?;
    evaluate(
        &model,
        &checkpoint.params,
        samples,
        meta_num(checkpoint, "seed"),
        meta_num(checkpoint, "epoch"),
        exec,
    )
}

/// Sparsity of a checkpoint over a dataset, tagged with its stored epoch.
pub fn sparsity_report(checkpoint: &Checkpoint, samples: &[UserSample], exec: Execution) -> Result<Vec<SparsityRow>> {
    let ev = evaluate_checkpoint(checkpoint, samples, exec)?;
    Ok(sparsity::rows(ev.metrics.epoch, &ev.tallies))
}
