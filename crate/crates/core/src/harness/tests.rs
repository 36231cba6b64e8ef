use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::corpus::synth::{generate, SynthConfig};
use crate::corpus::{Posts, UserSample};
use crate::exec::Execution;
use crate::model::checkpoint::Checkpoint;
use crate::model::{EncoderKind, Model};

fn tiny() -> (RunConfig, Dataset) {
    let synth = SynthConfig {
        train_users: 20,
        val_users: 8,
        test_users: 8,
        posts_per_user: 4,
        traits: 2,
        vocab: 40,
        ..SynthConfig::default()
    };
    let corpus = generate(&synth).unwrap();
    let mut cfg = RunConfig::default();
    cfg.model.d = 8;
    cfg.model.hid = 4;
    cfg.model.traits = 2;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    let data = Dataset::from_records(&corpus.train, &corpus.val, Some(&corpus.test), &cfg);
    (cfg, data)
}

#[test]
fn smoke_run_emits_every_artifact() {
    let (cfg, data) = tiny();
    let outcome = train(&cfg, &data, Execution::default()).unwrap();
    assert_eq!(outcome.history.len(), 2);
    assert_eq!(outcome.sparsity.len(), 3 * 2 * 2);
    assert_eq!(outcome.lambda_trace.len(), 2 * 5);
    let test = evaluate_best(&outcome, data.test.as_ref().unwrap(), Execution::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    write_artifacts(dir.path(), &cfg, &data, &outcome, Some(&test.metrics)).unwrap();
    for f in [
        train::CHECKPOINT_FILE,
        train::VOCAB_FILE,
        train::CONFIG_FILE,
        train::METRICS_FILE,
        train::TEST_METRICS_FILE,
        train::SPARSITY_FILE,
        train::HISTORY_FILE,
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let back = Checkpoint::load(&dir.path().join(train::CHECKPOINT_FILE)).unwrap();
    assert_eq!(back, outcome.best);
    let reread = RunConfig::load(&dir.path().join(train::CONFIG_FILE)).unwrap();
    assert_eq!(reread, cfg);
}

#[test]
fn same_seed_same_bits() {
    let (cfg, data) = tiny();
    let a = train(&cfg, &data, Execution::Parallel).unwrap();
    let b = train(&cfg, &data, Execution::Sequential).unwrap();
    assert_eq!(a.best.to_bytes(), b.best.to_bytes());
    assert_eq!(a.best_metrics.to_json(), b.best_metrics.to_json());
    assert_eq!(a.last, b.last);
    assert_eq!(a.sparsity, b.sparsity);

    let mut other = cfg.clone();
    other.train.seed = 2;
    let c = train(&other, &data, Execution::Parallel).unwrap();
    assert_ne!(a.last, c.last);
}

#[test]
fn lambda_rises_while_ce_is_positive() {
    let (cfg, data) = tiny();
    let outcome = train(&cfg, &data, Execution::default()).unwrap();
    let trace = &outcome.lambda_trace;
    assert!(trace[0] > cfg.train.lambda_init);
    assert!(trace.windows(2).all(|w| w[1] >= w[0]));
    assert!(trace.iter().all(|&l| (0.0..=100.0).contains(&l)));

    let mut off = cfg;
    off.model.l0_enabled = false;
    assert!(train(&off, &data, Execution::default())
        .unwrap()
        .lambda_trace
        .is_empty());
}

#[test]
fn non_finite_inputs_are_diagnosed() {
    let mut cfg = RunConfig::default();
    cfg.model.d = 3;
    cfg.model.hid = 2;
    cfg.model.traits = 1;
    cfg.model.encoder = EncoderKind::Vectors;
    cfg.train.epochs = 1;
    let user = |v: f64| UserSample {
        id: "x".into(),
        posts: Posts::Vectors(vec![vec![v, 1.0, -1.0], vec![0.5, v, 0.0]]),
        labels: vec![1],
    };
    let data = Dataset {
        train: vec![user(f64::INFINITY)],
        val: vec![user(0.3)],
        test: None,
        vocab: None,
    };
    let err = train(&cfg, &data, Execution::default()).unwrap_err();
    assert!(matches!(err, crate::Error::Numeric(_)), "{err}");
    let msg = err.to_string();
    assert!(
        msg.contains("epoch 1") && (msg.contains("trait 0") || msg.contains("encoder")),
        "{msg}"
    );
}

#[test]
fn training_rejects_bad_labels_and_empty_splits() {
    let (cfg, mut data) = tiny();
    data.train[0].labels = vec![0, 2];
    assert!(train(&cfg, &data, Execution::default()).is_err());
    let (cfg, mut data) = tiny();
    data.val.clear();
    assert!(train(&cfg, &data, Execution::default()).is_err());
}

fn vector_checkpoint(wq: f64, wk: f64) -> Checkpoint {
    let mut cfg = RunConfig::default().model;
    cfg.d = 2;
    cfg.hid = 2;
    cfg.traits = 1;
    cfg.depth = 1;
    cfg.encoder = EncoderKind::Vectors;
    let (model, mut store) = Model::init(cfg.clone(), None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let (q, k) = model.branch(0).l2c[0];
    *store.value_mut(q) = Tensor::full(&[2, 2], wq);
    *store.value_mut(k) = Tensor::full(&[2, 2], wk);
    Checkpoint {
        config: cfg,
        params: store,
        meta: [("epoch".to_owned(), "7".to_owned())].into_iter().collect(),
    }
}

fn positive_users() -> Vec<UserSample> {
    (1..5)
        .map(|n| UserSample {
            id: format!("u{n}"),
            posts: Posts::Vectors((0..n).map(|i| vec![1.0 + i as f64, 0.5]).collect()),
            labels: vec![(n % 2) as u8],
        })
        .collect()
}

#[test]
fn sparsity_of_cold_start_and_saturated_graphs() {
    let rows = sparsity_report(&vector_checkpoint(0.0, 0.0), &positive_users(), Execution::default()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].graph_ratio, rows[0].unode_ratio), (0.0, 0.0));
    assert_eq!(rows[0].epoch, 7);

    let rows = sparsity_report(&vector_checkpoint(1.0, 1.0), &positive_users(), Execution::default()).unwrap();
    assert_eq!((rows[0].graph_ratio, rows[0].unode_ratio), (1.0, 1.0));
}

#[test]
fn evaluation_is_independent_of_execution_mode() {
    let (cfg, data) = tiny();
    let outcome = train(&cfg, &data, Execution::default()).unwrap();
    let a = evaluate_best(&outcome, &data.val, Execution::Parallel).unwrap();
    let b = evaluate_best(&outcome, &data.val, Execution::Sequential).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.tallies, b.tallies);
    assert_eq!(a.metrics, outcome.best_metrics);
    let c = evaluate_checkpoint(&outcome.best, &data.val, Execution::Parallel).unwrap();
    assert_eq!(c.metrics, outcome.best_metrics);
}

#[test]
fn seed_runner_reports_mean_and_max() {
    let (mut cfg, data) = tiny();
    cfg.train.epochs = 1;
    let s = run_seeds(&cfg, &data, &[1, 2], Execution::default()).unwrap();
    assert_eq!(s.runs.len(), 2);
    let avgs: Vec<f64> = s.runs.iter().map(|r| r.average).collect();
    assert_eq!(s.mean, (avgs[0] + avgs[1]) / 2.0);
    assert_eq!(s.max, avgs[0].max(avgs[1]));
    assert_eq!(s.runs[1].seed, 2);
}
