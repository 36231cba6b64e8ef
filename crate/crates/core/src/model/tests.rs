use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{model_gradcheck, GradcheckOptions};
use super::*;
use crate::autodiff::sigmoid;
use crate::corpus::{Posts, UserSample};

fn small(traits: usize) -> ModelConfig {
    ModelConfig {
        d: 4,
        hid: 3,
        traits,
        ..ModelConfig::default()
    }
}

fn token_sample(rng: &mut ChaCha8Rng, posts: usize, vocab: usize, traits: usize) -> UserSample {
    UserSample {
        id: "u".into(),
        posts: Posts::Tokens(
            (0..posts)
                .map(|_| (0..3).map(|_| rng.gen_range(2..vocab)).collect())
                .collect(),
        ),
        labels: (0..traits).map(|_| rng.gen_range(0..2)).collect(),
    }
}

fn vector_sample(rng: &mut ChaCha8Rng, posts: usize, d: usize, traits: usize) -> UserSample {
    UserSample {
        id: "u".into(),
        posts: Posts::Vectors(
            (0..posts)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        ),
        labels: (0..traits).map(|_| rng.gen_range(0..2)).collect(),
    }
}

/// Widens weights so that a good share of edges clears the threshold.
fn spread(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.value_mut(id).data_mut() {
            *x = rng.gen_range(-1.5..1.5);
        }
    }
}

fn eval_logits(model: &Model, store: &ParamStore, sample: &UserSample) -> Vec<[f64; 2]> {
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let trace = model
        .forward(&mut g, &bound, sample, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    trace.logits(&g)
}

#[test]
fn cold_start_path_is_hand_checkable() {
    let cfg = ModelConfig { depth: 1, ..small(1) };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (model, mut store) = Model::init(cfg, Some(8), &mut rng).unwrap();
    let (wq, wk) = model.branch(0).l2c[0];
    *store.value_mut(wq) = Tensor::zeros(&[4, 3]);
    *store.value_mut(wk) = Tensor::zeros(&[4, 3]);
    let sample = token_sample(&mut rng, 3, 8, 1);

    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let trace = model.forward(&mut g, &bound, &sample, Mode::Eval, &mut rng).unwrap();
    let tt = &trace.traits[0];
    assert!(g.value(tt.layers[0].raw).data().iter().all(|&r| r == 0.5));
    assert_eq!(tt.layers[0].edge_count, 0);
    assert_eq!(g.value(tt.stack[1]), g.value(tt.stack[0]));

    let h0 = g.value(trace.nodes.h).clone();
    let u = h0.row(trace.nodes.user_row());
    let c = store.value(model.branch(0).c).data();
    let s = sigmoid(u.iter().zip(c).map(|(a, b)| a * b).sum());
    let wu = store.value(model.branch(0).wu);
    let bu = store.value(model.branch(0).bu).data();
    let logits = trace.logits(&g)[0];
    for j in 0..2 {
        let expected: f64 = (0..4).map(|i| 2.0 * s * u[i] * wu.at(i, j)).sum::<f64>() + bu[j];
        assert!((logits[j] - expected).abs() < 1e-12, "{} vs {expected}", logits[j]);
    }
}

fn variants() -> Vec<(&'static str, ModelConfig)> {
    let base = small(2);
    let mut out = vec![("ddgcn", base.clone())];
    let mut c = base.clone();
    c.l2c.undirected = true;
    out.push(("undirected", c));
    let mut c = base.clone();
    c.l2c.single_hop = true;
    c.depth = 3;
    out.push(("single_hop", c));
    let mut c = base.clone();
    c.propagation = Propagation::PlainGcn;
    out.push(("gcn", c));
    let mut c = base.clone();
    c.fixed_graph = Some(0.2);
    out.push(("fixed_graph", c));
    let mut c = base.clone();
    c.no_special_node = true;
    out.push(("no_special_node", c));
    let mut c = base.clone();
    c.l0_enabled = false;
    out.push(("l0_off", c));
    let mut c = base;
    c.encoder = EncoderKind::Vectors;
    out.push(("vectors", c));
    out
}

#[test]
fn post_order_invariance_in_every_variant() {
    for (name, cfg) in variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vocab = (cfg.encoder == EncoderKind::Bag).then_some(20);
        let (model, mut store) = Model::init(cfg.clone(), vocab, &mut rng).unwrap();
        spread(&mut store, &mut rng);
        for _ in 0..10 {
            let n = rng.gen_range(1..8);
            let sample = match cfg.encoder {
                EncoderKind::Bag => token_sample(&mut rng, n, 20, 2),
                EncoderKind::Vectors => vector_sample(&mut rng, n, 4, 2),
            };
            let base = eval_logits(&model, &store, &sample);
            for _ in 0..5 {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                let other = eval_logits(&model, &store, &sample.with_posts_permuted(&order));
                for (a, b) in base.iter().zip(&other) {
                    for j in 0..2 {
                        assert!((a[j] - b[j]).abs() < 1e-9, "{name}: {a:?} vs {b:?}");
                    }
                }
            }
        }
    }
}

#[test]
fn single_hop_reuses_the_first_graph() {
    let mut cfg = small(1);
    cfg.depth = 3;
    cfg.l2c.single_hop = true;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (model, store) = Model::init(cfg, Some(10), &mut rng).unwrap();
    assert_eq!(model.branch(0).l2c.len(), 1);
    let sample = token_sample(&mut rng, 4, 10, 1);
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let trace = model.forward(&mut g, &bound, &sample, Mode::Eval, &mut rng).unwrap();
    let layers = &trace.traits[0].layers;
    assert_eq!(layers.len(), 3);
    assert!(layers.iter().all(|l| l.adjacency == layers[0].adjacency));
}

#[test]
fn fixed_graph_mode_propagates_over_one_fixed_matrix() {
    let mut cfg = small(1);
    cfg.encoder = EncoderKind::Vectors;
    cfg.fixed_graph = Some(0.1);
    cfg.depth = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (model, store) = Model::init(cfg, None, &mut rng).unwrap();
    assert!(model.branch(0).l2c.is_empty());
    let sample = vector_sample(&mut rng, 5, 4, 1);
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let trace = model.forward(&mut g, &bound, &sample, Mode::Eval, &mut rng).unwrap();
    let tt = &trace.traits[0];

    let h0 = g.value(trace.nodes.h).clone();
    let a = build_fixed_graph(&h0, 0.1).unwrap();
    let n = a.rows();
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum::<f64>() + 1.0).collect();
    let a_hat = Tensor::new(
        vec![n, n],
        (0..n * n)
            .map(|x| {
                let (i, j) = (x / n, x % n);
                (a.at(i, j) + f64::from(u8::from(i == j))) / (deg[i] * deg[j]).sqrt()
            })
            .collect(),
    )
    .unwrap();
    let mut h = h0;
    for k in 1..=3 {
        h = a_hat.matmul(&h).unwrap();
        let got = g.value(tt.stack[k]);
        for (x, y) in got.data().iter().zip(h.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(g.value(tt.layers[k - 1].adjacency), &a);
    }
    let zero = g.value(tt.l0).item();
    assert_eq!(zero, 0.0);
}

#[test]
fn fixed_graph_examples() {
    let same = Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0], [2.0, 4.0]]).unwrap();
    let a = build_fixed_graph(&same, 0.5).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(a.at(i, j), f64::from(u8::from(i != j)));
        }
    }
    assert!(build_fixed_graph(&same, 1.0).unwrap().data().iter().all(|&x| x == 0.0));

    let ortho = Tensor::from_rows(&[[1.0, 0.0], [0.0, 3.0]]).unwrap();
    assert!(build_fixed_graph(&ortho, 0.0).unwrap().data().iter().all(|&x| x == 0.0));

    let zero = Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
    assert!(build_fixed_graph(&zero, 0.5).is_err());
}

#[test]
fn payload_kind_must_match_the_encoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (model, store) = Model::init(small(1), Some(10), &mut rng).unwrap();
    let sample = vector_sample(&mut rng, 2, 4, 1);
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    assert!(model.forward(&mut g, &bound, &sample, Mode::Eval, &mut rng).is_err());
    assert!(Model::init(small(1), None, &mut rng).is_err());
}

fn logits_trace(g: &mut Graph, rows: &[[f64; 2]]) -> ForwardTrace {
    let h = g.constant(Tensor::zeros(&[1, 1]));
    let traits = rows
        .iter()
        .map(|r| {
            let logits = g.constant(Tensor::from_rows(&[*r]).unwrap());
            let l0 = g.constant(Tensor::scalar(0.0));
            TraitTrace {
                logits,
                layers: Vec::new(),
                l0,
                h_out: h,
                stack: vec![h],
                scores: Vec::new(),
            }
        })
        .collect();
    ForwardTrace {
        nodes: NodeMatrix { h, posts: 0 },
        traits,
    }
}

#[test]
fn loss_examples() {
    let cfg = small(4);
    let mut g = Graph::new();
    let tr = logits_trace(&mut g, &[[0.3, 0.3]; 4]);
    let labels: &[u8] = &[0, 1, 1, 0];
    let terms = loss(&mut g, std::slice::from_ref(&tr), &[labels], 5.0, &cfg).unwrap();
    assert!((g.value(terms.ce).item() - 4.0 * 2f64.ln()).abs() < 1e-12);
    assert!((g.value(terms.ce).item() - 2.7725887).abs() < 1e-7);

    let terms = loss(&mut g, std::slice::from_ref(&tr), &[labels], 1.0, &cfg).unwrap();
    assert_eq!(g.value(terms.total).item(), g.value(terms.ce).item());

    let perfect = logits_trace(&mut g, &[[40.0, -40.0], [-40.0, 40.0], [-40.0, 40.0], [40.0, -40.0]]);
    let terms = loss(&mut g, &[perfect], &[labels], 3.0, &cfg).unwrap();
    assert!(g.value(terms.ce).item() < 1e-30);

    assert!(loss(&mut g, std::slice::from_ref(&tr), &[labels], 100.5, &cfg).is_err());
    assert!(loss(&mut g, std::slice::from_ref(&tr), &[labels], -0.1, &cfg).is_err());
    assert!(loss(&mut g, &[tr], &[&[0, 1][..]], 1.0, &cfg).is_err());
}

#[test]
fn loss_without_l0_ignores_lambda_and_edges() {
    let mut cfg = small(2);
    cfg.l0_enabled = false;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (model, mut store) = Model::init(cfg.clone(), Some(12), &mut rng).unwrap();
    spread(&mut store, &mut rng);
    let sample = token_sample(&mut rng, 5, 12, 2);
    let mut values = Vec::new();
    for lambda in [0.0, 1.0, 50.0] {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let tr = model.forward(&mut g, &bound, &sample, Mode::Eval, &mut rng).unwrap();
        assert!(g.value(tr.traits[0].l0).item() > 0.0);
        let terms = loss(&mut g, &[tr], &[&sample.labels], lambda, &cfg).unwrap();
        values.push(g.value(terms.total).item().to_bits());
    }
    assert!(values.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn predict_rules() {
    assert_eq!(argmax2([0.2, 0.9]), 1);
    assert_eq!(argmax2([0.5, 0.5]), 0);
    assert_eq!(argmax2([0.9, 0.2]), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let z = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let c = rng.gen_range(-10.0..10.0);
        assert_eq!(argmax2(z), argmax2([z[0] + c, z[1] + c]));
    }
}

#[test]
fn traits_share_only_the_encoder() {
    let cfg = small(2);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (model, mut store) = Model::init(cfg, Some(12), &mut rng).unwrap();
    spread(&mut store, &mut rng);
    let sample = token_sample(&mut rng, 4, 12, 2);

    let grads_for = |traits: &[usize]| {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let tr = model
            .forward(&mut g, &bound, &sample, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let mut total = None;
        for &t in traits {
            let z = tr.traits[t].logits;
            let ce = g.softmax_cross_entropy(z, &[sample.labels[t] as usize]).unwrap();
            total = Some(match total {
                None => ce,
                Some(acc) => g.add(acc, ce).unwrap(),
            });
        }
        g.backward(total.unwrap()).unwrap();
        bound.grads(&g)
    };
    let both = grads_for(&[0, 1]);
    let only1 = grads_for(&[1]);
    for id in model.branch(1).all_ids() {
        assert_eq!(both[id.index()], only1[id.index()], "{}", store.get(id).name);
    }
    for id in model.branch(0).all_ids() {
        assert!(only1[id.index()].data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn parameter_count_law() {
    let d = 5;
    let count = |depth: usize, prop: Propagation| {
        let cfg = ModelConfig {
            d,
            hid: 3,
            depth,
            traits: 3,
            propagation: prop,
            ..ModelConfig::default()
        };
        let (model, store) = Model::init(cfg, Some(9), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (0..3)
            .map(|t| model.propagation_param_count(&store, t))
            .collect::<Vec<_>>()
    };
    assert_eq!(count(2, Propagation::Decoupled), count(16, Propagation::Decoupled));
    let (a, b) = (count(2, Propagation::PlainGcn), count(16, Propagation::PlainGcn));
    for t in 0..3 {
        assert_eq!(b[t] - a[t], 14 * d * d);
    }
}

#[test]
fn train_mode_dropout_is_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (model, store) = Model::init(small(2), Some(12), &mut rng).unwrap();
    let sample = token_sample(&mut rng, 4, 12, 2);
    let run = |seed: u64| {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let tr = model
            .forward(
                &mut g,
                &bound,
                &sample,
                Mode::Train,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
        tr.logits(&g)
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn full_model_gradcheck() {
    let report = model_gradcheck(&GradcheckOptions::default()).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
    assert!(report.kept_edges > 0);
}

#[test]
fn gradcheck_variants() {
    for opts in [
        GradcheckOptions {
            propagation: Propagation::PlainGcn,
            ..GradcheckOptions::default()
        },
        GradcheckOptions {
            undirected: true,
            ..GradcheckOptions::default()
        },
        GradcheckOptions {
            single_hop: true,
            ..GradcheckOptions::default()
        },
    ] {
        let report = model_gradcheck(&opts).unwrap();
        assert!(report.passes(1e-4), "{opts:?}: {report:?}");
    }
}

#[test]
fn gradcheck_flags_a_corrupted_gradient() {
    let opts = GradcheckOptions {
        corrupt: Some(("branch1.l2c.1.wq".into(), 0, 0.5)),
        ..GradcheckOptions::default()
    };
    let report = model_gradcheck(&opts).unwrap();
    assert!(!report.passes(1e-4));
    assert_eq!(report.worst.unwrap().0, "branch1.l2c.1.wq");
}
