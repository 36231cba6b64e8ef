//! Whole-model gradient check on a small random instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{loss, Bound, EncoderKind, Mode, Model, ModelConfig, ParamStore, Propagation};
use crate::autodiff::{check_gradients_with, Graph, Tensor, Var};
use crate::corpus::{Posts, UserSample};
use crate::error::{Error, Result};
use crate::exec::Execution;

/// Shape of the random instance.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckDims {
    pub d: usize,
    pub hid: usize,
    pub depth: usize,
    pub posts: usize,
    pub traits: usize,
    pub vocab: usize,
    pub tokens_per_post: usize,
}

impl Default for GradcheckDims {
    fn default() -> Self {
        GradcheckDims {
            d: 6,
            hid: 5,
            depth: 2,
            posts: 4,
            traits: 2,
            vocab: 12,
            tokens_per_post: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub dims: GradcheckDims,
    pub seed: u64,
    pub propagation: Propagation,
    pub undirected: bool,
    pub single_hop: bool,
    pub lambda: f64,
    pub step: f64,
    /// Parameters are drawn uniformly from `(-init_scale, init_scale)`.
    pub init_scale: f64,
    /// Minimum distance of every `r` from `mu`.
    pub margin: f64,
    /// Minimum distance of every relu input from 0.
    pub kink_margin: f64,
    /// Reseeds allowed when the random point sits too close to a kink.
    pub attempts: usize,
    /// Adds `delta` to the analytic gradient of one named parameter entry.
    pub corrupt: Option<(String, usize, f64)>,
    pub exec: Execution,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            dims: GradcheckDims::default(),
            seed: 1,
            propagation: Propagation::Decoupled,
            undirected: false,
            single_hop: false,
            lambda: 5.0,
            step: 1e-4,
            init_scale: 1.5,
            margin: 1e-3,
            kink_margin: 3e-4,
            attempts: 6,
            corrupt: None,
            exec: Execution::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelGradReport {
    pub max_rel_error: f64,
    /// `(parameter name, max relative error)` in registration order.
    pub per_param: Vec<(String, f64)>,
    /// `(parameter name, flat index, analytic, numeric)`.
    pub worst: Option<(String, usize, f64, f64)>,
    pub evaluations: usize,
    /// Seed of the instance actually checked.
    pub seed: u64,
    pub kept_edges: usize,
}

impl ModelGradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

struct Instance {
    model: Model,
    store: ParamStore,
    sample: UserSample,
}

fn instance(opts: &GradcheckOptions, seed: u64) -> Result<Instance> {
    let dims = &opts.dims;
    let mut cfg = ModelConfig {
        d: dims.d,
        hid: dims.hid,
        depth: dims.depth,
        traits: dims.traits,
        dropout_encoder: 0.0,
        dropout_other: 0.0,
        encoder: EncoderKind::Bag,
        propagation: opts.propagation,
        ..ModelConfig::default()
    };
    cfg.l2c.undirected = opts.undirected;
    cfg.l2c.single_hop = opts.single_hop;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, mut store) = Model::init(cfg, Some(dims.vocab), &mut rng)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.value_mut(id).data_mut() {
            *x = rng.gen_range(-opts.init_scale..opts.init_scale);
        }
    }
    let posts: Vec<Vec<usize>> = (0..dims.posts)
        .map(|_| {
            (0..dims.tokens_per_post)
                .map(|_| rng.gen_range(2..dims.vocab))
                .collect()
        })
        .collect();
    let labels = (0..dims.traits).map(|_| rng.gen_range(0..2u8)).collect();
    Ok(Instance {
        model,
        store,
        sample: UserSample {
            id: format!("gradcheck-{seed}"),
            posts: Posts::Tokens(posts),
            labels,
        },
    })
}

fn objective(inst: &Instance, lambda: f64, g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let bound = Bound::from_vars(vars.to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trace = inst.model.forward(g, &bound, &inst.sample, Mode::Eval, &mut rng)?;
    let labels = [inst.sample.labels.as_slice()];
    Ok(loss(g, &[trace], &labels, lambda, inst.model.config())?.total)
}

fn normalized(a: &Tensor) -> Tensor {
    let n = a.rows();
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum::<f64>() + 1.0).collect();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let aij = a.at(i, j) + if i == j { 1.0 } else { 0.0 };
            out.data_mut()[i * n + j] = aij / (deg[i] * deg[j]).sqrt();
        }
    }
    out
}

struct Clearance {
    /// Smallest `|r - mu|` over weights that can move.
    threshold: f64,
    /// Smallest `|x|` over relu inputs.
    kink: f64,
    kept: usize,
}

fn clearance(inst: &Instance) -> Result<Clearance> {
    let mut g = Graph::new();
    let bound = inst.store.bind(&mut g);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trace = inst.model.forward(&mut g, &bound, &inst.sample, Mode::Eval, &mut rng)?;
    let cfg = inst.model.config();
    let mu = cfg.l2c.mu;
    let mut c = Clearance {
        threshold: f64::INFINITY,
        kink: f64::INFINITY,
        kept: 0,
    };
    let kink = |c: &mut Clearance, pre: &Tensor| {
        c.kink = pre.data().iter().fold(c.kink, |m, x| m.min(x.abs()));
    };
    for (t, tt) in trace.traits.iter().enumerate() {
        let branch = inst.model.branch(t);
        let learned = if cfg.l2c.single_hop { 1 } else { cfg.depth };
        for k in 0..learned {
            let lg = &tt.layers[k];
            c.kept += lg.edge_count;
            let pre = g.value(tt.stack[k]).matmul(inst.store.value(branch.l2c[k].0))?;
            kink(&mut c, &pre);
            // A query row with every unit inactive scores exactly 0, so its
            // weights sit at mu and stay there under perturbation.
            let live: Vec<bool> = (0..pre.rows()).map(|i| pre.row(i).iter().any(|&x| x > 0.0)).collect();
            let raw = g.value(lg.raw);
            let n = raw.rows();
            for i in 0..n {
                for j in 0..n {
                    if live[i] || (cfg.l2c.undirected && live[j]) {
                        c.threshold = c.threshold.min((raw.at(i, j) - mu).abs());
                    }
                }
            }
        }
        for (k, &w) in branch.gcn.iter().enumerate() {
            let a_hat = normalized(g.value(tt.layers[k].adjacency));
            let pre = a_hat.matmul(g.value(tt.stack[k]))?.matmul(inst.store.value(w))?;
            kink(&mut c, &pre);
        }
    }
    Ok(c)
}

/// Central-difference check of every parameter of a freshly drawn model.
///
/// Instances with an edge weight within `margin` of the threshold or a relu
/// input within `kink_margin` of zero are redrawn with the next seed, up to
/// `attempts` draws in total.
pub fn model_gradcheck(opts: &GradcheckOptions) -> Result<ModelGradReport> {
    let mut closest = (f64::INFINITY, f64::INFINITY);
    for attempt in 0..opts.attempts.max(1) {
        let seed = opts.seed.wrapping_add(attempt as u64);
        let inst = instance(opts, seed)?;
        let c = clearance(&inst)?;
        if c.threshold <= opts.margin || c.kink <= opts.kink_margin {
            closest = (c.threshold, c.kink);
            continue;
        }
        let kept = c.kept;
        let names: Vec<String> = inst.store.iter().map(|(_, p)| p.name.clone()).collect();
        let corrupt = opts
            .corrupt
            .as_ref()
            .map(|(name, idx, delta)| {
                names
                    .iter()
                    .position(|n| n == name)
                    .map(|i| (i, *idx, *delta))
                    .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
            })
            .transpose()?;
        let report = check_gradients_with(
            |g, vars| objective(&inst, opts.lambda, g, vars),
            &inst.store.tensors(),
            opts.step,
            opts.exec,
            |i, grad| {
                if let Some((ci, idx, delta)) = corrupt {
                    if ci == i && idx < grad.len() {
                        grad.data_mut()[idx] += delta;
                    }
                }
            },
        )?;
        return Ok(ModelGradReport {
            max_rel_error: report.max_rel_error,
            per_param: names.iter().cloned().zip(report.per_input).collect(),
            worst: report.worst.map(|(i, j, a, n)| (names[i].clone(), j, a, n)),
            evaluations: report.evaluations,
            seed,
            kept_edges: kept,
        });
    }
    Err(Error::Numeric(format!(
        "threshold collision in all {} draws starting at seed {}: last draw had |r - mu| = {:e}, |relu input| = {:e}",
        opts.attempts.max(1),
        opts.seed,
        closest.0,
        closest.1
    )))
}
