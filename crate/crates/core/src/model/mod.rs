//! The full model: shared post encoder, one learn-to-connect + propagation
//! branch per trait, per-trait classifiers, and loss assembly.

pub mod checkpoint;
pub mod gradcheck;
mod params;

use rand::Rng;

pub use params::{Bound, Group, Param, ParamId, ParamStore};

use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::{encode_bag, load_precomputed, NodeMatrix, Posts, UserSample};
use crate::dgcn;
use crate::error::{Error, Result};
use crate::l2c::{self, L2cConfig, L2cLayer, LayerGraph};

pub const MAX_DEPTH: usize = 24;
pub const LAMBDA_MAX: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    /// Trainable bag-of-embeddings over token ids.
    Bag,
    /// Precomputed, frozen post vectors.
    Vectors,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Propagation {
    /// Parameter-free `Â H`.
    Decoupled,
    /// `relu(Â H W)` with a weight matrix per layer.
    PlainGcn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub hid: usize,
    pub depth: usize,
    pub traits: usize,
    pub l2c: L2cConfig,
    pub dropout_encoder: f64,
    pub dropout_other: f64,
    pub encoder: EncoderKind,
    pub propagation: Propagation,
    /// Cosine cutoff of a fixed similarity graph used in place of L2C.
    pub fixed_graph: Option<f64>,
    pub no_special_node: bool,
    pub l0_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            hid: 16,
            depth: 2,
            traits: 4,
            l2c: L2cConfig::default(),
            dropout_encoder: 0.1,
            dropout_other: 0.2,
            encoder: EncoderKind::Bag,
            propagation: Propagation::Decoupled,
            fixed_graph: None,
            no_special_node: false,
            l0_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.hid == 0 {
            return bad("d and hid must be positive".into());
        }
        if !(1..=MAX_DEPTH).contains(&self.depth) {
            return bad(format!("depth {} outside 1..={MAX_DEPTH}", self.depth));
        }
        if self.traits == 0 {
            return bad("traits must be positive".into());
        }
        for (name, p) in [
            ("dropout_encoder", self.dropout_encoder),
            ("dropout_other", self.dropout_other),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1)"));
            }
        }
        if let Some(t) = self.fixed_graph {
            if !(-1.0..=1.0).contains(&t) {
                return bad(format!("fixed graph threshold {t} outside [-1, 1]"));
            }
        }
        self.l2c.validate()
    }

    /// Whether branches own L2C projections for layer `k` (0-based).
    fn learns_layer(&self, k: usize) -> bool {
        self.fixed_graph.is_none() && (k == 0 || !self.l2c.single_hop)
    }
}

/// Parameter ids of one trait's branch.
#[derive(Clone, Debug)]
pub struct BranchIds {
    pub l2c: Vec<(ParamId, ParamId)>,
    pub c: ParamId,
    pub wu: ParamId,
    pub bu: ParamId,
    pub gcn: Vec<ParamId>,
}

impl BranchIds {
    /// Everything downstream of the learned graph: layer attention, the
    /// classifier and any per-layer GCN weights.
    pub fn propagation_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.c, self.wu, self.bu];
        ids.extend(&self.gcn);
        ids
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.l2c.iter().flat_map(|&(q, k)| [q, k]).collect();
        ids.extend(self.propagation_ids());
        ids
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    embed: Option<ParamId>,
    branches: Vec<BranchIds>,
}

pub fn l2c_key(t: usize, k: usize, which: &str) -> String {
    format!("branch{t}.l2c.{}.{which}", k + 1)
}

pub fn gcn_key(t: usize, k: usize) -> String {
    format!("branch{t}.gcn.{}.w", k + 1)
}

fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()).expect("shape matches")
}

fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Model {
    /// Registers and initializes all parameters. `vocab_size` is required for
    /// the bag encoder.
    pub fn init<R: Rng + ?Sized>(
        cfg: ModelConfig,
        vocab_size: Option<usize>,
        rng: &mut R,
    ) -> Result<(Model, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let (d, hid) = (cfg.d, cfg.hid);
        let embed = match cfg.encoder {
            EncoderKind::Bag => {
                let v = vocab_size
                    .filter(|&v| v > 0)
                    .ok_or_else(|| Error::Config("bag encoder needs a vocabulary size".into()))?;
                Some(store.add("embed", uniform(&[v, d], 0.1, rng), Group::Encoder))
            }
            EncoderKind::Vectors => None,
        };
        let mut branches = Vec::with_capacity(cfg.traits);
        for t in 0..cfg.traits {
            let mut l2c = Vec::new();
            for k in (0..cfg.depth).filter(|&k| cfg.learns_layer(k)) {
                let b = xavier(d, hid);
                let wq = store.add(l2c_key(t, k, "wq"), uniform(&[d, hid], b, rng), Group::L2c);
                let wk = store.add(l2c_key(t, k, "wk"), uniform(&[d, hid], b, rng), Group::L2c);
                l2c.push((wq, wk));
            }
            let c = store.add(
                format!("branch{t}.c"),
                uniform(&[d, 1], xavier(d, 1), rng),
                Group::Other,
            );
            let wu = store.add(
                format!("branch{t}.wu"),
                uniform(&[d, 2], xavier(d, 2), rng),
                Group::Other,
            );
            let bu = store.add(format!("branch{t}.bu"), Tensor::zeros(&[2]), Group::Other);
            let mut gcn = Vec::new();
            if cfg.propagation == Propagation::PlainGcn {
                for k in 0..cfg.depth {
                    gcn.push(store.add(gcn_key(t, k), uniform(&[d, d], xavier(d, d), rng), Group::Other));
                }
            }
            branches.push(BranchIds { l2c, c, wu, bu, gcn });
        }
        Ok((Model { cfg, embed, branches }, store))
    }

    /// Resolves parameter ids by name in a loaded store and checks shapes.
    pub fn from_store(cfg: ModelConfig, store: &ParamStore) -> Result<Model> {
        cfg.validate()?;
        let (d, hid) = (cfg.d, cfg.hid);
        let get = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let actual = store.value(id).shape();
            if actual != shape && !(name == "embed" && actual.len() == 2 && actual[1] == d) {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {actual:?}, expected {shape:?}"
                )));
            }
            Ok(id)
        };
        let embed = match cfg.encoder {
            EncoderKind::Bag => Some(get("embed", &[0, d])?),
            EncoderKind::Vectors => None,
        };
        let mut branches = Vec::with_capacity(cfg.traits);
        let mut expected = usize::from(embed.is_some());
        for t in 0..cfg.traits {
            let mut l2c = Vec::new();
            for k in (0..cfg.depth).filter(|&k| cfg.learns_layer(k)) {
                l2c.push((
                    get(&l2c_key(t, k, "wq"), &[d, hid])?,
                    get(&l2c_key(t, k, "wk"), &[d, hid])?,
                ));
            }
            let c = get(&format!("branch{t}.c"), &[d, 1])?;
            let wu = get(&format!("branch{t}.wu"), &[d, 2])?;
            let bu = get(&format!("branch{t}.bu"), &[2])?;
            let mut gcn = Vec::new();
            if cfg.propagation == Propagation::PlainGcn {
                for k in 0..cfg.depth {
                    gcn.push(get(&gcn_key(t, k), &[d, d])?);
                }
            }
            let b = BranchIds { l2c, c, wu, bu, gcn };
            expected += b.all_ids().len();
            branches.push(b);
        }
        if expected != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, configuration expects {expected}",
                store.len()
            )));
        }
        Ok(Model { cfg, embed, branches })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn branch(&self, t: usize) -> &BranchIds {
        &self.branches[t]
    }

    pub fn embed(&self) -> Option<ParamId> {
        self.embed
    }

    /// Scalars in trait `t`'s propagation side (excludes L2C and encoder).
    pub fn propagation_param_count(&self, store: &ParamStore, t: usize) -> usize {
        store.count(self.branches[t].propagation_ids())
    }

    pub fn encode(&self, g: &mut Graph, bound: &Bound, sample: &UserSample) -> Result<NodeMatrix> {
        match (&sample.posts, self.embed) {
            (Posts::Tokens(posts), Some(e)) => encode_bag(g, bound.var(e), posts),
            (Posts::Vectors(vectors), None) => load_precomputed(g, vectors, self.cfg.d),
            (Posts::Tokens(_), None) => Err(Error::Config(
                "token posts given to a model with the vector encoder".into(),
            )),
            (Posts::Vectors(_), Some(_)) => Err(Error::Config(
                "vector posts given to a model with the bag encoder".into(),
            )),
        }
    }

    /// Runs one user through every trait branch.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        bound: &Bound,
        sample: &UserSample,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        let train = mode == Mode::Train;
        let nodes = self.encode(g, bound, sample)?;
        let fixed = match self.cfg.fixed_graph {
            Some(threshold) => {
                let a = build_fixed_graph(g.value(nodes.h), threshold)?;
                let edges = a.data().iter().filter(|&&x| x != 0.0).count();
                let a = g.constant(a);
                let a_hat = dgcn::normalize(g, a)?;
                Some((
                    LayerGraph {
                        raw: a,
                        adjacency: a,
                        edge_count: edges,
                    },
                    a_hat,
                ))
            }
            None => None,
        };
        let h0 = if train {
            g.dropout(nodes.h, self.cfg.dropout_encoder, rng)?
        } else {
            nodes.h
        };

        let mut traits = Vec::with_capacity(self.cfg.traits);
        for branch in &self.branches {
            let mut stack = vec![h0];
            let mut layers: Vec<LayerGraph> = Vec::with_capacity(self.cfg.depth);
            let mut normalized: Vec<Var> = Vec::with_capacity(self.cfg.depth);
            for k in 0..self.cfg.depth {
                let h = stack[k];
                let (lg, a_hat) = match &fixed {
                    Some((lg, a_hat)) => (lg.clone(), *a_hat),
                    None if k > 0 && self.cfg.l2c.single_hop => (layers[0].clone(), normalized[0]),
                    None => {
                        let (wq, wk) = branch.l2c[k];
                        let layer = L2cLayer {
                            wq: bound.var(wq),
                            wk: bound.var(wk),
                        };
                        let lg = l2c::learn_graph(g, h, layer, &self.cfg.l2c)?;
                        let a_hat = dgcn::normalize(g, lg.adjacency)?;
                        (lg, a_hat)
                    }
                };
                let next = match self.cfg.propagation {
                    Propagation::Decoupled => dgcn::propagate(g, h, a_hat)?,
                    Propagation::PlainGcn => dgcn::gcn_layer(g, h, a_hat, bound.var(branch.gcn[k]))?,
                };
                stack.push(next);
                layers.push(lg);
                normalized.push(a_hat);
            }

            let learned: Vec<&LayerGraph> = if self.cfg.fixed_graph.is_some() {
                Vec::new()
            } else if self.cfg.l2c.single_hop {
                layers.iter().take(1).collect()
            } else {
                layers.iter().collect()
            };
            let l0 = l2c::l0_penalty(g, &learned)?;

            let (h_out, scores) = dgcn::layer_attention(g, &stack, bound.var(branch.c))?;
            let h_out_dropped = if train {
                g.dropout(h_out, self.cfg.dropout_other, rng)?
            } else {
                h_out
            };
            let feature = if self.cfg.no_special_node {
                let posts: Vec<usize> = (0..nodes.posts).collect();
                let rows = g.gather_rows(h_out_dropped, &posts)?;
                g.set_mean_rows(rows)?
            } else {
                g.gather_rows(h_out_dropped, &[nodes.user_row()])?
            };
            let z = g.matmul(feature, bound.var(branch.wu))?;
            let bias = g.reshape(bound.var(branch.bu), &[1, 2])?;
            let logits = g.add(z, bias)?;
            traits.push(TraitTrace {
                logits,
                layers,
                l0,
                h_out,
                stack,
                scores,
            });
        }
        Ok(ForwardTrace { nodes, traits })
    }
}

#[derive(Clone, Debug)]
pub struct TraitTrace {
    /// `1×2` class logits.
    pub logits: Var,
    /// One graph per layer; in single-hop mode every entry is layer 1's.
    pub layers: Vec<LayerGraph>,
    pub l0: Var,
    pub h_out: Var,
    /// `H^0..H^L`.
    pub stack: Vec<Var>,
    pub scores: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub nodes: NodeMatrix,
    pub traits: Vec<TraitTrace>,
}

impl ForwardTrace {
    pub fn logits(&self, g: &Graph) -> Vec<[f64; 2]> {
        self.traits
            .iter()
            .map(|t| {
                let v = g.value(t.logits).data();
                [v[0], v[1]]
            })
            .collect()
    }

    pub fn predict(&self, g: &Graph) -> Vec<u8> {
        self.logits(g).iter().map(|z| argmax2(*z)).collect()
    }
}

/// Class with the larger logit; exact ties go to class 0.
pub fn argmax2(z: [f64; 2]) -> u8 {
    u8::from(z[1] > z[0])
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub l0: Var,
}

/// `λ·ce + l0` when the edge penalty is on, otherwise `ce`. `ce` averages
/// the per-user sum of trait cross-entropies over the batch; `l0` sums the
/// edge penalty over users and traits.
pub fn loss(
    g: &mut Graph,
    traces: &[ForwardTrace],
    labels: &[&[u8]],
    lambda: f64,
    cfg: &ModelConfig,
) -> Result<LossTerms> {
    if !(0.0..=LAMBDA_MAX).contains(&lambda) {
        return Err(Error::Domain {
            op: "loss",
            detail: format!("lambda {lambda} outside [0, {LAMBDA_MAX}]"),
        });
    }
    if traces.is_empty() || traces.len() != labels.len() {
        return Err(Error::Shape {
            op: "loss",
            left: vec![traces.len()],
            right: vec![labels.len()],
        });
    }
    let mut ce: Option<Var> = None;
    for t in 0..cfg.traits {
        let rows: Vec<Var> = traces.iter().map(|tr| tr.traits[t].logits).collect();
        let ys: Vec<usize> = labels
            .iter()
            .map(|l| {
                l.get(t).map(|&y| y as usize).ok_or(Error::Shape {
                    op: "loss",
                    left: vec![cfg.traits],
                    right: vec![l.len()],
                })
            })
            .collect::<Result<_>>()?;
        let z = g.concat_rows(&rows)?;
        let term = g.softmax_cross_entropy(z, &ys)?;
        ce = Some(match ce {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let ce = ce.expect("at least one trait");
    let mut l0: Option<Var> = None;
    for tr in traces {
        for tt in &tr.traits {
            l0 = Some(match l0 {
                None => tt.l0,
                Some(acc) => g.add(acc, tt.l0)?,
            });
        }
    }
    let l0 = l0.expect("at least one trait");
    let total = if cfg.l0_enabled {
        let weighted = g.scale(ce, lambda);
        g.add(weighted, l0)?
    } else {
        ce
    };
    Ok(LossTerms { total, ce, l0 })
}

/// `A_ij = 1` where `cos(h_i, h_j) > threshold`, over distinct rows of `h`.
/// The diagonal stays zero; normalization adds the self-loops.
pub fn build_fixed_graph(h: &Tensor, threshold: f64) -> Result<Tensor> {
    let n = h.rows();
    let norms: Vec<f64> = (0..n)
        .map(|i| h.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&x| x == 0.0) {
        return Err(Error::Domain {
            op: "build_fixed_graph",
            detail: format!("row {i} has zero norm"),
        });
    }
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let dot: f64 = h.row(i).iter().zip(h.row(j)).map(|(x, y)| x * y).sum();
            let cos = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            if cos > threshold {
                a.data_mut()[i * n + j] = 1.0;
            }
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests;
