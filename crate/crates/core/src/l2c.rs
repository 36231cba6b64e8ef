//! Learn-to-connect: per-layer edge weights from node features, a
//! differentiable threshold that turns them into a near-binary adjacency,
//! and the edge-count penalty.
//!
//! Each kept edge carries `r / (detach(r) + eps)`: forward it is just below
//! one, backward it passes `1 / (r + eps)` to `r`. Edges with `r <= mu` are
//! exactly zero and pass nothing.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct L2cConfig {
    pub mu: f64,
    pub eps: f64,
    pub undirected: bool,
    pub single_hop: bool,
}

impl Default for L2cConfig {
    fn default() -> Self {
        L2cConfig {
            mu: 0.5,
            eps: 1e-6,
            undirected: false,
            single_hop: false,
        }
    }
}

impl L2cConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(Error::Config(format!("mu {} must lie in (0, 1)", self.mu)));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config(format!("eps {} must be positive", self.eps)));
        }
        Ok(())
    }
}

/// Query and key projections of one layer, already bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct L2cLayer {
    pub wq: Var,
    pub wk: Var,
}

/// One layer's learned graph.
#[derive(Clone, Debug)]
pub struct LayerGraph {
    /// Raw weights in (0, 1), after symmetrization when undirected.
    pub raw: Var,
    /// Masked adjacency.
    pub adjacency: Var,
    /// Entries with `raw > mu`.
    pub edge_count: usize,
}

/// `sigmoid(relu(H Wq) (H Wk)^T)` over all node pairs, self-pairs and the
/// user node included.
pub fn adjacency_weights(g: &mut Graph, h: Var, layer: L2cLayer) -> Result<Var> {
    let q = g.matmul(h, layer.wq)?;
    let q = g.relu(q);
    let k = g.matmul(h, layer.wk)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    Ok(g.sigmoid(scores))
}

/// `(R + R^T) / 2`.
pub fn symmetrize(g: &mut Graph, r: Var) -> Result<Var> {
    let shape = g.shape(r);
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Shape {
            op: "symmetrize",
            left: shape.to_vec(),
            right: vec![],
        });
    }
    let rt = g.transpose(r)?;
    let s = g.add(r, rt)?;
    Ok(g.scale(s, 0.5))
}

pub fn differentiable_threshold(g: &mut Graph, r: Var, cfg: &L2cConfig) -> Result<LayerGraph> {
    let detached = g.stop_gradient(r);
    let denom = g.add_scalar(detached, cfg.eps);
    let scaled = g.div(r, denom)?;
    let mask = g.value(r).map(|x| if x > cfg.mu { 1.0 } else { 0.0 });
    let edge_count = mask.data().iter().filter(|&&m| m > 0.0).count();
    let adjacency = g.mask(scaled, mask)?;
    Ok(LayerGraph {
        raw: r,
        adjacency,
        edge_count,
    })
}

/// Weights, optional symmetrization, then threshold.
pub fn learn_graph(g: &mut Graph, h: Var, layer: L2cLayer, cfg: &L2cConfig) -> Result<LayerGraph> {
    let mut r = adjacency_weights(g, h, layer)?;
    if cfg.undirected {
        r = symmetrize(g, r)?;
    }
    differentiable_threshold(g, r, cfg)
}

/// Sum of all adjacency entries over the given graphs; close to the number of
/// kept edges.
pub fn l0_penalty(g: &mut Graph, graphs: &[&LayerGraph]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for lg in graphs {
        let s = g.sum(lg.adjacency);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
}

/// Kept entries in row `u` and column `u`, excluding `(u, u)`.
pub fn user_node_edges(adjacency: &Tensor, u: usize) -> usize {
    let n = adjacency.rows();
    (0..n)
        .filter(|&j| j != u)
        .map(|j| usize::from(adjacency.at(u, j) != 0.0) + usize::from(adjacency.at(j, u) != 0.0))
        .sum()
}
