use std::fmt::Write as _;

use crate::autodiff::Tensor;
use crate::l2c::user_node_edges;

pub const CSV_HEADER: &str = "epoch,trait,layer,graph_ratio,unode_ratio";

/// Integer edge counts for one (trait, layer) cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EdgeTally {
    pub kept: u64,
    pub possible: u64,
    pub unode_kept: u64,
    pub unode_possible: u64,
}

impl EdgeTally {
    /// Counts one user's adjacency; the user node is the last row.
    pub fn of(adjacency: &Tensor) -> Self {
        let n = adjacency.rows();
        let u = n - 1;
        EdgeTally {
            kept: adjacency.data().iter().filter(|&&x| x != 0.0).count() as u64,
            possible: (n * n) as u64,
            unode_kept: user_node_edges(adjacency, u) as u64,
            unode_possible: 2 * u as u64,
        }
    }

    pub fn merge(&mut self, other: &EdgeTally) {
        self.kept += other.kept;
        self.possible += other.possible;
        self.unode_kept += other.unode_kept;
        self.unode_possible += other.unode_possible;
    }

    pub fn graph_ratio(&self) -> f64 {
        ratio(self.kept, self.possible)
    }

    pub fn unode_ratio(&self) -> f64 {
        ratio(self.unode_kept, self.unode_possible)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityRow {
    pub epoch: usize,
    pub trait_idx: usize,
    /// 1-based layer index.
    pub layer: usize,
    pub graph_ratio: f64,
    pub unode_ratio: f64,
}

/// `tallies[t][k]` summed over a dataset, one row per cell.
pub fn rows(epoch: usize, tallies: &[Vec<EdgeTally>]) -> Vec<SparsityRow> {
    tallies
        .iter()
        .enumerate()
        .flat_map(|(t, layers)| {
            layers.iter().enumerate().map(move |(k, tally)| SparsityRow {
                epoch,
                trait_idx: t,
                layer: k + 1,
                graph_ratio: tally.graph_ratio(),
                unode_ratio: tally.unode_ratio(),
            })
        })
        .collect()
}

/// Mean graph-level ratio over the rows of the latest epoch.
pub fn final_graph_ratio(rows: &[SparsityRow]) -> Option<f64> {
    let last = rows.iter().map(|r| r.epoch).max()?;
    let latest: Vec<f64> = rows.iter().filter(|r| r.epoch == last).map(|r| r.graph_ratio).collect();
    Some(latest.iter().sum::<f64>() / latest.len() as f64)
}

pub fn to_csv(rows: &[SparsityRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.epoch, r.trait_idx, r.layer, r.graph_ratio, r.unode_ratio
        );
    }
    s
}
