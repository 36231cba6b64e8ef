use super::PAD_ID;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `(N+1)×d` node features: rows `0..N` are posts, row `N` is the user node.
#[derive(Clone, Copy, Debug)]
pub struct NodeMatrix {
    pub h: Var,
    pub posts: usize,
}

impl NodeMatrix {
    pub fn nodes(&self) -> usize {
        self.posts + 1
    }

    pub fn user_row(&self) -> usize {
        self.posts
    }
}

fn append_user_node(g: &mut Graph, posts: Var, n: usize) -> Result<NodeMatrix> {
    let u = g.set_mean_rows(posts)?;
    let h = g.concat_rows(&[posts, u])?;
    Ok(NodeMatrix { h, posts: n })
}

/// Bag-of-embeddings post encoder: each post is the mean of its non-padding
/// token embeddings, so gradients reach `embeddings`.
pub fn encode_bag(g: &mut Graph, embeddings: Var, posts: &[Vec<usize>]) -> Result<NodeMatrix> {
    if posts.is_empty() {
        return Err(Error::Schema("user has no posts".into()));
    }
    let mut rows = Vec::with_capacity(posts.len());
    for (i, post) in posts.iter().enumerate() {
        let ids: Vec<usize> = post.iter().copied().filter(|&t| t != PAD_ID).collect();
        if ids.is_empty() {
            return Err(Error::Schema(format!("post {i} has no tokens to pool")));
        }
        let e = g.gather_rows(embeddings, &ids)?;
        rows.push(g.set_mean_rows(e)?);
    }
    let stacked = g.concat_rows(&rows)?;
    append_user_node(g, stacked, posts.len())
}

/// Precomputed post vectors as constant rows, plus the averaged user node.
pub fn load_precomputed(g: &mut Graph, vectors: &[Vec<f64>], d: usize) -> Result<NodeMatrix> {
    if vectors.is_empty() {
        return Err(Error::Schema("user has no posts".into()));
    }
    if let Some(v) = vectors.iter().find(|v| v.len() != d) {
        return Err(Error::Shape {
            op: "load_precomputed",
            left: vec![d],
            right: vec![v.len()],
        });
    }
    let posts = g.constant(Tensor::from_rows(vectors)?);
    append_user_node(g, posts, vectors.len())
}
