//! Dataset ingestion, post encoders and the synthetic corpus generator.

mod encode;
mod jsonl;
pub mod synth;
mod vocab;

pub use encode::{encode_bag, load_precomputed, NodeMatrix};
pub use jsonl::{load_jsonl, load_samples, write_jsonl, LoadOptions, RawPosts, Record, Schema};
pub use vocab::{Vocabulary, PAD_ID, UNK_ID};

/// Post payloads of one user. A sample never mixes kinds.
#[derive(Clone, Debug, PartialEq)]
pub enum Posts {
    /// Token ids per post.
    Tokens(Vec<Vec<usize>>),
    /// One precomputed `d`-vector per post.
    Vectors(Vec<Vec<f64>>),
}

impl Posts {
    pub fn len(&self) -> usize {
        match self {
            Posts::Tokens(p) => p.len(),
            Posts::Vectors(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The same posts reordered so that entry `i` is old entry `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Posts {
        match self {
            Posts::Tokens(p) => Posts::Tokens(order.iter().map(|&i| p[i].clone()).collect()),
            Posts::Vectors(p) => Posts::Vectors(order.iter().map(|&i| p[i].clone()).collect()),
        }
    }
}

/// One user's unordered post set with its binary trait labels.
#[derive(Clone, Debug, PartialEq)]
pub struct UserSample {
    pub id: String,
    pub posts: Posts,
    pub labels: Vec<u8>,
}

impl UserSample {
    pub fn with_posts_permuted(&self, order: &[usize]) -> UserSample {
        UserSample {
            id: self.id.clone(),
            posts: self.posts.permuted(order),
            labels: self.labels.clone(),
        }
    }
}
