use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{Posts, RawPosts, Record, UserSample};
use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const RESERVED: usize = 2;

/// Token to id map. Ids are dense: 0 is padding, 1 is unknown, and the
/// `i`-th listed token has id `i + 2`. Immutable once built.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Schema(format!("invalid vocabulary token {t:?}")));
            }
            if ids.insert(t.clone(), i + RESERVED).is_some() {
                return Err(Error::Schema(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    /// Tokens seen at least `min_count` times, most frequent first, ties
    /// broken lexicographically.
    pub fn build(records: &[Record], min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in records {
            if let RawPosts::Text(posts) = &r.posts {
                for t in posts.iter().flatten() {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        let mut entries: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = entries.into_iter().map(|(t, _)| t.to_owned()).collect();
        Self::from_tokens(tokens).expect("tokens come from whitespace splitting")
    }

    /// Embedding rows needed, including the reserved ids.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        id.checked_sub(RESERVED)
            .and_then(|i| self.tokens.get(i))
            .map(String::as_str)
    }

    pub fn encode(&self, record: &Record) -> UserSample {
        let posts = match &record.posts {
            RawPosts::Text(posts) => {
                Posts::Tokens(posts.iter().map(|p| p.iter().map(|t| self.id(t)).collect()).collect())
            }
            RawPosts::Vectors(v) => Posts::Vectors(v.clone()),
        };
        UserSample {
            id: record.id.clone(),
            posts,
            labels: record.labels.clone(),
        }
    }

    /// Maps a vector-schema record to a sample; text records map every token
    /// to unknown.
    pub fn passthrough(record: &Record) -> UserSample {
        Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
        }
        .encode(record)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens = text.lines().map(str::to_owned).collect();
        Self::from_tokens(tokens)
    }
}
