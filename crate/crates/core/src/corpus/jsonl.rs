use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{UserSample, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schema {
    Text,
    Vectors,
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub traits: usize,
    pub max_posts: usize,
    /// Maximum tokens kept per post.
    pub max_len: usize,
    /// Tokens dropped before truncation, matched case-insensitively.
    pub stopwords: Option<HashSet<String>>,
}

impl LoadOptions {
    pub fn new(traits: usize) -> Self {
        LoadOptions {
            traits,
            max_posts: 50,
            max_len: 70,
            stopwords: None,
        }
    }
}

/// Posts as they appear on disk, before vocabulary lookup.
#[derive(Clone, Debug, PartialEq)]
pub enum RawPosts {
    Text(Vec<Vec<String>>),
    Vectors(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    pub posts: RawPosts,
    pub labels: Vec<u8>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TextLine {
    id: String,
    posts: Vec<String>,
    labels: Vec<u8>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VectorLine {
    id: String,
    vectors: Vec<Vec<f64>>,
    labels: Vec<u8>,
}

#[derive(Serialize)]
struct TextOut<'a> {
    id: &'a str,
    posts: Vec<String>,
    labels: &'a [u8],
}

#[derive(Serialize)]
struct VectorOut<'a> {
    id: &'a str,
    vectors: &'a [Vec<f64>],
    labels: &'a [u8],
}

/// Reads one user per line, truncating to the first `max_posts` posts and
/// the first `max_len` tokens of each post. Blank lines are skipped.
pub fn load_jsonl(path: &Path, schema: Schema, opts: &LoadOptions) -> Result<Vec<Record>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let err = |detail: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            detail,
        };
        let (id, posts, labels) = match schema {
            Schema::Text => {
                let rec: TextLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
                let posts = rec
                    .posts
                    .iter()
                    .take(opts.max_posts)
                    .map(|p| tokenize(p, opts))
                    .collect();
                (rec.id, RawPosts::Text(posts), rec.labels)
            }
            Schema::Vectors => {
                let rec: VectorLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
                let mut vectors = rec.vectors;
                vectors.truncate(opts.max_posts);
                if let Some(first) = vectors.first() {
                    let d = first.len();
                    if d == 0 || vectors.iter().any(|v| v.len() != d) {
                        return Err(err("post vectors have inconsistent lengths".into()));
                    }
                }
                (rec.id, RawPosts::Vectors(vectors), rec.labels)
            }
        };
        if labels.len() != opts.traits {
            return Err(err(format!("expected {} labels, found {}", opts.traits, labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(err(format!("label {bad} is not binary")));
        }
        let n = match &posts {
            RawPosts::Text(p) => p.len(),
            RawPosts::Vectors(p) => p.len(),
        };
        if n == 0 {
            return Err(err("user has no posts".into()));
        }
        out.push(Record { id, posts, labels });
    }
    Ok(out)
}

fn tokenize(post: &str, opts: &LoadOptions) -> Vec<String> {
    post.split_whitespace()
        .filter(|t| match &opts.stopwords {
            Some(stop) => !stop.contains(&t.to_lowercase()),
            None => true,
        })
        .take(opts.max_len)
        .map(str::to_owned)
        .collect()
}

/// Loads and maps records to samples. Text schema needs a vocabulary.
pub fn load_samples(
    path: &Path,
    schema: Schema,
    opts: &LoadOptions,
    vocab: Option<&Vocabulary>,
) -> Result<Vec<UserSample>> {
    let records = load_jsonl(path, schema, opts)?;
    match (schema, vocab) {
        (Schema::Text, None) => Err(Error::Config("text schema requires a vocabulary".into())),
        (Schema::Text, Some(v)) => Ok(records.iter().map(|r| v.encode(r)).collect()),
        (Schema::Vectors, _) => Ok(records.iter().map(Vocabulary::passthrough).collect()),
    }
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let line = match &r.posts {
            RawPosts::Text(posts) => serde_json::to_string(&TextOut {
                id: &r.id,
                posts: posts.iter().map(|p| p.join(" ")).collect(),
                labels: &r.labels,
            }),
            RawPosts::Vectors(vectors) => serde_json::to_string(&VectorOut {
                id: &r.id,
                vectors,
                labels: &r.labels,
            }),
        }
        .map_err(|e| Error::Schema(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_two_users() {
        let f = file(concat!(
            r#"{"id":"a","posts":["x y","y z","z"],"labels":[0,1,0,1]}"#,
            "\n",
            r#"{"id":"b","posts":["p","q r","s"],"labels":[1,1,0,0]}"#,
            "\n"
        ));
        let recs = load_jsonl(f.path(), Schema::Text, &LoadOptions::new(4)).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].id, "a");
        match &recs[1].posts {
            RawPosts::Text(p) => {
                assert_eq!(p.len(), 3);
                assert_eq!(p[1], vec!["q", "r"]);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn keeps_first_max_posts() {
        let posts: Vec<String> = (0..120).map(|i| format!("\"w{i}\"")).collect();
        let f = file(&format!(
            "{{\"id\":\"u\",\"posts\":[{}],\"labels\":[1]}}\n",
            posts.join(",")
        ));
        let mut opts = LoadOptions::new(1);
        opts.max_posts = 100;
        let recs = load_jsonl(f.path(), Schema::Text, &opts).unwrap();
        let RawPosts::Text(p) = &recs[0].posts else { panic!() };
        assert_eq!(p.len(), 100);
        assert_eq!(p[0], vec!["w0"]);
        assert_eq!(p[99], vec!["w99"]);
    }

    #[test]
    fn truncates_long_posts() {
        let long: Vec<String> = (0..100).map(|i| format!("t{i}")).collect();
        let f = file(&format!(
            "{{\"id\":\"u\",\"posts\":[\"{}\"],\"labels\":[1]}}\n",
            long.join(" ")
        ));
        let recs = load_jsonl(f.path(), Schema::Text, &LoadOptions::new(1)).unwrap();
        let RawPosts::Text(p) = &recs[0].posts else { panic!() };
        assert_eq!(p[0].len(), 70);
    }

    #[test]
    fn missing_labels_reports_line() {
        let f = file(concat!(
            r#"{"id":"a","posts":["x"],"labels":[0]}"#,
            "\n",
            r#"{"id":"b","posts":["x"]}"#,
            "\n"
        ));
        match load_jsonl(f.path(), Schema::Text, &LoadOptions::new(1)) {
            Err(Error::Parse { line, detail, .. }) => {
                assert_eq!(line, 2);
                assert!(detail.contains("labels"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_label_count_is_schema_error() {
        let f = file("{\"id\":\"a\",\"posts\":[\"x\"],\"labels\":[0,1]}\n");
        let e = load_jsonl(f.path(), Schema::Text, &LoadOptions::new(4)).unwrap_err();
        assert!(e.to_string().contains("expected 4 labels"), "{e}");
    }

    #[test]
    fn inconsistent_vectors_rejected() {
        let f = file("{\"id\":\"a\",\"vectors\":[[1.0,0.0],[1.0]],\"labels\":[0]}\n");
        assert!(load_jsonl(f.path(), Schema::Vectors, &LoadOptions::new(1)).is_err());
    }

    #[test]
    fn stopwords_case_insensitive() {
        let f = file("{\"id\":\"a\",\"posts\":[\"I am an INTJ really\"],\"labels\":[0]}\n");
        let mut opts = LoadOptions::new(1);
        opts.stopwords = Some(["intj".to_string()].into_iter().collect());
        let recs = load_jsonl(f.path(), Schema::Text, &opts).unwrap();
        let RawPosts::Text(p) = &recs[0].posts else { panic!() };
        assert_eq!(p[0], vec!["I", "am", "an", "really"]);
    }

    #[test]
    fn truncation_is_a_fixpoint() {
        let long: Vec<String> = (0..90).map(|i| format!("t{i}")).collect();
        let posts: Vec<String> = (0..60).map(|_| format!("\"{}\"", long.join(" "))).collect();
        let f = file(&format!(
            "{{\"id\":\"u\",\"posts\":[{}],\"labels\":[1,0]}}\n",
            posts.join(",")
        ));
        let opts = LoadOptions::new(2);
        let once = load_jsonl(f.path(), Schema::Text, &opts).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_jsonl(out.path(), &once).unwrap();
        let twice = load_jsonl(out.path(), Schema::Text, &opts).unwrap();
        assert_eq!(once, twice);
    }
}
