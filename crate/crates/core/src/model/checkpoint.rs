//! Binary checkpoints.
//!
//! ```text
//! ddgcn-checkpoint 1
//! config <bytes>
//! <model config, `key = value` lines>
//! meta <count>
//! <key> = <value>
//! tensors <count>
//! <name> <rank> <dim>...        (then `len` little-endian f64 values)
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use super::{Group, ModelConfig, ParamStore};
use crate::autodiff::Tensor;
use crate::config::{model_from_text, model_to_text};
use crate::error::{Error, Result};

const MAGIC: &str = "ddgcn-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Free-form run metadata such as `epoch` and `seed`.
    pub meta: BTreeMap<String, String>,
}

pub fn group_of(name: &str) -> Group {
    if name == "embed" {
        Group::Encoder
    } else if name.contains(".l2c.") {
        Group::L2c
    } else {
        Group::Other
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut s = String::new();
    if r.read_line(&mut s)? == 0 {
        return Err(bad("unexpected end of file"));
    }
    Ok(s.trim_end_matches('\n').to_owned())
}

fn counted<R: BufRead>(r: &mut R, tag: &str) -> Result<usize> {
    let line = read_line(r)?;
    line.strip_prefix(tag)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| bad(format!("expected `{tag} <n>`, found {line:?}")))
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let config = model_to_text(&self.config);
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "config {}", config.len())?;
        w.write_all(config.as_bytes())?;
        writeln!(w, "meta {}", self.meta.len())?;
        for (k, v) in &self.meta {
            writeln!(w, "{k} = {v}")?;
        }
        writeln!(w, "tensors {}", self.params.len())?;
        for (_, p) in self.params.iter() {
            let shape = p.value.shape();
            write!(w, "{} {}", p.name, shape.len())?;
            for d in shape {
                write!(w, " {d}")?;
            }
            writeln!(w)?;
            for x in p.value.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        if read_line(r)? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let n = counted(r, "config")?;
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|_| bad("truncated config block"))?;
        let text = String::from_utf8(buf).map_err(|_| bad("config block is not UTF-8"))?;
        let config = model_from_text(&text).map_err(|e| bad(e.to_string()))?;

        let mut meta = BTreeMap::new();
        for _ in 0..counted(r, "meta")? {
            let line = read_line(r)?;
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| bad(format!("bad meta line {line:?}")))?;
            meta.insert(k.to_owned(), v.to_owned());
        }

        let mut params = ParamStore::new();
        for _ in 0..counted(r, "tensors")? {
            let line = read_line(r)?;
            let mut parts = line.split(' ');
            let name = parts
                .next()
                .filter(|s| !s.is_empty())
                .ok_or_else(|| bad("empty tensor name"))?;
            let nums: Vec<usize> = parts
                .map(|s| s.parse().map_err(|_| bad(format!("bad tensor header {line:?}"))))
                .collect::<Result<_>>()?;
            let (&rank, dims) = nums
                .split_first()
                .ok_or_else(|| bad(format!("bad tensor header {line:?}")))?;
            if dims.len() != rank {
                return Err(bad(format!("tensor {name}: rank {rank} but {} dims", dims.len())));
            }
            let len: usize = dims.iter().product();
            let mut bytes = vec![0u8; len * 8];
            r.read_exact(&mut bytes)
                .map_err(|_| bad(format!("tensor {name} is truncated")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let value = Tensor::new(dims.to_vec(), data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
            if params.find(name).is_some() {
                return Err(bad(format!("duplicate tensor {name}")));
            }
            params.add(name, value, group_of(name));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Checkpoint { config, params, meta })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut std::io::Cursor::new(bytes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
