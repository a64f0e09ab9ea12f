//! Binary checkpoint: magic, version, JSON header, then named f32 blobs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Result, TdlpError};
use crate::features::Standardizer;
use crate::tensor::Mat;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TDLPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    stats: Option<Standardizer>,
    link_threshold: Option<f64>,
}

pub(crate) fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        stats: model.stats.clone(),
        link_threshold: model.link_threshold,
    })
    .map_err(|e| TdlpError::Checkpoint(format!("header encoding: {e}")))?;
    let mut out = Vec::with_capacity(64 + header.len() + 4 * model.params.num_scalars());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, m) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(TdlpError::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub(crate) fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(TdlpError::Checkpoint("bad magic bytes: not a checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(TdlpError::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = r.u64("header length")? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| TdlpError::Checkpoint(format!("header: {e}")))?;
    let count = r.u32("blob count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "name")?)
            .map_err(|_| TdlpError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")?;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims[..] {
            [c] => (1, c),
            [rows, cols] => (rows, cols),
            _ => return Err(TdlpError::Checkpoint(format!("`{name}` has unsupported rank {rank}"))),
        };
        let bytes = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| TdlpError::Checkpoint(format!("`{name}` has absurd dimensions")))?;
        let raw = r.take(bytes, &format!("blob `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Mat::from_vec(rows, cols, data));
    }
    if r.pos != buf.len() {
        return Err(TdlpError::Checkpoint("trailing bytes after last blob".into()));
    }
    let mut params = ParamStore::default();
    for (k, v) in tensors {
        params.insert(k, v);
    }
    if !params.all_finite() {
        return Err(TdlpError::Checkpoint("non-finite parameter values".into()));
    }
    let mut model = Model::new(header.config, params, header.stats)?;
    model.link_threshold = header.link_threshold;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)?).map_err(|e| TdlpError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| TdlpError::io(path, e))?;
    from_bytes(&buf)
}
