//! Binary checkpoint format.
//!
//! ```text
//! #slp-ckpt v1\n
//! #config <key>=<value>\n        (zero or more; model.* keys required)
//! #records <count>\n
//! record*: u64 name_len | name (UTF-8) | u64 rank | rank × u64 dims | f32 values
//! ```
//! All integers and floats are little-endian. Values are stored as `f32`.

use std::path::Path;

use super::{ModelConfig, SlpModel};
use crate::error::{Error, Result};
use crate::numkit::{ParamStore, Tensor};

pub const CKPT_HEADER: &str = "#slp-ckpt v1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Resolved run configuration, in file order.
    pub config: Vec<(String, String)>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn into_model(self) -> Result<SlpModel> {
        let cfg = ModelConfig::from_pairs(&self.config)?;
        SlpModel::from_store(cfg, self.params)
    }
}

pub fn write_checkpoint(config: &[(String, String)], params: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_HEADER.as_bytes());
    out.push(b'\n');
    for (k, v) in config {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::invalid(format!("config entry {k:?} cannot be serialized")));
        }
        out.extend_from_slice(format!("#config {k}={v}\n").as_bytes());
    }
    out.extend_from_slice(format!("#records {}\n", params.len()).as_bytes());
    for (_, p) in params.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(p.value.rank() as u64).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.pos as u64, msg)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.err("unterminated header line"))?;
        let s = std::str::from_utf8(&rest[..end]).map_err(|_| self.err("header is not UTF-8"))?;
        self.pos += end + 1;
        Ok(s)
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: wanted {n} bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str, limit: u64) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        if v > limit {
            return Err(Error::format(at as u64, format!("{what} {v} exceeds {limit}")));
        }
        Ok(v as usize)
    }
}

pub fn read_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.line()? != CKPT_HEADER {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let mut config = Vec::new();
    let count = loop {
        let at = r.pos;
        let line = r.line()?;
        if let Some(kv) = line.strip_prefix("#config ") {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::format(at as u64, "config line without '='"))?;
            config.push((k.to_string(), v.to_string()));
        } else if let Some(n) = line.strip_prefix("#records ") {
            break n
                .parse::<usize>()
                .map_err(|_| Error::format(at as u64, "bad record count"))?;
        } else {
            return Err(Error::format(at as u64, format!("unexpected header line {line:?}")));
        }
    };
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.usize("name length", 4096)?;
        let at = r.pos;
        let name = std::str::from_utf8(r.bytes(name_len)?)
            .map_err(|_| Error::format(at as u64, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.usize("rank", 8)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.usize("dimension", 1 << 32)?);
        }
        let numel: usize = shape.iter().product();
        let at = r.pos;
        let raw = r.bytes(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(at as u64, e.to_string()))?;
        params
            .add(name, t)
            .map_err(|e| Error::format(at as u64, e.to_string()))?;
    }
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes after last record"));
    }
    Ok(Checkpoint { config, params })
}

pub fn save_checkpoint(path: &Path, config: &[(String, String)], params: &ParamStore) -> Result<()> {
    let bytes = write_checkpoint(config, params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
