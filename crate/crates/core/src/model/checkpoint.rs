//! Checkpoint container: a small binary format holding the model config, the
//! weight tensors, and any extra named blobs (optimizer slots, trainer
//! counters). Everything is little-endian and written in a fixed order so a
//! save/load/save cycle is byte-identical.
//!
//! Layout:
//! ```text
//! "ALCP"  magic
//! u32     format version (currently 1)
//! u32     header length in bytes
//! [u8]    header: utf8 "key = value\n" lines describing the config
//! u32     blob count
//! per blob:
//!   u16   name length   [u8] name (utf8)
//!   u64   payload length   [u8] payload
//! ```
//! Weight blobs come first, in [`Weights::visit`] order, each payload the raw
//! little-endian scalars at the checkpoint's declared precision.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::{Precision, Real};

use super::{FeedKind, ModelConfig, RouterKind, Weights};

const MAGIC: &[u8; 4] = b"ALCP";
const VERSION: u32 = 1;

fn header_text(cfg: &ModelConfig) -> String {
    // {:?} on the floats prints the shortest string that parses back to the
    // same bits, which keeps the header round-trippable
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };
    kv("vocab_size", cfg.vocab_size.to_string());
    kv("d_model", cfg.d_model.to_string());
    kv("n_layers", cfg.n_layers.to_string());
    kv("n_heads", cfg.n_heads.to_string());
    kv("d_ff", cfg.d_ff.to_string());
    kv("max_latent_len", cfg.max_latent_len.to_string());
    kv("reach_threshold", format!("{:?}", cfg.reach_threshold));
    kv("router", cfg.router.as_str().to_string());
    kv("router_hidden", cfg.router_hidden.to_string());
    kv("feed", cfg.feed.as_str().to_string());
    kv("detach_router_input", cfg.detach_router_input.to_string());
    kv("rope_base", format!("{:?}", cfg.rope_base));
    kv("max_seq_len", cfg.max_seq_len.to_string());
    kv("precision", cfg.precision.as_str().to_string());
    s
}

fn parse_header(text: &str) -> Result<ModelConfig> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut map = HashMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| bad(format!("malformed header line {line:?}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let mut take = |k: &str| map.remove(k).ok_or_else(|| bad(format!("header missing {k}")));
    let usize_of = |k: &str, v: String| {
        v.parse::<usize>().map_err(|_| bad(format!("bad value for {k}: {v:?}")))
    };
    let f64_of =
        |k: &str, v: String| v.parse::<f64>().map_err(|_| bad(format!("bad value for {k}: {v:?}")));
    let cfg = ModelConfig {
        vocab_size: usize_of("vocab_size", take("vocab_size")?)?,
        d_model: usize_of("d_model", take("d_model")?)?,
        n_layers: usize_of("n_layers", take("n_layers")?)?,
        n_heads: usize_of("n_heads", take("n_heads")?)?,
        d_ff: usize_of("d_ff", take("d_ff")?)?,
        max_latent_len: usize_of("max_latent_len", take("max_latent_len")?)?,
        reach_threshold: f64_of("reach_threshold", take("reach_threshold")?)?,
        router: {
            let v = take("router")?;
            RouterKind::parse(&v).ok_or_else(|| bad(format!("unknown router {v:?}")))?
        },
        router_hidden: usize_of("router_hidden", take("router_hidden")?)?,
        feed: {
            let v = take("feed")?;
            FeedKind::parse(&v).ok_or_else(|| bad(format!("unknown feed {v:?}")))?
        },
        detach_router_input: {
            let v = take("detach_router_input")?;
            v.parse::<bool>().map_err(|_| bad(format!("bad value for detach_router_input: {v:?}")))?
        },
        rope_base: f64_of("rope_base", take("rope_base")?)?,
        max_seq_len: usize_of("max_seq_len", take("max_seq_len")?)?,
        precision: {
            let v = take("precision")?;
            Precision::parse(&v).ok_or_else(|| bad(format!("unknown precision {v:?}")))?
        },
    };
    if let Some(k) = map.into_keys().next() {
        return Err(bad(format!("unknown header key {k:?}")));
    }
    cfg.validate().map_err(|e| bad(format!("invalid config in header: {e}")))?;
    Ok(cfg)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// A parsed checkpoint: the config plus every named blob, weight tensors and
/// extras alike, in file order.
pub struct RawCheckpoint {
    pub cfg: ModelConfig,
    pub blobs: Vec<(String, Vec<u8>)>,
}

impl RawCheckpoint {
    pub fn blob(&self, name: &str) -> Option<&[u8]> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    /// Reassemble the weight tensors at precision `T`, which must match the
    /// checkpoint's declared precision.
    pub fn load_weights<T: Real>(&self) -> Result<Weights<T>> {
        if self.cfg.precision != T::PRECISION {
            return Err(Error::Checkpoint(format!(
                "checkpoint precision is {}, load requested {}",
                self.cfg.precision,
                T::PRECISION
            )));
        }
        let width = T::PRECISION.bytes();
        let mut weights = Weights::<T>::zeros(&self.cfg);
        let mut missing = None;
        weights.visit_mut(|name, slice| {
            if missing.is_some() {
                return;
            }
            match self.blob(name) {
                Some(bytes) if bytes.len() == slice.len() * width => {
                    for (i, chunk) in bytes.chunks_exact(width).enumerate() {
                        slice[i] = T::read_le(chunk);
                    }
                }
                Some(bytes) => {
                    missing = Some(format!(
                        "tensor {name} holds {} bytes, expected {}",
                        bytes.len(),
                        slice.len() * width
                    ));
                }
                None => missing = Some(format!("tensor {name} absent")),
            }
        });
        match missing {
            Some(m) => Err(Error::Checkpoint(m)),
            None => Ok(weights),
        }
    }
}

/// Write a checkpoint: config header, weight tensors in visitor order, then
/// `extras` verbatim in the order given.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    cfg: &ModelConfig,
    weights: &Weights<T>,
    extras: &[(String, Vec<u8>)],
) -> Result<()> {
    if cfg.precision != T::PRECISION {
        return Err(Error::Checkpoint(format!(
            "config precision is {}, weights are {}",
            cfg.precision,
            T::PRECISION
        )));
    }
    let header = header_text(cfg);
    let mut named: Vec<(String, Vec<u8>)> = Vec::new();
    weights.visit(|name, slice| {
        let mut bytes = Vec::with_capacity(slice.len() * T::PRECISION.bytes());
        for &v in slice {
            v.write_le(&mut bytes);
        }
        named.push((name.to_string(), bytes));
    });
    let n_blobs = named.len() + extras.len();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(n_blobs as u32).to_le_bytes());
    for (name, bytes) in named.iter().chain(extras.iter()) {
        let name_bytes = name.as_bytes();
        assert!(name_bytes.len() <= u16::MAX as usize, "blob name too long");
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(bytes);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<RawCheckpoint> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(header_len)?)
        .map_err(|_| Error::Checkpoint("header is not utf8".into()))?;
    let cfg = parse_header(header)?;
    let n_blobs = r.u32()? as usize;
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("blob name is not utf8".into()))?
            .to_string();
        let payload_len = r.u64()? as usize;
        blobs.push((name, r.take(payload_len)?.to_vec()));
    }
    if r.at != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after last blob".into()));
    }
    Ok(RawCheckpoint { cfg, blobs })
}
