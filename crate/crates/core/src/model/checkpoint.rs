//! Binary model checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        4 bytes  "FGCK"
//! version      u32      1
//! arch         5 x u64  input_dim, hidden_dim, num_layers, horizon_in, horizon_out
//! n_entries    u32
//! entry        n_entries times:
//!                u32 name length, UTF-8 name, u32 rank, rank x u64 dims, u64 offset
//! total_len    u64      P
//! params       P x f64  flattened parameters in layout order
//! adam         4 x f64  lr, beta1, beta2, eps
//!              u64      step count t
//!              P x f64  first moments, P x f64 second moments
//! checksum     32 bytes SHA-256 of every preceding byte
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::adam::{AdamConfig, AdamState};
use super::params::{GruArch, GruSeq2Seq};
use crate::aggregation::{flatten, unflatten, LayoutEntry, ParamLayout};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FGCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub layout: ParamLayout,
    pub params: Vec<f64>,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn new(model: &GruSeq2Seq, adam: &AdamState) -> Result<Self> {
        let layout = ParamLayout::for_arch(model.arch);
        let params = flatten(model, &layout)?;
        if adam.m.len() != params.len() || adam.v.len() != params.len() {
            return Err(Error::Layout(
                "optimizer state does not match model size".into(),
            ));
        }
        Ok(Self {
            layout,
            params,
            adam: adam.clone(),
        })
    }

    pub fn model(&self) -> Result<GruSeq2Seq> {
        unflatten(&self.params, &self.layout)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 24 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let a = self.layout.arch;
        for d in [
            a.input_dim,
            a.hidden_dim,
            a.num_layers,
            a.horizon_in,
            a.horizon_out,
        ] {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.layout.entries.len() as u32).to_le_bytes());
        for e in &self.layout.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(e.offset as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.layout.total_len as u64).to_le_bytes());
        let put = |out: &mut Vec<u8>, vs: &[f64]| {
            vs.iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
        };
        put(&mut out, &self.params);
        let c = self.adam.config;
        put(&mut out, &[c.lr, c.beta1, c.beta2, c.eps]);
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        put(&mut out, &self.adam.m);
        put(&mut out, &self.adam.v);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |msg: &str| Error::Integrity {
            path: origin.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < 4 + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let parsed = (|| {
            let mut dims = [0usize; 5];
            for d in &mut dims {
                *d = r.u64()? as usize;
            }
            let arch = GruArch {
                input_dim: dims[0],
                hidden_dim: dims[1],
                num_layers: dims[2],
                horizon_in: dims[3],
                horizon_out: dims[4],
            };
            let n_entries = r.u32()? as usize;
            let mut entries = Vec::with_capacity(n_entries.min(1024));
            for _ in 0..n_entries {
                let name_len = r.u32()? as usize;
                let name = String::from_utf8(r.take(name_len)?.to_vec()).ok()?;
                let rank = r.u32()? as usize;
                let shape = (0..rank)
                    .map(|_| r.u64().map(|d| d as usize))
                    .collect::<Option<Vec<_>>>()?;
                let offset = r.u64()? as usize;
                entries.push(LayoutEntry {
                    name,
                    shape,
                    offset,
                });
            }
            let total_len = r.u64()? as usize;
            let params = r.f64s(total_len)?;
            let cfg = r.f64s(4)?;
            let t = r.u64()?;
            let m = r.f64s(total_len)?;
            let v = r.f64s(total_len)?;
            let config = AdamConfig {
                lr: cfg[0],
                beta1: cfg[1],
                beta2: cfg[2],
                eps: cfg[3],
            };
            Some((
                ParamLayout {
                    arch,
                    entries,
                    total_len,
                },
                params,
                AdamState { config, t, m, v },
            ))
        })();
        let (layout, params, adam) = parsed.ok_or_else(|| corrupt("truncated body"))?;
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        layout
            .arch
            .validate()
            .map_err(|_| corrupt("invalid architecture"))?;
        if layout != ParamLayout::for_arch(layout.arch) {
            return Err(Error::Layout(format!(
                "{}: layout is not canonical for its architecture",
                origin.display()
            )));
        }
        Ok(Self {
            layout,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8)?)?;
        Some(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
}
