//! Binary checkpoints: model metadata plus every parameter entry.
//!
//! Layout (little-endian): magic `CAUPSI1\n`; `u32` metadata length and UTF-8
//! `key = value` metadata; `u32` entry count; per entry in path order `u32`
//! path length, path bytes, `u8` trainable flag, `u32` rank, `u32` extents and
//! `f32` values; finally a CRC-32 of all preceding bytes.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{CaupsiError, Result};
use crate::model::{Ablation, CauPsi, ModelConfig};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CAUPSI1\n";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(model: &CauPsi, params: ParamStore<f32>) -> Self {
        Checkpoint {
            model: model.cfg,
            ablation: model.ablation,
            params,
        }
    }

    /// Rebuilds the model and checks the stored entries against its layout.
    pub fn instantiate(&self) -> Result<CauPsi> {
        let m = CauPsi::new(self.model, self.ablation)?;
        m.check_compatible(&self.params)?;
        Ok(m)
    }

    fn meta(&self) -> String {
        let rc = RunConfig {
            model: self.model,
            ablation: self.ablation,
            ..Default::default()
        };
        let mut s: String = rc
            .to_text()
            .lines()
            .filter(|l| l.starts_with("model.") || (l.starts_with("clip.") && !l.starts_with("clip.frames")) || l.starts_with("ablation"))
            .map(|l| format!("{l}\n"))
            .collect();
        s.push_str(&format!("domain_k = {}\n", self.model.domain_k));
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = self.meta();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (path, p) in self.params.iter() {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.push(p.trainable as u8);
            let shape = p.tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CaupsiError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(CaupsiError::Checkpoint("checksum mismatch; file is corrupt or truncated".into()));
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| CaupsiError::Checkpoint("metadata is not UTF-8".into()))?
            .to_string();
        let mut domain_k = None;
        let mut cfg_lines = String::new();
        for line in meta.lines() {
            match line.split_once('=') {
                Some((k, v)) if k.trim() == "domain_k" => {
                    domain_k = Some(
                        v.trim()
                            .parse::<usize>()
                            .map_err(|_| CaupsiError::Checkpoint(format!("bad domain_k '{}'", v.trim())))?,
                    );
                }
                _ => {
                    cfg_lines.push_str(line);
                    cfg_lines.push('\n');
                }
            }
        }
        let rc = RunConfig::parse(&cfg_lines).map_err(|e| CaupsiError::Checkpoint(format!("metadata: {e}")))?;
        let mut model = rc.model;
        model.domain_k = domain_k.ok_or_else(|| CaupsiError::Checkpoint("metadata lacks domain_k".into()))?;

        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let plen = r.u32()? as usize;
            let path = std::str::from_utf8(r.take(plen)?)
                .map_err(|_| CaupsiError::Checkpoint("entry path is not UTF-8".into()))?
                .to_string();
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(CaupsiError::Checkpoint(format!("entry '{path}': bad trainable flag {b}"))),
            };
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(CaupsiError::Checkpoint(format!("entry '{path}': rank {rank} too large")));
            }
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| CaupsiError::Checkpoint("entry too large".into()))?)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| CaupsiError::Checkpoint(format!("entry '{path}': {e}")))?;
            params.insert(&path, t, trainable)?;
        }
        if r.pos != body.len() {
            return Err(CaupsiError::Checkpoint(format!("{} trailing bytes after entries", body.len() - r.pos)));
        }
        Ok(Checkpoint {
            model,
            ablation: rc.ablation,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CaupsiError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CaupsiError::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| CaupsiError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CaupsiError::Checkpoint("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CauPsi {
        let cfg = ModelConfig {
            d_c: 8,
            d_f: 8,
            d_z: 8,
            d_t: 4,
            d_e: 4,
            d_psi: 4,
            heads: 2,
            head_hidden: 8,
            scene_hidden: 4,
            adv_hidden: 4,
            domain_k: 3,
            ..Default::default()
        };
        CauPsi::new(cfg, Ablation::parse_list(&["crossview"]).unwrap()).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = small();
        let ck = Checkpoint::new(&m, m.init_params(4).unwrap());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        for ((pa, a), (pb, b)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(pa, pb);
            assert_eq!(a.trainable, b.trainable);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
        back.instantiate().unwrap();
    }

    #[test]
    fn corruption_is_detected() {
        let m = small();
        let bytes = Checkpoint::new(&m, m.init_params(4).unwrap()).to_bytes();
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CaupsiError::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]), Err(CaupsiError::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(b"garbage!garbage"), Err(CaupsiError::Checkpoint(_))));
    }
}
