//! Parameter checkpoint: `MLRP`, a version word, a length-prefixed JSON
//! header, then every tensor as little-endian `f32` (language table first,
//! then each layer's weights and bias in `Layer::ALL` order).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Dense, HeadMode, Layer, PolicyConfig, PolicyParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MLRP";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct LayerShape {
    name: String,
    n_in: usize,
    n_out: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: PolicyConfig,
    seed: u64,
    head_mode: HeadMode,
    n_language: usize,
    layers: Vec<LayerShape>,
    n_params: usize,
    frozen_hash: String,
}

fn write_f32s<W: Write>(w: &mut W, v: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated parameter payload: {e}")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl PolicyParams<f32> {
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            config: self.cfg.clone(),
            seed: self.seed,
            head_mode: self.cfg.head,
            n_language: self.n_language,
            layers: Layer::ALL
                .iter()
                .map(|&l| LayerShape {
                    name: l.name().to_string(),
                    n_in: self.layer(l).n_in,
                    n_out: self.layer(l).n_out,
                })
                .collect(),
            n_params: self.n_params(),
            frozen_hash: self.frozen_hash(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        write_f32s(&mut w, &self.language)?;
        for d in &self.layers {
            write_f32s(&mut w, &d.w)?;
            write_f32s(&mut w, &d.b)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a parameter checkpoint".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != VERSION {
            return Err(Error::Format("unsupported parameter checkpoint version".into()));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let mut json = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
        if header.layers.len() != Layer::ALL.len() {
            return Err(Error::Format("unexpected layer count".into()));
        }
        let e = header.config.embed;
        let language = read_f32s(&mut r, header.n_language * e)?;
        let mut layers = Vec::with_capacity(header.layers.len());
        for (shape, l) in header.layers.iter().zip(Layer::ALL) {
            if shape.name != l.name() {
                return Err(Error::Format(format!("expected layer {}, found {}", l.name(), shape.name)));
            }
            let w = read_f32s(&mut r, shape.n_in * shape.n_out)?;
            let b = read_f32s(&mut r, shape.n_out)?;
            layers.push(Dense {
                n_in: shape.n_in,
                n_out: shape.n_out,
                w,
                b,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after parameter payload".into()));
        }
        let params = PolicyParams {
            cfg: header.config,
            seed: header.seed,
            n_language: header.n_language,
            language,
            layers,
        };
        if params.frozen_hash() != header.frozen_hash {
            return Err(Error::Format("frozen-block hash mismatch".into()));
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Embedding;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = PolicyConfig {
            view: 4,
            state_dim: 2,
            embed: 3,
            window: 2,
            hidden: 5,
            action_dim: 2,
            head: HeadMode::Gmm,
            gmm_components: 2,
        };
        let table = vec![Embedding::new(vec![1.0, 0.5, -0.25]).unwrap()];
        let p = PolicyParams::<f32>::new(cfg, &table, 17).unwrap();
        let mut bytes = Vec::new();
        p.write_checkpoint(&mut bytes).unwrap();
        let back = PolicyParams::read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, p);
        let n = bytes.len();
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut corrupt = bytes.clone();
        // first byte of the language table, a frozen block
        corrupt[16 + json_len] ^= 0x01;
        assert!(PolicyParams::read_checkpoint(corrupt.as_slice()).is_err());
        assert!(PolicyParams::read_checkpoint(&bytes[..n - 1]).is_err());
    }
}
