//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "OBLVCKPT" | version u32 | meta_len u32 | meta JSON
//! | block_count u32 | per block: name_len u16, name, rows u32, cols u32
//! | block data as f64 LE, row-major, in table order
//! | sha256 of the model config JSON (32 bytes)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackboneParams, Checkpoint, HeadParams, Matrix, ModelConfig, Nonlinearity};
use crate::error::{Error, Result};
use crate::hash;

pub const MAGIC: &[u8; 8] = b"OBLVCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub steps: usize,
    pub config_hash: String,
    pub nonlinearity: String,
    pub model: ModelConfig,
    /// Hash of the training configuration that produced this checkpoint.
    #[serde(default)]
    pub train_config_hash: Option<String>,
    /// Hash of the checkpoint this one was trained from.
    #[serde(default)]
    pub parent: Option<String>,
}

impl CheckpointMeta {
    pub fn new(stage: &str, steps: usize, model: &ModelConfig, phi: Nonlinearity) -> Self {
        Self {
            stage: stage.to_string(),
            steps,
            config_hash: model.hash(),
            nonlinearity: phi.name().to_string(),
            model: model.clone(),
            train_config_hash: None,
            parent: None,
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        let b = &self.backbone;
        let mut v = vec![("encoder".to_string(), &b.encoder), ("projection".to_string(), &b.projection)];
        v.extend(b.mixing.iter().enumerate().map(|(i, m)| (format!("mixing.{i}"), m)));
        v.push(("embeddings".to_string(), &self.head.embeddings));
        v.push(("lm_head".to_string(), &self.head.lm_head));
        v
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let bias = Matrix { rows: 1, cols: self.head.bias.len(), data: self.head.bias.clone() };
        let mut blocks = self.blocks();
        blocks.push(("lm_bias".to_string(), &bias));
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, m) in &blocks {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols as u32).to_le_bytes());
        }
        for (_, m) in &blocks {
            for x in &m.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(&hash::sha256_bytes(&serde_json::to_vec(&self.config).expect("config serializes")));
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Format(format!("meta: {e}")))?;
        let config = meta.model.clone();
        config.validate()?;
        let nonlinearity = match meta.nonlinearity.as_str() {
            "tanh" => Nonlinearity::Tanh,
            other => return Err(Error::Format(format!("unknown nonlinearity {other:?}"))),
        };
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("block name".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            table.push((name, rows, cols));
        }
        let mut blocks = std::collections::HashMap::new();
        for (name, rows, cols) in table {
            let bytes = r.take(rows * cols * 8)?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            blocks.insert(name, Matrix { rows, cols, data });
        }
        let trailer = r.take(32)?;
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after config hash".into()));
        }
        let want = hash::sha256_bytes(&serde_json::to_vec(&config).expect("config serializes"));
        if trailer != want {
            return Err(Error::Format("config hash mismatch".into()));
        }
        let mut get = |name: &str, shape: (usize, usize)| -> Result<Matrix> {
            let m = blocks.remove(name).ok_or_else(|| Error::Format(format!("missing block {name}")))?;
            if m.shape() != shape {
                return Err(Error::Format(format!("block {name} has shape {:?}, want {shape:?}", m.shape())));
            }
            Ok(m)
        };
        let (d, m, v) = (config.visual_dim, config.hidden_dim, config.vocab_size);
        let encoder = get("encoder", (d, config.encoder_input_dim()))?;
        let projection = get("projection", (d, m))?;
        let mixing = (0..config.layers).map(|i| get(&format!("mixing.{i}"), (m, m))).collect::<Result<Vec<_>>>()?;
        let embeddings = get("embeddings", (v, m))?;
        let lm_head = get("lm_head", (m, v))?;
        let bias = get("lm_bias", (1, v))?.data;
        Ok(Checkpoint {
            backbone: BackboneParams { encoder, projection, mixing, nonlinearity, seed: config.seed },
            head: HeadParams { embeddings, lm_head, bias },
            meta,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Content hash of the serialized checkpoint.
    pub fn content_hash(&self) -> String {
        hash::sha256_hex(&self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut c = Checkpoint::init(ModelConfig::new(8, 16, 31, 5)).unwrap();
        c.head.bias[3] = -0.0;
        c.head.lm_head.data[7] = f64::MIN_POSITIVE;
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.head.bias[3].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back, c);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let c = Checkpoint::init(ModelConfig::new(4, 3, 20, 5)).unwrap();
        let bytes = c.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() ^= 1;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut longer = bytes;
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }
}
