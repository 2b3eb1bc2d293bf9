//! Binary checkpoint format (all integers little-endian u32):
//!
//! ```text
//! magic "ASCK" | version | config_len | config JSON | vocab_count | (len | utf8)*
//! | tensor_count | (name_len | name | ndim | dims* | f32 data)*
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::Tensor;
use super::{DualEncoderModel, ModelConfig, Vocabulary};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ASCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn write_checkpoint(model: &DualEncoderModel, mut w: impl Write) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let cfg = serde_json::to_string(&model.config).expect("config serializes");
    put_str(&mut out, &cfg);
    put_u32(&mut out, model.vocab.len() as u32);
    for t in model.vocab.tokens() {
        put_str(&mut out, t);
    }
    let tensors = model.params.tensors();
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        put_str(&mut out, name);
        put_u32(&mut out, t.shape.len() as u32);
        for &d in &t.shape {
            put_u32(&mut out, d as u32);
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&out).map_err(|e| Error::io("<checkpoint>", e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::input("checkpoint truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::input("checkpoint string is not utf-8"))
    }
}

pub fn read_checkpoint(mut r: impl Read) -> Result<DualEncoderModel> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io("<checkpoint>", e))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::input("not a model checkpoint (bad magic)"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::input(format!("unsupported checkpoint version {version}")));
    }
    let config: ModelConfig =
        serde_json::from_str(&c.string()?).map_err(|e| Error::input(format!("checkpoint config: {e}")))?;
    let vocab_len = c.u32()? as usize;
    let tokens = (0..vocab_len).map(|_| c.string()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::from_tokens(tokens);

    let count = c.u32()? as usize;
    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count {
        let name = c.string()?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        loaded.push((name, Tensor { shape, data }));
    }
    let categories = loaded
        .iter()
        .find(|(n, _)| n == "adapt.prefixes")
        .map(|(_, t)| t.shape[0])
        .ok_or_else(|| Error::input("checkpoint lacks prefixes"))?;
    let mut model = DualEncoderModel::new(config, vocab, categories, 0)?;
    for (name, t) in loaded {
        let slot: &mut Tensor = model
            .params
            .get_mut(&name)
            .ok_or_else(|| Error::input(format!("unknown tensor {name}")))?;
        if slot.shape != t.shape {
            return Err(Error::input(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape, slot.shape
            )));
        }
        *slot = t;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &DualEncoderModel, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DualEncoderModel> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: "checkpoint not found".into(),
        });
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(bytes.as_slice()).map_err(|e| Error::format(path, e.to_string()))
}
