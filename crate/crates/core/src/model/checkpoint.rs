//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    "QGCK" (4 bytes)
//! version  u16        1 = float32 records, 2 = dtype-tagged records
//! config   9 x u32    vocab_size, max_seq_len, embed_dim, num_layers,
//!                     num_heads, ffn_dim, num_classes, seed_lo, seed_hi
//! records  per tensor, in the fixed canonical order:
//!          name_len u16, name (UTF-8), rows u32, cols u32, payload
//! ```
//!
//! Version 1 payloads are raw f32 values. Version 2 records carry one dtype
//! tag byte before the payload: 0 = raw f32 values, 1 = quantized (scale f32,
//! zero_point u8, rows*cols u8 values). Dropout is a training-only knob and
//! is not persisted; the seed is stored as two u32 words.

use std::fs;
use std::path::Path;

use crate::error::Error;
use crate::tensor::Tensor2D;

use super::{LayerWeights, ModelConfig, TransformerClassifier};

pub(crate) const CHECKPOINT_MAGIC: &[u8; 4] = b"QGCK";
pub(crate) const VERSION_FLOAT: u16 = 1;
pub(crate) const VERSION_QUANT: u16 = 2;

/// A tensor to serialize: matrices as-is, parameter vectors as 1 x n.
pub(crate) enum TensorRef<'a> {
    Matrix(&'a Tensor2D),
    Vector(&'a [f32]),
}

impl TensorRef<'_> {
    pub(crate) fn rows(&self) -> usize {
        match self {
            TensorRef::Matrix(t) => t.rows(),
            TensorRef::Vector(_) => 1,
        }
    }

    pub(crate) fn cols(&self) -> usize {
        match self {
            TensorRef::Matrix(t) => t.cols(),
            TensorRef::Vector(v) => v.len(),
        }
    }

    pub(crate) fn values(&self) -> &[f32] {
        match self {
            TensorRef::Matrix(t) => t.data(),
            TensorRef::Vector(v) => v,
        }
    }
}

/// The canonical tensor order shared by the float and quantized containers.
pub(crate) fn tensor_entries(model: &TransformerClassifier) -> Vec<(String, TensorRef<'_>)> {
    let mut out: Vec<(String, TensorRef<'_>)> = vec![
        ("token_embeddings".into(), TensorRef::Matrix(&model.token_embeddings)),
        ("position_embeddings".into(), TensorRef::Matrix(&model.position_embeddings)),
    ];
    for (i, l) in model.layers.iter().enumerate() {
        out.push((format!("layers.{i}.attn.wq"), TensorRef::Matrix(&l.wq)));
        out.push((format!("layers.{i}.attn.wk"), TensorRef::Matrix(&l.wk)));
        out.push((format!("layers.{i}.attn.wv"), TensorRef::Matrix(&l.wv)));
        out.push((format!("layers.{i}.attn.wo"), TensorRef::Matrix(&l.wo)));
        out.push((format!("layers.{i}.ln1.gain"), TensorRef::Vector(&l.ln1_gain)));
        out.push((format!("layers.{i}.ln1.bias"), TensorRef::Vector(&l.ln1_bias)));
        out.push((format!("layers.{i}.ffn.w1"), TensorRef::Matrix(&l.w1)));
        out.push((format!("layers.{i}.ffn.b1"), TensorRef::Vector(&l.b1)));
        out.push((format!("layers.{i}.ffn.w2"), TensorRef::Matrix(&l.w2)));
        out.push((format!("layers.{i}.ffn.b2"), TensorRef::Vector(&l.b2)));
        out.push((format!("layers.{i}.ln2.gain"), TensorRef::Vector(&l.ln2_gain)));
        out.push((format!("layers.{i}.ln2.bias"), TensorRef::Vector(&l.ln2_bias)));
    }
    out.push(("head.weight".into(), TensorRef::Matrix(&model.head_weight)));
    out.push(("head.bias".into(), TensorRef::Vector(&model.head_bias)));
    out
}

pub(crate) fn write_config_block(out: &mut Vec<u8>, config: &ModelConfig) {
    for v in [
        config.vocab_size,
        config.max_seq_len,
        config.embed_dim,
        config.num_layers,
        config.num_heads,
        config.ffn_dim,
        config.num_classes,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&((config.seed & 0xffff_ffff) as u32).to_le_bytes());
    out.extend_from_slice(&((config.seed >> 32) as u32).to_le_bytes());
}

pub(crate) fn read_config_block(r: &mut ByteReader<'_>) -> Result<ModelConfig, Error> {
    let vocab_size = r.u32()? as usize;
    let max_seq_len = r.u32()? as usize;
    let embed_dim = r.u32()? as usize;
    let num_layers = r.u32()? as usize;
    let num_heads = r.u32()? as usize;
    let ffn_dim = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let seed_lo = r.u32()? as u64;
    let seed_hi = r.u32()? as u64;
    let config = ModelConfig {
        vocab_size,
        max_seq_len,
        embed_dim,
        num_layers,
        num_heads,
        ffn_dim,
        num_classes,
        dropout: 0.0,
        seed: (seed_hi << 32) | seed_lo,
    };
    config.check().map_err(Error::CorruptCheckpoint)?;
    Ok(config)
}

pub(crate) fn write_tensor_header(out: &mut Vec<u8>, name: &str, rows: usize, cols: usize) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
}

/// Bounds-checked little-endian reader over a checkpoint image.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], Error> {
        let slice = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| {
            Error::CorruptCheckpoint(format!(
                "file truncated: needed {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        self.pos += n;
        Ok(slice)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, Error> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, Error> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, Error> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32, Error> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>, Error> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn bytes_vec(&mut self, n: usize) -> Result<Vec<u8>, Error> {
        Ok(self.take(n)?.to_vec())
    }

    pub(crate) fn name(&mut self) -> Result<String, Error> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))
    }

    /// Check the magic and version fields; call first.
    pub(crate) fn header(&mut self, expected_version: u16) -> Result<(), Error> {
        let magic = self.take(4).map_err(|_| Error::CorruptCheckpoint("file shorter than magic".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                found: magic.try_into().unwrap(),
            });
        }
        let version = self.u16()?;
        if version != expected_version {
            return Err(Error::BadVersion {
                found: version,
                expected: expected_version,
            });
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<(), Error> {
        if self.pos != self.bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes after final tensor",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }

    /// Read a tensor record header, insisting on the expected canonical name.
    pub(crate) fn expect_record(&mut self, want: &str) -> Result<(usize, usize), Error> {
        let name = self.name()?;
        if name != want {
            return Err(Error::CorruptCheckpoint(format!(
                "expected tensor {want}, found {name}"
            )));
        }
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        Ok((rows, cols))
    }
}

/// Serialize the model; returns the bytes written (the binary-size metric).
pub fn save_checkpoint(model: &TransformerClassifier, path: &Path) -> Result<u64, Error> {
    model.shape_audit()?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION_FLOAT.to_le_bytes());
    write_config_block(&mut out, &model.config);
    for (name, tensor) in tensor_entries(model) {
        write_tensor_header(&mut out, &name, tensor.rows(), tensor.cols());
        for v in tensor.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &out).map_err(|e| Error::io(path, e))?;
    Ok(out.len() as u64)
}

/// Load a float checkpoint, validating magic, version, and every shape.
pub fn load_checkpoint(path: &Path) -> Result<TransformerClassifier, Error> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes);
    r.header(VERSION_FLOAT)?;
    let config = read_config_block(&mut r)?;
    let d = config.embed_dim;

    let mut matrix = |r: &mut ByteReader<'_>, name: &str, want: (usize, usize)| -> Result<Tensor2D, Error> {
        let (rows, cols) = r.expect_record(name)?;
        if (rows, cols) != want {
            return Err(Error::ShapeAudit {
                name: name.to_string(),
                want_rows: want.0,
                want_cols: want.1,
                found_rows: rows,
                found_cols: cols,
            });
        }
        let data = r.f32_vec(rows * cols)?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::CorruptCheckpoint(format!("tensor {name} contains non-finite values")));
        }
        Ok(Tensor2D::from_vec(rows, cols, data))
    };
    let mut vector = |r: &mut ByteReader<'_>, name: &str, want: usize| -> Result<Vec<f32>, Error> {
        let (rows, cols) = r.expect_record(name)?;
        if rows != 1 || cols != want {
            return Err(Error::ShapeAudit {
                name: name.to_string(),
                want_rows: 1,
                want_cols: want,
                found_rows: rows,
                found_cols: cols,
            });
        }
        let data = r.f32_vec(cols)?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::CorruptCheckpoint(format!("tensor {name} contains non-finite values")));
        }
        Ok(data)
    };

    let token_embeddings = matrix(&mut r, "token_embeddings", (config.vocab_size, d))?;
    let position_embeddings = matrix(&mut r, "position_embeddings", (config.max_seq_len, d))?;
    let mut layers = Vec::with_capacity(config.num_layers);
    for i in 0..config.num_layers {
        layers.push(LayerWeights {
            wq: matrix(&mut r, &format!("layers.{i}.attn.wq"), (d, d))?,
            wk: matrix(&mut r, &format!("layers.{i}.attn.wk"), (d, d))?,
            wv: matrix(&mut r, &format!("layers.{i}.attn.wv"), (d, d))?,
            wo: matrix(&mut r, &format!("layers.{i}.attn.wo"), (d, d))?,
            ln1_gain: vector(&mut r, &format!("layers.{i}.ln1.gain"), d)?,
            ln1_bias: vector(&mut r, &format!("layers.{i}.ln1.bias"), d)?,
            w1: matrix(&mut r, &format!("layers.{i}.ffn.w1"), (d, config.ffn_dim))?,
            b1: vector(&mut r, &format!("layers.{i}.ffn.b1"), config.ffn_dim)?,
            w2: matrix(&mut r, &format!("layers.{i}.ffn.w2"), (config.ffn_dim, d))?,
            b2: vector(&mut r, &format!("layers.{i}.ffn.b2"), d)?,
            ln2_gain: vector(&mut r, &format!("layers.{i}.ln2.gain"), d)?,
            ln2_bias: vector(&mut r, &format!("layers.{i}.ln2.bias"), d)?,
        });
    }
    let head_weight = matrix(&mut r, "head.weight", (d, config.num_classes))?;
    let head_bias = vector(&mut r, "head.bias", config.num_classes)?;
    r.finish()?;

    let model = TransformerClassifier {
        config,
        token_embeddings,
        position_embeddings,
        layers,
        head_weight,
        head_bias,
    };
    model.shape_audit()?;
    Ok(model)
}

/// Expected byte size of a float checkpoint, from config arithmetic alone.
pub fn expected_checkpoint_size(config: &ModelConfig) -> u64 {
    let model = sizing_entries(config);
    let mut total = 4 + 2 + 9 * 4u64;
    for (name, rows, cols) in model {
        total += 2 + name.len() as u64 + 4 + 4 + 4 * (rows * cols) as u64;
    }
    total
}

/// Names and shapes in canonical order, derived from the config only.
pub(crate) fn sizing_entries(config: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = config.embed_dim;
    let mut out = vec![
        ("token_embeddings".to_string(), config.vocab_size, d),
        ("position_embeddings".to_string(), config.max_seq_len, d),
    ];
    for i in 0..config.num_layers {
        out.push((format!("layers.{i}.attn.wq"), d, d));
        out.push((format!("layers.{i}.attn.wk"), d, d));
        out.push((format!("layers.{i}.attn.wv"), d, d));
        out.push((format!("layers.{i}.attn.wo"), d, d));
        out.push((format!("layers.{i}.ln1.gain"), 1, d));
        out.push((format!("layers.{i}.ln1.bias"), 1, d));
        out.push((format!("layers.{i}.ffn.w1"), d, config.ffn_dim));
        out.push((format!("layers.{i}.ffn.b1"), 1, config.ffn_dim));
        out.push((format!("layers.{i}.ffn.w2"), config.ffn_dim, d));
        out.push((format!("layers.{i}.ffn.b2"), 1, d));
        out.push((format!("layers.{i}.ln2.gain"), 1, d));
        out.push((format!("layers.{i}.ln2.bias"), 1, d));
    }
    out.push(("head.weight".to_string(), d, config.num_classes));
    out.push(("head.bias".to_string(), 1, config.num_classes));
    out
}
