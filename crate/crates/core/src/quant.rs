//! Post-training dynamic 8-bit quantization.
//!
//! Values map between real and quantized space through the affine relation
//! `r = S * (q - Z)` over the fixed unsigned range [0, 255], with
//! `S = (d_max - d_min) / (q_max - q_min)` computed from the data range and
//! the zero point chosen so `d_min` lands on `q_min`. Ranges are widened to
//! include zero before computing parameters, so real 0 is always exactly
//! representable; rounding is half-to-even everywhere.
//!
//! Weights are quantized once per tensor at [`quantize_model`] time;
//! activations are quantized on the fly inside [`quantized_linear`] from the
//! observed min/max of each call ("dynamic" quantization). The inner matmul
//! accumulation is pure 32-bit integer arithmetic with the affine cross
//! terms expanded.

use std::fs;
use std::path::Path;

use crate::error::Error;
use crate::model::{
    forward_encoder, read_config_block, sizing_entries, write_config_block, write_tensor_header,
    ByteReader, ClassifierOutput, EncoderView, ForwardModel, LayerView, LinearWeight, ModelConfig,
    TransformerClassifier, CHECKPOINT_MAGIC, VERSION_QUANT,
};
use crate::tensor::Tensor2D;

/// Fixed quantized range: unsigned 8-bit, asymmetric.
pub const Q_MIN: u8 = 0;
/// Upper end of the quantized range.
pub const Q_MAX: u8 = 255;

/// Affine quantization parameters: `r = scale * (q - zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    /// The quantization scale S; always positive.
    pub scale: f32,
    /// The zero point Z, inside [`Q_MIN`], [`Q_MAX`] by construction.
    pub zero_point: u8,
}

impl QuantParams {
    /// Compute parameters from a data range.
    ///
    /// The range is widened to include zero first. A degenerate (zero-width)
    /// range falls back to `scale = 1`, with the zero point at the clamped
    /// rounding of `-d_min`.
    pub fn compute(d_min: f32, d_max: f32) -> QuantParams {
        assert!(
            d_min.is_finite() && d_max.is_finite(),
            "quantization range must be finite, got [{d_min}, {d_max}]"
        );
        assert!(d_min <= d_max, "invalid quantization range [{d_min}, {d_max}]");
        let lo = d_min.min(0.0) as f64;
        let hi = d_max.max(0.0) as f64;
        if lo == hi {
            // Widening pins lo == hi == 0 here.
            return QuantParams {
                scale: 1.0,
                zero_point: (-lo).round_ties_even().clamp(Q_MIN as f64, Q_MAX as f64) as u8,
            };
        }
        let span = (Q_MAX - Q_MIN) as f64;
        let scale = ((hi - lo) / span) as f32;
        // Z = q_min - d_min / S, evaluated in the fused form so the exact
        // half-way cases (e.g. a [-1, 1] range) round as half-to-even.
        let z = Q_MIN as f64 - lo * span / (hi - lo);
        let zero_point = z.round_ties_even().clamp(Q_MIN as f64, Q_MAX as f64) as u8;
        QuantParams { scale, zero_point }
    }

    /// Quantize one value: `clamp(round(r / S) + Z)`.
    pub fn quantize_value(&self, r: f32) -> u8 {
        let q = (r as f64 / self.scale as f64).round_ties_even() + self.zero_point as f64;
        q.clamp(Q_MIN as f64, Q_MAX as f64) as u8
    }

    /// Dequantize one value: `S * (q - Z)`.
    pub fn dequantize_value(&self, q: u8) -> f32 {
        self.scale * (q as i32 - self.zero_point as i32) as f32
    }
}

/// A tensor stored as 8-bit codes plus its affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
    params: QuantParams,
}

impl QuantizedTensor {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn params(&self) -> QuantParams {
        self.params
    }
}

/// Quantize a tensor with the given parameters; out-of-range values saturate.
pub fn quantize_tensor(r: &Tensor2D, params: QuantParams) -> QuantizedTensor {
    assert!(params.scale > 0.0, "quantization scale must be positive");
    let data = r.data().iter().map(|&v| params.quantize_value(v)).collect();
    QuantizedTensor {
        rows: r.rows(),
        cols: r.cols(),
        data,
        params,
    }
}

/// Quantize a tensor with parameters computed from its own min/max.
pub fn quantize_tensor_dynamic(r: &Tensor2D) -> QuantizedTensor {
    quantize_tensor(r, QuantParams::compute(r.min(), r.max()))
}

/// Map a quantized tensor back to floats: elementwise `S * (q - Z)`.
pub fn dequantize(q: &QuantizedTensor) -> Tensor2D {
    let data = q.data.iter().map(|&v| q.params.dequantize_value(v)).collect();
    Tensor2D::from_vec(q.rows, q.cols, data)
}

/// Dynamic-quantized linear layer: activations are quantized per call from
/// their observed range, the matmul runs in integer arithmetic, and the
/// result is scaled back by `S_x * S_w` (bias added in float).
///
/// With the cross terms expanded,
/// `sum_k (qx - Zx)(qw - Zw) = sum_k qx*qw - Zw * sum_k qx - Zx * sum_k qw
///  + K * Zx * Zw`, so the inner accumulation over k is pure i32 arithmetic
/// (no overflow for K <= 32767).
pub fn quantized_linear(x: &Tensor2D, w: &QuantizedTensor, bias: Option<&[f32]>) -> Tensor2D {
    assert_eq!(
        x.cols(),
        w.rows,
        "quantized_linear shape mismatch: {}x{} * {}x{}",
        x.rows(),
        x.cols(),
        w.rows,
        w.cols
    );
    if let Some(b) = bias {
        assert_eq!(
            b.len(),
            w.cols,
            "bias length {} does not match output width {}",
            b.len(),
            w.cols
        );
    }
    let x_params = QuantParams::compute(x.min(), x.max());
    let qx = quantize_tensor(x, x_params);

    let (m, kdim, n) = (x.rows(), x.cols(), w.cols);
    let zx = x_params.zero_point as i64;
    let zw = w.params.zero_point as i64;
    let factor = x_params.scale as f64 * w.params.scale as f64;

    let mut col_sums = vec![0i32; n];
    for k in 0..kdim {
        let w_row = &w.data[k * n..(k + 1) * n];
        for (j, &v) in w_row.iter().enumerate() {
            col_sums[j] += v as i32;
        }
    }

    let mut out = Tensor2D::zeros(m, n);
    for i in 0..m {
        let x_row = &qx.data[i * kdim..(i + 1) * kdim];
        let row_sum: i32 = x_row.iter().map(|&v| v as i32).sum();
        let out_row = out.row_mut(i);
        for j in 0..n {
            let mut acc: i32 = 0;
            for (k, &xv) in x_row.iter().enumerate() {
                acc += xv as i32 * w.data[k * n + j] as i32;
            }
            let adjusted = acc as i64 - zw * row_sum as i64 - zx * col_sums[j] as i64
                + kdim as i64 * zx * zw;
            let mut v = (factor * adjusted as f64) as f32;
            if let Some(b) = bias {
                v += b[j];
            }
            out_row[j] = v;
        }
    }
    out
}

impl LinearWeight for QuantizedTensor {
    fn apply(&self, x: &Tensor2D, bias: Option<&[f32]>) -> Tensor2D {
        quantized_linear(x, self, bias)
    }
}

/// One encoder layer with quantized matmul weights and float residue.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub wq: QuantizedTensor,
    pub wk: QuantizedTensor,
    pub wv: QuantizedTensor,
    pub wo: QuantizedTensor,
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub w1: QuantizedTensor,
    pub b1: Vec<f32>,
    pub w2: QuantizedTensor,
    pub b2: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
}

/// The quantized classifier: exactly the matmul weight set (attention
/// projections, FFN weights, classification head) is quantized; embeddings,
/// biases, and layer-norm parameters stay bitwise-identical float.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedClassifier {
    pub config: ModelConfig,
    pub token_embeddings: Tensor2D,
    pub position_embeddings: Tensor2D,
    pub layers: Vec<QuantizedLayer>,
    pub head_weight: QuantizedTensor,
    pub head_bias: Vec<f32>,
}

/// Quantize every matmul weight of a shape-audited model, per tensor, with
/// parameters from that tensor's own min/max.
pub fn quantize_model(model: &TransformerClassifier) -> QuantizedClassifier {
    model.shape_audit().expect("quantize_model requires a shape-audited model");
    let layers = model
        .layers
        .iter()
        .map(|l| QuantizedLayer {
            wq: quantize_tensor_dynamic(&l.wq),
            wk: quantize_tensor_dynamic(&l.wk),
            wv: quantize_tensor_dynamic(&l.wv),
            wo: quantize_tensor_dynamic(&l.wo),
            ln1_gain: l.ln1_gain.clone(),
            ln1_bias: l.ln1_bias.clone(),
            w1: quantize_tensor_dynamic(&l.w1),
            b1: l.b1.clone(),
            w2: quantize_tensor_dynamic(&l.w2),
            b2: l.b2.clone(),
            ln2_gain: l.ln2_gain.clone(),
            ln2_bias: l.ln2_bias.clone(),
        })
        .collect();
    QuantizedClassifier {
        config: model.config.clone(),
        token_embeddings: model.token_embeddings.clone(),
        position_embeddings: model.position_embeddings.clone(),
        layers,
        head_weight: quantize_tensor_dynamic(&model.head_weight),
        head_bias: model.head_bias.clone(),
    }
}

impl QuantizedClassifier {
    /// Forward pass sharing the float encoder skeleton; every weight matmul
    /// routes through [`quantized_linear`], everything else runs in float.
    pub fn forward(&self, token_ids: &[u32]) -> ClassifierOutput {
        forward_encoder(&self.config, &self.encoder_view(), token_ids)
    }

    fn encoder_view(&self) -> EncoderView<'_, QuantizedTensor> {
        EncoderView {
            token_embeddings: &self.token_embeddings,
            position_embeddings: &self.position_embeddings,
            layers: self
                .layers
                .iter()
                .map(|l| LayerView {
                    wq: &l.wq,
                    wk: &l.wk,
                    wv: &l.wv,
                    wo: &l.wo,
                    ln1_gain: &l.ln1_gain,
                    ln1_bias: &l.ln1_bias,
                    w1: &l.w1,
                    b1: &l.b1,
                    w2: &l.w2,
                    b2: &l.b2,
                    ln2_gain: &l.ln2_gain,
                    ln2_bias: &l.ln2_bias,
                })
                .collect(),
            head_weight: &self.head_weight,
            head_bias: &self.head_bias,
        }
    }
}

impl ForwardModel for QuantizedClassifier {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward(&self, token_ids: &[u32]) -> ClassifierOutput {
        QuantizedClassifier::forward(self, token_ids)
    }
}

const DTYPE_FLOAT: u8 = 0;
const DTYPE_QUANT: u8 = 1;

enum QuantEntry<'a> {
    Float(&'a [f32]),
    FloatMatrix(&'a Tensor2D),
    Quant(&'a QuantizedTensor),
}

fn quant_entries(model: &QuantizedClassifier) -> Vec<(String, usize, usize, QuantEntry<'_>)> {
    use QuantEntry::*;
    let mut out: Vec<(String, usize, usize, QuantEntry<'_>)> = vec![
        (
            "token_embeddings".into(),
            model.token_embeddings.rows(),
            model.token_embeddings.cols(),
            FloatMatrix(&model.token_embeddings),
        ),
        (
            "position_embeddings".into(),
            model.position_embeddings.rows(),
            model.position_embeddings.cols(),
            FloatMatrix(&model.position_embeddings),
        ),
    ];
    for (i, l) in model.layers.iter().enumerate() {
        out.push((format!("layers.{i}.attn.wq"), l.wq.rows, l.wq.cols, Quant(&l.wq)));
        out.push((format!("layers.{i}.attn.wk"), l.wk.rows, l.wk.cols, Quant(&l.wk)));
        out.push((format!("layers.{i}.attn.wv"), l.wv.rows, l.wv.cols, Quant(&l.wv)));
        out.push((format!("layers.{i}.attn.wo"), l.wo.rows, l.wo.cols, Quant(&l.wo)));
        out.push((format!("layers.{i}.ln1.gain"), 1, l.ln1_gain.len(), Float(&l.ln1_gain)));
        out.push((format!("layers.{i}.ln1.bias"), 1, l.ln1_bias.len(), Float(&l.ln1_bias)));
        out.push((format!("layers.{i}.ffn.w1"), l.w1.rows, l.w1.cols, Quant(&l.w1)));
        out.push((format!("layers.{i}.ffn.b1"), 1, l.b1.len(), Float(&l.b1)));
        out.push((format!("layers.{i}.ffn.w2"), l.w2.rows, l.w2.cols, Quant(&l.w2)));
        out.push((format!("layers.{i}.ffn.b2"), 1, l.b2.len(), Float(&l.b2)));
        out.push((format!("layers.{i}.ln2.gain"), 1, l.ln2_gain.len(), Float(&l.ln2_gain)));
        out.push((format!("layers.{i}.ln2.bias"), 1, l.ln2_bias.len(), Float(&l.ln2_bias)));
    }
    out.push((
        "head.weight".into(),
        model.head_weight.rows,
        model.head_weight.cols,
        Quant(&model.head_weight),
    ));
    out.push(("head.bias".into(), 1, model.head_bias.len(), Float(&model.head_bias)));
    out
}

/// Serialized image of a quantized checkpoint (version 2 container).
pub fn quantized_checkpoint_bytes(model: &QuantizedClassifier) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION_QUANT.to_le_bytes());
    write_config_block(&mut out, &model.config);
    for (name, rows, cols, entry) in quant_entries(model) {
        write_tensor_header(&mut out, &name, rows, cols);
        match entry {
            QuantEntry::Float(values) => {
                out.push(DTYPE_FLOAT);
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            QuantEntry::FloatMatrix(t) => {
                out.push(DTYPE_FLOAT);
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            QuantEntry::Quant(q) => {
                out.push(DTYPE_QUANT);
                out.extend_from_slice(&q.params.scale.to_le_bytes());
                out.push(q.params.zero_point);
                out.extend_from_slice(&q.data);
            }
        }
    }
    out
}

/// Write a quantized checkpoint; returns the bytes written.
pub fn save_quantized(model: &QuantizedClassifier, path: &Path) -> Result<u64, Error> {
    let bytes = quantized_checkpoint_bytes(model);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

/// Load a quantized checkpoint, validating names, shapes, and dtype tags.
pub fn load_quantized(path: &Path) -> Result<QuantizedClassifier, Error> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes);
    r.header(VERSION_QUANT)?;
    let config = read_config_block(&mut r)?;
    let d = config.embed_dim;

    fn float_vec(r: &mut ByteReader<'_>, name: &str, want: usize) -> Result<Vec<f32>, Error> {
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
        expect_dtype(r, name, DTYPE_FLOAT)?;
        r.f32_vec(cols)
    }
    fn float_matrix(r: &mut ByteReader<'_>, name: &str, want: (usize, usize)) -> Result<Tensor2D, Error> {
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
        expect_dtype(r, name, DTYPE_FLOAT)?;
        let data = r.f32_vec(rows * cols)?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::CorruptCheckpoint(format!("tensor {name} contains non-finite values")));
        }
        Ok(Tensor2D::from_vec(rows, cols, data))
    }
    fn quant_matrix(r: &mut ByteReader<'_>, name: &str, want: (usize, usize)) -> Result<QuantizedTensor, Error> {
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
        expect_dtype(r, name, DTYPE_QUANT)?;
        let scale = r.f32()?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::CorruptCheckpoint(format!("tensor {name} has invalid scale {scale}")));
        }
        let zero_point = r.u8()?;
        let data = r.bytes_vec(rows * cols)?;
        Ok(QuantizedTensor {
            rows,
            cols,
            data,
            params: QuantParams { scale, zero_point },
        })
    }
    fn expect_dtype(r: &mut ByteReader<'_>, name: &str, want: u8) -> Result<(), Error> {
        let tag = r.u8()?;
        if tag != want {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {name}: dtype tag {tag}, expected {want}"
            )));
        }
        Ok(())
    }

    let token_embeddings = float_matrix(&mut r, "token_embeddings", (config.vocab_size, d))?;
    let position_embeddings = float_matrix(&mut r, "position_embeddings", (config.max_seq_len, d))?;
    let mut layers = Vec::with_capacity(config.num_layers);
    for i in 0..config.num_layers {
        layers.push(QuantizedLayer {
            wq: quant_matrix(&mut r, &format!("layers.{i}.attn.wq"), (d, d))?,
            wk: quant_matrix(&mut r, &format!("layers.{i}.attn.wk"), (d, d))?,
            wv: quant_matrix(&mut r, &format!("layers.{i}.attn.wv"), (d, d))?,
            wo: quant_matrix(&mut r, &format!("layers.{i}.attn.wo"), (d, d))?,
            ln1_gain: float_vec(&mut r, &format!("layers.{i}.ln1.gain"), d)?,
            ln1_bias: float_vec(&mut r, &format!("layers.{i}.ln1.bias"), d)?,
            w1: quant_matrix(&mut r, &format!("layers.{i}.ffn.w1"), (d, config.ffn_dim))?,
            b1: float_vec(&mut r, &format!("layers.{i}.ffn.b1"), config.ffn_dim)?,
            w2: quant_matrix(&mut r, &format!("layers.{i}.ffn.w2"), (config.ffn_dim, d))?,
            b2: float_vec(&mut r, &format!("layers.{i}.ffn.b2"), d)?,
            ln2_gain: float_vec(&mut r, &format!("layers.{i}.ln2.gain"), d)?,
            ln2_bias: float_vec(&mut r, &format!("layers.{i}.ln2.bias"), d)?,
        });
    }
    let head_weight = quant_matrix(&mut r, "head.weight", (d, config.num_classes))?;
    let head_bias = float_vec(&mut r, "head.bias", config.num_classes)?;
    r.finish()?;
    Ok(QuantizedClassifier {
        config,
        token_embeddings,
        position_embeddings,
        layers,
        head_weight,
        head_bias,
    })
}

/// Names of the tensors [`quantize_model`] quantizes, given the config.
fn quantized_tensor_names(config: &ModelConfig) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..config.num_layers {
        for suffix in ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.w2"] {
            names.push(format!("layers.{i}.{suffix}"));
        }
    }
    names.push("head.weight".to_string());
    names
}

/// Expected byte size of a quantized checkpoint, from config arithmetic.
pub fn expected_quantized_size(config: &ModelConfig) -> u64 {
    let quantized = quantized_tensor_names(config);
    let mut total = 4 + 2 + 9 * 4u64;
    for (name, rows, cols) in sizing_entries(config) {
        total += 2 + name.len() as u64 + 4 + 4 + 1;
        if quantized.contains(&name) {
            total += 4 + 1 + (rows * cols) as u64;
        } else {
            total += 4 * (rows * cols) as u64;
        }
    }
    total
}

/// Byte size of a checkpoint file (the model-binary-size metric).
pub fn model_size(path: &Path) -> Result<u64, Error> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    Ok(meta.len())
}

/// `quantized / original` size ratio of two checkpoint files.
pub fn size_ratio(quantized_path: &Path, original_path: &Path) -> Result<f64, Error> {
    let q = model_size(quantized_path)?;
    let o = model_size(original_path)?;
    Ok(byte_ratio(q, o))
}

/// Plain ratio of two byte counts.
pub fn byte_ratio(quantized_bytes: u64, original_bytes: u64) -> f64 {
    quantized_bytes as f64 / original_bytes as f64
}
