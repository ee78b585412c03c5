//! Small transformer encoder classifier: configuration, weights, forward
//! pass, training, and checkpoint persistence.
//!
//! The encoder is the usual stack: token + position embeddings, then per
//! layer multi-head self-attention -> add & norm -> GELU feed-forward ->
//! add & norm, followed by mean-pooling over non-PAD positions and a linear
//! classification head. The forward pass is written once over a
//! [`LinearWeight`] abstraction so the float model and the quantized model
//! (which routes weight matmuls through the integer kernel) share one code
//! path.

mod checkpoint;
mod train;

pub use checkpoint::{expected_checkpoint_size, load_checkpoint, save_checkpoint};
pub(crate) use checkpoint::{
    read_config_block, sizing_entries, write_config_block, write_tensor_header, ByteReader,
    CHECKPOINT_MAGIC, VERSION_QUANT,
};
pub use train::train;

use serde::{Deserialize, Serialize};

use crate::lexicon::{tokenize, Vocabulary, PAD_ID};
use crate::tensor::{self, Tensor2D};

/// Epsilon used by every layer norm in the encoder.
pub const LN_EPS: f32 = 1e-5;

/// Additive mask for attention scores of PAD key positions. Large enough
/// that the masked weights underflow to exactly zero after softmax.
const ATTN_MASK: f32 = -1e9;

/// Structural hyperparameters. Serialized into every checkpoint; loading
/// validates tensor shapes against it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub dropout: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2,
            max_seq_len: 32,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 128,
            num_classes: 2,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Validate the structural invariants, panicking on violation.
    pub fn validate(&self) {
        if let Err(msg) = self.check() {
            panic!("invalid model config: {msg}");
        }
    }

    /// Non-panicking validation, for the checkpoint loader.
    pub fn check(&self) -> Result<(), String> {
        if self.vocab_size < 2 {
            return Err(format!("vocab_size {} must cover PAD and UNK", self.vocab_size));
        }
        for (name, v) in [
            ("max_seq_len", self.max_seq_len),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
        ] {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.num_classes < 2 {
            return Err(format!("num_classes {} must be >= 2", self.num_classes));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Weights of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Tensor2D,
    pub wk: Tensor2D,
    pub wv: Tensor2D,
    pub wo: Tensor2D,
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub w1: Tensor2D,
    pub b1: Vec<f32>,
    pub w2: Tensor2D,
    pub b2: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
}

/// The full-precision classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerClassifier {
    pub config: ModelConfig,
    pub token_embeddings: Tensor2D,
    pub position_embeddings: Tensor2D,
    pub layers: Vec<LayerWeights>,
    pub head_weight: Tensor2D,
    pub head_bias: Vec<f32>,
}

/// Model output for one input sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOutput {
    /// Softmax probabilities, one per class.
    pub probabilities: Vec<f32>,
    /// Argmax of `probabilities`; ties break toward the smaller index.
    pub predicted_label: usize,
}

impl ClassifierOutput {
    pub fn from_probabilities(probabilities: Vec<f32>) -> ClassifierOutput {
        let predicted_label = argmax(&probabilities);
        ClassifierOutput {
            probabilities,
            predicted_label,
        }
    }
}

/// Index of the largest value; the first one wins on ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl TransformerClassifier {
    /// Initialize from the config: all weights uniform in (-0.05, 0.05) from
    /// the seeded generator, layer-norm parameters at identity, and the
    /// classification head at zero so the untrained model is exactly uniform.
    pub fn init(config: &ModelConfig) -> TransformerClassifier {
        use rand::Rng;
        config.validate();
        let mut rng = crate::rng::seeded_rng(config.seed, "model-init");
        let mut uniform = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| rng.gen_range(-0.05..0.05)).collect();
            Tensor2D::from_vec(rows, cols, data)
        };
        let d = config.embed_dim;
        let token_embeddings = uniform(config.vocab_size, d);
        let position_embeddings = uniform(config.max_seq_len, d);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                wq: uniform(d, d),
                wk: uniform(d, d),
                wv: uniform(d, d),
                wo: uniform(d, d),
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                w1: uniform(d, config.ffn_dim),
                b1: vec![0.0; config.ffn_dim],
                w2: uniform(config.ffn_dim, d),
                b2: vec![0.0; d],
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
            })
            .collect();
        TransformerClassifier {
            config: config.clone(),
            token_embeddings,
            position_embeddings,
            layers,
            head_weight: Tensor2D::zeros(d, config.num_classes),
            head_bias: vec![0.0; config.num_classes],
        }
    }

    /// Check every tensor's shape against the config.
    pub fn shape_audit(&self) -> Result<(), crate::Error> {
        let c = &self.config;
        c.check().map_err(|m| crate::Error::CorruptCheckpoint(m))?;
        for (name, t, want) in self.tensor_shapes() {
            if (t.rows(), t.cols()) != want {
                return Err(crate::Error::ShapeAudit {
                    name,
                    want_rows: want.0,
                    want_cols: want.1,
                    found_rows: t.rows(),
                    found_cols: t.cols(),
                });
            }
        }
        for (name, v, want) in self.vector_shapes() {
            if v.len() != want {
                return Err(crate::Error::ShapeAudit {
                    name,
                    want_rows: 1,
                    want_cols: want,
                    found_rows: 1,
                    found_cols: v.len(),
                });
            }
        }
        Ok(())
    }

    fn tensor_shapes(&self) -> Vec<(String, &Tensor2D, (usize, usize))> {
        let c = &self.config;
        let d = c.embed_dim;
        let mut out = vec![
            ("token_embeddings".to_string(), &self.token_embeddings, (c.vocab_size, d)),
            ("position_embeddings".to_string(), &self.position_embeddings, (c.max_seq_len, d)),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn.wq"), &l.wq, (d, d)));
            out.push((format!("layers.{i}.attn.wk"), &l.wk, (d, d)));
            out.push((format!("layers.{i}.attn.wv"), &l.wv, (d, d)));
            out.push((format!("layers.{i}.attn.wo"), &l.wo, (d, d)));
            out.push((format!("layers.{i}.ffn.w1"), &l.w1, (d, c.ffn_dim)));
            out.push((format!("layers.{i}.ffn.w2"), &l.w2, (c.ffn_dim, d)));
        }
        out.push(("head.weight".to_string(), &self.head_weight, (d, c.num_classes)));
        out
    }

    fn vector_shapes(&self) -> Vec<(String, &Vec<f32>, usize)> {
        let c = &self.config;
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.ln1.gain"), &l.ln1_gain, c.embed_dim));
            out.push((format!("layers.{i}.ln1.bias"), &l.ln1_bias, c.embed_dim));
            out.push((format!("layers.{i}.ffn.b1"), &l.b1, c.ffn_dim));
            out.push((format!("layers.{i}.ffn.b2"), &l.b2, c.embed_dim));
            out.push((format!("layers.{i}.ln2.gain"), &l.ln2_gain, c.embed_dim));
            out.push((format!("layers.{i}.ln2.bias"), &l.ln2_bias, c.embed_dim));
        }
        out.push(("head.bias".to_string(), &self.head_bias, c.num_classes));
        out
    }

    /// Run the classifier on a raw id sequence (truncated or PAD-padded to
    /// `max_seq_len`). PAD positions are masked out of attention and pooling.
    pub fn forward(&self, token_ids: &[u32]) -> ClassifierOutput {
        forward_encoder(&self.config, &self.encoder_view(), token_ids)
    }

    pub(crate) fn encoder_view(&self) -> EncoderView<'_, Tensor2D> {
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

/// A weight matrix that can be applied to activations as a linear map.
/// The float model applies a plain matmul; the quantized model quantizes the
/// activations on the fly and runs the integer kernel.
pub trait LinearWeight {
    fn apply(&self, x: &Tensor2D, bias: Option<&[f32]>) -> Tensor2D;
}

impl LinearWeight for Tensor2D {
    fn apply(&self, x: &Tensor2D, bias: Option<&[f32]>) -> Tensor2D {
        let out = tensor::matmul(x, self);
        match bias {
            Some(b) => out.add_row_bias(b),
            None => out,
        }
    }
}

/// Borrowed view of the encoder parameters, generic over the weight kind.
pub(crate) struct EncoderView<'a, W> {
    pub token_embeddings: &'a Tensor2D,
    pub position_embeddings: &'a Tensor2D,
    pub layers: Vec<LayerView<'a, W>>,
    pub head_weight: &'a W,
    pub head_bias: &'a [f32],
}

pub(crate) struct LayerView<'a, W> {
    pub wq: &'a W,
    pub wk: &'a W,
    pub wv: &'a W,
    pub wo: &'a W,
    pub ln1_gain: &'a [f32],
    pub ln1_bias: &'a [f32],
    pub w1: &'a W,
    pub b1: &'a [f32],
    pub w2: &'a W,
    pub b2: &'a [f32],
    pub ln2_gain: &'a [f32],
    pub ln2_bias: &'a [f32],
}

/// Truncate or pad an id sequence to `max_seq_len`, returning the fixed
/// sequence and the non-PAD mask. Out-of-range ids are contract violations.
pub(crate) fn pad_ids(config: &ModelConfig, token_ids: &[u32]) -> (Vec<u32>, Vec<bool>) {
    for &id in token_ids {
        assert!(
            (id as usize) < config.vocab_size,
            "token id {id} out of range for vocab_size {}",
            config.vocab_size
        );
    }
    let n = token_ids.len().min(config.max_seq_len);
    let mut ids = vec![PAD_ID; config.max_seq_len];
    ids[..n].copy_from_slice(&token_ids[..n]);
    let mask: Vec<bool> = ids.iter().map(|&id| id != PAD_ID).collect();
    (ids, mask)
}

/// Embedding lookup plus position embeddings.
pub(crate) fn embed(view_tok: &Tensor2D, view_pos: &Tensor2D, ids: &[u32]) -> Tensor2D {
    let d = view_tok.cols();
    let mut x = Tensor2D::zeros(ids.len(), d);
    for (i, &id) in ids.iter().enumerate() {
        let tok = view_tok.row(id as usize);
        let pos = view_pos.row(i);
        let row = x.row_mut(i);
        for c in 0..d {
            row[c] = tok[c] + pos[c];
        }
    }
    x
}

/// Multi-head scaled dot-product attention over already-projected q/k/v,
/// with PAD key positions masked out. Returns the concatenated head outputs.
pub(crate) fn attention(
    config: &ModelConfig,
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    mask: &[bool],
) -> Tensor2D {
    let seq = q.rows();
    let dh = config.head_dim();
    let mut ctx = Tensor2D::zeros(seq, config.embed_dim);
    for h in 0..config.num_heads {
        let c0 = h * dh;
        for i in 0..seq {
            let scores = attention_scores_row(q, k, mask, i, c0, dh);
            let weights = tensor::softmax(&scores);
            let out_row = ctx.row_mut(i);
            for (j, w) in weights.iter().enumerate() {
                let vj = &v.row(j)[c0..c0 + dh];
                for (c, val) in vj.iter().enumerate() {
                    out_row[c0 + c] += w * val;
                }
            }
        }
    }
    ctx
}

/// Masked, scaled attention scores of query row `i` for one head (columns
/// `c0 .. c0 + dh`). Shared by inference and the caching trainer so both
/// compute identical values.
pub(crate) fn attention_scores_row(
    q: &Tensor2D,
    k: &Tensor2D,
    mask: &[bool],
    i: usize,
    c0: usize,
    dh: usize,
) -> Vec<f32> {
    let scale = 1.0 / (dh as f32).sqrt();
    let qi = &q.row(i)[c0..c0 + dh];
    (0..k.rows())
        .map(|j| {
            let kj = &k.row(j)[c0..c0 + dh];
            let dot: f32 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
            dot * scale + if mask[j] { 0.0 } else { ATTN_MASK }
        })
        .collect()
}

/// Mean over the masked (non-PAD) rows; all-PAD inputs pool to zero so the
/// classifier falls back to its bias.
pub(crate) fn mean_pool(x: &Tensor2D, mask: &[bool]) -> Vec<f32> {
    let mut pooled = vec![0.0f32; x.cols()];
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return pooled;
    }
    for (i, active) in mask.iter().enumerate() {
        if *active {
            for (c, v) in x.row(i).iter().enumerate() {
                pooled[c] += v;
            }
        }
    }
    for v in &mut pooled {
        *v /= n as f32;
    }
    pooled
}

/// The shared encoder forward pass.
pub(crate) fn forward_encoder<W: LinearWeight>(
    config: &ModelConfig,
    view: &EncoderView<'_, W>,
    token_ids: &[u32],
) -> ClassifierOutput {
    let (ids, mask) = pad_ids(config, token_ids);
    let mut x = embed(view.token_embeddings, view.position_embeddings, &ids);
    for layer in &view.layers {
        let q = layer.wq.apply(&x, None);
        let k = layer.wk.apply(&x, None);
        let v = layer.wv.apply(&x, None);
        let ctx = attention(config, &q, &k, &v, &mask);
        let proj = layer.wo.apply(&ctx, None);
        x = tensor::layer_norm(&x.add(&proj), layer.ln1_gain, layer.ln1_bias, LN_EPS);
        let hidden = tensor::gelu(&layer.w1.apply(&x, Some(layer.b1)));
        let ffn = layer.w2.apply(&hidden, Some(layer.b2));
        x = tensor::layer_norm(&x.add(&ffn), layer.ln2_gain, layer.ln2_bias, LN_EPS);
    }
    let pooled = Tensor2D::from_vec(1, config.embed_dim, mean_pool(&x, &mask));
    let logits = view.head_weight.apply(&pooled, Some(view.head_bias));
    ClassifierOutput::from_probabilities(tensor::softmax(logits.row(0)))
}

/// Anything that classifies a fixed-id sequence: the float model and the
/// quantized model both implement it.
pub trait ForwardModel: Sync {
    fn config(&self) -> &ModelConfig;
    fn forward(&self, token_ids: &[u32]) -> ClassifierOutput;
}

impl ForwardModel for TransformerClassifier {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward(&self, token_ids: &[u32]) -> ClassifierOutput {
        TransformerClassifier::forward(self, token_ids)
    }
}

/// Token-level prediction interface. Attacks and evaluation interact with
/// models exclusively through this trait, so the float and quantized models
/// are attacked by identical code paths.
pub trait TokenClassifier: Sync {
    fn num_classes(&self) -> usize;
    fn predict_tokens(&self, tokens: &[String]) -> ClassifierOutput;
}

/// A model bound to the vocabulary it was trained with.
pub struct TextPipeline<'a, M: ForwardModel> {
    pub model: &'a M,
    pub vocab: &'a Vocabulary,
}

impl<'a, M: ForwardModel> TextPipeline<'a, M> {
    pub fn new(model: &'a M, vocab: &'a Vocabulary) -> Self {
        TextPipeline { model, vocab }
    }

    /// Tokenize, encode (unknown words map to UNK), and run the model.
    pub fn predict_text(&self, text: &str) -> ClassifierOutput {
        let tokens = tokenize(text);
        self.predict_tokens(&tokens)
    }
}

impl<M: ForwardModel> TokenClassifier for TextPipeline<'_, M> {
    fn num_classes(&self) -> usize {
        self.model.config().num_classes
    }

    fn predict_tokens(&self, tokens: &[String]) -> ClassifierOutput {
        let ids: Vec<u32> = tokens.iter().map(|t| self.vocab.encode(t)).collect();
        self.model.forward(&ids)
    }
}

/// Tokenize `text` with the shared tokenizer and classify it.
pub fn predict<M: ForwardModel>(model: &M, text: &str, vocab: &Vocabulary) -> ClassifierOutput {
    TextPipeline::new(model, vocab).predict_text(text)
}
