//! Mini-batch gradient-descent trainer with hand-written backpropagation.
//!
//! Training is deterministic for a fixed `config.seed`: initialization,
//! shuffling, and dropout all draw from named seed derivations. The weights
//! returned are those of the epoch with the best dev accuracy (earliest epoch
//! wins ties); `epochs = 0` returns the initialized model unchanged.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::harness::Dataset;
use crate::lexicon::{tokenize, Vocabulary};
use crate::tensor::{matmul, row_norm_stats, softmax, Tensor2D, GELU_CUBIC, GELU_SQRT_2_OVER_PI};

use super::{attention_scores_row, embed, pad_ids, ModelConfig, TransformerClassifier, LN_EPS};

const BATCH_SIZE: usize = 16;

/// Train a fresh model on `train_ds`, selecting the epoch with the best
/// accuracy on `dev_ds`.
///
/// Out-of-range labels are contract violations; a non-finite loss reports
/// [`Error::TrainingDiverged`] with the offending step.
pub fn train(
    config: &ModelConfig,
    train_ds: &Dataset,
    dev_ds: &Dataset,
    vocab: &Vocabulary,
    epochs: usize,
    learning_rate: f32,
) -> Result<TransformerClassifier, Error> {
    config.validate();
    assert!(!train_ds.examples().is_empty(), "training set is empty");
    assert!(!dev_ds.examples().is_empty(), "dev set is empty");
    assert_eq!(
        vocab.len(),
        config.vocab_size,
        "vocabulary size {} does not match config.vocab_size {}",
        vocab.len(),
        config.vocab_size
    );
    for ds in [train_ds, dev_ds] {
        for (text, label) in ds.examples() {
            assert!(
                (*label as usize) < config.num_classes,
                "label {label} out of range for {} classes (example {text:?})",
                config.num_classes
            );
        }
    }

    let mut model = TransformerClassifier::init(config);
    if epochs == 0 {
        return Ok(model);
    }

    let encoded: Vec<(Vec<u32>, u32)> = train_ds
        .examples()
        .iter()
        .map(|(text, label)| {
            let ids = tokenize(text).iter().map(|t| vocab.encode(t)).collect();
            (ids, *label)
        })
        .collect();

    let mut shuffle_rng = crate::rng::seeded_rng(config.seed, "train/shuffle");
    let mut dropout_rng = crate::rng::seeded_rng(config.seed, "train/dropout");

    let mut best: Option<(f64, TransformerClassifier)> = None;
    let mut step = 0usize;
    for _epoch in 0..epochs {
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(BATCH_SIZE) {
            step += 1;
            let mut grads = Gradients::zeros(config);
            let mut loss_sum = 0.0f64;
            for &i in batch {
                let (ids, label) = &encoded[i];
                let cache = forward_cached(&model, ids, Some(&mut dropout_rng));
                loss_sum += -(cache.probs[*label as usize].max(f32::MIN_POSITIVE) as f64).ln();
                backward(&model, &cache, *label as usize, &mut grads);
            }
            let loss = loss_sum / batch.len() as f64;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { step });
            }
            grads.sgd_step(&mut model, learning_rate / batch.len() as f32);
        }
        let acc = dev_accuracy(&model, dev_ds, vocab);
        if best.as_ref().map_or(true, |(b, _)| acc > *b) {
            best = Some((acc, model.clone()));
        }
    }
    Ok(best.expect("epochs > 0").1)
}

fn dev_accuracy(model: &TransformerClassifier, dev: &Dataset, vocab: &Vocabulary) -> f64 {
    let correct = dev
        .examples()
        .iter()
        .filter(|(text, label)| {
            let out = super::predict(model, text, vocab);
            out.predicted_label == *label as usize
        })
        .count();
    correct as f64 / dev.examples().len() as f64
}

/// Per-layer forward intermediates kept for the backward pass.
struct LayerCache {
    x_in: Tensor2D,
    q: Tensor2D,
    k: Tensor2D,
    v: Tensor2D,
    /// Softmax attention weights, one L x L matrix per head.
    att: Vec<Tensor2D>,
    ctx: Tensor2D,
    /// Scaled dropout multipliers (0 or 1/(1-p)) for the attention output.
    drop1: Option<Vec<f32>>,
    u: Tensor2D,
    ln1_mean: Vec<f32>,
    ln1_inv: Vec<f32>,
    y: Tensor2D,
    h_pre: Tensor2D,
    h_act: Tensor2D,
    drop2: Option<Vec<f32>>,
    v_res: Tensor2D,
    ln2_mean: Vec<f32>,
    ln2_inv: Vec<f32>,
    x_out: Tensor2D,
}

struct ExampleCache {
    ids: Vec<u32>,
    mask: Vec<bool>,
    n_active: usize,
    layers: Vec<LayerCache>,
    pooled: Vec<f32>,
    probs: Vec<f32>,
}

/// Forward pass that records every intermediate. With a dropout generator
/// and `config.dropout > 0`, inverted dropout is applied to the attention
/// and feed-forward outputs before their residual additions.
fn forward_cached(
    model: &TransformerClassifier,
    token_ids: &[u32],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> ExampleCache {
    let config = &model.config;
    let (ids, mask) = pad_ids(config, token_ids);
    let n_active = mask.iter().filter(|m| **m).count();
    let mut x = embed(&model.token_embeddings, &model.position_embeddings, &ids);
    let mut layers = Vec::with_capacity(config.num_layers);

    for lw in &model.layers {
        let x_in = x.clone();
        let q = matmul(&x_in, &lw.wq);
        let k = matmul(&x_in, &lw.wk);
        let v = matmul(&x_in, &lw.wv);

        let seq = q.rows();
        let dh = config.head_dim();
        let mut att = Vec::with_capacity(config.num_heads);
        let mut ctx = Tensor2D::zeros(seq, config.embed_dim);
        for h in 0..config.num_heads {
            let c0 = h * dh;
            let mut probs = Tensor2D::zeros(seq, seq);
            for i in 0..seq {
                let scores = attention_scores_row(&q, &k, &mask, i, c0, dh);
                let weights = softmax(&scores);
                let out_row = ctx.row_mut(i);
                for (j, w) in weights.iter().enumerate() {
                    let vj = &v.row(j)[c0..c0 + dh];
                    for (c, val) in vj.iter().enumerate() {
                        out_row[c0 + c] += w * val;
                    }
                }
                probs.row_mut(i).copy_from_slice(&weights);
            }
            att.push(probs);
        }

        let mut proj = matmul(&ctx, &lw.wo);
        let drop1 = sample_dropout(config, &mut dropout_rng, proj.data().len());
        if let Some(m) = &drop1 {
            apply_mask(&mut proj, m);
        }
        let u = x_in.add(&proj);
        let (ln1_mean, ln1_inv) = norm_stats(&u);
        let y = normalize(&u, &ln1_mean, &ln1_inv, &lw.ln1_gain, &lw.ln1_bias);

        let h_pre = matmul(&y, &lw.w1).add_row_bias(&lw.b1);
        let h_act = crate::tensor::gelu(&h_pre);
        let mut ffn = matmul(&h_act, &lw.w2).add_row_bias(&lw.b2);
        let drop2 = sample_dropout(config, &mut dropout_rng, ffn.data().len());
        if let Some(m) = &drop2 {
            apply_mask(&mut ffn, m);
        }
        let v_res = y.add(&ffn);
        let (ln2_mean, ln2_inv) = norm_stats(&v_res);
        let x_out = normalize(&v_res, &ln2_mean, &ln2_inv, &lw.ln2_gain, &lw.ln2_bias);

        x = x_out.clone();
        layers.push(LayerCache {
            x_in,
            q,
            k,
            v,
            att,
            ctx,
            drop1,
            u,
            ln1_mean,
            ln1_inv,
            y,
            h_pre,
            h_act,
            drop2,
            v_res,
            ln2_mean,
            ln2_inv,
            x_out,
        });
    }

    let pooled = super::mean_pool(&x, &mask);
    let pooled_t = Tensor2D::from_vec(1, config.embed_dim, pooled.clone());
    let logits = matmul(&pooled_t, &model.head_weight).add_row_bias(&model.head_bias);
    let probs = softmax(logits.row(0));
    ExampleCache {
        ids,
        mask,
        n_active,
        layers,
        pooled,
        probs,
    }
}

fn sample_dropout(
    config: &ModelConfig,
    rng: &mut Option<&mut ChaCha8Rng>,
    len: usize,
) -> Option<Vec<f32>> {
    let p = config.dropout;
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            Some((0..len).map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep }).collect())
        }
        _ => None,
    }
}

fn apply_mask(t: &mut Tensor2D, mask: &[f32]) {
    for (v, m) in t.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
}

/// Per-row mean and inverse std for every row of `x`, as layer_norm uses.
fn norm_stats(x: &Tensor2D) -> (Vec<f32>, Vec<f32>) {
    let mut means = Vec::with_capacity(x.rows());
    let mut invs = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let (mean, inv) = row_norm_stats(x.row(r), LN_EPS);
        means.push(mean);
        invs.push(inv);
    }
    (means, invs)
}

fn normalize(x: &Tensor2D, mean: &[f32], inv: &[f32], gain: &[f32], bias: &[f32]) -> Tensor2D {
    let mut out = Tensor2D::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let out_row = out.row_mut(r);
        for c in 0..x.cols() {
            out_row[c] = (row[c] - mean[r]) * inv[r] * gain[c] + bias[c];
        }
    }
    out
}

/// Gradient buffers mirroring the parameter layout.
struct LayerGrads {
    wq: Tensor2D,
    wk: Tensor2D,
    wv: Tensor2D,
    wo: Tensor2D,
    ln1_gain: Vec<f32>,
    ln1_bias: Vec<f32>,
    w1: Tensor2D,
    b1: Vec<f32>,
    w2: Tensor2D,
    b2: Vec<f32>,
    ln2_gain: Vec<f32>,
    ln2_bias: Vec<f32>,
}

struct Gradients {
    token_embeddings: Tensor2D,
    position_embeddings: Tensor2D,
    layers: Vec<LayerGrads>,
    head_weight: Tensor2D,
    head_bias: Vec<f32>,
}

impl Gradients {
    fn zeros(config: &ModelConfig) -> Gradients {
        let d = config.embed_dim;
        Gradients {
            token_embeddings: Tensor2D::zeros(config.vocab_size, d),
            position_embeddings: Tensor2D::zeros(config.max_seq_len, d),
            layers: (0..config.num_layers)
                .map(|_| LayerGrads {
                    wq: Tensor2D::zeros(d, d),
                    wk: Tensor2D::zeros(d, d),
                    wv: Tensor2D::zeros(d, d),
                    wo: Tensor2D::zeros(d, d),
                    ln1_gain: vec![0.0; d],
                    ln1_bias: vec![0.0; d],
                    w1: Tensor2D::zeros(d, config.ffn_dim),
                    b1: vec![0.0; config.ffn_dim],
                    w2: Tensor2D::zeros(config.ffn_dim, d),
                    b2: vec![0.0; d],
                    ln2_gain: vec![0.0; d],
                    ln2_bias: vec![0.0; d],
                })
                .collect(),
            head_weight: Tensor2D::zeros(d, config.num_classes),
            head_bias: vec![0.0; config.num_classes],
        }
    }

    /// `w -= rate * g` over every parameter; `rate` already folds in the
    /// batch-mean factor.
    fn sgd_step(&self, model: &mut TransformerClassifier, rate: f32) {
        fn step_t(w: &mut Tensor2D, g: &Tensor2D, rate: f32) {
            for (w, g) in w.data_mut().iter_mut().zip(g.data()) {
                *w -= rate * g;
            }
        }
        fn step_v(w: &mut [f32], g: &[f32], rate: f32) {
            for (w, g) in w.iter_mut().zip(g) {
                *w -= rate * g;
            }
        }
        step_t(&mut model.token_embeddings, &self.token_embeddings, rate);
        step_t(&mut model.position_embeddings, &self.position_embeddings, rate);
        for (lw, lg) in model.layers.iter_mut().zip(&self.layers) {
            step_t(&mut lw.wq, &lg.wq, rate);
            step_t(&mut lw.wk, &lg.wk, rate);
            step_t(&mut lw.wv, &lg.wv, rate);
            step_t(&mut lw.wo, &lg.wo, rate);
            step_v(&mut lw.ln1_gain, &lg.ln1_gain, rate);
            step_v(&mut lw.ln1_bias, &lg.ln1_bias, rate);
            step_t(&mut lw.w1, &lg.w1, rate);
            step_v(&mut lw.b1, &lg.b1, rate);
            step_t(&mut lw.w2, &lg.w2, rate);
            step_v(&mut lw.b2, &lg.b2, rate);
            step_v(&mut lw.ln2_gain, &lg.ln2_gain, rate);
            step_v(&mut lw.ln2_bias, &lg.ln2_bias, rate);
        }
        step_t(&mut model.head_weight, &self.head_weight, rate);
        step_v(&mut model.head_bias, &self.head_bias, rate);
    }
}

/// Accumulate the cross-entropy gradient of one example into `grads`.
fn backward(model: &TransformerClassifier, cache: &ExampleCache, label: usize, grads: &mut Gradients) {
    let config = &model.config;
    let d = config.embed_dim;
    let seq = config.max_seq_len;

    // d loss / d logits = probs - onehot(label)
    let mut dlogits = cache.probs.clone();
    dlogits[label] -= 1.0;

    for c in 0..config.num_classes {
        grads.head_bias[c] += dlogits[c];
        for r in 0..d {
            grads.head_weight.data_mut()[r * config.num_classes + c] +=
                cache.pooled[r] * dlogits[c];
        }
    }
    let mut dpooled = vec![0.0f32; d];
    for r in 0..d {
        for c in 0..config.num_classes {
            dpooled[r] += model.head_weight.get(r, c) * dlogits[c];
        }
    }

    // Mean pooling spreads the gradient over active rows.
    let mut dx = Tensor2D::zeros(seq, d);
    if cache.n_active > 0 {
        let inv_n = 1.0 / cache.n_active as f32;
        for i in 0..seq {
            if cache.mask[i] {
                let row = dx.row_mut(i);
                for c in 0..d {
                    row[c] = dpooled[c] * inv_n;
                }
            }
        }
    }

    for (li, lc) in cache.layers.iter().enumerate().rev() {
        let lw = &model.layers[li];
        let lg = &mut grads.layers[li];

        // LN2: x_out = norm(v_res) * gain + bias
        let dv_res = layer_norm_backward(
            &lc.v_res,
            &lc.ln2_mean,
            &lc.ln2_inv,
            &lw.ln2_gain,
            &dx,
            &mut lg.ln2_gain,
            &mut lg.ln2_bias,
        );

        // v_res = y + dropout(ffn)
        let mut dy = dv_res.clone();
        let mut dffn = dv_res;
        if let Some(m) = &lc.drop2 {
            apply_mask(&mut dffn, m);
        }

        // ffn = h_act * w2 + b2
        add_assign(&mut lg.w2, &matmul(&lc.h_act.transpose(), &dffn));
        add_rows(&mut lg.b2, &dffn);
        let dh_act = matmul(&dffn, &lw.w2.transpose());

        // h_act = gelu(h_pre)
        let mut dh_pre = dh_act;
        for (g, &pre) in dh_pre.data_mut().iter_mut().zip(lc.h_pre.data()) {
            *g *= gelu_derivative(pre);
        }

        // h_pre = y * w1 + b1
        add_assign(&mut lg.w1, &matmul(&lc.y.transpose(), &dh_pre));
        add_rows(&mut lg.b1, &dh_pre);
        add_assign(&mut dy, &matmul(&dh_pre, &lw.w1.transpose()));

        // LN1: y = norm(u) * gain + bias
        let du = layer_norm_backward(
            &lc.u,
            &lc.ln1_mean,
            &lc.ln1_inv,
            &lw.ln1_gain,
            &dy,
            &mut lg.ln1_gain,
            &mut lg.ln1_bias,
        );

        // u = x_in + dropout(proj)
        let mut dx_in = du.clone();
        let mut dproj = du;
        if let Some(m) = &lc.drop1 {
            apply_mask(&mut dproj, m);
        }

        // proj = ctx * wo
        add_assign(&mut lg.wo, &matmul(&lc.ctx.transpose(), &dproj));
        let dctx = matmul(&dproj, &lw.wo.transpose());

        // Attention backward, one head at a time.
        let dh = config.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        let mut dq = Tensor2D::zeros(seq, d);
        let mut dk = Tensor2D::zeros(seq, d);
        let mut dv = Tensor2D::zeros(seq, d);
        for h in 0..config.num_heads {
            let c0 = h * dh;
            let att = &lc.att[h];
            for i in 0..seq {
                let a_row = att.row(i);
                let dctx_row = &dctx.row(i)[c0..c0 + dh];
                // dA_ij = dctx_i . v_j ; dV_j += A_ij * dctx_i
                let mut da_row = vec![0.0f32; seq];
                for j in 0..seq {
                    let vj = &lc.v.row(j)[c0..c0 + dh];
                    let mut acc = 0.0f32;
                    for c in 0..dh {
                        acc += dctx_row[c] * vj[c];
                    }
                    da_row[j] = acc;
                    let dv_row = dv.row_mut(j);
                    for c in 0..dh {
                        dv_row[c0 + c] += a_row[j] * dctx_row[c];
                    }
                }
                // Softmax backward: dS_ij = A_ij (dA_ij - sum_j' dA_ij' A_ij')
                let inner: f32 = da_row.iter().zip(a_row).map(|(da, a)| da * a).sum();
                for j in 0..seq {
                    let ds = a_row[j] * (da_row[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &lc.k.row(j)[c0..c0 + dh];
                    let qi = &lc.q.row(i)[c0..c0 + dh];
                    {
                        let dq_row = dq.row_mut(i);
                        for c in 0..dh {
                            dq_row[c0 + c] += ds * kj[c];
                        }
                    }
                    let dk_row = dk.row_mut(j);
                    for c in 0..dh {
                        dk_row[c0 + c] += ds * qi[c];
                    }
                }
            }
        }

        // q/k/v = x_in * w{q,k,v}
        let x_in_t = lc.x_in.transpose();
        add_assign(&mut lg.wq, &matmul(&x_in_t, &dq));
        add_assign(&mut lg.wk, &matmul(&x_in_t, &dk));
        add_assign(&mut lg.wv, &matmul(&x_in_t, &dv));
        add_assign(&mut dx_in, &matmul(&dq, &lw.wq.transpose()));
        add_assign(&mut dx_in, &matmul(&dk, &lw.wk.transpose()));
        add_assign(&mut dx_in, &matmul(&dv, &lw.wv.transpose()));

        dx = dx_in;
    }

    // x0 = token_embeddings[ids] + position_embeddings
    for i in 0..seq {
        let id = cache.ids[i] as usize;
        let src = dx.row(i).to_vec();
        {
            let dst = grads.token_embeddings.row_mut(id);
            for c in 0..d {
                dst[c] += src[c];
            }
        }
        let dst = grads.position_embeddings.row_mut(i);
        for c in 0..d {
            dst[c] += src[c];
        }
    }
}

/// Backward through one layer norm. Returns the input gradient and folds the
/// gain/bias gradients into the supplied accumulators.
fn layer_norm_backward(
    input: &Tensor2D,
    mean: &[f32],
    inv: &[f32],
    gain: &[f32],
    d_out: &Tensor2D,
    d_gain: &mut [f32],
    d_bias: &mut [f32],
) -> Tensor2D {
    let (rows, cols) = (input.rows(), input.cols());
    let mut d_in = Tensor2D::zeros(rows, cols);
    let inv_cols = 1.0 / cols as f32;
    let mut hat = vec![0.0f32; cols];
    let mut dhat = vec![0.0f32; cols];
    for r in 0..rows {
        let x_row = input.row(r);
        let dout_row = d_out.row(r);
        let mut m1 = 0.0f32;
        let mut m2 = 0.0f32;
        for c in 0..cols {
            hat[c] = (x_row[c] - mean[r]) * inv[r];
            dhat[c] = dout_row[c] * gain[c];
            d_gain[c] += dout_row[c] * hat[c];
            d_bias[c] += dout_row[c];
            m1 += dhat[c];
            m2 += dhat[c] * hat[c];
        }
        m1 *= inv_cols;
        m2 *= inv_cols;
        let d_row = d_in.row_mut(r);
        for c in 0..cols {
            d_row[c] = inv[r] * (dhat[c] - m1 - hat[c] * m2);
        }
    }
    d_in
}

fn gelu_derivative(x: f32) -> f32 {
    let t = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let th = t.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn add_assign(dst: &mut Tensor2D, src: &Tensor2D) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

/// Column-wise sum of `src` rows into `dst` (bias gradients).
fn add_rows(dst: &mut [f32], src: &Tensor2D) {
    for r in 0..src.rows() {
        for (d, s) in dst.iter_mut().zip(src.row(r)) {
            *d += s;
        }
    }
}

/// Quick dev-accuracy probe shared with tests.
pub(crate) fn accuracy_on(model: &TransformerClassifier, ds: &Dataset, vocab: &Vocabulary) -> f64 {
    dev_accuracy(model, ds, vocab)
}

#[cfg(test)]
mod grad_tests {
    use super::*;

    /// Flat f64 mirror of the model for finite-difference checks: the same
    /// architecture recomputed independently in double precision over one
    /// flat parameter buffer.
    struct FlatModel {
        config: ModelConfig,
        data: Vec<f64>,
        spans: Vec<(String, usize, usize, usize)>, // name, offset, rows, cols
    }

    impl FlatModel {
        fn from_model(m: &TransformerClassifier) -> FlatModel {
            let mut data = Vec::new();
            let mut spans = Vec::new();
            for (name, t) in super::super::checkpoint::tensor_entries(m) {
                spans.push((name, data.len(), t.rows(), t.cols()));
                data.extend(t.values().iter().map(|&v| v as f64));
            }
            FlatModel {
                config: m.config.clone(),
                data,
                spans,
            }
        }

        fn span(&self, name: &str) -> &[f64] {
            let (_, off, r, c) = self
                .spans
                .iter()
                .find(|(n, ..)| n == name)
                .unwrap_or_else(|| panic!("no span {name}"));
            &self.data[*off..off + r * c]
        }
    }

    fn matmul64(a: &[f64], ar: usize, ac: usize, b: &[f64], bc: usize) -> Vec<f64> {
        let mut out = vec![0.0f64; ar * bc];
        for i in 0..ar {
            for j in 0..bc {
                let mut acc = 0.0;
                for p in 0..ac {
                    acc += a[i * ac + p] * b[p * bc + j];
                }
                out[i * bc + j] = acc;
            }
        }
        out
    }

    fn softmax64(row: &[f64]) -> Vec<f64> {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|v| v / sum).collect()
    }

    fn layer_norm64(x: &mut [f64], cols: usize, gain: &[f64], bias: &[f64], eps: f64) {
        let rows = x.len() / cols;
        for r in 0..rows {
            let row = &mut x[r * cols..(r + 1) * cols];
            let mean: f64 = row.iter().sum::<f64>() / cols as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                row[c] = (row[c] - mean) * inv * gain[c] + bias[c];
            }
        }
    }

    fn gelu64(v: f64) -> f64 {
        let inner = (2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v);
        0.5 * v * (1.0 + inner.tanh())
    }

    /// Mean cross-entropy of the flat model over a batch, all in f64.
    fn flat_loss(fm: &FlatModel, batch: &[(Vec<u32>, u32)]) -> f64 {
        let cfg = &fm.config;
        let (l, d) = (cfg.max_seq_len, cfg.embed_dim);
        let mut total = 0.0;
        for (token_ids, label) in batch {
            let (ids, mask) = pad_ids(cfg, token_ids);
            let tok = fm.span("token_embeddings");
            let pos = fm.span("position_embeddings");
            let mut x = vec![0.0f64; l * d];
            for i in 0..l {
                for c in 0..d {
                    x[i * d + c] = tok[ids[i] as usize * d + c] + pos[i * d + c];
                }
            }
            for li in 0..cfg.num_layers {
                let name = |suffix: &str| format!("layers.{li}.{suffix}");
                let q = matmul64(&x, l, d, fm.span(&name("attn.wq")), d);
                let k = matmul64(&x, l, d, fm.span(&name("attn.wk")), d);
                let v = matmul64(&x, l, d, fm.span(&name("attn.wv")), d);
                let dh = cfg.head_dim();
                let scale = 1.0 / (dh as f64).sqrt();
                let mut ctx = vec![0.0f64; l * d];
                for h in 0..cfg.num_heads {
                    let c0 = h * dh;
                    for i in 0..l {
                        let mut scores = vec![0.0f64; l];
                        for j in 0..l {
                            let mut dot = 0.0;
                            for c in 0..dh {
                                dot += q[i * d + c0 + c] * k[j * d + c0 + c];
                            }
                            scores[j] = dot * scale + if mask[j] { 0.0 } else { -1e9 };
                        }
                        let w = softmax64(&scores);
                        for j in 0..l {
                            for c in 0..dh {
                                ctx[i * d + c0 + c] += w[j] * v[j * d + c0 + c];
                            }
                        }
                    }
                }
                let proj = matmul64(&ctx, l, d, fm.span(&name("attn.wo")), d);
                let mut u: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
                layer_norm64(
                    &mut u,
                    d,
                    fm.span(&name("ln1.gain")),
                    fm.span(&name("ln1.bias")),
                    LN_EPS as f64,
                );
                let mut h_pre = matmul64(&u, l, d, fm.span(&name("ffn.w1")), cfg.ffn_dim);
                let b1 = fm.span(&name("ffn.b1"));
                for i in 0..l {
                    for c in 0..cfg.ffn_dim {
                        h_pre[i * cfg.ffn_dim + c] += b1[c];
                    }
                }
                let h_act: Vec<f64> = h_pre.iter().map(|&v| gelu64(v)).collect();
                let mut f = matmul64(&h_act, l, cfg.ffn_dim, fm.span(&name("ffn.w2")), d);
                let b2 = fm.span(&name("ffn.b2"));
                for i in 0..l {
                    for c in 0..d {
                        f[i * d + c] += b2[c];
                    }
                }
                let mut v_res: Vec<f64> = u.iter().zip(&f).map(|(a, b)| a + b).collect();
                layer_norm64(
                    &mut v_res,
                    d,
                    fm.span(&name("ln2.gain")),
                    fm.span(&name("ln2.bias")),
                    LN_EPS as f64,
                );
                x = v_res;
            }
            let n_active = mask.iter().filter(|m| **m).count();
            let mut pooled = vec![0.0f64; d];
            if n_active > 0 {
                for i in 0..l {
                    if mask[i] {
                        for c in 0..d {
                            pooled[c] += x[i * d + c];
                        }
                    }
                }
                for p in &mut pooled {
                    *p /= n_active as f64;
                }
            }
            let hw = fm.span("head.weight");
            let hb = fm.span("head.bias");
            let mut logits = vec![0.0f64; cfg.num_classes];
            for c in 0..cfg.num_classes {
                logits[c] = hb[c];
                for r in 0..d {
                    logits[c] += pooled[r] * hw[r * cfg.num_classes + c];
                }
            }
            let probs = softmax64(&logits);
            total += -probs[*label as usize].ln();
        }
        total / batch.len() as f64
    }

    /// Flatten analytic gradients in the canonical tensor order.
    fn flatten_grads(g: &Gradients, model: &TransformerClassifier) -> Vec<f64> {
        let mut out = Vec::new();
        let push_t = |out: &mut Vec<f64>, t: &Tensor2D| out.extend(t.data().iter().map(|&v| v as f64));
        let push_v = |out: &mut Vec<f64>, v: &[f32]| out.extend(v.iter().map(|&x| x as f64));
        push_t(&mut out, &g.token_embeddings);
        push_t(&mut out, &g.position_embeddings);
        for lg in &g.layers {
            push_t(&mut out, &lg.wq);
            push_t(&mut out, &lg.wk);
            push_t(&mut out, &lg.wv);
            push_t(&mut out, &lg.wo);
            push_v(&mut out, &lg.ln1_gain);
            push_v(&mut out, &lg.ln1_bias);
            push_t(&mut out, &lg.w1);
            push_v(&mut out, &lg.b1);
            push_t(&mut out, &lg.w2);
            push_v(&mut out, &lg.b2);
            push_v(&mut out, &lg.ln2_gain);
            push_v(&mut out, &lg.ln2_bias);
        }
        push_t(&mut out, &g.head_weight);
        push_v(&mut out, &g.head_bias);
        debug_assert_eq!(out.len(), FlatModel::from_model(model).data.len());
        out
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        use rand::Rng;
        // Hand-sized model: one layer, one head, embed_dim 2.
        let config = ModelConfig {
            vocab_size: 6,
            max_seq_len: 4,
            embed_dim: 2,
            num_layers: 1,
            num_heads: 1,
            ffn_dim: 3,
            num_classes: 2,
            dropout: 0.0,
            seed: 11,
        };
        let mut model = TransformerClassifier::init(&config);
        // A zero head hides most gradients; nudge it off zero.
        {
            let mut rng = crate::rng::seeded_rng(5, "gradcheck/head");
            for v in model.head_weight.data_mut() {
                *v = rng.gen_range(-0.05..0.05);
            }
            for v in &mut model.head_bias {
                *v = rng.gen_range(-0.05..0.05);
            }
        }
        let batch: Vec<(Vec<u32>, u32)> = vec![
            (vec![2, 3, 4], 0),
            (vec![5, 2], 1),
            (vec![4, 4, 3, 2], 1),
        ];

        let mut grads = Gradients::zeros(&config);
        for (ids, label) in &batch {
            let cache = forward_cached(&model, ids, None);
            backward(&model, &cache, *label as usize, &mut grads);
        }
        let analytic: Vec<f64> = flatten_grads(&grads, &model)
            .iter()
            .map(|g| g / batch.len() as f64)
            .collect();

        let fm = FlatModel::from_model(&model);
        let mut rng = crate::rng::seeded_rng(17, "gradcheck/params");
        let h = 1e-3;
        for _ in 0..20 {
            let idx = rng.gen_range(0..fm.data.len());
            let mut plus = FlatModel {
                config: fm.config.clone(),
                data: fm.data.clone(),
                spans: fm.spans.clone(),
            };
            plus.data[idx] += h;
            let mut minus = FlatModel {
                config: fm.config.clone(),
                data: fm.data.clone(),
                spans: fm.spans.clone(),
            };
            minus.data[idx] -= h;
            let fd = (flat_loss(&plus, &batch) - flat_loss(&minus, &batch)) / (2.0 * h);
            let a = analytic[idx];
            if fd.abs() < 1e-6 {
                assert!(a.abs() < 1e-5, "param {idx}: analytic {a} vs fd {fd}");
            } else {
                let rel = (a - fd).abs() / fd.abs().max(a.abs());
                assert!(rel < 1e-3, "param {idx}: analytic {a} vs fd {fd} (rel {rel})");
            }
        }
    }

    #[test]
    fn training_reduces_loss_on_tiny_batch() {
        let config = ModelConfig {
            vocab_size: 6,
            max_seq_len: 4,
            embed_dim: 4,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 8,
            num_classes: 2,
            dropout: 0.0,
            seed: 3,
        };
        let mut model = TransformerClassifier::init(&config);
        let batch: Vec<(Vec<u32>, u32)> = vec![(vec![2, 3], 0), (vec![4, 5], 1)];
        let loss_at = |m: &TransformerClassifier| -> f64 {
            batch
                .iter()
                .map(|(ids, label)| {
                    let out = m.forward(ids);
                    -(out.probabilities[*label as usize] as f64).ln()
                })
                .sum::<f64>()
                / batch.len() as f64
        };
        let before = loss_at(&model);
        for _ in 0..50 {
            let mut grads = Gradients::zeros(&config);
            for (ids, label) in &batch {
                let cache = forward_cached(&model, ids, None);
                backward(&model, &cache, *label as usize, &mut grads);
            }
            grads.sgd_step(&mut model, 0.1 / batch.len() as f32);
        }
        let after = loss_at(&model);
        assert!(after < before * 0.5, "loss {before} -> {after}");
    }
}
