//! A small post-layer-norm transformer encoder with a softmax
//! classification head on the `[CLS]` position.
//!
//! ```text
//! ids, segments ──► token + position + segment embeddings
//!               ──► [ MHA ─► +residual ─► LayerNorm ─► FFN(GELU) ─► +residual ─► LayerNorm ] × n_layers
//!               ──► hidden[0] = C ─► dropout (training only) ─► softmax(W C + b) = P
//! ```
//!
//! Every forward pass keeps the intermediates needed by [`backward`], which
//! returns exact gradients for all parameters. Matrices multiply on the
//! right: `Q = X · W^Q` with `W^Q` of shape `d_model × d_model`, heads taking
//! consecutive column blocks of width `d_model / n_heads`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::EncodedSequence;

const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub n_labels: usize,
    /// Drop probability applied to the pooled vector during training.
    pub dropout_head: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: 128 wide, 4 heads, 2 layers, 512 feed-forward.
    pub fn desk(vocab_size: usize, max_len: usize, n_labels: usize) -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            n_layers: 2,
            d_ff: 512,
            max_len,
            vocab_size,
            n_labels,
            dropout_head: 0.75,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 || self.vocab_size == 0 || self.n_labels == 0 || self.max_len == 0 {
            return bad("d_ff, vocab_size, n_labels and max_len must be positive".into());
        }
        if self.max_len > 512 {
            return bad(format!("max_len {} exceeds 512", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout_head) {
            return bad(format!("dropout_head {} must lie in [0, 1)", self.dropout_head));
        }
        Ok(())
    }
}

/// Named views over every trainable tensor, in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)>;

    fn fill(&mut self, value: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(value);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array1<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub token_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub seg_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    /// Classification head, `n_labels × d_model`.
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl ModelParams {
    /// Normal(0, 0.02) weights, zero biases, unit layer-norm scales.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self::init_with_std(cfg, 0.02, rng)
    }

    pub fn init_with_std<R: Rng + ?Sized>(cfg: &ModelConfig, std: f64, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let token_emb = normal_matrix(cfg.vocab_size, d, std, rng);
        let pos_emb = normal_matrix(cfg.max_len, d, std, rng);
        let seg_emb = normal_matrix(2, d, std, rng);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                wq: normal_matrix(d, d, std, rng),
                bq: Array1::zeros(d),
                wk: normal_matrix(d, d, std, rng),
                bk: Array1::zeros(d),
                wv: normal_matrix(d, d, std, rng),
                bv: Array1::zeros(d),
                wo: normal_matrix(d, d, std, rng),
                bo: Array1::zeros(d),
                ln1_gamma: Array1::ones(d),
                ln1_beta: Array1::zeros(d),
                w_ff1: normal_matrix(d, cfg.d_ff, std, rng),
                b_ff1: Array1::zeros(cfg.d_ff),
                w_ff2: normal_matrix(cfg.d_ff, d, std, rng),
                b_ff2: Array1::zeros(d),
                ln2_gamma: Array1::ones(d),
                ln2_beta: Array1::zeros(d),
            })
            .collect();
        let head_w = normal_matrix(cfg.n_labels, d, std, rng);
        ModelParams { token_emb, pos_emb, seg_emb, layers, head_w, head_b: Array1::zeros(cfg.n_labels) }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// Replaces the classification head with a fresh one for `n_labels` classes.
    pub fn reset_head<R: Rng + ?Sized>(&mut self, n_labels: usize, std: f64, rng: &mut R) {
        let d = self.token_emb.ncols();
        self.head_w = normal_matrix(n_labels, d, std, rng);
        self.head_b = Array1::zeros(n_labels);
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let mut expected: Vec<(String, Vec<usize>)> = vec![
            ("token_emb".into(), vec![cfg.vocab_size, d]),
            ("pos_emb".into(), vec![cfg.max_len, d]),
            ("seg_emb".into(), vec![2, d]),
        ];
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Shape(format!(
                "expected {} layers, found {}",
                cfg.n_layers,
                self.layers.len()
            )));
        }
        for i in 0..cfg.n_layers {
            for (name, shape) in [
                ("wq", vec![d, d]),
                ("bq", vec![d]),
                ("wk", vec![d, d]),
                ("bk", vec![d]),
                ("wv", vec![d, d]),
                ("bv", vec![d]),
                ("wo", vec![d, d]),
                ("bo", vec![d]),
                ("ln1_gamma", vec![d]),
                ("ln1_beta", vec![d]),
                ("w_ff1", vec![d, f]),
                ("b_ff1", vec![f]),
                ("w_ff2", vec![f, d]),
                ("b_ff2", vec![d]),
                ("ln2_gamma", vec![d]),
                ("ln2_beta", vec![d]),
            ] {
                expected.push((format!("layers.{i}.{name}"), shape));
            }
        }
        expected.push(("head_w".into(), vec![cfg.n_labels, d]));
        expected.push(("head_b".into(), vec![cfg.n_labels]));

        for ((name, t), (ename, eshape)) in self.tensors().iter().zip(&expected) {
            if name != ename || t.shape() != eshape.as_slice() {
                return Err(Error::Shape(format!(
                    "{name} has shape {:?}, expected {ename} {eshape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

impl Parameters for ModelParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("token_emb".to_string(), self.token_emb.view().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view().into_dyn()),
            ("seg_emb".to_string(), self.seg_emb.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.extend([
                (p("wq"), l.wq.view().into_dyn()),
                (p("bq"), l.bq.view().into_dyn()),
                (p("wk"), l.wk.view().into_dyn()),
                (p("bk"), l.bk.view().into_dyn()),
                (p("wv"), l.wv.view().into_dyn()),
                (p("bv"), l.bv.view().into_dyn()),
                (p("wo"), l.wo.view().into_dyn()),
                (p("bo"), l.bo.view().into_dyn()),
                (p("ln1_gamma"), l.ln1_gamma.view().into_dyn()),
                (p("ln1_beta"), l.ln1_beta.view().into_dyn()),
                (p("w_ff1"), l.w_ff1.view().into_dyn()),
                (p("b_ff1"), l.b_ff1.view().into_dyn()),
                (p("w_ff2"), l.w_ff2.view().into_dyn()),
                (p("b_ff2"), l.b_ff2.view().into_dyn()),
                (p("ln2_gamma"), l.ln2_gamma.view().into_dyn()),
                (p("ln2_beta"), l.ln2_beta.view().into_dyn()),
            ]);
        }
        out.push(("head_w".to_string(), self.head_w.view().into_dyn()));
        out.push(("head_b".to_string(), self.head_b.view().into_dyn()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![
            ("token_emb".to_string(), self.token_emb.view_mut().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view_mut().into_dyn()),
            ("seg_emb".to_string(), self.seg_emb.view_mut().into_dyn()),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.extend([
                (p("wq"), l.wq.view_mut().into_dyn()),
                (p("bq"), l.bq.view_mut().into_dyn()),
                (p("wk"), l.wk.view_mut().into_dyn()),
                (p("bk"), l.bk.view_mut().into_dyn()),
                (p("wv"), l.wv.view_mut().into_dyn()),
                (p("bv"), l.bv.view_mut().into_dyn()),
                (p("wo"), l.wo.view_mut().into_dyn()),
                (p("bo"), l.bo.view_mut().into_dyn()),
                (p("ln1_gamma"), l.ln1_gamma.view_mut().into_dyn()),
                (p("ln1_beta"), l.ln1_beta.view_mut().into_dyn()),
                (p("w_ff1"), l.w_ff1.view_mut().into_dyn()),
                (p("b_ff1"), l.b_ff1.view_mut().into_dyn()),
                (p("w_ff2"), l.w_ff2.view_mut().into_dyn()),
                (p("b_ff2"), l.b_ff2.view_mut().into_dyn()),
                (p("ln2_gamma"), l.ln2_gamma.view_mut().into_dyn()),
                (p("ln2_beta"), l.ln2_beta.view_mut().into_dyn()),
            ]);
        }
        out.push(("head_w".to_string(), self.head_w.view_mut().into_dyn()));
        out.push(("head_b".to_string(), self.head_b.view_mut().into_dyn()));
        out
    }
}

/// Adds `other` into `acc`, tensor by tensor.
pub fn accumulate<P: Parameters>(acc: &mut P, other: &P) {
    for ((_, mut a), (_, b)) in acc.tensors_mut().into_iter().zip(other.tensors()) {
        a += &b;
    }
}

pub fn scale<P: Parameters>(p: &mut P, factor: f64) {
    for (_, mut t) in p.tensors_mut() {
        t *= factor;
    }
}

/// Numerically stable softmax.
pub fn softmax(x: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = x.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

/// `softmax(Q Kᵀ / √d_k) V` with masked keys given zero weight. Returns the
/// output and the attention weights.
pub fn scaled_dot_attention(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    mask: &[bool],
) -> Result<(Array2<f64>, Array2<f64>)> {
    if k.nrows() != v.nrows() || mask.len() != k.nrows() || q.ncols() != k.ncols() {
        return Err(Error::Shape(format!(
            "attention with Q {:?}, K {:?}, V {:?}, mask {}",
            q.shape(),
            k.shape(),
            v.shape(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Precondition("every key is masked".into()));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let scores = q.dot(&k.t()) * scale;
    let mut weights = Array2::zeros(scores.raw_dim());
    for (srow, mut wrow) in scores.outer_iter().zip(weights.outer_iter_mut()) {
        let max = srow
            .iter()
            .zip(mask)
            .filter(|&(_, &m)| m)
            .fold(f64::NEG_INFINITY, |acc, (&s, _)| acc.max(s));
        let mut sum = 0.0;
        for ((w, &s), &m) in wrow.iter_mut().zip(srow.iter()).zip(mask) {
            if m {
                *w = (s - max).exp();
                sum += *w;
            }
        }
        wrow /= sum;
    }
    let out = weights.dot(&v);
    Ok((out, weights))
}

fn add_bias(mut x: Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x += &b.view().insert_axis(Axis(0));
    x
}

struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// One `L × L` weight matrix per head.
    weights: Vec<Array2<f64>>,
    context: Array2<f64>,
}

fn attention_forward(
    x: &Array2<f64>,
    l: &LayerParams,
    n_heads: usize,
    mask: &[bool],
) -> Result<(Array2<f64>, AttentionCache)> {
    let q = add_bias(x.dot(&l.wq), &l.bq);
    let k = add_bias(x.dot(&l.wk), &l.bk);
    let v = add_bias(x.dot(&l.wv), &l.bv);
    let dk = q.ncols() / n_heads;
    let mut context = Array2::zeros(q.raw_dim());
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let (out, w) = scaled_dot_attention(q.slice(cols), k.slice(cols), v.slice(cols), mask)?;
        context.slice_mut(cols).assign(&out);
        weights.push(w);
    }
    let out = add_bias(context.dot(&l.wo), &l.bo);
    Ok((out, AttentionCache { q, k, v, weights, context }))
}

/// Multi-head self-attention of one layer over `x` (`L × d_model`).
pub fn multi_head_attention(
    x: ArrayView2<'_, f64>,
    layer: &LayerParams,
    n_heads: usize,
    mask: &[bool],
) -> Result<Array2<f64>> {
    let d = layer.wq.nrows();
    if x.ncols() != d || mask.len() != x.nrows() || n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::Shape(format!(
            "input {:?} with d_model {d}, {n_heads} heads and mask of {}",
            x.shape(),
            mask.len()
        )));
    }
    attention_forward(&x.to_owned(), layer, n_heads, mask).map(|(out, _)| out)
}

struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.outer_iter_mut().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *is = 1.0 / (var + LN_EPS).sqrt();
        row *= *is;
    }
    let y = &xhat * &gamma.view().insert_axis(Axis(0)) + beta.view().insert_axis(Axis(0));
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns dx and accumulates dgamma/dbeta.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LayerNormCache,
    gamma: &Array1<f64>,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    *dgamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let dxhat = dy * &gamma.view().insert_axis(Axis(0));
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &is) in dx
        .outer_iter_mut()
        .zip(dxhat.outer_iter())
        .zip(cache.xhat.outer_iter())
        .zip(cache.inv_std.iter())
    {
        let sum_g = g.sum();
        let sum_gx = g.dot(&xh);
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = is / d * (d * gi - sum_g - xi * sum_gx));
    }
    dx
}

fn gelu(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (s * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let t = (s * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_C * x * x)
}

struct LayerCache {
    x_in: Array2<f64>,
    attn: AttentionCache,
    ln1: LayerNormCache,
    y1: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    ln2: LayerNormCache,
}

/// Everything a backward pass needs from one forward pass.
pub struct ForwardTrace {
    ids: Vec<u32>,
    segments: Vec<u8>,
    layers: Vec<LayerCache>,
    /// Final hidden states, `max_len × d_model`.
    pub hidden: Array2<f64>,
    /// Pooled vector C (hidden state at position 0).
    pub pooled: Array1<f64>,
    /// Dropout multiplier applied to C (already scaled by 1/keep), if training.
    pub dropout_scale: Option<Array1<f64>>,
    pub pooled_dropped: Array1<f64>,
    pub logits: Array1<f64>,
    /// Class probabilities P.
    pub probs: Array1<f64>,
}

/// Runs the encoder and the classification head. `rng` is only drawn from
/// when `train_mode` is set and the head dropout is non-zero.
pub fn encoder_forward<R: Rng + ?Sized>(
    e: &EncodedSequence,
    p: &ModelParams,
    cfg: &ModelConfig,
    train_mode: bool,
    rng: &mut R,
) -> Result<ForwardTrace> {
    if e.ids.len() != cfg.max_len || e.segments.len() != cfg.max_len || e.attention_mask.len() != cfg.max_len {
        return Err(Error::Shape(format!(
            "sequence of length {} for max_len {}",
            e.ids.len(),
            cfg.max_len
        )));
    }
    let d = cfg.d_model;
    let mut x = Array2::zeros((cfg.max_len, d));
    for (i, mut row) in x.outer_iter_mut().enumerate() {
        let id = e.ids[i] as usize;
        let seg = e.segments[i] as usize;
        if id >= cfg.vocab_size || seg > 1 {
            return Err(Error::Shape(format!("token id {id} / segment {seg} at position {i}")));
        }
        row.assign(&p.token_emb.row(id));
        row += &p.pos_emb.row(i);
        row += &p.seg_emb.row(seg);
    }
    let mask: Vec<bool> = e.attention_mask.iter().map(|&m| m == 1).collect();

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (li, l) in p.layers.iter().enumerate() {
        let (attn_out, attn) = attention_forward(&x, l, cfg.n_heads, &mask)?;
        let (y1, ln1) = layer_norm(&(&x + &attn_out), &l.ln1_gamma, &l.ln1_beta);
        let ff_pre = add_bias(y1.dot(&l.w_ff1), &l.b_ff1);
        let ff_act = ff_pre.mapv(gelu);
        let ff_out = add_bias(ff_act.dot(&l.w_ff2), &l.b_ff2);
        let (y2, ln2) = layer_norm(&(&y1 + &ff_out), &l.ln2_gamma, &l.ln2_beta);
        if !y2.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("encoder layer {li}")));
        }
        layers.push(LayerCache { x_in: x, attn, ln1, y1, ff_pre, ff_act, ln2 });
        x = y2;
    }

    let pooled = x.row(0).to_owned();
    let dropout_scale = (train_mode && cfg.dropout_head > 0.0).then(|| {
        let keep = 1.0 - cfg.dropout_head;
        Array1::from_shape_simple_fn(d, || if rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
    });
    let pooled_dropped = match &dropout_scale {
        Some(m) => &pooled * m,
        None => pooled.clone(),
    };
    let logits = p.head_w.dot(&pooled_dropped) + &p.head_b;
    let probs = softmax(logits.view());
    if !probs.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("classification head".into()));
    }
    Ok(ForwardTrace {
        ids: e.ids.clone(),
        segments: e.segments.clone(),
        layers,
        hidden: x,
        pooled,
        dropout_scale,
        pooled_dropped,
        logits,
        probs,
    })
}

/// `softmax(W C + b)`.
pub fn classify(c: ArrayView1<'_, f64>, w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if w.ncols() != c.len() || w.nrows() != b.len() {
        return Err(Error::Shape(format!(
            "head {:?} with C of {} and b of {}",
            w.shape(),
            c.len(),
            b.len()
        )));
    }
    Ok(softmax((w.dot(&c) + b).view()))
}

/// Gradients flowing into a forward pass from the losses built on it.
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    /// dLoss/dlogits of the classification head.
    pub d_logits: Option<Array1<f64>>,
    /// dLoss/dC, for heads reading the pooled vector before dropout.
    pub d_pooled: Option<Array1<f64>>,
    /// dLoss/dhidden for token-level heads.
    pub d_hidden: Option<Array2<f64>>,
}

/// Exact gradients of all parameters given upstream loss gradients.
pub fn backward(p: &ModelParams, cfg: &ModelConfig, trace: &ForwardTrace, upstream: &Upstream) -> Result<ModelParams> {
    let mut g = p.zeros_like();
    let mut dx = match &upstream.d_hidden {
        Some(dh) if dh.dim() != trace.hidden.dim() => {
            return Err(Error::Shape(format!("d_hidden {:?} vs hidden {:?}", dh.dim(), trace.hidden.dim())))
        }
        Some(dh) => dh.clone(),
        None => Array2::zeros(trace.hidden.raw_dim()),
    };

    if let Some(dl) = &upstream.d_logits {
        if dl.len() != p.head_b.len() {
            return Err(Error::Shape(format!("d_logits of {} for {} labels", dl.len(), p.head_b.len())));
        }
        g.head_w += &outer(dl.view(), trace.pooled_dropped.view());
        g.head_b += dl;
        let mut dc = p.head_w.t().dot(dl);
        if let Some(m) = &trace.dropout_scale {
            dc *= m;
        }
        let mut row0 = dx.row_mut(0);
        row0 += &dc;
    }
    if let Some(dp) = &upstream.d_pooled {
        let mut row0 = dx.row_mut(0);
        row0 += dp;
    }

    let dk = cfg.head_dim();
    let inv_sqrt = 1.0 / (dk as f64).sqrt();
    for (li, (l, c)) in p.layers.iter().zip(&trace.layers).enumerate().rev() {
        let gl = &mut g.layers[li];

        // second sub-block: y2 = LN(y1 + FFN(y1))
        let ds2 = layer_norm_backward(&dx, &c.ln2, &l.ln2_gamma, &mut gl.ln2_gamma, &mut gl.ln2_beta);
        gl.w_ff2 += &c.ff_act.t().dot(&ds2);
        gl.b_ff2 += &ds2.sum_axis(Axis(0));
        let mut d_pre = ds2.dot(&l.w_ff2.t());
        Zip::from(&mut d_pre).and(&c.ff_pre).for_each(|d, &x| *d *= gelu_grad(x));
        gl.w_ff1 += &c.y1.t().dot(&d_pre);
        gl.b_ff1 += &d_pre.sum_axis(Axis(0));
        let dy1 = ds2 + d_pre.dot(&l.w_ff1.t());

        // first sub-block: y1 = LN(x + MHA(x))
        let ds1 = layer_norm_backward(&dy1, &c.ln1, &l.ln1_gamma, &mut gl.ln1_gamma, &mut gl.ln1_beta);
        gl.wo += &c.attn.context.t().dot(&ds1);
        gl.bo += &ds1.sum_axis(Axis(0));
        let d_ctx = ds1.dot(&l.wo.t());

        let mut dq = Array2::zeros(c.attn.q.raw_dim());
        let mut dkm = Array2::zeros(c.attn.k.raw_dim());
        let mut dv = Array2::zeros(c.attn.v.raw_dim());
        for (h, w) in c.attn.weights.iter().enumerate() {
            let cols = s![.., h * dk..(h + 1) * dk];
            let d_ctx_h = d_ctx.slice(cols);
            dv.slice_mut(cols).assign(&w.t().dot(&d_ctx_h));
            let dw = d_ctx_h.dot(&c.attn.v.slice(cols).t());
            // softmax backward, row by row; masked weights are 0 so stay 0
            let mut ds = w * &dw;
            for (mut row, (wrow, dwrow)) in ds.outer_iter_mut().zip(w.outer_iter().zip(dw.outer_iter())) {
                let dot = wrow.dot(&dwrow);
                Zip::from(&mut row).and(&wrow).for_each(|r, &wi| *r -= wi * dot);
            }
            ds *= inv_sqrt;
            dq.slice_mut(cols).assign(&ds.dot(&c.attn.k.slice(cols)));
            dkm.slice_mut(cols).assign(&ds.t().dot(&c.attn.q.slice(cols)));
        }
        gl.wq += &c.x_in.t().dot(&dq);
        gl.bq += &dq.sum_axis(Axis(0));
        gl.wk += &c.x_in.t().dot(&dkm);
        gl.bk += &dkm.sum_axis(Axis(0));
        gl.wv += &c.x_in.t().dot(&dv);
        gl.bv += &dv.sum_axis(Axis(0));
        dx = ds1 + dq.dot(&l.wq.t()) + dkm.dot(&l.wk.t()) + dv.dot(&l.wv.t());
    }

    for (i, row) in dx.outer_iter().enumerate() {
        let mut t = g.token_emb.row_mut(trace.ids[i] as usize);
        t += &row;
        let mut pe = g.pos_emb.row_mut(i);
        pe += &row;
        let mut se = g.seg_emb.row_mut(trace.segments[i] as usize);
        se += &row;
    }
    Ok(g)
}

pub fn outer(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Encoder configuration plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Model { params: ModelParams::init(&config, rng), config })
    }

    /// Inference-mode class probabilities.
    pub fn predict_proba(&self, e: &EncodedSequence) -> Result<Array1<f64>> {
        // no randomness is drawn outside training mode
        let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        encoder_forward(e, &self.params, &self.config, false, &mut unused).map(|t| t.probs)
    }

    pub fn predict(&self, e: &EncodedSequence) -> Result<usize> {
        Ok(argmax(self.predict_proba(e)?.view()))
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(x: ArrayView1<'_, f64>) -> usize {
    x.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
