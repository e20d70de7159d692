use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fit::TrainConfig;
use super::loss::PROB_FLOOR;
use super::optim::Adam;
use crate::encoder::{accumulate, backward, encoder_forward, outer, softmax, Model, ModelParams, Parameters, Upstream};
use crate::error::{Error, Result};
use crate::tokenizer::{mask_for_mlm, sample_nsp_pairs, MlmExample, MlmOptions, Vocab};

/// Pre-training heads. The masked-LM head reuses the token embedding table
/// and only owns an output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainHeads {
    pub mlm_bias: Array1<f64>,
    /// Next-sentence classifier on C, `2 × d_model`; row 1 means "is next".
    pub nsp_w: Array2<f64>,
    pub nsp_b: Array1<f64>,
}

impl PretrainHeads {
    pub fn init<R: Rng + ?Sized>(vocab_size: usize, d_model: usize, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, 0.02).expect("valid std");
        PretrainHeads {
            mlm_bias: Array1::zeros(vocab_size),
            nsp_w: Array2::from_shape_simple_fn((2, d_model), || dist.sample(rng)),
            nsp_b: Array1::zeros(2),
        }
    }
}

impl Parameters for PretrainHeads {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("mlm_bias".into(), self.mlm_bias.view().into_dyn()),
            ("nsp_w".into(), self.nsp_w.view().into_dyn()),
            ("nsp_b".into(), self.nsp_b.view().into_dyn()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            ("mlm_bias".into(), self.mlm_bias.view_mut().into_dyn()),
            ("nsp_w".into(), self.nsp_w.view_mut().into_dyn()),
            ("nsp_b".into(), self.nsp_b.view_mut().into_dyn()),
        ]
    }
}

/// Encoder and heads updated together by one optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainParams {
    pub model: ModelParams,
    pub heads: PretrainHeads,
}

impl Parameters for PretrainParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut t = self.model.tensors();
        t.extend(self.heads.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut t = self.model.tensors_mut();
        t.extend(self.heads.tensors_mut());
        t
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainExample {
    pub mlm: MlmExample,
    pub is_next: bool,
}

/// Samples next-sentence pairs and masks each one once.
pub fn build_pretrain_examples<R: Rng + ?Sized>(
    scenes: &[Vec<String>],
    n: usize,
    vocab: &Vocab,
    max_len: usize,
    opts: &MlmOptions,
    rng: &mut R,
) -> Result<Vec<PretrainExample>> {
    sample_nsp_pairs(scenes, n, vocab, max_len, rng)?
        .into_iter()
        .map(|p| Ok(PretrainExample { mlm: mask_for_mlm(&p.encoded, vocab, opts, rng)?, is_next: p.is_next }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainLoss {
    /// Mean cross-entropy over masked positions (0 when nothing is masked).
    pub mlm: f64,
    /// Mean next-sentence cross-entropy.
    pub nsp: f64,
    pub total: f64,
}

struct ExampleOut {
    mlm_sum: f64,
    mlm_count: usize,
    nsp: f64,
    grads: Option<PretrainParams>,
}

fn example_pass(
    model: &Model,
    heads: &PretrainHeads,
    ex: &PretrainExample,
    scales: Option<(f64, f64)>,
) -> Result<ExampleOut> {
    // dropout only touches the classification head, which pre-training ignores
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let trace = encoder_forward(&ex.mlm.corrupted, &model.params, &model.config, false, &mut unused)?;
    let emb = &model.params.token_emb;
    let mut mlm_sum = 0.0;
    let mut d_hidden = scales.map(|_| Array2::zeros(trace.hidden.raw_dim()));
    let mut g_heads = scales.map(|_| {
        let mut z = heads.clone();
        z.fill(0.0);
        z
    });
    let mut d_emb = scales.map(|_| Array2::<f64>::zeros(emb.raw_dim()));

    for (&pos, &target) in &ex.mlm.targets {
        let h = trace.hidden.row(pos);
        let probs = softmax((emb.dot(&h) + &heads.mlm_bias).view());
        mlm_sum -= probs[target as usize].max(PROB_FLOOR).ln();
        if let (Some((mlm_scale, _)), Some(dh), Some(gh), Some(de)) =
            (scales, d_hidden.as_mut(), g_heads.as_mut(), d_emb.as_mut())
        {
            let mut dl = probs;
            dl[target as usize] -= 1.0;
            dl *= mlm_scale;
            dh.row_mut(pos).scaled_add(1.0, &emb.t().dot(&dl));
            *de += &outer(dl.view(), h);
            gh.mlm_bias += &dl;
        }
    }

    let q = softmax((heads.nsp_w.dot(&trace.pooled) + &heads.nsp_b).view());
    let gold = usize::from(ex.is_next);
    let nsp = -q[gold].max(PROB_FLOOR).ln();

    let grads = match (scales, d_hidden, g_heads, d_emb) {
        (Some((_, nsp_scale)), Some(dh), Some(mut gh), Some(de)) => {
            let mut dq = q;
            dq[gold] -= 1.0;
            dq *= nsp_scale;
            gh.nsp_w += &outer(dq.view(), trace.pooled.view());
            gh.nsp_b += &dq;
            let up = Upstream { d_logits: None, d_pooled: Some(heads.nsp_w.t().dot(&dq)), d_hidden: Some(dh) };
            let mut gm = backward(&model.params, &model.config, &trace, &up)?;
            gm.token_emb += &de;
            Some(PretrainParams { model: gm, heads: gh })
        }
        _ => None,
    };
    Ok(ExampleOut { mlm_sum, mlm_count: ex.mlm.targets.len(), nsp, grads })
}

fn combine(masked: usize, n: usize, mlm_sum: f64, nsp_sum: f64) -> PretrainLoss {
    let mlm = if masked == 0 { 0.0 } else { mlm_sum / masked as f64 };
    let nsp = nsp_sum / n as f64;
    PretrainLoss { mlm, nsp, total: mlm + nsp }
}

/// Losses without gradients, for monitoring.
pub fn pretrain_losses(model: &Model, heads: &PretrainHeads, batch: &[PretrainExample]) -> Result<PretrainLoss> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty pre-training batch".into()));
    }
    let outs: Vec<ExampleOut> = batch.par_iter().map(|ex| example_pass(model, heads, ex, None)).collect::<Result<_>>()?;
    let masked = outs.iter().map(|o| o.mlm_count).sum();
    Ok(combine(masked, batch.len(), outs.iter().map(|o| o.mlm_sum).sum(), outs.iter().map(|o| o.nsp).sum()))
}

/// Loss and gradients of `mean MLM CE + mean NSP CE` over a batch.
pub fn pretrain_batch_gradients(
    model: &Model,
    heads: &PretrainHeads,
    batch: &[PretrainExample],
) -> Result<(PretrainLoss, PretrainParams)> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty pre-training batch".into()));
    }
    let masked: usize = batch.iter().map(|e| e.mlm.targets.len()).sum();
    let mlm_scale = if masked == 0 { 0.0 } else { 1.0 / masked as f64 };
    let nsp_scale = 1.0 / batch.len() as f64;
    let outs: Vec<Result<ExampleOut>> =
        batch.par_iter().map(|ex| example_pass(model, heads, ex, Some((mlm_scale, nsp_scale)))).collect();
    let (mut mlm_sum, mut nsp_sum) = (0.0, 0.0);
    let mut total: Option<PretrainParams> = None;
    for o in outs {
        let o = o?;
        mlm_sum += o.mlm_sum;
        nsp_sum += o.nsp;
        let g = o.grads.expect("gradients requested");
        match &mut total {
            Some(t) => accumulate(t, &g),
            None => total = Some(g),
        }
    }
    Ok((combine(masked, batch.len(), mlm_sum, nsp_sum), total.expect("batch is non-empty")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    /// Number of sentence pairs sampled (and masked once) up front.
    pub n_examples: usize,
    pub mlm: MlmOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub mlm_loss: f64,
    pub nsp_loss: f64,
    pub train_loss: f64,
}

pub struct PretrainOutcome {
    pub model: Model,
    pub heads: PretrainHeads,
    pub history: Vec<PretrainEpoch>,
}

/// Masked-LM plus next-sentence pre-training over a scene corpus.
pub fn pretrain_mlm_nsp<R: Rng + ?Sized>(
    model: Model,
    scenes: &[Vec<String>],
    vocab: &Vocab,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<PretrainOutcome> {
    cfg.train.validate()?;
    if scenes.len() < 2 {
        return Err(Error::Precondition(format!("need at least 2 scenes, got {}", scenes.len())));
    }
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Shape(format!("vocabulary of {} for an embedding table of {}", vocab.len(), model.config.vocab_size)));
    }
    let examples = build_pretrain_examples(scenes, cfg.n_examples, vocab, model.config.max_len, &cfg.mlm, rng)?;
    if examples.is_empty() {
        return Err(Error::Precondition("no pre-training examples requested".into()));
    }
    let heads = PretrainHeads::init(model.config.vocab_size, model.config.d_model, rng);
    let config = model.config;
    let mut params = PretrainParams { model: model.params, heads };
    let mut adam = Adam::new(&params, cfg.train.adam());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.train.n_epochs);
    let mut step = 0;
    for epoch in 1..=cfg.train.n_epochs {
        order.shuffle(rng);
        let (mut mlm, mut nsp, mut total, mut batches) = (0.0, 0.0, 0.0, 0);
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch: Vec<PretrainExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let view = Model { config, params: params.model.clone() };
            let (loss, grads) = pretrain_batch_gradients(&view, &params.heads, &batch)?;
            step += 1;
            if !loss.total.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: loss.total });
            }
            adam.step(&mut params, &grads);
            mlm += loss.mlm;
            nsp += loss.nsp;
            total += loss.total;
            batches += 1;
        }
        let b = batches as f64;
        log::info!("pretrain epoch {epoch}: loss {:.6}", total / b);
        history.push(PretrainEpoch { epoch, mlm_loss: mlm / b, nsp_loss: nsp / b, train_loss: total / b });
    }
    Ok(PretrainOutcome { model: Model { config, params: params.model }, heads: params.heads, history })
}

/// Fraction of candidate tokens selected for masking across examples.
pub fn mlm_selection_fraction(examples: &[PretrainExample], vocab_specials: impl Fn(u32) -> bool) -> f64 {
    let (mut selected, mut candidates) = (0usize, 0usize);
    for ex in examples {
        selected += ex.mlm.targets.len();
        let seq = &ex.mlm.corrupted;
        candidates += (0..seq.ids.len())
            .filter(|&i| seq.attention_mask[i] == 1)
            .filter(|&i| {
                let original = ex.mlm.targets.get(&i).copied().unwrap_or(seq.ids[i]);
                !vocab_specials(original)
            })
            .count();
    }
    selected as f64 / candidates.max(1) as f64
}
