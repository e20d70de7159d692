use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{logit_grad, ClassWeights, LossKind};
use super::optim::{Adam, AdamConfig};
use crate::corpus::EmotionLabel;
use crate::encoder::{accumulate, backward, encoder_forward, Model, ModelParams, Upstream};
use crate::error::{Error, Result};
use crate::eval::{confusion_indices, report};
use crate::tokenizer::EncodedSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub n_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub warm_first_epoch: bool,
}

impl TrainConfig {
    pub fn friends() -> Self {
        TrainConfig { batch_size: 8, n_epochs: 3, ..Self::default() }
    }

    pub fn emotionpush() -> Self {
        TrainConfig { batch_size: 4, n_epochs: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 2.5e-6,
            n_epochs: 3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            warm_first_epoch: true,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_micro_f1: Option<f64>,
    pub val_macro_f1: Option<f64>,
}

/// Loss and summed gradients of one batch; examples run in parallel and are
/// reduced in batch order.
pub fn batch_gradients(
    model: &Model,
    batch: &[(&EncodedSequence, usize)],
    loss: &LossKind,
    seeds: &[u64],
) -> Result<(f64, ModelParams)> {
    let gold: Vec<usize> = batch.iter().map(|&(_, g)| g).collect();
    let norm = loss.normalizer(&gold);
    let results: Vec<Result<(ndarray::Array1<f64>, ModelParams)>> = batch
        .par_iter()
        .zip(seeds)
        .map(|(&(e, g), &seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let trace = encoder_forward(e, &model.params, &model.config, true, &mut rng)?;
            let up = Upstream { d_logits: Some(logit_grad(&trace.probs, g, norm)), ..Default::default() };
            let grads = backward(&model.params, &model.config, &trace, &up)?;
            Ok((trace.probs, grads))
        })
        .collect();
    let mut probs = Vec::with_capacity(batch.len());
    let mut total: Option<ModelParams> = None;
    for r in results {
        let (p, g) = r?;
        probs.push(p);
        match &mut total {
            Some(t) => accumulate(t, &g),
            None => total = Some(g),
        }
    }
    let value = loss.value(&probs, &gold)?.value;
    Ok((value, total.expect("batch is non-empty")))
}

/// Class indices in inference mode.
pub fn predict_all(model: &Model, data: &[EncodedSequence]) -> Result<Vec<usize>> {
    data.par_iter().map(|e| model.predict(e)).collect()
}

/// Optimizer state plus the shuffling and dropout generator.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    adam: Adam<ModelParams>,
    rng: ChaCha8Rng,
    epochs_done: usize,
    steps_done: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            adam: Adam::new(&model.params, config.adam()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            epochs_done: 0,
            steps_done: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// One shuffled pass; returns the mean batch loss.
    pub fn run_epoch(&mut self, data: &[(&EncodedSequence, usize)], loss: &LossKind) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Precondition("training data is empty".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        self.epochs_done += 1;
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<(&EncodedSequence, usize)> = chunk.iter().map(|&i| data[i]).collect();
            let seeds: Vec<u64> = (0..batch.len()).map(|_| self.rng.random()).collect();
            let (value, grads) = batch_gradients(&self.model, &batch, loss, &seeds)?;
            self.steps_done += 1;
            if !value.is_finite() {
                return Err(Error::Diverged { epoch: self.epochs_done, step: self.steps_done, loss: value });
            }
            self.adam.step(&mut self.model.params, &grads);
            sum += value;
            batches += 1;
        }
        Ok(sum / batches as f64)
    }
}

/// Index of each example's label in `labels`.
pub fn label_indices<'a>(
    data: &'a [EncodedSequence],
    labels: &[EmotionLabel],
) -> Result<Vec<(&'a EncodedSequence, usize)>> {
    data.iter()
        .map(|e| {
            let l = e.label.ok_or_else(|| Error::Precondition("training example has no label".into()))?;
            let i = labels
                .iter()
                .position(|&x| x == l)
                .ok_or_else(|| Error::Precondition(format!("label {l} is not a training label")))?;
            Ok((e, i))
        })
        .collect()
}

pub struct TrainOutcome {
    /// Best validation model, or the last one without validation data.
    pub model: Model,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

/// Fine-tunes `model` on labelled sequences. With `warm_first_epoch` and
/// weights given, the first epoch uses the weighted loss.
pub fn train_classifier(
    model: Model,
    train: &[EncodedSequence],
    val: &[EncodedSequence],
    labels: &[EmotionLabel],
    cfg: &TrainConfig,
    weights: Option<&ClassWeights>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Precondition("training data is empty".into()));
    }
    if model.config.n_labels != labels.len() {
        return Err(Error::Shape(format!("head has {} labels, training uses {}", model.config.n_labels, labels.len())));
    }
    let data = label_indices(train, labels)?;
    let val_gold: Vec<usize> = label_indices(val, labels)?.into_iter().map(|(_, g)| g).collect();
    let warm = match weights {
        Some(w) if cfg.warm_first_epoch => Some(LossKind::Weighted(w.to_vec(labels)?)),
        _ => None,
    };
    let names: Vec<String> = labels.iter().map(|l| l.as_str().to_string()).collect();

    let mut trainer = Trainer::new(model, *cfg)?;
    let mut history = Vec::with_capacity(cfg.n_epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 1..=cfg.n_epochs {
        let loss = match (&warm, epoch) {
            (Some(w), 1) => w,
            _ => &LossKind::Nll,
        };
        let train_loss = trainer.run_epoch(&data, loss)?;
        let (mut micro, mut macro_f1) = (None, None);
        if !val.is_empty() {
            let preds = predict_all(&trainer.model, val)?;
            let r = report(&confusion_indices(&preds, &val_gold, names.clone())?)?;
            micro = Some(r.micro.f1);
            macro_f1 = Some(r.macro_avg.f1);
            if best.as_ref().is_none_or(|(b, _, _)| r.micro.f1 > *b) {
                best = Some((r.micro.f1, epoch, trainer.model.params.clone()));
            }
        }
        log::info!("epoch {epoch}: train loss {train_loss:.6}, val micro-F1 {micro:?}");
        history.push(EpochMetrics { epoch, train_loss, val_micro_f1: micro, val_macro_f1: macro_f1 });
    }
    let mut model = trainer.model;
    let best_epoch = match best {
        Some((_, e, params)) => {
            model.params = params;
            e
        }
        None => cfg.n_epochs,
    };
    Ok(TrainOutcome { model, history, best_epoch })
}

/// Fraction of examples whose prediction matches their label.
pub fn accuracy(model: &Model, data: &[EncodedSequence], labels: &[EmotionLabel]) -> Result<f64> {
    let gold = label_indices(data, labels)?;
    let preds = predict_all(model, data)?;
    let hits = preds.iter().zip(&gold).filter(|(p, (_, g))| *p == g).count();
    Ok(hits as f64 / data.len().max(1) as f64)
}
