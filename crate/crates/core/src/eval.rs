//! Confusion matrices, per-class precision/recall/F1 with micro, macro and
//! support-weighted averages, and the bag-of-words logistic-regression
//! baseline.

use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::corpus::EmotionLabel;
use crate::encoder::softmax;
use crate::error::{Error, Result};

/// Rows are gold labels, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let k = labels.len();
        ConfusionMatrix { labels, counts: vec![vec![0; k]; k] }
    }

    pub fn from_counts(labels: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = labels.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(Error::Shape(format!("confusion counts are not {k} x {k}")));
        }
        Ok(ConfusionMatrix { labels, counts })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold][pred]
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn record(&mut self, gold: usize, pred: usize) {
        self.counts[gold][pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }
}

pub fn eval_label_names() -> Vec<String> {
    EmotionLabel::EVAL.iter().map(|l| l.as_str().to_string()).collect()
}

/// Counts over class indices in `0..labels.len()`.
pub fn confusion_indices(preds: &[usize], golds: &[usize], labels: Vec<String>) -> Result<ConfusionMatrix> {
    if preds.len() != golds.len() {
        return Err(Error::Shape(format!("{} predictions for {} gold labels", preds.len(), golds.len())));
    }
    let mut m = ConfusionMatrix::new(labels);
    for (&p, &g) in preds.iter().zip(golds) {
        if p >= m.k() || g >= m.k() {
            return Err(Error::Precondition(format!("class index {} outside {} labels", p.max(g), m.k())));
        }
        m.record(g, p);
    }
    Ok(m)
}

/// Confusion over the evaluation labels (anger, joy, neutral, sadness).
pub fn confusion(preds: &[EmotionLabel], golds: &[EmotionLabel]) -> Result<ConfusionMatrix> {
    let index = |l: &EmotionLabel| {
        EmotionLabel::EVAL
            .iter()
            .position(|e| e == l)
            .ok_or_else(|| Error::Precondition(format!("label {l} is not an evaluation label")))
    };
    let p: Vec<usize> = preds.iter().map(index).collect::<Result<_>>()?;
    let g: Vec<usize> = golds.iter().map(index).collect::<Result<_>>()?;
    confusion_indices(&p, &g, eval_label_names())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassScores>,
    pub micro: Averages,
    #[serde(rename = "macro")]
    pub macro_avg: Averages,
    pub weighted: Averages,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Undefined ratios (empty row or column) score 0.
pub fn report(m: &ConfusionMatrix) -> Result<EvalReport> {
    let total = m.total();
    if total == 0 {
        return Err(Error::Precondition("cannot report on an empty confusion matrix".into()));
    }
    let k = m.k();
    let per_class: Vec<ClassScores> = (0..k)
        .map(|c| {
            let tp = m.get(c, c);
            let support: u64 = (0..k).map(|p| m.get(c, p)).sum();
            let predicted: u64 = (0..k).map(|g| m.get(g, c)).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            ClassScores { label: m.labels[c].clone(), precision, recall, f1: harmonic(precision, recall), support }
        })
        .collect();

    let micro_p = ratio(m.trace(), total);
    let micro = Averages { precision: micro_p, recall: micro_p, f1: micro_p, support: total };
    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    let macro_avg = Averages {
        precision: mean(|c| c.precision),
        recall: mean(|c| c.recall),
        f1: mean(|c| c.f1),
        support: total,
    };
    let wmean =
        |f: fn(&ClassScores) -> f64| per_class.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / total as f64;
    let weighted = Averages {
        precision: wmean(|c| c.precision),
        recall: wmean(|c| c.recall),
        f1: wmean(|c| c.f1),
        support: total,
    };
    Ok(EvalReport { per_class, micro, macro_avg, weighted })
}

fn title_case(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

impl EvalReport {
    /// Aligned plain-text table: one row per class, then the three averages.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<14}{:>10}{:>10}{:>10}{:>10}", "", "precision", "recall", "f1-score", "support");
        let _ = writeln!(out);
        for c in &self.per_class {
            let _ = writeln!(
                out,
                "{:<14}{:>10.3}{:>10.3}{:>10.3}{:>10}",
                title_case(&c.label),
                c.precision,
                c.recall,
                c.f1,
                c.support
            );
        }
        let _ = writeln!(out);
        for (name, a) in [("Micro AVG", &self.micro), ("Macro AVG", &self.macro_avg), ("Weighted AVG", &self.weighted)] {
            let _ = writeln!(
                out,
                "{:<14}{:>10.3}{:>10.3}{:>10.3}{:>10}",
                name, a.precision, a.recall, a.f1, a.support
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

/// Sparse count vector as sorted `(feature, count)` pairs.
pub type SparseVector = Vec<(usize, f64)>;

fn bow_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Bag-of-words over the most frequent training tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BowFeaturizer {
    vocab: HashMap<String, usize>,
}

impl BowFeaturizer {
    /// Keeps the `cap` most frequent tokens (ties broken lexicographically).
    pub fn fit<S: AsRef<str>>(texts: &[S], cap: usize) -> Self {
        let mut freq: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for tok in bow_tokens(t.as_ref()) {
                *freq.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let vocab = ranked.into_iter().take(cap).enumerate().map(|(i, (t, _))| (t, i)).collect();
        BowFeaturizer { vocab }
    }

    pub fn from_vocab<S: AsRef<str>>(tokens: &[S]) -> Self {
        BowFeaturizer { vocab: tokens.iter().enumerate().map(|(i, t)| (t.as_ref().to_string(), i)).collect() }
    }

    pub fn n_features(&self) -> usize {
        self.vocab.len()
    }

    pub fn transform_one(&self, text: &str) -> SparseVector {
        let mut counts: HashMap<usize, f64> = HashMap::new();
        for tok in bow_tokens(text) {
            if let Some(&i) = self.vocab.get(&tok) {
                *counts.entry(i).or_default() += 1.0;
            }
        }
        let mut v: SparseVector = counts.into_iter().collect();
        v.sort_by_key(|&(i, _)| i);
        v
    }

    pub fn transform<S: AsRef<str>>(&self, texts: &[S]) -> Vec<SparseVector> {
        texts.iter().map(|t| self.transform_one(t.as_ref())).collect()
    }
}

/// Fits a capped vocabulary on `texts` and returns their count vectors.
pub fn bow_featurize<S: AsRef<str>>(texts: &[S], cap: usize) -> (BowFeaturizer, Vec<SparseVector>) {
    let f = BowFeaturizer::fit(texts, cap);
    let x = f.transform(texts);
    (f, x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRegConfig {
    pub l2: f64,
    pub iters: usize,
    pub learning_rate: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        LogRegConfig { l2: 1e-4, iters: 2000, learning_rate: 0.5 }
    }
}

/// Multinomial logistic regression over sparse features.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LogisticRegression {
    pub fn probabilities(&self, x: &SparseVector) -> Array1<f64> {
        let mut z = self.bias.clone();
        for &(f, v) in x {
            z.scaled_add(v, &self.weights.column(f));
        }
        softmax(z.view())
    }

    pub fn predict(&self, x: &SparseVector) -> usize {
        crate::encoder::argmax(self.probabilities(x).view())
    }
}

/// Full-batch gradient descent on mean cross-entropy plus `l2/2 · ‖W‖²`,
/// starting from zero weights.
pub fn train_logreg(
    features: &[SparseVector],
    labels: &[usize],
    n_features: usize,
    n_classes: usize,
    cfg: &LogRegConfig,
) -> Result<LogisticRegression> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Precondition("features and labels must be non-empty and aligned".into()));
    }
    let mut seen = vec![false; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(Error::Precondition(format!("label {l} outside {n_classes} classes")));
        }
        seen[l] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::Precondition("logistic regression needs at least two classes".into()));
    }
    if let Some(&(f, _)) = features.iter().flatten().find(|&&(f, _)| f >= n_features) {
        return Err(Error::Precondition(format!("feature {f} outside {n_features} features")));
    }

    let n = features.len() as f64;
    let mut model = LogisticRegression { weights: Array2::zeros((n_classes, n_features)), bias: Array1::zeros(n_classes) };
    for iter in 0..cfg.iters {
        let mut gw = Array2::<f64>::zeros((n_classes, n_features));
        let mut gb = Array1::<f64>::zeros(n_classes);
        let mut loss = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            let mut p = model.probabilities(x);
            loss -= p[y].max(1e-12).ln();
            p[y] -= 1.0;
            gb += &p;
            for &(f, v) in x {
                gw.column_mut(f).scaled_add(v, &p);
            }
        }
        loss = loss / n + 0.5 * cfg.l2 * model.weights.iter().map(|w| w * w).sum::<f64>();
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch: iter, step: iter, loss });
        }
        gw /= n;
        gw.scaled_add(cfg.l2, &model.weights);
        gb /= n;
        model.weights.scaled_add(-cfg.learning_rate, &gw);
        model.bias.scaled_add(-cfg.learning_rate, &gb);
    }
    Ok(model)
}
