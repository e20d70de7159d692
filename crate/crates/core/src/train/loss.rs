use std::collections::BTreeMap;

use ndarray::Array1;

use crate::corpus::{EmotionLabel, LabelCounts};
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-class weights `min(freq) / freq(c)`; the rarest class gets 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(BTreeMap<EmotionLabel, f64>);

impl ClassWeights {
    pub fn get(&self, label: EmotionLabel) -> Option<f64> {
        self.0.get(&label).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (EmotionLabel, f64)> + '_ {
        self.0.iter().map(|(&l, &w)| (l, w))
    }

    /// Weights laid out in `labels` order.
    pub fn to_vec(&self, labels: &[EmotionLabel]) -> Result<Vec<f64>> {
        labels
            .iter()
            .map(|&l| self.get(l).ok_or_else(|| Error::Precondition(format!("no class weight for {l}"))))
            .collect()
    }
}

pub fn class_weights(counts: &BTreeMap<EmotionLabel, usize>) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(Error::Precondition("class weights need at least one class".into()));
    }
    if let Some((l, _)) = counts.iter().find(|&(_, &c)| c == 0) {
        return Err(Error::Precondition(format!("class {l} has zero count")));
    }
    let min = *counts.values().min().expect("non-empty") as f64;
    Ok(ClassWeights(counts.iter().map(|(&l, &c)| (l, min / c as f64)).collect()))
}

/// Counts restricted to `labels`, for [`class_weights`].
pub fn counts_for(dist: &LabelCounts, labels: &[EmotionLabel]) -> BTreeMap<EmotionLabel, usize> {
    labels.iter().map(|&l| (l, dist.get(l))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Gold probabilities that fell below [`PROB_FLOOR`].
    pub clamped: usize,
}

fn check_batch(probs: &[Array1<f64>], gold: &[usize]) -> Result<()> {
    if probs.len() != gold.len() || probs.is_empty() {
        return Err(Error::Shape(format!("{} probability rows for {} labels", probs.len(), gold.len())));
    }
    for (p, &g) in probs.iter().zip(gold) {
        if g >= p.len() {
            return Err(Error::Precondition(format!("gold class {g} outside {} classes", p.len())));
        }
    }
    Ok(())
}

fn floored_ln(p: f64, clamped: &mut usize) -> f64 {
    if p < PROB_FLOOR {
        *clamped += 1;
        PROB_FLOOR.ln()
    } else {
        p.ln()
    }
}

/// Mean negative log-probability of the gold classes.
pub fn nll_loss(probs: &[Array1<f64>], gold: &[usize]) -> Result<LossValue> {
    check_batch(probs, gold)?;
    let mut clamped = 0;
    let sum: f64 = probs.iter().zip(gold).map(|(p, &g)| -floored_ln(p[g], &mut clamped)).sum();
    Ok(LossValue { value: sum / probs.len() as f64, clamped })
}

/// `-(1/Σ w_gold) Σ log(w_gold · p_gold)`, with class weights indexed like
/// the probability rows.
pub fn weighted_nll_loss(probs: &[Array1<f64>], gold: &[usize], weights: &[f64]) -> Result<LossValue> {
    check_batch(probs, gold)?;
    if let Some(&g) = gold.iter().find(|&&g| g >= weights.len()) {
        return Err(Error::Precondition(format!("no weight for class {g}")));
    }
    let norm: f64 = gold.iter().map(|&g| weights[g]).sum();
    let mut clamped = 0;
    let sum: f64 = probs
        .iter()
        .zip(gold)
        .map(|(p, &g)| -floored_ln(weights[g] * p[g], &mut clamped))
        .sum();
    Ok(LossValue { value: sum / norm, clamped })
}

/// Which loss a batch is trained on.
#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    Nll,
    Weighted(Vec<f64>),
}

impl LossKind {
    pub fn value(&self, probs: &[Array1<f64>], gold: &[usize]) -> Result<LossValue> {
        match self {
            LossKind::Nll => nll_loss(probs, gold),
            LossKind::Weighted(w) => weighted_nll_loss(probs, gold, w),
        }
    }

    /// The per-example logit gradient is `(P - onehot) / normalizer`.
    pub fn normalizer(&self, gold: &[usize]) -> f64 {
        match self {
            LossKind::Nll => gold.len() as f64,
            LossKind::Weighted(w) => gold.iter().map(|&g| w[g]).sum(),
        }
    }
}

/// `(P - onehot(gold)) / normalizer`.
pub fn logit_grad(probs: &Array1<f64>, gold: usize, normalizer: f64) -> Array1<f64> {
    let mut d = probs.clone();
    d[gold] -= 1.0;
    d / normalizer
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn weights_for_simple_counts() {
        let w = class_weights(&BTreeMap::from([(EmotionLabel::Anger, 1), (EmotionLabel::Joy, 2)])).unwrap();
        assert_eq!(w.get(EmotionLabel::Anger), Some(1.0));
        assert_eq!(w.get(EmotionLabel::Joy), Some(0.5));
        let eq = class_weights(&BTreeMap::from([(EmotionLabel::Anger, 7), (EmotionLabel::Joy, 7)])).unwrap();
        assert!(eq.iter().all(|(_, w)| w == 1.0));
        assert!(class_weights(&BTreeMap::from([(EmotionLabel::Anger, 0)])).is_err());
        assert!(class_weights(&BTreeMap::new()).is_err());
    }

    #[test]
    fn nll_examples() {
        assert_eq!(nll_loss(&[array![0.0, 1.0]], &[1]).unwrap().value, 0.0);
        let u = nll_loss(&[Array1::from_elem(4, 0.25)], &[2]).unwrap();
        assert_abs_diff_eq!(u.value, 4f64.ln(), epsilon = 1e-12);
        let two = nll_loss(&[array![0.5, 0.5], array![0.75, 0.25]], &[0, 1]).unwrap();
        assert_abs_diff_eq!(two.value, 1.039721, epsilon = 1e-6);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let l = nll_loss(&[array![1.0, 0.0]], &[1]).unwrap();
        assert_eq!(l.clamped, 1);
        assert_abs_diff_eq!(l.value, -PROB_FLOOR.ln(), epsilon = 1e-9);
    }

    #[test]
    fn weighted_single_example() {
        let l = weighted_nll_loss(&[array![0.5, 0.5]], &[0], &[0.5, 1.0]).unwrap();
        assert_abs_diff_eq!(l.value, 2.772589, epsilon = 1e-6);
    }

    #[test]
    fn bad_batches_rejected() {
        assert!(nll_loss(&[], &[]).is_err());
        assert!(nll_loss(&[array![1.0]], &[1]).is_err());
        assert!(weighted_nll_loss(&[array![0.5, 0.5]], &[1], &[1.0]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn weights_scale_invariant_with_single_max(
            counts in proptest::collection::btree_set(1usize..5000, 4),
            k in 1usize..50,
        ) {
            let counts: Vec<usize> = counts.into_iter().collect();
            let base: BTreeMap<_, _> = EmotionLabel::EVAL.into_iter().zip(counts.iter().copied()).collect();
            let scaled: BTreeMap<_, _> = base.iter().map(|(&l, &c)| (l, c * k)).collect();
            let (a, b) = (class_weights(&base).unwrap(), class_weights(&scaled).unwrap());
            for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
                proptest::prop_assert!((x - y).abs() < 1e-15);
                proptest::prop_assert!(x > 0.0 && x <= 1.0);
            }
            proptest::prop_assert_eq!(a.iter().filter(|&(_, w)| w == 1.0).count(), 1);
        }

        #[test]
        fn uniform_weights_reduce_to_nll(
            rows in proptest::collection::vec((proptest::collection::vec(-5.0f64..5.0, 3), 0usize..3), 1..12),
        ) {
            let probs: Vec<Array1<f64>> = rows.iter().map(|(z, _)| crate::encoder::softmax(Array1::from(z.clone()).view())).collect();
            let gold: Vec<usize> = rows.iter().map(|&(_, g)| g).collect();
            let a = nll_loss(&probs, &gold).unwrap().value;
            let b = weighted_nll_loss(&probs, &gold, &[1.0; 3]).unwrap().value;
            proptest::prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
