#![allow(dead_code)]

use dialogemo::corpus::{Dialogue, DialogueSet, EmotionLabel, Source};
use dialogemo::encoder::Parameters;
use dialogemo::textprep::{prepare_pairs, CausalPair, PrepOptions, SpeakerTokenPolicy};
use dialogemo::tokenizer::{build_vocab, encode_pair, EncodedSequence, Vocab};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Worst elementwise `|a - n| / max(|a|, |n|, floor)` for one tensor.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compares `analytic` against central differences of `loss`. Tensors larger
/// than `per_tensor` are sampled: half the largest analytic entries, half at
/// random.
pub fn finite_difference_check<P, F>(
    params: &P,
    analytic: &P,
    loss: F,
    h: f64,
    per_tensor: usize,
    seed: u64,
) -> Vec<TensorCheck>
where
    P: Parameters + Clone,
    F: Fn(&P) -> f64,
{
    const FLOOR: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grads = analytic.tensors();
    let mut out = Vec::new();
    for (ti, (name, g)) in grads.iter().enumerate() {
        let flat: Vec<f64> = g.iter().copied().collect();
        let mut idx: Vec<usize> = (0..flat.len()).collect();
        if flat.len() > per_tensor {
            idx.sort_by(|&a, &b| flat[b].abs().total_cmp(&flat[a].abs()).then(a.cmp(&b)));
            let mut chosen: Vec<usize> = idx[..per_tensor / 2].to_vec();
            let mut rest = idx[per_tensor / 2..].to_vec();
            rest.shuffle(&mut rng);
            chosen.extend(&rest[..per_tensor - per_tensor / 2]);
            idx = chosen;
        }
        let mut worst: f64 = 0.0;
        for &i in &idx {
            let eval = |delta: f64| {
                let mut p = params.clone();
                {
                    let mut ts = p.tensors_mut();
                    let v = ts[ti].1.iter_mut().nth(i).expect("index in range");
                    *v += delta;
                }
                loss(&p)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = flat[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
        out.push(TensorCheck { name: name.clone(), checked: idx.len(), max_rel_err: worst });
    }
    out
}

pub const KEYWORDS: [(EmotionLabel, &str); 4] = [
    (EmotionLabel::Anger, "furious"),
    (EmotionLabel::Joy, "wonderful"),
    (EmotionLabel::Neutral, "tuesday"),
    (EmotionLabel::Sadness, "miserable"),
];

const FILLER: [&str; 16] = [
    "the", "we", "should", "go", "to", "store", "later", "maybe", "it", "is", "that", "you", "said", "about", "coffee",
    "again",
];

/// Dialogues whose every utterance carries exactly one label keyword.
pub fn keyword_corpus(n_dialogues: usize, turns: usize, seed: u64) -> DialogueSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dialogues = (0..n_dialogues)
        .map(|d| {
            let rows: Vec<(String, String, EmotionLabel)> = (0..turns)
                .map(|t| {
                    let (label, kw) = KEYWORDS[(d + t + rng.random_range(0..2)) % KEYWORDS.len()];
                    let mut words: Vec<&str> = (0..rng.random_range(2..5)).map(|_| FILLER[rng.random_range(0..FILLER.len())]).collect();
                    let at = rng.random_range(0..=words.len());
                    words.insert(at, kw);
                    (format!("speaker{}", t % 2), words.join(" "), label)
                })
                .collect();
            Dialogue::new(Source::Friends, rows).expect("non-empty dialogue")
        })
        .collect();
    DialogueSet::new(dialogues)
}

pub fn eval_labels() -> Vec<EmotionLabel> {
    EmotionLabel::EVAL.to_vec()
}

/// Pairs, vocabulary and encodings for a prepared dialogue set.
pub fn encode_set(ds: &DialogueSet, max_len: usize) -> (Vec<CausalPair>, Vocab, Vec<EncodedSequence>) {
    let pairs = prepare_pairs(ds, &PrepOptions::none());
    let texts: Vec<String> = pairs.iter().flat_map(|p| [p.target_text.clone(), p.context_text.clone()]).collect();
    let vocab = build_vocab(&texts, 1, 1000, true, &SpeakerTokenPolicy::empty()).expect("vocab");
    let encoded = pairs.iter().map(|p| encode_pair(p, &vocab, max_len).expect("encodes")).collect();
    (pairs, vocab, encoded)
}

/// Small scene corpus: each scene repeats a topic word so next-sentence
/// pairs are learnable.
pub fn toy_scenes(n: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topics = ["pizza", "rain", "dinosaur", "wedding", "apartment", "guitar", "museum", "coffee"];
    (0..n)
        .map(|s| {
            let topic = topics[s % topics.len()];
            (0..rng.random_range(3..6))
                .map(|_| {
                    let mut w: Vec<&str> = (0..3).map(|_| FILLER[rng.random_range(0..FILLER.len())]).collect();
                    w.push(topic);
                    w.join(" ")
                })
                .collect()
        })
        .collect()
}
