mod common;

use common::{encode_set, eval_labels, keyword_corpus, toy_scenes};
use dialogemo::encoder::{Model, ModelConfig};
use dialogemo::textprep::SpeakerTokenPolicy;
use dialogemo::tokenizer::{build_vocab, encode_texts, MlmOptions};
use dialogemo::train::{
    pretrain_emotion_hashtags, pretrain_mlm_nsp, train_classifier, train_hashtag_classifier, PretrainConfig, TrainConfig, TweetEmotion,
    TweetRecord,
};
use dialogemo::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(vocab: usize, max_len: usize, labels: usize) -> ModelConfig {
    ModelConfig { d_model: 32, n_heads: 4, n_layers: 2, d_ff: 64, max_len, vocab_size: vocab, n_labels: labels, dropout_head: 0.1 }
}

#[test]
fn pretraining_loss_decreases_for_ten_epochs() {
    let scenes = toy_scenes(100, 3);
    let texts: Vec<String> = scenes.iter().flatten().cloned().collect();
    let vocab = build_vocab(&texts, 1, 1000, true, &SpeakerTokenPolicy::empty()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Model::new(small(vocab.len(), 24, 4), &mut rng).unwrap();
    let cfg = PretrainConfig {
        train: TrainConfig { batch_size: 16, learning_rate: 1e-3, n_epochs: 10, ..TrainConfig::default() },
        n_examples: 256,
        mlm: MlmOptions::default(),
    };
    let out = pretrain_mlm_nsp(model, &scenes, &vocab, &cfg, &mut rng).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|h| h.train_loss).collect();
    assert_eq!(losses.len(), 10);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert_eq!(out.heads.mlm_bias.len(), vocab.len());
}

#[test]
fn pretraining_needs_two_scenes() {
    let scenes = vec![vec!["a b".to_string(), "c d".to_string()]];
    let vocab = build_vocab(&scenes[0], 1, 100, true, &SpeakerTokenPolicy::empty()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::new(small(vocab.len(), 12, 4), &mut rng).unwrap();
    let cfg = PretrainConfig { train: TrainConfig::default(), n_examples: 4, mlm: MlmOptions::default() };
    assert!(matches!(pretrain_mlm_nsp(model, &scenes, &vocab, &cfg, &mut rng), Err(Error::Precondition(_))));
}

fn toy_tweets() -> Vec<TweetRecord> {
    let mut out = Vec::new();
    for i in 0..16 {
        let filler = ["today", "again", "at work", "with friends"][i % 4];
        out.push(TweetRecord { text: format!("so great {filler}"), hashtags: vec!["#fun".into()], label: TweetEmotion::Joy });
        out.push(TweetRecord { text: format!("so annoying {filler}"), hashtags: vec!["#mad".into()], label: TweetEmotion::Anger });
    }
    out
}

#[test]
fn hashtag_pretraining_learns_and_swaps_head() {
    let tweets = toy_tweets();
    let texts: Vec<String> = tweets.iter().map(|t| t.text.clone()).collect();
    let vocab = build_vocab(&texts, 1, 200, true, &SpeakerTokenPolicy::empty()).unwrap();
    let model = Model::new(small(vocab.len(), 12, 4), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let cfg = TrainConfig { batch_size: 8, learning_rate: 3e-3, n_epochs: 8, seed: 1, ..TrainConfig::default() };

    let (eight, _) = train_hashtag_classifier(model.clone(), &tweets, &vocab, &cfg).unwrap();
    assert_eq!(eight.params.head_w.nrows(), 8);
    let hits = tweets
        .iter()
        .filter(|t| {
            let e = encode_texts(&t.text, "[None]", None, &vocab, 12).unwrap();
            eight.predict(&e).unwrap() == t.label.index()
        })
        .count();
    assert!(hits as f64 / tweets.len() as f64 > 0.9, "{hits} of {}", tweets.len());

    let (four, losses) = pretrain_emotion_hashtags(model, &tweets, &vocab, &cfg, 4).unwrap();
    assert_eq!(four.config.n_labels, 4);
    assert_eq!(four.params.head_w.dim(), (4, 32));
    assert_eq!(four.params.layers, eight.params.layers);
    assert!(losses.last().unwrap() < &losses[0]);
}

#[test]
fn hashtag_pretraining_rejects_empty_input() {
    let vocab = build_vocab(&["x".to_string()], 1, 100, true, &SpeakerTokenPolicy::empty()).unwrap();
    let model = Model::new(small(vocab.len(), 12, 4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(pretrain_emotion_hashtags(model, &[], &vocab, &TrainConfig::default(), 4).is_err());
}

#[test]
fn classifier_keeps_best_validation_epoch() {
    let ds = keyword_corpus(12, 3, 2);
    let (_, vocab, encoded) = encode_set(&ds, 16);
    let (train, val) = encoded.split_at(24);
    let model = Model::new(small(vocab.len(), 16, 4), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let cfg = TrainConfig { learning_rate: 2e-3, n_epochs: 4, seed: 2, ..TrainConfig::friends() };
    let out = train_classifier(model, train, val, &eval_labels(), &cfg, None).unwrap();
    assert_eq!(out.history.len(), 4);
    let best = out.history.iter().map(|h| h.val_micro_f1.unwrap()).fold(f64::MIN, f64::max);
    assert_eq!(out.history[out.best_epoch - 1].val_micro_f1, Some(best));
}

#[test]
fn classifier_rejects_empty_data_and_bad_rate() {
    let ds = keyword_corpus(2, 2, 0);
    let (_, vocab, encoded) = encode_set(&ds, 16);
    let model = Model::new(small(vocab.len(), 16, 4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(train_classifier(model.clone(), &[], &[], &eval_labels(), &TrainConfig::default(), None).is_err());
    let bad = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
    assert!(matches!(train_classifier(model, &encoded, &[], &eval_labels(), &bad, None), Err(Error::Config(_))));
}

#[test]
fn divergence_is_reported() {
    let ds = keyword_corpus(4, 2, 0);
    let (_, vocab, encoded) = encode_set(&ds, 16);
    let model = Model::new(small(vocab.len(), 16, 4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let cfg = TrainConfig { learning_rate: 1e300, n_epochs: 5, ..TrainConfig::default() };
    match train_classifier(model, &encoded, &[], &eval_labels(), &cfg, None) {
        Err(Error::Diverged { .. }) | Err(Error::NonFinite(_)) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
    }
}
