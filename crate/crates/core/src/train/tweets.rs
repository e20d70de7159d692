use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fit::{TrainConfig, Trainer};
use super::loss::LossKind;
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::textprep::NONE_TOKEN;
use crate::tokenizer::{encode_texts, EncodedSequence, Vocab};

/// Emotion classes of the hashtag-labelled tweet corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TweetEmotion {
    Anger,
    Anticipation,
    Disgust,
    Fear,
    Joy,
    Sadness,
    Surprise,
    Trust,
}

impl TweetEmotion {
    pub const ALL: [TweetEmotion; 8] = [
        TweetEmotion::Anger,
        TweetEmotion::Anticipation,
        TweetEmotion::Disgust,
        TweetEmotion::Fear,
        TweetEmotion::Joy,
        TweetEmotion::Sadness,
        TweetEmotion::Surprise,
        TweetEmotion::Trust,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TweetEmotion::Anger => "anger",
            TweetEmotion::Anticipation => "anticipation",
            TweetEmotion::Disgust => "disgust",
            TweetEmotion::Fear => "fear",
            TweetEmotion::Joy => "joy",
            TweetEmotion::Sadness => "sadness",
            TweetEmotion::Surprise => "surprise",
            TweetEmotion::Trust => "trust",
        }
    }

    pub fn hashtags(self) -> [&'static str; 2] {
        match self {
            TweetEmotion::Anger => ["#mad", "#pissed"],
            TweetEmotion::Anticipation => ["#pumped", "#ready"],
            TweetEmotion::Disgust => ["#awful", "#eww"],
            TweetEmotion::Fear => ["#fear", "#worried"],
            TweetEmotion::Joy => ["#fun", "#joy"],
            TweetEmotion::Sadness => ["#depressed", "#grief"],
            TweetEmotion::Surprise => ["#strange", "#surprise"],
            TweetEmotion::Trust => ["#hope", "#secure"],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TweetEmotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TweetEmotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TweetEmotion::ALL
            .into_iter()
            .find(|e| e.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown tweet emotion {s:?}")))
    }
}

/// Emotion of a hashtag, compared case-insensitively.
pub fn hashtag_label(tag: &str) -> Option<TweetEmotion> {
    TweetEmotion::ALL
        .into_iter()
        .find(|e| e.hashtags().iter().any(|h| h.eq_ignore_ascii_case(tag)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TweetCandidate {
    pub text: String,
    pub hashtags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TweetRecord {
    /// Tweet text without the label hashtag.
    pub text: String,
    pub hashtags: Vec<String>,
    pub label: TweetEmotion,
}

/// One record per line: text, a tab, then space-separated hashtags. Lines
/// without a tab have no hashtag column.
pub fn parse_tweet_file(contents: &str) -> Vec<TweetCandidate> {
    contents
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let (text, tags) = line.split_once('\t').unwrap_or((line, ""));
            TweetCandidate {
                text: text.trim().to_string(),
                hashtags: tags.split_whitespace().map(str::to_string).collect(),
            }
        })
        .collect()
}

/// Drops exact duplicates (first kept) and tweets whose last token is not an
/// emotion hashtag; the label hashtag is removed from the kept text.
pub fn filter_tweets(raw: &[TweetCandidate]) -> Vec<TweetRecord> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for t in raw {
        if !seen.insert(t.text.as_str()) {
            continue;
        }
        let trimmed = t.text.trim();
        let (rest, last) = trimmed.rsplit_once(char::is_whitespace).unwrap_or(("", trimmed));
        let Some(label) = hashtag_label(last) else { continue };
        let text = rest.trim_end().to_string();
        if text.is_empty() {
            continue;
        }
        out.push(TweetRecord { text, hashtags: t.hashtags.clone(), label });
    }
    out
}

/// Encodes tweets as single sentences with `[None]` as context.
pub fn encode_tweets(tweets: &[TweetRecord], vocab: &Vocab, max_len: usize) -> Result<Vec<(EncodedSequence, usize)>> {
    tweets
        .iter()
        .map(|t| Ok((encode_texts(&t.text, NONE_TOKEN, None, vocab, max_len)?, t.label.index())))
        .collect()
}

/// Fine-tunes `model` as an 8-way hashtag classifier over single tweets.
pub fn train_hashtag_classifier(
    mut model: Model,
    tweets: &[TweetRecord],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<(Model, Vec<f64>)> {
    if tweets.is_empty() {
        return Err(Error::Precondition("tweet list is empty".into()));
    }
    let mut rng = head_rng(cfg);
    model.params.reset_head(TweetEmotion::ALL.len(), 0.02, &mut rng);
    model.config.n_labels = TweetEmotion::ALL.len();
    let encoded = encode_tweets(tweets, vocab, model.config.max_len)?;
    let data: Vec<_> = encoded.iter().map(|(e, g)| (e, *g)).collect();

    let mut trainer = Trainer::new(model, *cfg)?;
    let mut losses = Vec::with_capacity(cfg.n_epochs);
    for _ in 0..cfg.n_epochs {
        losses.push(trainer.run_epoch(&data, &LossKind::Nll)?);
    }
    Ok((trainer.model, losses))
}

fn head_rng(cfg: &TrainConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7477_6565_7473)
}

/// Hashtag pre-training followed by a fresh head for `final_labels` classes.
pub fn pretrain_emotion_hashtags(
    model: Model,
    tweets: &[TweetRecord],
    vocab: &Vocab,
    cfg: &TrainConfig,
    final_labels: usize,
) -> Result<(Model, Vec<f64>)> {
    let (mut model, losses) = train_hashtag_classifier(model, tweets, vocab, cfg)?;
    let mut rng = head_rng(cfg);
    // skip past the draws used for the 8-way head
    model.params.reset_head(TweetEmotion::ALL.len(), 0.02, &mut rng);
    model.params.reset_head(final_labels, 0.02, &mut rng);
    model.config.n_labels = final_labels;
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(text: &str) -> TweetCandidate {
        TweetCandidate { text: text.into(), hashtags: vec![] }
    }

    #[test]
    fn hashtag_lists() {
        assert_eq!(hashtag_label("#pissed"), Some(TweetEmotion::Anger));
        assert_eq!(hashtag_label("#JOY"), Some(TweetEmotion::Joy));
        assert_eq!(hashtag_label("#happy"), None);
        for e in TweetEmotion::ALL {
            for h in e.hashtags() {
                assert_eq!(hashtag_label(h), Some(e));
            }
        }
    }

    #[test]
    fn filtering_rules() {
        let kept = filter_tweets(&[cand("so happy today #joy"), cand("#joy what a day"), cand("so happy today #joy")]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].text, "so happy today");
        assert_eq!(kept[0].label, TweetEmotion::Joy);
        assert!(filter_tweets(&[cand("#joy")]).is_empty());
    }

    #[test]
    fn file_format() {
        let c = parse_tweet_file("hi there #fun\t#fun\n\nno tags\n");
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].hashtags, vec!["#fun"]);
        assert!(c[1].hashtags.is_empty());
    }
}
