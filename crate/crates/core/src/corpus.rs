//! EmotionLines-format dialogue ingestion, the ordered train/validation
//! split, label filtering and label statistics.
//!
//! The on-disk layout is a JSON array of dialogues, each an array of
//! `{"speaker", "utterance", "emotion"}` objects. Extra keys such as
//! `"annotation"` are ignored.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textprep::CausalPair;

/// The eight annotation outcomes of EmotionLines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EmotionLabel {
    Anger,
    Disgust,
    Fear,
    Joy,
    Sadness,
    Surprise,
    Neutral,
    NonNeutral,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 8] = [
        EmotionLabel::Anger,
        EmotionLabel::Disgust,
        EmotionLabel::Fear,
        EmotionLabel::Joy,
        EmotionLabel::Sadness,
        EmotionLabel::Surprise,
        EmotionLabel::Neutral,
        EmotionLabel::NonNeutral,
    ];

    /// Labels scored during evaluation, in report order.
    pub const EVAL: [EmotionLabel; 4] = [
        EmotionLabel::Anger,
        EmotionLabel::Joy,
        EmotionLabel::Neutral,
        EmotionLabel::Sadness,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EmotionLabel::Anger => "anger",
            EmotionLabel::Disgust => "disgust",
            EmotionLabel::Fear => "fear",
            EmotionLabel::Joy => "joy",
            EmotionLabel::Sadness => "sadness",
            EmotionLabel::Surprise => "surprise",
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::NonNeutral => "non-neutral",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn eval_set() -> BTreeSet<EmotionLabel> {
        Self::EVAL.into_iter().collect()
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmotionLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        let label = match lower.as_str() {
            "anger" => EmotionLabel::Anger,
            "disgust" => EmotionLabel::Disgust,
            "fear" => EmotionLabel::Fear,
            "joy" => EmotionLabel::Joy,
            "sadness" => EmotionLabel::Sadness,
            "surprise" => EmotionLabel::Surprise,
            "neutral" => EmotionLabel::Neutral,
            "non-neutral" | "non_neutral" | "nonneutral" => EmotionLabel::NonNeutral,
            _ => return Err(s.to_string()),
        };
        Ok(label)
    }
}

impl Serialize for EmotionLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for EmotionLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse()
            .map_err(|v| serde::de::Error::custom(format!("unknown emotion {v:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Friends,
    EmotionPush,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Friends => "friends",
            Source::EmotionPush => "emotionpush",
        })
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "friends" => Ok(Source::Friends),
            "emotionpush" => Ok(Source::EmotionPush),
            _ => Err(format!("unknown dataset {s:?} (expected friends or emotionpush)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub speaker: String,
    pub text: String,
    pub emotion: EmotionLabel,
    /// Position within the owning dialogue, starting at 0.
    pub dialogue_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    utterances: Vec<Utterance>,
    source: Source,
}

impl Dialogue {
    /// Builds a dialogue from `(speaker, text, emotion)` triples.
    pub fn new<I, S, T>(source: Source, turns: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, T, EmotionLabel)>,
        S: Into<String>,
        T: Into<String>,
    {
        let utterances: Vec<Utterance> = turns
            .into_iter()
            .enumerate()
            .map(|(i, (speaker, text, emotion))| Utterance {
                speaker: speaker.into(),
                text: text.into(),
                emotion,
                dialogue_index: i,
            })
            .collect();
        if utterances.is_empty() {
            return Err(Error::EmptyDialogue(0));
        }
        Ok(Dialogue { utterances, source })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Rewrites every utterance text; used by the preprocessing stage.
    pub fn map_text(&self, f: impl Fn(&str) -> String) -> Dialogue {
        Dialogue {
            utterances: self
                .utterances
                .iter()
                .map(|u| Utterance { text: f(&u.text), ..u.clone() })
                .collect(),
            source: self.source,
        }
    }
}

/// Dialogues in file order. The order is what the train/validation split
/// is defined over.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DialogueSet {
    dialogues: Vec<Dialogue>,
}

impl DialogueSet {
    pub fn new(dialogues: Vec<Dialogue>) -> Self {
        DialogueSet { dialogues }
    }

    pub fn dialogues(&self) -> &[Dialogue] {
        &self.dialogues
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn utterance_count(&self) -> usize {
        self.dialogues.iter().map(Dialogue::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Dialogue> {
        self.dialogues.iter()
    }

    /// Serializes back to the EmotionLines layout (without annotation votes).
    pub fn to_json(&self) -> String {
        let raw: Vec<Vec<RawUtterance>> = self
            .dialogues
            .iter()
            .map(|d| {
                d.utterances
                    .iter()
                    .map(|u| RawUtterance {
                        speaker: u.speaker.clone(),
                        utterance: u.text.clone(),
                        emotion: u.emotion.as_str().to_string(),
                    })
                    .collect()
            })
            .collect();
        serde_json::to_string_pretty(&raw).expect("dialogue serialization cannot fail")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawUtterance {
    speaker: String,
    utterance: String,
    emotion: String,
}

fn byte_offset(raw: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = raw
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(raw.len())
}

pub fn parse_dialogues(raw: &str, source: Source) -> Result<DialogueSet> {
    let parsed: Vec<Vec<RawUtterance>> = serde_json::from_str(raw).map_err(|e| Error::Parse {
        offset: byte_offset(raw, e.line(), e.column()),
        message: e.to_string(),
    })?;

    let mut dialogues = Vec::with_capacity(parsed.len());
    for (di, turns) in parsed.into_iter().enumerate() {
        if turns.is_empty() {
            return Err(Error::EmptyDialogue(di));
        }
        let mut utterances = Vec::with_capacity(turns.len());
        for (ui, turn) in turns.into_iter().enumerate() {
            let emotion = turn
                .emotion
                .parse::<EmotionLabel>()
                .map_err(|value| Error::UnknownEmotion { value, dialogue: di })?;
            utterances.push(Utterance {
                speaker: turn.speaker,
                text: turn.utterance,
                emotion,
                dialogue_index: ui,
            });
        }
        dialogues.push(Dialogue { utterances, source });
    }
    Ok(DialogueSet { dialogues })
}

/// First `n_train` dialogues train, the rest validate.
pub fn split_train_val(ds: &DialogueSet, n_train: usize) -> Result<(DialogueSet, DialogueSet)> {
    if n_train > ds.len() {
        return Err(Error::Range { what: "n_train", value: n_train, limit: ds.len() });
    }
    let (train, val) = ds.dialogues.split_at(n_train);
    Ok((DialogueSet::new(train.to_vec()), DialogueSet::new(val.to_vec())))
}

/// Keeps the pairs whose target label is in `keep`. Context text is not
/// inspected, so a dropped utterance can still be the context of a kept one.
pub fn filter_labels(pairs: &[CausalPair], keep: &BTreeSet<EmotionLabel>) -> Vec<CausalPair> {
    pairs.iter().filter(|p| keep.contains(&p.label)).cloned().collect()
}

/// Per-label counts over all eight labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LabelCounts([usize; 8]);

impl LabelCounts {
    pub fn get(&self, label: EmotionLabel) -> usize {
        self.0[label.index()]
    }

    pub fn add(&mut self, label: EmotionLabel) {
        self.0[label.index()] += 1;
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    /// Labels with a non-zero count, in label order.
    pub fn nonzero(&self) -> impl Iterator<Item = (EmotionLabel, usize)> + '_ {
        EmotionLabel::ALL
            .into_iter()
            .map(|l| (l, self.get(l)))
            .filter(|&(_, c)| c > 0)
    }
}

impl FromIterator<EmotionLabel> for LabelCounts {
    fn from_iter<I: IntoIterator<Item = EmotionLabel>>(iter: I) -> Self {
        let mut counts = LabelCounts::default();
        for l in iter {
            counts.add(l);
        }
        counts
    }
}

pub fn label_distribution(pairs: &[CausalPair]) -> LabelCounts {
    pairs.iter().map(|p| p.label).collect()
}
