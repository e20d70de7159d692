//! Causal utterance pairs, speaker ("personality") tokens for scripted
//! dialogue and placeholder normalization for chat text.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, DialogueSet, EmotionLabel, Source};

/// Context placeholder for the first utterance of a dialogue.
pub const NONE_TOKEN: &str = "[None]";
pub const SAYS_TOKEN: &str = "[says]";
pub const URL_TOKEN: &str = "[URL]";
pub const EMPTY_TOKEN: &str = "[EMPTY]";
pub const PERSON_TOKEN: &str = "[PERSON]";
pub const ORG_TOKEN: &str = "[ORG]";
pub const TIME_TOKEN: &str = "[TIME]";

pub const MAIN_CHARACTERS: [&str; 6] = ["Rachel", "Monica", "Phoebe", "Joey", "Chandler", "Ross"];

/// One training example: the utterance to label (sentence A) followed by
/// the utterance it replies to (sentence B).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalPair {
    pub target_text: String,
    pub context_text: String,
    pub target_speaker: String,
    pub context_speaker: Option<String>,
    pub label: EmotionLabel,
    pub source: Source,
}

impl CausalPair {
    pub fn has_context(&self) -> bool {
        self.context_speaker.is_some()
    }
}

/// Line record of the intermediate pairs file (JSON lines).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub target: String,
    pub context: String,
    pub label: EmotionLabel,
    pub source: Source,
}

impl From<&CausalPair> for PairRecord {
    fn from(p: &CausalPair) -> Self {
        PairRecord {
            target: p.target_text.clone(),
            context: p.context_text.clone(),
            label: p.label,
            source: p.source,
        }
    }
}

pub fn build_causal_pairs(d: &Dialogue) -> Vec<CausalPair> {
    let utterances = d.utterances();
    utterances
        .iter()
        .enumerate()
        .map(|(t, u)| {
            let prev = t.checked_sub(1).map(|i| &utterances[i]);
            CausalPair {
                target_text: u.text.clone(),
                context_text: prev.map_or_else(|| NONE_TOKEN.to_string(), |p| p.text.clone()),
                target_speaker: u.speaker.clone(),
                context_speaker: prev.map(|p| p.speaker.clone()),
                label: u.emotion,
                source: d.source(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeakerTokenPolicy {
    pub main_speakers: Vec<String>,
    pub says_token: String,
}

impl Default for SpeakerTokenPolicy {
    fn default() -> Self {
        SpeakerTokenPolicy {
            main_speakers: MAIN_CHARACTERS.iter().map(|s| s.to_string()).collect(),
            says_token: SAYS_TOKEN.to_string(),
        }
    }
}

impl SpeakerTokenPolicy {
    pub fn empty() -> Self {
        SpeakerTokenPolicy { main_speakers: Vec::new(), says_token: SAYS_TOKEN.to_string() }
    }

    /// Bracketed token for a speaker, if the speaker is a main one.
    /// Matching is case-insensitive on the whole speaker field.
    pub fn speaker_token(&self, speaker: &str) -> Option<String> {
        let speaker = speaker.trim();
        self.main_speakers
            .iter()
            .find(|name| name.eq_ignore_ascii_case(speaker))
            .map(|name| format!("[{name}]"))
    }

    /// Every bracketed speaker token this policy can emit.
    pub fn tokens(&self) -> Vec<String> {
        self.main_speakers.iter().map(|n| format!("[{n}]")).collect()
    }

    fn prefix(&self, text: &str, speaker: &str) -> String {
        match self.speaker_token(speaker) {
            Some(tok) => {
                let prefix = format!("{tok} {} ", self.says_token);
                if text.starts_with(&prefix) {
                    text.to_string()
                } else {
                    prefix + text
                }
            }
            None => text.to_string(),
        }
    }
}

pub fn apply_personality_tokens(p: &CausalPair, policy: &SpeakerTokenPolicy) -> CausalPair {
    let context_text = match &p.context_speaker {
        Some(speaker) => policy.prefix(&p.context_text, speaker),
        None => p.context_text.clone(),
    };
    CausalPair {
        target_text: policy.prefix(&p.target_text, &p.target_speaker),
        context_text,
        ..p.clone()
    }
}

static URL_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(^|\s)(?:https?://|www\.)\S+").unwrap());
static ENTITY_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b(person|organization|time)_\d+\b").unwrap());

/// Unifies hyperlinks, empty messages and anonymized entity names. Emoji,
/// repeated letters and casing are left alone.
pub fn normalize_chat_text(t: &str) -> String {
    if t.trim().is_empty() {
        return EMPTY_TOKEN.to_string();
    }
    let urls = URL_RE.replace_all(t, |c: &regex::Captures<'_>| format!("{}{URL_TOKEN}", &c[1]));
    ENTITY_RE
        .replace_all(&urls, |c: &regex::Captures<'_>| {
            match &c[1] {
                "person" => PERSON_TOKEN,
                "organization" => ORG_TOKEN,
                _ => TIME_TOKEN,
            }
            .to_string()
        })
        .into_owned()
}

pub fn render_pair(p: &CausalPair) -> String {
    format!("[CLS] {} [SEP] {} [SEP]", p.target_text, p.context_text)
}

/// Preprocessing switches. Defaults follow the dataset: speaker tokens for
/// Friends, chat normalization for EmotionPush.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepOptions {
    pub personality_tokens: bool,
    pub chat_normalization: bool,
    pub policy: SpeakerTokenPolicy,
}

impl PrepOptions {
    pub fn for_source(source: Source) -> Self {
        PrepOptions {
            personality_tokens: source == Source::Friends,
            chat_normalization: source == Source::EmotionPush,
            policy: SpeakerTokenPolicy::default(),
        }
    }

    pub fn none() -> Self {
        PrepOptions {
            personality_tokens: false,
            chat_normalization: false,
            policy: SpeakerTokenPolicy::default(),
        }
    }
}

/// Normalizes, pairs and speaker-tokenizes every dialogue, in order.
pub fn prepare_pairs(ds: &DialogueSet, opts: &PrepOptions) -> Vec<CausalPair> {
    ds.iter()
        .flat_map(|d| {
            let d = if opts.chat_normalization { d.map_text(normalize_chat_text) } else { d.clone() };
            build_causal_pairs(&d)
        })
        .map(|p| {
            if opts.personality_tokens {
                apply_personality_tokens(&p, &opts.policy)
            } else {
                p
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dialogue(turns: &[(&str, &str, EmotionLabel)]) -> Dialogue {
        Dialogue::new(Source::Friends, turns.iter().map(|&(s, t, e)| (s, t, e))).unwrap()
    }

    #[test]
    fn sentence_representation_rows() {
        let d = dialogue(&[
            ("Joey", "What?!", EmotionLabel::Surprise),
            ("Chandler", "What's wrong with you?", EmotionLabel::NonNeutral),
            ("Joey", "Nothing!", EmotionLabel::Neutral),
        ]);
        let rendered: Vec<_> = build_causal_pairs(&d).iter().map(render_pair).collect();
        assert_eq!(
            rendered,
            [
                "[CLS] What?! [SEP] [None] [SEP]",
                "[CLS] What's wrong with you? [SEP] What?! [SEP]",
                "[CLS] Nothing! [SEP] What's wrong with you? [SEP]",
            ]
        );
    }

    #[test]
    fn single_utterance_gets_sentinel() {
        let pairs = build_causal_pairs(&dialogue(&[("A", "hi", EmotionLabel::Joy)]));
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].context_text, NONE_TOKEN);
        assert!(!pairs[0].has_context());
    }

    #[test]
    fn personality_rows() {
        let d = dialogue(&[
            ("Janice", "I'm sorry.", EmotionLabel::Sadness),
            ("Chandler", "Ohhh. Don't go.", EmotionLabel::Sadness),
            ("Janice", "No, I gotta go.", EmotionLabel::NonNeutral),
        ]);
        let policy = SpeakerTokenPolicy::default();
        let rendered: Vec<_> = build_causal_pairs(&d)
            .iter()
            .map(|p| render_pair(&apply_personality_tokens(p, &policy)))
            .collect();
        assert_eq!(
            rendered,
            [
                "[CLS] I'm sorry. [SEP] [None] [SEP]",
                "[CLS] [Chandler] [says] Ohhh. Don't go. [SEP] I'm sorry. [SEP]",
                "[CLS] No, I gotta go. [SEP] [Chandler] [says] Ohhh. Don't go. [SEP]",
            ]
        );
    }

    #[test]
    fn speaker_matching_is_whole_field_case_insensitive() {
        let policy = SpeakerTokenPolicy::default();
        assert_eq!(policy.speaker_token("chandler").as_deref(), Some("[Chandler]"));
        assert_eq!(policy.speaker_token("Chandler Bing"), None);
        assert_eq!(policy.speaker_token("Mrs. Geller"), None);
    }

    #[test]
    fn empty_policy_is_identity() {
        let d = dialogue(&[("Ross", "a", EmotionLabel::Joy), ("Joey", "b", EmotionLabel::Joy)]);
        for p in build_causal_pairs(&d) {
            assert_eq!(apply_personality_tokens(&p, &SpeakerTokenPolicy::empty()), p);
        }
    }

    #[test]
    fn chat_normalization_examples() {
        assert_eq!(normalize_chat_text("person_01 see you :D"), "[PERSON] see you :D");
        assert_eq!(normalize_chat_text(""), "[EMPTY]");
        assert_eq!(normalize_chat_text("  \t"), "[EMPTY]");
        assert_eq!(
            normalize_chat_text("check https://a.b/c organization_80 at time_12"),
            "check [URL] [ORG] at [TIME]"
        );
        assert_eq!(normalize_chat_text("www.x.org  <3 SOOO goood"), "[URL]  <3 SOOO goood");
        // not at a token start, so not a link
        assert_eq!(normalize_chat_text("xhttp://a"), "xhttp://a");
        assert_eq!(normalize_chat_text("Person_01 myperson_2"), "Person_01 myperson_2");
    }

    #[test]
    fn prepare_switches_by_source() {
        let raw = r#"[[{"speaker":"Ross","utterance":"hi person_1","emotion":"joy"}]]"#;
        let friends = crate::corpus::parse_dialogues(raw, Source::Friends).unwrap();
        let pairs = prepare_pairs(&friends, &PrepOptions::for_source(Source::Friends));
        assert_eq!(pairs[0].target_text, "[Ross] [says] hi person_1");

        let push = crate::corpus::parse_dialogues(raw, Source::EmotionPush).unwrap();
        let pairs = prepare_pairs(&push, &PrepOptions::for_source(Source::EmotionPush));
        assert_eq!(pairs[0].target_text, "hi [PERSON]");
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(s in "[a-z_0-9 :/.<3]{0,40}") {
            let once = normalize_chat_text(&s);
            prop_assert_eq!(normalize_chat_text(&once), once);
        }

        #[test]
        fn personality_tokens_idempotent(
            speakers in proptest::collection::vec(prop_oneof!["Ross", "Janice", "joey", "Gunther"], 1..6),
        ) {
            let turns: Vec<_> = speakers
                .iter()
                .enumerate()
                .map(|(i, s)| (s.clone(), format!("line {i}"), EmotionLabel::Neutral))
                .collect();
            let d = Dialogue::new(Source::Friends, turns).unwrap();
            let policy = SpeakerTokenPolicy::default();
            let pairs = build_causal_pairs(&d);
            prop_assert_eq!(pairs.len(), speakers.len());
            prop_assert_eq!(pairs.iter().filter(|p| p.context_text == NONE_TOKEN).count(), 1);
            for p in &pairs {
                let once = apply_personality_tokens(p, &policy);
                prop_assert_eq!(apply_personality_tokens(&once, &policy), once.clone());
                if policy.speaker_token(&p.target_speaker).is_none() {
                    prop_assert_eq!(&once.target_text, &p.target_text);
                }
            }
        }
    }
}
