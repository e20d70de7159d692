//! Vocabulary construction, greedy longest-match WordPiece tokenization,
//! fixed-length pair encoding and the two pre-training example generators
//! (masked tokens and next-sentence pairs).

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::corpus::EmotionLabel;
use crate::error::{Error, Result};
use crate::textprep::{self, CausalPair, SpeakerTokenPolicy};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

pub const CONTINUATION: &str = "##";

const MAX_WORD_CHARS: usize = 100;
const MAX_SUFFIX_PIECE: usize = 4;

/// Tokens that are never split or pruned, in id order.
pub fn reserved_tokens(policy: &SpeakerTokenPolicy) -> Vec<String> {
    let fixed = [
        PAD,
        UNK,
        CLS,
        SEP,
        MASK,
        textprep::NONE_TOKEN,
        textprep::URL_TOKEN,
        textprep::EMPTY_TOKEN,
        textprep::PERSON_TOKEN,
        textprep::ORG_TOKEN,
        textprep::TIME_TOKEN,
    ];
    let mut out: Vec<String> = fixed.iter().map(|s| s.to_string()).collect();
    out.push(policy.says_token.clone());
    for tok in policy.tokens() {
        if !out.contains(&tok) {
            out.push(tok);
        }
    }
    out
}

fn is_bracketed(tok: &str) -> bool {
    tok.len() > 2 && tok.starts_with('[') && tok.ends_with(']')
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    /// Bracketed tokens, longest first, matched before any splitting.
    atomic: Vec<String>,
    lowercase: bool,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>, lowercase: bool) -> Result<Self> {
        let expected = [PAD, UNK, CLS, SEP, MASK];
        if tokens.len() < expected.len() || tokens.iter().zip(expected).any(|(t, e)| t != e) {
            return Err(Error::Config(format!(
                "vocabulary must start with {}",
                expected.join(", ")
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let mut atomic: Vec<String> = tokens.iter().filter(|t| is_bracketed(t)).cloned().collect();
        atomic.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        Ok(Vocab { tokens, index, atomic, lowercase })
    }

    /// Parses the one-token-per-line vocabulary file.
    pub fn from_file_contents(contents: &str, lowercase: bool) -> Result<Self> {
        let tokens = contents.lines().map(str::to_string).collect();
        Self::from_tokens(tokens, lowercase)
    }

    pub fn to_file_contents(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    /// SHA-256 of the vocabulary file contents, hex encoded.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_file_contents().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special_id(id: u32) -> bool {
        matches!(id, PAD_ID | CLS_ID | SEP_ID)
    }
}

enum Chunk<'a> {
    Atomic(&'a str),
    Text(&'a str),
}

fn split_atomic<'a>(text: &'a str, atomic: &'a [String]) -> Vec<Chunk<'a>> {
    let mut chunks = Vec::new();
    let mut plain_start = 0;
    let mut pos = 0;
    while pos < text.len() {
        if text.as_bytes()[pos] == b'[' {
            if let Some(tok) = atomic.iter().find(|t| text[pos..].starts_with(t.as_str())) {
                if plain_start < pos {
                    chunks.push(Chunk::Text(&text[plain_start..pos]));
                }
                chunks.push(Chunk::Atomic(tok));
                pos += tok.len();
                plain_start = pos;
                continue;
            }
        }
        pos += text[pos..].chars().next().map_or(1, char::len_utf8);
    }
    if plain_start < text.len() {
        chunks.push(Chunk::Text(&text[plain_start..]));
    }
    chunks
}

fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Whitespace split, then every punctuation character becomes its own word.
fn split_words(text: &str, lowercase: bool, out: &mut Vec<String>) {
    let text = if lowercase { text.to_lowercase() } else { text.to_string() };
    for word in text.split_whitespace() {
        let mut current = String::new();
        for c in word.chars() {
            if is_punctuation(c) {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(c.to_string());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
}

/// Words of `text` with reserved tokens kept whole.
fn pre_tokenize(text: &str, atomic: &[String], lowercase: bool) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in split_atomic(text, atomic) {
        match chunk {
            Chunk::Atomic(t) => out.push(t.to_string()),
            Chunk::Text(t) => split_words(t, lowercase, &mut out),
        }
    }
    out
}

/// Builds a vocabulary: reserved tokens, then whole words with frequency
/// at least `min_freq`, then word-initial characters and `##` suffix pieces,
/// each group by descending frequency with lexicographic tie-breaks, until
/// `size_cap` tokens are held.
pub fn build_vocab(
    corpus: &[String],
    min_freq: usize,
    size_cap: usize,
    lowercase: bool,
    policy: &SpeakerTokenPolicy,
) -> Result<Vocab> {
    let reserved = reserved_tokens(policy);
    if size_cap < reserved.len() {
        return Err(Error::Config(format!(
            "vocabulary size cap {size_cap} is below the {} reserved tokens",
            reserved.len()
        )));
    }
    let mut atomic = reserved.clone();
    atomic.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));

    let mut word_freq: HashMap<String, usize> = HashMap::new();
    for line in corpus {
        for w in pre_tokenize(line, &atomic, lowercase) {
            if !reserved.contains(&w) {
                *word_freq.entry(w).or_default() += 1;
            }
        }
    }

    let mut piece_freq: HashMap<String, usize> = HashMap::new();
    for (word, &count) in &word_freq {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            continue;
        }
        *piece_freq.entry(chars[0].to_string()).or_default() += count;
        for start in 1..chars.len() {
            let max_len = (chars.len() - start).min(MAX_SUFFIX_PIECE);
            for len in 1..=max_len {
                // single characters anywhere, longer pieces only as suffixes
                if len > 1 && start + len != chars.len() {
                    continue;
                }
                let piece: String = chars[start..start + len].iter().collect();
                *piece_freq.entry(format!("{CONTINUATION}{piece}")).or_default() += count;
            }
        }
    }

    let by_freq = |m: HashMap<String, usize>, min: usize| {
        let mut v: Vec<(String, usize)> = m.into_iter().filter(|&(_, c)| c >= min).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v.into_iter().map(|(t, _)| t)
    };

    let mut tokens = reserved;
    let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    for tok in by_freq(word_freq, min_freq.max(1)).chain(by_freq(piece_freq, 1)) {
        if tokens.len() >= size_cap {
            break;
        }
        if seen.insert(tok.clone()) {
            tokens.push(tok);
        }
    }
    Vocab::from_tokens(tokens, lowercase)
}

fn wordpiece_word(word: &str, v: &Vocab, out: &mut Vec<String>) {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        out.push(UNK.to_string());
        return;
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let body: String = chars[start..end].iter().collect();
            let candidate = if start > 0 { format!("{CONTINUATION}{body}") } else { body };
            if v.contains(&candidate) {
                found = Some(candidate);
                break;
            }
            end -= 1;
        }
        match found {
            Some(piece) => {
                pieces.push(piece);
                start = end;
            }
            None => {
                out.push(UNK.to_string());
                return;
            }
        }
    }
    out.extend(pieces);
}

pub fn wordpiece_tokenize(t: &str, v: &Vocab) -> Vec<String> {
    let mut out = Vec::new();
    for word in pre_tokenize(t, &v.atomic, v.lowercase) {
        if v.atomic.contains(&word) {
            out.push(word);
        } else {
            wordpiece_word(&word, v, &mut out);
        }
    }
    out
}

fn ids_of(tokens: &[String], v: &Vocab) -> Vec<u32> {
    tokens.iter().map(|t| v.id(t).unwrap_or(UNK_ID)).collect()
}

/// Fixed-length encoder input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub attention_mask: Vec<u8>,
    pub label: Option<EmotionLabel>,
}

impl EncodedSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Encodes `[CLS] a [SEP] b [SEP]` padded to `max_len`. Over-long input
/// loses the tail of `b` first, then the tail of `a`.
pub fn encode_texts(
    a: &str,
    b: &str,
    label: Option<EmotionLabel>,
    v: &Vocab,
    max_len: usize,
) -> Result<EncodedSequence> {
    if max_len < 8 {
        return Err(Error::Config(format!("max_len must be at least 8, got {max_len}")));
    }
    let mut a_ids = ids_of(&wordpiece_tokenize(a, v), v);
    let mut b_ids = ids_of(&wordpiece_tokenize(b, v), v);
    if a_ids.is_empty() {
        return Err(Error::Encoding(format!("target {a:?} produced no tokens")));
    }
    let capacity = max_len - 3;
    b_ids.truncate(capacity.saturating_sub(a_ids.len()));
    a_ids.truncate(capacity);

    let mut ids = Vec::with_capacity(max_len);
    let mut segments = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(&a_ids);
    ids.push(SEP_ID);
    segments.resize(ids.len(), 0);
    ids.extend(&b_ids);
    ids.push(SEP_ID);
    segments.resize(ids.len(), 1);
    let real = ids.len();
    let mut attention_mask = vec![1u8; real];
    ids.resize(max_len, PAD_ID);
    segments.resize(max_len, 0);
    attention_mask.resize(max_len, 0);
    Ok(EncodedSequence { ids, segments, attention_mask, label })
}

pub fn encode_pair(p: &CausalPair, v: &Vocab, max_len: usize) -> Result<EncodedSequence> {
    encode_texts(&p.target_text, &p.context_text, Some(p.label), v, max_len)
}

/// Real tokens of an encoded sequence, specials included.
pub fn decode(e: &EncodedSequence, v: &Vocab) -> Vec<String> {
    e.ids
        .iter()
        .zip(&e.attention_mask)
        .filter(|&(_, &m)| m == 1)
        .map(|(&id, _)| v.token(id).unwrap_or(UNK).to_string())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MlmOptions {
    pub rate: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
}

impl Default for MlmOptions {
    fn default() -> Self {
        MlmOptions { rate: 0.15, mask_prob: 0.8, random_prob: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmExample {
    pub corrupted: EncodedSequence,
    /// Position to original token id.
    pub targets: BTreeMap<usize, u32>,
}

/// Ids drawn for random replacement: everything past the control tokens.
const FIRST_SAMPLEABLE_ID: u32 = MASK_ID + 1;

pub fn mask_for_mlm<R: Rng + ?Sized>(
    e: &EncodedSequence,
    v: &Vocab,
    opts: &MlmOptions,
    rng: &mut R,
) -> Result<MlmExample> {
    let candidates: Vec<usize> = (0..e.ids.len())
        .filter(|&i| e.attention_mask[i] == 1 && !Vocab::is_special_id(e.ids[i]))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Precondition("sequence has no maskable tokens".into()));
    }
    let mut corrupted = e.clone();
    let mut targets = BTreeMap::new();
    for pos in candidates {
        if !rng.random_bool(opts.rate.clamp(0.0, 1.0)) {
            continue;
        }
        targets.insert(pos, e.ids[pos]);
        let r: f64 = rng.random();
        if r < opts.mask_prob {
            corrupted.ids[pos] = MASK_ID;
        } else if r < opts.mask_prob + opts.random_prob
            && (v.len() as u32) > FIRST_SAMPLEABLE_ID {
                corrupted.ids[pos] = rng.random_range(FIRST_SAMPLEABLE_ID..v.len() as u32);
            }
    }
    Ok(MlmExample { corrupted, targets })
}

/// Sentence A and a candidate predecessor B.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NspTextPair {
    pub a: String,
    pub b: String,
    pub is_next: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NspExample {
    pub encoded: EncodedSequence,
    pub is_next: bool,
}

fn check_scenes(scenes: &[Vec<String>]) -> Result<()> {
    if scenes.len() < 2 {
        return Err(Error::Precondition(format!("need at least 2 scenes, got {}", scenes.len())));
    }
    if let Some(i) = scenes.iter().position(|s| s.len() < 2) {
        return Err(Error::Precondition(format!("scene {i} has fewer than 2 utterances")));
    }
    Ok(())
}

/// Samples next-sentence pairs in the causal layout: sentence A is an
/// utterance, sentence B is either the utterance right before it in the same
/// scene (positive) or a random utterance from another scene (negative).
pub fn sample_nsp_text_pairs<R: Rng + ?Sized>(
    scenes: &[Vec<String>],
    n: usize,
    rng: &mut R,
) -> Result<Vec<NspTextPair>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    check_scenes(scenes)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let s = rng.random_range(0..scenes.len());
        let scene = &scenes[s];
        let t = rng.random_range(1..scene.len());
        let is_next = rng.random_bool(0.5);
        let b = if is_next {
            scene[t - 1].clone()
        } else {
            let mut other = rng.random_range(0..scenes.len() - 1);
            if other >= s {
                other += 1;
            }
            let pick = rng.random_range(0..scenes[other].len());
            scenes[other][pick].clone()
        };
        out.push(NspTextPair { a: scene[t].clone(), b, is_next });
    }
    Ok(out)
}

pub fn sample_nsp_pairs<R: Rng + ?Sized>(
    scenes: &[Vec<String>],
    n: usize,
    v: &Vocab,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<NspExample>> {
    sample_nsp_text_pairs(scenes, n, rng)?
        .into_iter()
        .map(|p| {
            Ok(NspExample { encoded: encode_texts(&p.a, &p.b, None, v, max_len)?, is_next: p.is_next })
        })
        .collect()
}

/// Parses a pre-training corpus: one utterance per line, blank lines
/// between scenes.
pub fn parse_scenes(contents: &str) -> Vec<Vec<String>> {
    let mut scenes = Vec::new();
    let mut current = Vec::new();
    for line in contents.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                scenes.push(std::mem::take(&mut current));
            }
        } else {
            current.push(line.to_string());
        }
    }
    if !current.is_empty() {
        scenes.push(current);
    }
    scenes
}
