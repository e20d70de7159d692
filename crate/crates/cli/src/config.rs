//! Run configuration: a dataset preset, then a flat file of dotted keys
//! (`train.batch_size = 8`), then `--set key=value` flags.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use dialogemo::corpus::Source;
use dialogemo::encoder::ModelConfig;
use dialogemo::tokenizer::MlmOptions;
use dialogemo::train::TrainConfig;

pub const CONFIG_ENV: &str = "DIALOGEMO_CONFIG";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub pretrain_corpus: Option<PathBuf>,
    pub tweets: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepSwitches {
    pub personality_tokens: bool,
    pub chat_normalization: bool,
    pub lowercase: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Source,
    pub paths: Paths,
    /// `vocab_size` is replaced by the loaded vocabulary's size.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prep: PrepSwitches,
    pub n_train: usize,
    pub vocab_cap: usize,
    pub vocab_min_freq: usize,
    pub pretrain_examples: usize,
    pub mlm: MlmOptions,
}

impl RunConfig {
    /// Friends: max_len 113, batch 8, 3 epochs, uncased. EmotionPush:
    /// max_len 249, batch 4, 2 epochs, cased.
    pub fn preset(dataset: Source) -> Self {
        let (max_len, train, lowercase) = match dataset {
            Source::Friends => (113, TrainConfig::friends(), true),
            Source::EmotionPush => (249, TrainConfig::emotionpush(), false),
        };
        RunConfig {
            dataset,
            paths: Paths::default(),
            model: ModelConfig::desk(0, max_len, 4),
            train,
            prep: PrepSwitches {
                personality_tokens: dataset == Source::Friends,
                chat_normalization: dataset == Source::EmotionPush,
                lowercase,
            },
            n_train: 800,
            vocab_cap: 8000,
            vocab_min_freq: 1,
            pretrain_examples: 10_000,
            mlm: MlmOptions::default(),
        }
    }

    /// Builds a config from optional file text and `key=value` overrides.
    /// The dataset key is resolved first so its preset sits underneath.
    pub fn resolve(file: Option<&str>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut entries = match file {
            Some(text) => parse_file(text)?,
            None => Vec::new(),
        };
        entries.extend(overrides.iter().cloned());
        let dataset = entries
            .iter()
            .rev()
            .find(|(k, _)| k == "dataset")
            .map(|(_, v)| as_str(v, "dataset")?.parse::<Source>().map_err(anyhow::Error::msg))
            .transpose()?
            .unwrap_or(Source::Friends);
        let mut cfg = RunConfig::preset(dataset);
        for (key, value) in &entries {
            cfg.set(key, value).with_context(|| format!("config key {key}"))?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &toml::Value) -> Result<()> {
        match key {
            "dataset" => {}
            "paths.train" => self.paths.train = Some(as_str(v, key)?.into()),
            "paths.pretrain_corpus" => self.paths.pretrain_corpus = Some(as_str(v, key)?.into()),
            "paths.tweets" => self.paths.tweets = Some(as_str(v, key)?.into()),
            "paths.checkpoint_dir" => self.paths.checkpoint_dir = Some(as_str(v, key)?.into()),
            "model.d_model" => self.model.d_model = as_count(v, key)?,
            "model.n_heads" => self.model.n_heads = as_count(v, key)?,
            "model.n_layers" => self.model.n_layers = as_count(v, key)?,
            "model.d_ff" => self.model.d_ff = as_count(v, key)?,
            "model.max_len" => self.model.max_len = as_count(v, key)?,
            "model.dropout" => self.model.dropout_head = as_real(v, key)?,
            "train.batch_size" => self.train.batch_size = as_count(v, key)?,
            "train.learning_rate" => self.train.learning_rate = as_real(v, key)?,
            "train.epochs" => self.train.n_epochs = as_count(v, key)?,
            "train.beta1" => self.train.beta1 = as_real(v, key)?,
            "train.beta2" => self.train.beta2 = as_real(v, key)?,
            "train.epsilon" => self.train.epsilon = as_real(v, key)?,
            "train.seed" => self.train.seed = as_count(v, key)? as u64,
            "train.warm_first_epoch" => self.train.warm_first_epoch = as_bool(v, key)?,
            "prep.personality_tokens" => self.prep.personality_tokens = as_bool(v, key)?,
            "prep.chat_normalization" => self.prep.chat_normalization = as_bool(v, key)?,
            "prep.lowercase" => self.prep.lowercase = as_bool(v, key)?,
            "data.n_train" => self.n_train = as_count(v, key)?,
            "vocab.size" => self.vocab_cap = as_count(v, key)?,
            "vocab.min_freq" => self.vocab_min_freq = as_count(v, key)?,
            "pretrain.examples" => self.pretrain_examples = as_count(v, key)?,
            "pretrain.mask_rate" => self.mlm.rate = as_real(v, key)?,
            _ => bail!("unknown key"),
        }
        Ok(())
    }

    /// Flat `key = value` lines, loadable by [`RunConfig::resolve`].
    pub fn to_file(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| toml::Value::from(p.display().to_string()));
        let mut lines = vec![("dataset".to_string(), toml::Value::from(self.dataset.to_string()))];
        for (k, p) in [
            ("paths.train", &self.paths.train),
            ("paths.pretrain_corpus", &self.paths.pretrain_corpus),
            ("paths.tweets", &self.paths.tweets),
            ("paths.checkpoint_dir", &self.paths.checkpoint_dir),
        ] {
            if let Some(v) = path(p) {
                lines.push((k.into(), v));
            }
        }
        let count = |n: usize| toml::Value::Integer(n as i64);
        lines.extend([
            ("model.d_model".into(), count(self.model.d_model)),
            ("model.n_heads".into(), count(self.model.n_heads)),
            ("model.n_layers".into(), count(self.model.n_layers)),
            ("model.d_ff".into(), count(self.model.d_ff)),
            ("model.max_len".into(), count(self.model.max_len)),
            ("model.dropout".into(), toml::Value::Float(self.model.dropout_head)),
            ("train.batch_size".into(), count(self.train.batch_size)),
            ("train.learning_rate".into(), toml::Value::Float(self.train.learning_rate)),
            ("train.epochs".into(), count(self.train.n_epochs)),
            ("train.beta1".into(), toml::Value::Float(self.train.beta1)),
            ("train.beta2".into(), toml::Value::Float(self.train.beta2)),
            ("train.epsilon".into(), toml::Value::Float(self.train.epsilon)),
            ("train.seed".into(), toml::Value::Integer(self.train.seed as i64)),
            ("train.warm_first_epoch".into(), toml::Value::Boolean(self.train.warm_first_epoch)),
            ("prep.personality_tokens".into(), toml::Value::Boolean(self.prep.personality_tokens)),
            ("prep.chat_normalization".into(), toml::Value::Boolean(self.prep.chat_normalization)),
            ("prep.lowercase".into(), toml::Value::Boolean(self.prep.lowercase)),
            ("data.n_train".into(), count(self.n_train)),
            ("vocab.size".into(), count(self.vocab_cap)),
            ("vocab.min_freq".into(), count(self.vocab_min_freq)),
            ("pretrain.examples".into(), count(self.pretrain_examples)),
            ("pretrain.mask_rate".into(), toml::Value::Float(self.mlm.rate)),
        ]);
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

pub fn parse_file(text: &str) -> Result<Vec<(String, toml::Value)>> {
    let table: toml::Table = text.parse().context("config file is not valid key = value text")?;
    let mut out = Vec::new();
    flatten("", &table, &mut out);
    Ok(out)
}

/// `key=value`; values that are not TOML literals are taken as strings.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let Some((k, v)) = s.split_once('=') else { bail!("expected key=value, got {s:?}") };
    let v = v.trim();
    let value = format!("x = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|t| t.get("x").cloned())
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn as_str<'a>(v: &'a toml::Value, key: &str) -> Result<&'a str> {
    v.as_str().with_context(|| format!("{key} must be a string"))
}

fn as_count(v: &toml::Value, key: &str) -> Result<usize> {
    match v.as_integer() {
        Some(i) if i >= 0 => Ok(i as usize),
        _ => bail!("{key} must be a non-negative integer"),
    }
}

fn as_real(v: &toml::Value, key: &str) -> Result<f64> {
    v.as_float()
        .or_else(|| v.as_integer().map(|i| i as f64))
        .with_context(|| format!("{key} must be a number"))
}

fn as_bool(v: &toml::Value, key: &str) -> Result<bool> {
    v.as_bool().with_context(|| format!("{key} must be true or false"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_setup_table() {
        let f = RunConfig::preset(Source::Friends);
        assert_eq!((f.model.max_len, f.train.batch_size, f.train.n_epochs, f.prep.lowercase), (113, 8, 3, true));
        let p = RunConfig::preset(Source::EmotionPush);
        assert_eq!((p.model.max_len, p.train.batch_size, p.train.n_epochs, p.prep.lowercase), (249, 4, 2, false));
        for c in [f, p] {
            assert_eq!(c.train.learning_rate, 2.5e-6);
            assert_eq!(c.model.dropout_head, 0.75);
        }
    }

    #[test]
    fn flags_win_over_file() {
        let file = "dataset = \"emotionpush\"\ntrain.batch_size = 16\n[model]\nd_model = 64\n";
        let cfg = RunConfig::resolve(Some(file), &[parse_override("train.batch_size=2").unwrap()]).unwrap();
        assert_eq!(cfg.dataset, Source::EmotionPush);
        assert_eq!(cfg.model.max_len, 249);
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.train.batch_size, 2);
    }

    #[test]
    fn dataset_flag_picks_preset() {
        let cfg = RunConfig::resolve(Some("train.epochs = 7"), &[parse_override("dataset=emotionpush").unwrap()]).unwrap();
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.train.n_epochs, 7);
    }

    #[test]
    fn bad_entries_rejected() {
        assert!(RunConfig::resolve(Some("nope = 1"), &[]).is_err());
        assert!(RunConfig::resolve(Some("train.batch_size = \"x\""), &[]).is_err());
        assert!(RunConfig::resolve(Some("train.learning_rate = -1.0"), &[]).is_err());
        assert!(RunConfig::resolve(Some("= ="), &[]).is_err());
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn file_round_trip() {
        let mut cfg = RunConfig::preset(Source::EmotionPush);
        cfg.paths.train = Some("data/x.json".into());
        cfg.train.seed = 9;
        let back = RunConfig::resolve(Some(&cfg.to_file()), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn override_values_typed() {
        assert_eq!(parse_override("a=3").unwrap().1, toml::Value::Integer(3));
        assert_eq!(parse_override("a=true").unwrap().1, toml::Value::Boolean(true));
        assert_eq!(parse_override("a=some/path.json").unwrap().1, toml::Value::String("some/path.json".into()));
    }
}
