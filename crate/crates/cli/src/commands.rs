use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use dialogemo::checkpoint::{self, Checkpoint};
use dialogemo::corpus::{filter_labels, label_distribution, parse_dialogues, split_train_val, Dialogue, DialogueSet, EmotionLabel};
use dialogemo::encoder::Model;
use dialogemo::eval::{confusion, report};
use dialogemo::textprep::{prepare_pairs, render_pair, CausalPair, PairRecord, PrepOptions, SpeakerTokenPolicy};
use dialogemo::tokenizer::{build_vocab, encode_pair, parse_scenes, EncodedSequence, Vocab};
use dialogemo::train::{
    class_weights, counts_for, filter_tweets, parse_tweet_file, predict_all, pretrain_emotion_hashtags, pretrain_mlm_nsp,
    train_classifier, PretrainConfig, PretrainHeads,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_override, RunConfig, CONFIG_ENV};
use crate::{Cli, Command, Global, PretrainTask, RunOpts, Split};

/// Bad invocation: exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(d) = cause.downcast_ref::<dialogemo::Error>() {
            return if d.is_data_error() { 2 } else { 1 };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

fn resolve_config(g: &Global) -> Result<RunConfig> {
    let path = g.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let text = match &path {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?),
        None => None,
    };
    let mut overrides = Vec::new();
    if let Some(d) = &g.dataset {
        overrides.push(("dataset".to_string(), toml::Value::String(d.clone())));
    }
    for s in &g.overrides {
        overrides.push(parse_override(s).map_err(|e| usage(format!("{e:#}")))?);
    }
    let mut cfg = RunConfig::resolve(text.as_deref(), &overrides).map_err(|e| usage(format!("{e:#}")))?;
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::Ingest { input } => ingest(&cfg, input),
        Command::Prep { input, out, render, split, eval_labels } => prep(&cfg, input, out, render, split, eval_labels),
        Command::Vocab { input, corpus, tweets, out } => vocab(&cfg, &input, &corpus, &tweets, out),
        Command::Pretrain { task: PretrainTask::MlmNsp { corpus, vocab, run, metrics } } => {
            pretrain_corpus(&cfg, corpus, &vocab, &run, metrics)
        }
        Command::Pretrain { task: PretrainTask::Tweets { tweets, vocab, run } } => pretrain_tweets(&cfg, tweets, &vocab, &run),
        Command::Train { input, vocab, run, metrics } => train(&cfg, input, &vocab, &run, metrics),
        Command::Eval { checkpoint, vocab, input, split, json, out } => evaluate(&cfg, &checkpoint, &vocab, input, split, json, out),
        Command::Predict { checkpoint, vocab, input, out } => predict(&cfg, &checkpoint, &vocab, &input, out),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Writes to `out` when given, otherwise to stdout.
fn emit(out: Option<&Path>, contents: &str) -> Result<()> {
    match out {
        Some(p) => write(p, contents.as_bytes()),
        None => {
            std::io::stdout().write_all(contents.as_bytes())?;
            Ok(())
        }
    }
}

fn input_or(given: Option<PathBuf>, fallback: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    given
        .or_else(|| fallback.clone())
        .ok_or_else(|| usage(format!("no input file: pass --input or set {key}")))
}

fn load_dialogues(path: &Path, cfg: &RunConfig) -> Result<DialogueSet> {
    parse_dialogues(&read(path)?, cfg.dataset).with_context(|| format!("parsing {}", path.display()))
}

fn select(ds: &DialogueSet, split: Split, n_train: usize) -> Result<DialogueSet> {
    if split == Split::All {
        return Ok(ds.clone());
    }
    let (train, val) = split_train_val(ds, n_train)?;
    Ok(if split == Split::Train { train } else { val })
}

fn prep_options(cfg: &RunConfig) -> PrepOptions {
    PrepOptions {
        personality_tokens: cfg.prep.personality_tokens,
        chat_normalization: cfg.prep.chat_normalization,
        policy: SpeakerTokenPolicy::default(),
    }
}

fn eval_pairs(ds: &DialogueSet, cfg: &RunConfig) -> Vec<CausalPair> {
    filter_labels(&prepare_pairs(ds, &prep_options(cfg)), &EmotionLabel::eval_set())
}

fn encode_all(pairs: &[CausalPair], vocab: &Vocab, max_len: usize) -> Result<Vec<EncodedSequence>> {
    Ok(pairs.iter().map(|p| encode_pair(p, vocab, max_len)).collect::<dialogemo::Result<_>>()?)
}

fn load_vocab(path: &Path, cfg: &RunConfig) -> Result<Vocab> {
    Vocab::from_file_contents(&read(path)?, cfg.prep.lowercase).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn load_checkpoint(path: &Path, vocab: &Vocab) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let ck = checkpoint::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
    ck.check_vocab(&vocab.checksum())?;
    Ok(ck)
}

/// Fresh model from the config, or the `--init` checkpoint with the
/// configured dropout.
fn base_model(run: &RunOpts, vocab: &Vocab, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Model> {
    match &run.init {
        Some(p) => {
            let mut model = load_checkpoint(p, vocab)?.model()?;
            model.config.dropout_head = cfg.model.dropout_head;
            Ok(model)
        }
        None => {
            let mut mc = cfg.model;
            mc.vocab_size = vocab.len();
            Ok(Model::new(mc, rng)?)
        }
    }
}

fn checkpoint_path(run: &RunOpts, cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    run.out
        .clone()
        .or_else(|| cfg.paths.checkpoint_dir.as_ref().map(|d| d.join(name)))
        .ok_or_else(|| usage("no checkpoint destination: pass --out or set paths.checkpoint_dir"))
}

fn save(path: &Path, model: &Model, heads: Option<&PretrainHeads>, vocab: &Vocab, cfg: &RunConfig, stage: &str) -> Result<()> {
    let metadata = BTreeMap::from([
        ("dataset".to_string(), cfg.dataset.to_string()),
        ("seed".to_string(), cfg.train.seed.to_string()),
        ("stage".to_string(), stage.to_string()),
    ]);
    let bytes = checkpoint::to_bytes(model, heads, &vocab.checksum(), metadata)?;
    write(path, &bytes)?;
    write(&path.with_extension("toml"), cfg.to_file().as_bytes())?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn jsonl<T: serde::Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn ingest(cfg: &RunConfig, input: Option<PathBuf>) -> Result<()> {
    let path = input_or(input, &cfg.paths.train, "paths.train")?;
    let ds = load_dialogues(&path, cfg)?;
    let all = label_distribution(&prepare_pairs(&ds, &PrepOptions::none()));
    println!("dialogues   {}", ds.len());
    println!("utterances  {}", ds.utterance_count());
    println!();
    let splits = if ds.len() > cfg.n_train {
        let (train, val) = split_train_val(&ds, cfg.n_train)?;
        let dist = |d: &DialogueSet| label_distribution(&prepare_pairs(d, &PrepOptions::none()));
        Some((dist(&train), dist(&val)))
    } else {
        None
    };
    match &splits {
        Some(_) => println!("{:<10}{:>8}{:>8}{:>8}", "label", "all", "train", "val"),
        None => println!("{:<10}{:>8}", "label", "all"),
    }
    for l in EmotionLabel::ALL {
        match &splits {
            Some((t, v)) => println!("{:<10}{:>8}{:>8}{:>8}", l.as_str(), all.get(l), t.get(l), v.get(l)),
            None => println!("{:<10}{:>8}", l.as_str(), all.get(l)),
        }
    }
    if splits.is_none() {
        println!("\n{} dialogues do not exceed data.n_train = {}; no split shown", ds.len(), cfg.n_train);
    }
    Ok(())
}

fn prep(cfg: &RunConfig, input: Option<PathBuf>, out: Option<PathBuf>, render: bool, split: Split, eval_only: bool) -> Result<()> {
    let path = input_or(input, &cfg.paths.train, "paths.train")?;
    let ds = select(&load_dialogues(&path, cfg)?, split, cfg.n_train)?;
    let mut pairs = prepare_pairs(&ds, &prep_options(cfg));
    if eval_only {
        pairs = filter_labels(&pairs, &EmotionLabel::eval_set());
    }
    let text = if render {
        pairs.iter().map(|p| render_pair(p) + "\n").collect()
    } else {
        jsonl(&pairs.iter().map(PairRecord::from).collect::<Vec<_>>())?
    };
    emit(out.as_deref(), &text)
}

fn vocab(cfg: &RunConfig, inputs: &[PathBuf], corpora: &[PathBuf], tweets: &[PathBuf], out: Option<PathBuf>) -> Result<()> {
    let mut texts = Vec::new();
    for p in inputs {
        texts.extend(prepare_pairs(&load_dialogues(p, cfg)?, &prep_options(cfg)).into_iter().map(|p| p.target_text));
    }
    for p in corpora {
        texts.extend(parse_scenes(&read(p)?).into_iter().flatten());
    }
    for p in tweets {
        texts.extend(filter_tweets(&parse_tweet_file(&read(p)?)).into_iter().map(|t| t.text));
    }
    let policy = if cfg.prep.personality_tokens { SpeakerTokenPolicy::default() } else { SpeakerTokenPolicy::empty() };
    let v = build_vocab(&texts, cfg.vocab_min_freq, cfg.vocab_cap, cfg.prep.lowercase, &policy)?;
    log::info!("vocabulary of {} tokens from {} lines", v.len(), texts.len());
    emit(out.as_deref(), &v.to_file_contents())
}

fn pretrain_corpus(cfg: &RunConfig, corpus: Option<PathBuf>, vocab: &Path, run: &RunOpts, metrics: Option<PathBuf>) -> Result<()> {
    let path = input_or(corpus, &cfg.paths.pretrain_corpus, "paths.pretrain_corpus")?;
    let scenes = parse_scenes(&read(&path)?);
    let vocab = load_vocab(vocab, cfg)?;
    let out = checkpoint_path(run, cfg, "pretrain.cek")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = base_model(run, &vocab, cfg, &mut rng)?;
    if run.dry_run {
        println!(
            "dry run: {} scenes, {} examples, vocabulary {}, {} epochs; would write {}",
            scenes.len(),
            cfg.pretrain_examples,
            vocab.len(),
            cfg.train.n_epochs,
            out.display()
        );
        return Ok(());
    }
    let pc = PretrainConfig { train: cfg.train, n_examples: cfg.pretrain_examples, mlm: cfg.mlm };
    let outcome = pretrain_mlm_nsp(model, &scenes, &vocab, &pc, &mut rng)?;
    for h in &outcome.history {
        println!("epoch {}: loss {:.6} (mlm {:.6}, nsp {:.6})", h.epoch, h.train_loss, h.mlm_loss, h.nsp_loss);
    }
    save(&out, &outcome.model, Some(&outcome.heads), &vocab, cfg, "pretrain-mlm-nsp")?;
    if let Some(m) = metrics {
        write(&m, jsonl(&outcome.history)?.as_bytes())?;
    }
    Ok(())
}

fn pretrain_tweets(cfg: &RunConfig, tweets: Option<PathBuf>, vocab: &Path, run: &RunOpts) -> Result<()> {
    let path = input_or(tweets, &cfg.paths.tweets, "paths.tweets")?;
    let raw = parse_tweet_file(&read(&path)?);
    let kept = filter_tweets(&raw);
    let vocab = load_vocab(vocab, cfg)?;
    let out = checkpoint_path(run, cfg, "tweets.cek")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = base_model(run, &vocab, cfg, &mut rng)?;
    if run.dry_run {
        println!("dry run: {} of {} tweets kept, vocabulary {}; would write {}", kept.len(), raw.len(), vocab.len(), out.display());
        return Ok(());
    }
    let (model, losses) = pretrain_emotion_hashtags(model, &kept, &vocab, &cfg.train, EmotionLabel::EVAL.len())?;
    println!("{} of {} tweets kept", kept.len(), raw.len());
    for (i, l) in losses.iter().enumerate() {
        println!("epoch {}: loss {l:.6}", i + 1);
    }
    save(&out, &model, None, &vocab, cfg, "pretrain-tweets")
}

fn train(cfg: &RunConfig, input: Option<PathBuf>, vocab: &Path, run: &RunOpts, metrics: Option<PathBuf>) -> Result<()> {
    let path = input_or(input, &cfg.paths.train, "paths.train")?;
    let ds = load_dialogues(&path, cfg)?;
    let (train_ds, val_ds) = split_train_val(&ds, cfg.n_train.min(ds.len()))?;
    let (train_pairs, val_pairs) = (eval_pairs(&train_ds, cfg), eval_pairs(&val_ds, cfg));
    let vocab = load_vocab(vocab, cfg)?;
    let out = checkpoint_path(run, cfg, "model.cek")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut model = base_model(run, &vocab, cfg, &mut rng)?;
    let labels = EmotionLabel::EVAL;
    if model.config.n_labels != labels.len() {
        model.params.reset_head(labels.len(), 0.02, &mut rng);
        model.config.n_labels = labels.len();
    }
    let train_enc = encode_all(&train_pairs, &vocab, model.config.max_len)?;
    let val_enc = encode_all(&val_pairs, &vocab, model.config.max_len)?;
    if run.dry_run {
        println!(
            "dry run: {} train pairs from {} dialogues, {} validation pairs from {}, vocabulary {}; would write {}",
            train_enc.len(),
            train_ds.len(),
            val_enc.len(),
            val_ds.len(),
            vocab.len(),
            out.display()
        );
        return Ok(());
    }
    let weights = match class_weights(&counts_for(&label_distribution(&train_pairs), &labels)) {
        Ok(w) => Some(w),
        Err(e) if cfg.train.warm_first_epoch => {
            log::warn!("no weighted first epoch: {e}");
            None
        }
        Err(_) => None,
    };
    let outcome = train_classifier(model, &train_enc, &val_enc, &labels, &cfg.train, weights.as_ref())?;
    for h in &outcome.history {
        match h.val_micro_f1 {
            Some(f) => println!("epoch {}: loss {:.6}, val micro-F1 {f:.4}", h.epoch, h.train_loss),
            None => println!("epoch {}: loss {:.6}", h.epoch, h.train_loss),
        }
    }
    println!("kept epoch {}", outcome.best_epoch);
    save(&out, &outcome.model, None, &vocab, cfg, "finetune")?;
    if let Some(m) = metrics {
        write(&m, jsonl(&outcome.history)?.as_bytes())?;
    }
    Ok(())
}

fn classifier(path: &Path, vocab: &Vocab) -> Result<Model> {
    let model = load_checkpoint(path, vocab)?.model()?;
    if model.config.n_labels != EmotionLabel::EVAL.len() {
        return Err(dialogemo::Error::Checkpoint(format!(
            "head has {} labels, expected {}",
            model.config.n_labels,
            EmotionLabel::EVAL.len()
        ))
        .into());
    }
    Ok(model)
}

fn evaluate(
    cfg: &RunConfig,
    ckpt: &Path,
    vocab: &Path,
    input: Option<PathBuf>,
    split: Split,
    json: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let path = input_or(input, &cfg.paths.train, "paths.train")?;
    let ds = select(&load_dialogues(&path, cfg)?, split, cfg.n_train)?;
    let vocab = load_vocab(vocab, cfg)?;
    let model = classifier(ckpt, &vocab)?;
    let pairs = eval_pairs(&ds, cfg);
    let encoded = encode_all(&pairs, &vocab, model.config.max_len)?;
    let preds: Vec<EmotionLabel> = predict_all(&model, &encoded)?.into_iter().map(|i| EmotionLabel::EVAL[i]).collect();
    let golds: Vec<EmotionLabel> = pairs.iter().map(|p| p.label).collect();
    let r = report(&confusion(&preds, &golds)?)?;
    if json {
        println!("{}", r.to_json());
    } else {
        print!("{}", r.to_table());
    }
    if let Some(p) = out {
        write(&p, format!("{}\n", r.to_json()).as_bytes())?;
    }
    Ok(())
}

/// Input utterances may lack an emotion; a placeholder label keeps them
/// parseable and is never reported.
fn predict(cfg: &RunConfig, ckpt: &Path, vocab: &Path, input: &Path, out: Option<PathBuf>) -> Result<()> {
    let mut doc: serde_json::Value = serde_json::from_str(&read(input)?).with_context(|| format!("parsing {}", input.display()))?;
    let vocab = load_vocab(vocab, cfg)?;
    let model = classifier(ckpt, &vocab)?;
    let bad = |m: &str| anyhow!(dialogemo::Error::Precondition(format!("{}: {m}", input.display())));
    let dialogues = doc.as_array_mut().ok_or_else(|| bad("expected a list of dialogues"))?;
    for (di, d) in dialogues.iter_mut().enumerate() {
        let turns = d.as_array_mut().ok_or_else(|| bad(&format!("dialogue {di} is not a list")))?;
        let mut triples = Vec::with_capacity(turns.len());
        for t in turns.iter() {
            let field = |k: &str| t.get(k).and_then(|v| v.as_str()).unwrap_or("").to_string();
            triples.push((field("speaker"), field("utterance"), EmotionLabel::Neutral));
        }
        let dialogue = Dialogue::new(cfg.dataset, triples).with_context(|| format!("dialogue {di}"))?;
        let pairs = prepare_pairs(&DialogueSet::new(vec![dialogue]), &prep_options(cfg));
        let encoded = encode_all(&pairs, &vocab, model.config.max_len)?;
        for (t, i) in turns.iter_mut().zip(predict_all(&model, &encoded)?) {
            if let Some(obj) = t.as_object_mut() {
                obj.insert("prediction".into(), EmotionLabel::EVAL[i].as_str().into());
            }
        }
    }
    emit(out.as_deref(), &(serde_json::to_string_pretty(&doc)? + "\n"))
}
