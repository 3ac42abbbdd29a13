//! Command-line front end.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{build_vocab, corpus_stats, load_corpus, Document, Vocabulary};
use crate::encoder::EncoderConfig;
use crate::eval::{self, DEFAULT_GATE_THRESHOLD};
use crate::gradsuite;
use crate::numerics::GradCheckConfig;
use crate::training::{self, load_bundle, save_bundle, ModelSpec, TrainConfig, TrainTask, BUNDLE_VERSION};

pub const DATA_DIR_ENV: &str = "DOCREL_DATA_DIR";

#[derive(Parser, Debug)]
#[command(name = "docrel", version, about = "Document-level relation extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print corpus statistics.
    Stats {
        corpus: PathBuf,
        /// Also write the statistics as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Build a vocabulary file from a corpus.
    Vocab {
        corpus: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a gate, relation or joint model.
    Train(TrainArgs),
    /// Write predictions for a corpus.
    Predict(PredictArgs),
    /// Score a prediction file against a gold corpus.
    Eval {
        predictions: PathBuf,
        gold: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Relation bundle for step-2 accuracy on the gold pairs.
        #[arg(long, requires = "vocab")]
        relation: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        fixture: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct DocSlice {
    /// Skip this many documents.
    #[arg(long, default_value_t = 0)]
    offset: usize,
    /// Use at most this many documents.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long = "train")]
    train_corpus: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Flat JSON config file with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Metric history file (defaults to `<out>.history.jsonl`).
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    slice: DocSlice,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long)]
    docs: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, required_if_eq("mode", "pipeline"))]
    gate: Option<PathBuf>,
    #[arg(long, required_if_eq("mode", "pipeline"))]
    relation: Option<PathBuf>,
    #[arg(long, required_if_eq("mode", "joint"))]
    joint: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_GATE_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    slice: DocSlice,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Gate,
    Relation,
    Joint,
}

impl From<TaskArg> for TrainTask {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Gate => TrainTask::Gate,
            TaskArg::Relation => TrainTask::Relation,
            TaskArg::Joint => TrainTask::Joint,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum ModeArg {
    Pipeline,
    Joint,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

/// Every configurable field, before flattening to dotted keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub encoder: EncoderSettings,
    pub head: HeadSettings,
}

/// Encoder fields a user may set; `vocab_size` follows the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSettings {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub mode: crate::encoder::BaseEncoder,
    pub sentence_scoped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSettings {
    pub d_low: usize,
    pub use_bias: bool,
}

impl RunConfig {
    pub fn desk(task: TrainTask) -> Self {
        let e = EncoderConfig::desk(2);
        RunConfig {
            train: TrainConfig::new(task),
            encoder: EncoderSettings {
                d_model: e.d_model,
                n_layers: e.n_layers,
                n_heads: e.n_heads,
                d_ff: e.d_ff,
                max_len: e.max_len,
                dropout: e.dropout,
                mode: e.mode,
                sentence_scoped: e.sentence_scoped,
            },
            head: HeadSettings {
                d_low: 128,
                use_bias: true,
            },
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let e = &self.encoder;
        ModelSpec {
            encoder: EncoderConfig {
                vocab_size: 0,
                d_model: e.d_model,
                n_layers: e.n_layers,
                n_heads: e.n_heads,
                d_ff: e.d_ff,
                max_len: e.max_len,
                dropout: e.dropout,
                mode: e.mode,
                sentence_scoped: e.sentence_scoped,
            },
            d_low: self.head.d_low,
            use_bias: self.head.use_bias,
        }
    }

    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        if let Value::Object(sections) = serde_json::to_value(self).expect("config serializes") {
            for (section, fields) in sections {
                if let Value::Object(fields) = fields {
                    for (k, v) in fields {
                        out.insert(format!("{section}.{k}"), v);
                    }
                }
            }
        }
        out
    }

    pub fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self, String> {
        let mut root = Map::new();
        for (key, v) in flat {
            let (section, field) = key
                .split_once('.')
                .ok_or_else(|| format!("config key `{key}` has no section"))?;
            let entry = root
                .entry(section.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            if let Value::Object(m) = entry {
                m.insert(field.to_string(), v.clone());
            }
        }
        serde_json::from_value(Value::Object(root)).map_err(|e| format!("invalid config: {e}"))
    }

    /// Applies file values and then `key=value` overrides on top of `self`.
    /// Unknown keys are rejected; override values are parsed as JSON and
    /// fall back to plain strings.
    pub fn merged(&self, file: Option<&str>, overrides: &[String]) -> Result<Self, String> {
        let mut flat = self.to_flat();
        let mut set = |key: &str, value: Value| {
            if !flat.contains_key(key) {
                let known: Vec<&str> = flat.keys().map(String::as_str).collect();
                return Err(format!("unknown config key `{key}` (known: {})", known.join(", ")));
            }
            flat.insert(key.to_string(), value);
            Ok(())
        };
        if let Some(text) = file {
            let values: BTreeMap<String, Value> =
                serde_json::from_str(text).map_err(|e| format!("config file is not a flat JSON object: {e}"))?;
            for (k, v) in values {
                set(&k, v)?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| format!("override `{o}` is not KEY=VALUE"))?;
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            set(k.trim(), value)?;
        }
        Self::from_flat(&flat)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'static str,
    bundle_version: u32,
    seed: Option<u64>,
    config: BTreeMap<String, Value>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn hashes(paths: &[&Path]) -> anyhow::Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

fn write_manifest(
    artifact: &Path,
    command: &str,
    seed: Option<u64>,
    config: BTreeMap<String, Value>,
    inputs: &[&Path],
    outputs: &[&Path],
) -> anyhow::Result<()> {
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        bundle_version: BUNDLE_VERSION,
        seed,
        config,
        inputs: hashes(inputs)?,
        outputs: hashes(outputs)?,
    };
    // round trip through Value so keys come out sorted
    let value = serde_json::to_value(&m)?;
    let path = manifest_path(artifact);
    fs::write(&path, serde_json::to_string_pretty(&value)? + "\n")
        .with_context(|| format!("cannot write {}", path.display()))
}

/// Relative paths that do not exist are looked up under `$DOCREL_DATA_DIR`.
pub fn resolve_corpus(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(root) = std::env::var_os(DATA_DIR_ENV) {
            let candidate = Path::new(&root).join(path);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

fn load_docs(path: &Path, slice: Option<&DocSlice>) -> anyhow::Result<(PathBuf, Vec<Document>)> {
    let resolved = resolve_corpus(path);
    let mut docs = load_corpus(&resolved).with_context(|| format!("loading corpus {}", resolved.display()))?;
    if let Some(s) = slice {
        let start = s.offset.min(docs.len());
        let end = s.limit.map_or(docs.len(), |l| (start + l).min(docs.len()));
        docs = docs[start..end].to_vec();
    }
    Ok((resolved, docs))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code: 0 on success, 2 for usage errors, 1 for runtime failures.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
        Err(CliError::Runtime(e)) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Stats { corpus, json } => {
            let (resolved, docs) = load_docs(&corpus, None)?;
            let stats = corpus_stats(&docs);
            writeln!(out, "{}\n{stats}", resolved.display()).map_err(anyhow::Error::from)?;
            if let Some(path) = json {
                let value = serde_json::to_value(&stats).map_err(anyhow::Error::from)?;
                write_text(&path, &(serde_json::to_string_pretty(&value).map_err(anyhow::Error::from)? + "\n"))?;
                write_manifest(&path, "stats", None, BTreeMap::new(), &[&resolved], &[&path])?;
            }
            Ok(())
        }
        Command::Vocab { corpus, min_count, out: path } => {
            let (resolved, docs) = load_docs(&corpus, None)?;
            let vocab = build_vocab(&docs, min_count).map_err(anyhow::Error::from)?;
            vocab.save(&path).map_err(anyhow::Error::from)?;
            let config = BTreeMap::from([("vocab.min_count".to_string(), Value::from(min_count))]);
            write_manifest(&path, "vocab", None, config, &[&resolved], &[&path])?;
            writeln!(out, "{} tokens -> {}", vocab.len(), path.display()).map_err(anyhow::Error::from)?;
            Ok(())
        }
        Command::Train(args) => train_cmd(args, out, err),
        Command::Predict(args) => predict_cmd(args, out),
        Command::Eval {
            predictions,
            gold,
            json,
            relation,
            vocab,
        } => {
            let preds = eval::read_predictions(&predictions).map_err(anyhow::Error::from)?;
            let (resolved, docs) = load_docs(&gold, None)?;
            let mut report = eval::micro_f1(&preds, &docs).map_err(anyhow::Error::from)?;
            if let (Some(bundle), Some(vocab)) = (relation, vocab) {
                let vocab = Vocabulary::load(&vocab).map_err(anyhow::Error::from)?;
                let bundle = load_bundle(&bundle, Some(&vocab)).map_err(anyhow::Error::from)?;
                report.step2_accuracy = eval::step2_accuracy(&bundle, &docs, &vocab).map_err(anyhow::Error::from)?;
            }
            write!(out, "{report}").map_err(anyhow::Error::from)?;
            writeln!(out, "{}", report.to_json()).map_err(anyhow::Error::from)?;
            if let Some(path) = json {
                write_text(&path, &(report.to_json() + "\n"))?;
                write_manifest(&path, "eval", None, BTreeMap::new(), &[&predictions, &resolved], &[&path])?;
            }
            Ok(())
        }
        Command::Gradcheck { fixture, seed } => {
            let config = GradCheckConfig {
                seed,
                ..GradCheckConfig::default()
            };
            let names: Vec<&str> = match &fixture {
                Some(name) if gradsuite::FIXTURES.contains(&name.as_str()) => vec![name.as_str()],
                Some(name) => {
                    return Err(CliError::Usage(format!(
                        "unknown fixture `{name}` (known: {})",
                        gradsuite::FIXTURES.join(", ")
                    )))
                }
                None => gradsuite::FIXTURES.to_vec(),
            };
            let mut failed = Vec::new();
            for name in names {
                let report = gradsuite::run_fixture(name, config).expect("known fixture");
                match report {
                    Ok(r) => {
                        let verdict = if r.passed() { "pass" } else { "FAIL" };
                        writeln!(out, "{name}: {verdict} (max rel err {:.3e})\n{r}", r.max_rel_err())
                            .map_err(anyhow::Error::from)?;
                        if !r.passed() {
                            failed.push(name);
                        }
                    }
                    Err(e) => {
                        writeln!(out, "{name}: ERROR {e}").map_err(anyhow::Error::from)?;
                        failed.push(name);
                    }
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(anyhow!("gradient check failed for {}", failed.join(", ")).into())
            }
        }
    }
}

fn train_cmd(args: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let task = TrainTask::from(args.task);
    let file = match &args.config {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?),
        None => None,
    };
    let mut config = RunConfig::desk(task)
        .merged(file.as_deref(), &args.overrides)
        .map_err(CliError::Usage)?;
    config.train.task = task;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    let vocab = Vocabulary::load(&args.vocab).map_err(anyhow::Error::from)?;
    let (train_path, docs) = load_docs(&args.train_corpus, Some(&args.slice))?;
    let (dev_path, dev) = match &args.dev {
        Some(p) => {
            let (path, docs) = load_docs(p, None)?;
            (Some(path), docs)
        }
        None => (None, Vec::new()),
    };
    let quiet = args.quiet;
    let bundle = training::train_with(&docs, &dev, &vocab, &config.model_spec(), &config.train, |r| {
        if !quiet {
            let dev = r.dev_metric.map_or(String::new(), |m| format!("  dev {m:.4}"));
            let _ = writeln!(err, "epoch {:>3}  loss {:.5}{dev}", r.epoch, r.loss);
        }
    })
    .map_err(anyhow::Error::from)?;
    save_bundle(&bundle, &args.out).map_err(anyhow::Error::from)?;
    let history = args.history.unwrap_or_else(|| {
        let mut name = args.out.file_name().unwrap_or_default().to_os_string();
        name.push(".history.jsonl");
        args.out.with_file_name(name)
    });
    let lines: String = bundle
        .meta
        .history
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect();
    write_text(&history, &lines)?;
    let mut inputs: Vec<&Path> = vec![&train_path, &args.vocab];
    if let Some(p) = &dev_path {
        inputs.push(p);
    }
    if let Some(p) = &args.config {
        inputs.push(p);
    }
    let mut flat = config.to_flat();
    flat.insert("data.offset".into(), Value::from(args.slice.offset));
    flat.insert("data.limit".into(), serde_json::to_value(args.slice.limit).expect("option serializes"));
    write_manifest(&args.out, "train", Some(config.train.seed), flat, &inputs, &[&args.out, &history])?;
    writeln!(
        out,
        "{} bundle -> {} ({} epochs, {} steps{})",
        task,
        args.out.display(),
        bundle.meta.epochs_run,
        bundle.meta.steps,
        bundle
            .meta
            .best_dev
            .map_or(String::new(), |m| format!(", best dev {m:.4}"))
    )
    .map_err(anyhow::Error::from)?;
    Ok(())
}

fn predict_cmd(args: PredictArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let vocab = Vocabulary::load(&args.vocab).map_err(anyhow::Error::from)?;
    let (docs_path, docs) = load_docs(&args.docs, Some(&args.slice))?;
    let mut inputs: Vec<&Path> = vec![&docs_path, &args.vocab];
    let mut config = BTreeMap::new();
    config.insert("data.offset".to_string(), Value::from(args.slice.offset));
    config.insert("data.limit".to_string(), serde_json::to_value(args.slice.limit).expect("option serializes"));
    let records = match args.mode {
        ModeArg::Pipeline => {
            let (g, r) = (args.gate.as_ref().unwrap(), args.relation.as_ref().unwrap());
            let gate = load_bundle(g, Some(&vocab)).map_err(anyhow::Error::from)?;
            let relation = load_bundle(r, Some(&vocab)).map_err(anyhow::Error::from)?;
            inputs.extend([g.as_path(), r.as_path()]);
            config.insert("predict.mode".into(), Value::from("pipeline"));
            config.insert("predict.threshold".into(), Value::from(args.threshold));
            eval::pipeline_predict(&gate, &relation, &docs, &vocab, args.threshold).map_err(anyhow::Error::from)?
        }
        ModeArg::Joint => {
            let j = args.joint.as_ref().unwrap();
            let joint = load_bundle(j, Some(&vocab)).map_err(anyhow::Error::from)?;
            inputs.push(j.as_path());
            config.insert("predict.mode".into(), Value::from("joint"));
            eval::joint_predict(&joint, &docs, &vocab).map_err(anyhow::Error::from)?
        }
    };
    eval::write_predictions(&records, &args.out).map_err(anyhow::Error::from)?;
    write_manifest(&args.out, "predict", None, config, &inputs, &[&args.out])?;
    writeln!(out, "{} predictions -> {}", records.len(), args.out.display()).map_err(anyhow::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_config_round_trip() {
        let c = RunConfig::desk(TrainTask::Gate);
        let flat = c.to_flat();
        assert!(flat.contains_key("train.lr"));
        assert!(flat.contains_key("encoder.sentence_scoped"));
        assert!(flat.contains_key("head.d_low"));
        assert!(!flat.contains_key("encoder.vocab_size"));
        assert_eq!(RunConfig::from_flat(&flat).unwrap(), c);
    }

    #[test]
    fn overrides_win_over_file() {
        let c = RunConfig::desk(TrainTask::Joint);
        let file = r#"{"train.epochs": 7, "encoder.n_layers": 1}"#;
        let merged = c
            .merged(Some(file), &["train.epochs=9".into(), "encoder.mode=mean".into()])
            .unwrap();
        assert_eq!(merged.train.epochs, 9);
        assert_eq!(merged.encoder.n_layers, 1);
        assert_eq!(merged.encoder.mode, crate::encoder::BaseEncoder::Mean);
        assert_eq!(merged.train.patience, None);
        let patience = c.merged(None, &["train.patience=3".into()]).unwrap();
        assert_eq!(patience.train.patience, Some(3));
    }

    #[test]
    fn bad_config_rejected() {
        let c = RunConfig::desk(TrainTask::Gate);
        assert!(c.merged(None, &["train.nope=1".into()]).unwrap_err().contains("unknown config key"));
        assert!(c.merged(None, &["encoder.vocab_size=10".into()]).is_err());
        assert!(c.merged(None, &["train.epochs".into()]).is_err());
        assert!(c.merged(None, &["train.epochs=many".into()]).is_err());
        assert!(c.merged(Some("[1, 2]"), &[]).is_err());
    }

    #[test]
    fn exit_codes() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run(["docrel", "frobnicate"], &mut out, &mut err), 2);
        assert_eq!(run(["docrel", "stats"], &mut out, &mut err), 2);
        assert_eq!(run(["docrel", "--help"], &mut out, &mut err), 0);
        assert_eq!(run(["docrel", "stats", "/definitely/missing.json"], &mut out, &mut err), 1);
        assert_eq!(run(["docrel", "gradcheck", "--fixture", "nope"], &mut out, &mut err), 2);
        assert_eq!(run(["docrel", "gradcheck", "--fixture", "affine"], &mut out, &mut err), 0);
    }
}
