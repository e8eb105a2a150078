//! The `glosslm` command line.
//!
//! Subcommands that write files take `--out DIR`, write `manifest.json`
//! there before anything else and never write outside it. Options resolve
//! as flag, then `--config` file (`key = value` lines), then built-in
//! default; the manifest records the resolved values.
//!
//! Exit status is 0 on success, 2 for usage and validation errors and 1 for
//! failures while computing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    corpus_stats, load_elan_dir, load_line_corpus, split_corpus, Corpus, CorpusStats, ExclusionSet,
    HandPolicy, TierNames, Vocabulary,
};
use crate::eval::{
    cross_lingual_eval, emit_results_matrix, evaluate, evaluate_ngram, oov_type_rate, Layout,
    PerplexityReport,
};
use crate::models::{load_checkpoint, Arch, FfnnConfig, LanguageModel, LstmConfig, CHECKPOINT_MAGIC};
use crate::ngram::{NgramModel, Smoothing};
use crate::trainer::{finetune, train, train_substituted, RunOutputs, RunResult, TrainConfig};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.glmc";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const NGRAM_FILE: &str = "ngram.json";

#[derive(Debug, Parser)]
#[command(
    name = "glosslm",
    version,
    about = "Language models for sign-language gloss corpora"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Run seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `key = value` file consulted for options not given as flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalise a corpus, split it 85:15 (held-out halved) and write statistics.
    Preprocess(PreprocessArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Continue training a checkpoint on new corpora with every weight trainable.
    Finetune(TransferArgs),
    /// Replace a checkpoint's output layer and train only that layer.
    Substitute(TransferArgs),
    /// Perplexity of a checkpoint or n-gram dump on a corpus.
    Eval(EvalArgs),
    /// Fit or evaluate an n-gram baseline.
    #[command(subcommand)]
    Ngram(NgramCommand),
    /// Corpus statistics.
    Stats(StatsArgs),
    /// Arrange saved reports into a results matrix.
    Matrix(MatrixArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Directory of tab-separated ELAN exports (`*.tsv`).
    #[arg(long, conflicts_with = "lines", required_unless_present = "lines")]
    pub elan: Option<PathBuf>,
    /// Plain corpus, one sentence per line.
    #[arg(long)]
    pub lines: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub hand_policy: Option<HandPolicy>,
    /// Tier names as `rh,lh,free`.
    #[arg(long)]
    pub tiers: Option<String>,
    /// Additional excluded gloss prefixes, comma-separated.
    #[arg(long)]
    pub exclude: Option<String>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Words seen fewer times than this map to unk.
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// LSTM layer widths, comma-separated.
    #[arg(long)]
    pub hidden_dims: Option<String>,
    #[arg(long)]
    pub tie_weights: Option<bool>,
    /// LSTM hidden-to-hidden drop probability.
    #[arg(long)]
    pub weight_drop: Option<f64>,
    /// FFNN context length.
    #[arg(long)]
    pub context_len: Option<usize>,
    /// FFNN hidden width.
    #[arg(long)]
    pub hidden_dim: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct OptArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub bptt: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub anneal_factor: Option<f64>,
    #[arg(long)]
    pub anneal_patience: Option<usize>,
    /// Gradient-norm clip, or `none`.
    #[arg(long)]
    pub clip: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub opt: OptArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    /// Source checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Expected architecture of the checkpoint.
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    /// Minimum count for the substituted output vocabulary.
    #[arg(long)]
    pub min_count: Option<usize>,
    #[command(flatten)]
    pub opt: OptArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint or n-gram dump.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Score a corpus of another language through the model's vocabulary.
    #[arg(long)]
    pub cross: bool,
    /// Report OOV over vocabulary types instead of tokens.
    #[arg(long)]
    pub oov_types: bool,
    /// Expected architecture of the checkpoint.
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    /// Model label in the report [default: file stem].
    #[arg(long)]
    pub model_id: Option<String>,
    /// Corpus label in the report [default: file stem].
    #[arg(long)]
    pub corpus_id: Option<String>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Subcommand)]
pub enum NgramCommand {
    /// Fit counts on a training corpus and dump them as JSON.
    Fit(NgramFitArgs),
    /// Perplexity of a dump on a corpus.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct NgramFitArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub order: Option<usize>,
    /// `mle`, `wb` or `add_k:<k>`.
    #[arg(long)]
    pub smoothing: Option<String>,
    #[arg(long)]
    pub min_count: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    #[arg(long, value_enum)]
    pub layout: Layout,
    /// Report JSON files written by `eval --out`.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

/// Everything needed to re-run a command, written before its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, serde_json::Value>,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<String>,
    /// Parameters updated by a training command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable: Option<Vec<String>>,
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Option resolution and bookkeeping for one command.
struct Run {
    subcommand: &'static str,
    common: Common,
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    config: BTreeMap<String, serde_json::Value>,
    inputs: Vec<InputFile>,
}

impl Run {
    fn new(subcommand: &'static str, common: &Common) -> Result<Self> {
        let mut run = Self {
            subcommand,
            common: common.clone(),
            file: BTreeMap::new(),
            used: BTreeSet::new(),
            config: BTreeMap::new(),
            inputs: Vec::new(),
        };
        if let Some(path) = &common.config {
            let text = run.read_input(path)?;
            run.file = parse_config(&text, path)?;
        }
        Ok(run)
    }

    fn pick<T: Serialize>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
        parse: impl FnOnce(&str) -> std::result::Result<T, String>,
    ) -> Result<T> {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => {
                    self.used.insert(key.to_string());
                    parse(raw).map_err(|e| Error::Config(format!("config key '{key}': {e}")))?
                }
                None => default,
            },
        };
        self.config.insert(key.to_string(), serde_json::to_value(&value)?);
        Ok(value)
    }

    fn num<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: Serialize + FromStr,
        T::Err: Display,
    {
        self.pick(key, flag, default, |s| s.parse::<T>().map_err(|e| e.to_string()))
    }

    fn choice<T: Serialize + ValueEnum>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        self.pick(key, flag, default, |s| T::from_str(s, true))
    }

    fn seed(&mut self) -> Result<u64> {
        let flag = self.common.seed;
        self.num("seed", flag, 0)
    }

    /// Rejects config keys no option consumed.
    fn check_config_keys(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .file
            .keys()
            .filter(|k| !self.used.contains(*k) && !self.config.contains_key(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown keys in config file for '{}': {}",
                self.subcommand,
                unknown.join(", ")
            )))
        }
    }

    fn read_input(&mut self, path: &Path) -> Result<String> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.record_input(path, &bytes);
        String::from_utf8(bytes).map_err(|_| Error::Validation(format!("{} is not UTF-8", path.display())))
    }

    fn record_input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(InputFile {
            path: path.display().to_string(),
            sha256: format!("{:x}", Sha256::digest(bytes)),
        });
    }

    fn hash_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.record_input(path, &bytes);
        Ok(())
    }

    fn line_corpus(&mut self, path: &Path) -> Result<Corpus> {
        self.hash_input(path)?;
        load_line_corpus(path)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        self.common
            .out
            .clone()
            .ok_or_else(|| Error::Config(format!("'{}' requires --out", self.subcommand)))
    }

    /// Creates the output directory and writes the manifest into it.
    fn start_outputs(&self, seed: u64, outputs: &[&str], trainable: Option<Vec<String>>) -> Result<PathBuf> {
        self.check_config_keys()?;
        let dir = self.out_dir()?;
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let manifest = RunManifest {
            subcommand: self.subcommand.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: self.config.clone(),
            inputs: self.inputs.clone(),
            outputs: outputs
                .iter()
                .map(|o| dir.join(o).display().to_string())
                .collect(),
            trainable,
            timestamp: timestamp()?,
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(dir)
    }
}

fn parse_config(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                file: path.display().to_string(),
                line: i + 1,
                msg: "expected 'key = value'".into(),
            });
        };
        let key = k.trim().replace('-', "_");
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Parse {
                file: path.display().to_string(),
                line: i + 1,
                msg: format!("duplicate key '{key}'"),
            });
        }
    }
    Ok(out)
}

/// `SOURCE_DATE_EPOCH` when set; runs are otherwise undated so that their
/// artifacts are reproducible.
fn timestamp() -> Result<Option<String>> {
    match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(s) => s
            .trim()
            .parse::<u64>()
            .map(|t| Some(t.to_string()))
            .map_err(|_| Error::Config(format!("SOURCE_DATE_EPOCH must be an integer, got '{s}'"))),
        Err(_) => Ok(None),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parse_dims(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("'{p}': {e}")))
        .collect()
}

fn parse_clip(s: &str) -> std::result::Result<Option<f64>, String> {
    match s.trim() {
        "none" | "off" => Ok(None),
        x => x.parse::<f64>().map(Some).map_err(|e| e.to_string()),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn configure_threads() -> Result<()> {
    if let Ok(s) = std::env::var("GLOSSLM_THREADS") {
        let n: usize =
            s.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                Error::Config(format!("GLOSSLM_THREADS must be a positive integer, got '{s}'"))
            })?;
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Train(a) => cmd_train(a),
        Command::Finetune(a) => cmd_transfer(a, false),
        Command::Substitute(a) => cmd_transfer(a, true),
        Command::Eval(a) => cmd_eval(a, "eval"),
        Command::Ngram(NgramCommand::Fit(a)) => cmd_ngram_fit(a),
        Command::Ngram(NgramCommand::Eval(a)) => cmd_eval(a, "ngram eval"),
        Command::Stats(a) => cmd_stats(a),
        Command::Matrix(a) => cmd_matrix(a),
    }
}

/// Parses the process arguments, runs the command and maps the outcome to
/// an exit status.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}

#[derive(Serialize)]
struct PreprocessSummary {
    split_seed: u64,
    corpus: CorpusStats,
    train: CorpusStats,
    valid: CorpusStats,
    test: CorpusStats,
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    let mut run = Run::new("preprocess", &a.common)?;
    let seed = run.seed()?;
    let corpus = match (&a.elan, &a.lines) {
        (Some(dir), _) => {
            let policy = run.choice("hand_policy", a.hand_policy, HandPolicy::RhOnly)?;
            let tiers = run.pick(
                "tiers",
                a.tiers.clone(),
                "RH-IDgloss,LH-IDgloss,Free Translation".into(),
                |s| Ok(s.to_string()),
            )?;
            let tiers = TierNames::parse_list(&tiers)?;
            let extra = run.pick("exclude", a.exclude.clone(), String::new(), |s| Ok(s.to_string()))?;
            let mut exclude = ExclusionSet::default();
            for p in extra.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                exclude.insert(p);
            }
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
                .collect();
            files.sort();
            for f in &files {
                run.hash_input(f)?;
            }
            load_elan_dir(dir, &tiers, policy, &exclude)?
        }
        (None, Some(path)) => run.line_corpus(path)?,
        (None, None) => return Err(Error::Config("one of --elan or --lines is required".into())),
    };
    let split = split_corpus(&corpus, seed)?;
    let summary = PreprocessSummary {
        split_seed: seed,
        corpus: corpus_stats(&corpus)?,
        train: corpus_stats(&split.train)?,
        valid: corpus_stats(&split.valid)?,
        test: corpus_stats(&split.test)?,
    };

    let names = ["corpus.txt", "train.txt", "valid.txt", "test.txt", "stats.json"];
    let dir = run.start_outputs(seed, &names, None)?;
    for (name, c) in names
        .iter()
        .zip([&corpus, &split.train, &split.valid, &split.test])
    {
        c.write(dir.join(name))?;
    }
    write_json(&dir.join("stats.json"), &summary)?;

    if a.common.json {
        print_json(&summary)
    } else {
        println!(
            "{:<8} {:>9} {:>8} {:>6} {:>6} {:>6} {:>7}",
            "split", "sentences", "mean", "min", "max", "vocab", "tokens"
        );
        for (name, s) in [
            ("corpus", &summary.corpus),
            ("train", &summary.train),
            ("valid", &summary.valid),
            ("test", &summary.test),
        ] {
            println!(
                "{:<8} {:>9} {:>8.2} {:>6} {:>6} {:>6} {:>7}",
                name, s.sentence_count, s.mean_len, s.min_len, s.max_len, s.vocab_size, s.token_count
            );
        }
        Ok(())
    }
}

fn resolve_train_config(run: &mut Run, opt: &OptArgs, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let clip_flag = opt
        .clip
        .as_deref()
        .map(parse_clip)
        .transpose()
        .map_err(Error::Config)?;
    let config = TrainConfig {
        epochs: run.num("epochs", opt.epochs, d.epochs)?,
        batch_size: run.num("batch_size", opt.batch_size, d.batch_size)?,
        bptt: run.num("bptt", opt.bptt, d.bptt)?,
        lr: run.num("lr", opt.lr, d.lr)?,
        anneal_factor: run.num("anneal_factor", opt.anneal_factor, d.anneal_factor)?,
        anneal_patience: run.num("anneal_patience", opt.anneal_patience, d.anneal_patience)?,
        clip_norm: run.pick("clip", clip_flag, d.clip_norm, parse_clip)?,
        seed,
    };
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    subcommand: &'a str,
    selection_epoch: usize,
    valid_perplexity: Option<f64>,
    epochs_run: usize,
    checkpoint: String,
}

fn finish_training(run: &Run, result: &RunResult, dir: &Path) -> Result<()> {
    let summary = TrainSummary {
        subcommand: run.subcommand,
        selection_epoch: result.selection_epoch,
        valid_perplexity: result.best_metadata.valid_perplexity,
        epochs_run: result.history.len(),
        checkpoint: dir.join(CHECKPOINT_FILE).display().to_string(),
    };
    if run.common.json {
        return print_json(&summary);
    }
    println!(
        "{:>5} {:>10} {:>10} {:>9}",
        "epoch", "train ppl", "valid ppl", "lr"
    );
    for h in &result.history {
        println!(
            "{:>5} {:>10.3} {:>10.3} {:>9.4}",
            h.epoch,
            h.train_cross_entropy.exp(),
            h.valid_perplexity,
            h.lr
        );
    }
    println!(
        "best epoch {} (valid perplexity {}), saved to {}",
        summary.selection_epoch,
        summary
            .valid_perplexity
            .map_or("n/a".into(), |p| format!("{p:.3}")),
        summary.checkpoint
    );
    Ok(())
}

fn trainable_names(model: &LanguageModel) -> Vec<String> {
    model
        .params()
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut run = Run::new("train", &a.common)?;
    let seed = run.seed()?;
    let arch = run.choice("arch", a.arch, Arch::Lstm)?;
    let min_count = run.num("min_count", a.model.min_count, 1usize)?;
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    let m = &a.model;
    let (lstm, ffnn) = match arch {
        Arch::Lstm => {
            let d = LstmConfig::new(0);
            let cfg = LstmConfig {
                vocab_size: 0,
                embed_dim: run.num("embed_dim", m.embed_dim, d.embed_dim)?,
                hidden_dims: run.pick(
                    "hidden_dims",
                    m.hidden_dims
                        .as_deref()
                        .map(parse_dims)
                        .transpose()
                        .map_err(Error::Config)?,
                    d.hidden_dims,
                    parse_dims,
                )?,
                tie_weights: run.num("tie_weights", m.tie_weights, d.tie_weights)?,
                weight_drop_p: run.num("weight_drop", m.weight_drop, d.weight_drop_p)?,
                output_size: None,
            };
            (Some(cfg), None)
        }
        Arch::Ffnn => {
            let d = FfnnConfig::new(0);
            let cfg = FfnnConfig {
                vocab_size: 0,
                context_len: run.num("context_len", m.context_len, d.context_len)?,
                embed_dim: run.num("embed_dim", m.embed_dim, d.embed_dim)?,
                hidden_dim: run.num("hidden_dim", m.hidden_dim, d.hidden_dim)?,
                output_size: None,
            };
            (None, Some(cfg))
        }
    };
    let lstm_only = ["hidden_dims", "tie_weights", "weight_drop"];
    let ffnn_only = ["context_len", "hidden_dim"];
    let foreign = match arch {
        Arch::Lstm => (&ffnn_only[..], m.context_len.is_some() || m.hidden_dim.is_some()),
        Arch::Ffnn => (
            &lstm_only[..],
            m.hidden_dims.is_some() || m.tie_weights.is_some() || m.weight_drop.is_some(),
        ),
    };
    if foreign.1 || foreign.0.iter().any(|k| run.file.contains_key(*k)) {
        return Err(Error::Config(format!(
            "options {} do not apply to --arch {arch}",
            foreign.0.join(", ")
        )));
    }
    let config = resolve_train_config(&mut run, &a.opt, seed)?;

    let train_c = run.line_corpus(&a.train)?;
    let valid_c = run.line_corpus(&a.valid)?;
    let vocab = Vocabulary::build(&train_c, min_count);
    let model = match (lstm, ffnn) {
        (Some(cfg), _) => LanguageModel::lstm(cfg, vocab, seed)?,
        (_, Some(cfg)) => LanguageModel::ffnn(cfg, vocab, seed)?,
        _ => unreachable!(),
    };

    let dir = run.start_outputs(
        seed,
        &[CHECKPOINT_FILE, HISTORY_FILE],
        Some(trainable_names(&model)),
    )?;
    let outputs = RunOutputs {
        checkpoint: Some(dir.join(CHECKPOINT_FILE)),
        history: Some(dir.join(HISTORY_FILE)),
    };
    let result = train(model, &train_c, &valid_c, &config, &outputs)?;
    finish_training(&run, &result, &dir)
}

fn load_model_checked(run: &mut Run, path: &Path, expected: Option<Arch>) -> Result<(LanguageModel, u64)> {
    run.hash_input(path)?;
    let ck = load_checkpoint(path)?;
    let arch = ck.model.arch();
    let want = run.choice("arch", expected, arch)?;
    if want != arch {
        return Err(Error::Config(format!(
            "--arch {want} does not match the {arch} checkpoint {}",
            path.display()
        )));
    }
    Ok((ck.model, ck.metadata.seed))
}

fn cmd_transfer(a: TransferArgs, substitute: bool) -> Result<()> {
    let name = if substitute { "substitute" } else { "finetune" };
    let mut run = Run::new(name, &a.common)?;
    let seed = run.seed()?;
    let (source, _) = load_model_checked(&mut run, &a.checkpoint, a.arch)?;
    let min_count = if substitute {
        let m = run.num("min_count", a.min_count, 1usize)?;
        if m == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        Some(m)
    } else if a.min_count.is_some() {
        return Err(Error::Config(
            "--min-count applies only to substitute; finetune keeps the source vocabulary".into(),
        ));
    } else {
        None
    };
    let config = resolve_train_config(&mut run, &a.opt, seed)?;
    let train_c = run.line_corpus(&a.train)?;
    let valid_c = run.line_corpus(&a.valid)?;

    let target_vocab = min_count.map(|m| Vocabulary::build(&train_c, m));
    let trainable = match &target_vocab {
        Some(v) => trainable_names(&source.substitute_output_layer(v, 0)?),
        None => source.params().iter().map(|p| p.name.clone()).collect(),
    };
    let dir = run.start_outputs(seed, &[CHECKPOINT_FILE, HISTORY_FILE], Some(trainable))?;
    let outputs = RunOutputs {
        checkpoint: Some(dir.join(CHECKPOINT_FILE)),
        history: Some(dir.join(HISTORY_FILE)),
    };
    let result = match &target_vocab {
        Some(v) => train_substituted(&source, v, &train_c, &valid_c, &config, &outputs)?,
        None => finetune(source, &train_c, &valid_c, &config, &outputs)?,
    };
    finish_training(&run, &result, &dir)
}

fn is_checkpoint(path: &Path) -> Result<bool> {
    use std::io::Read;
    let mut head = [0u8; 4];
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(f.read(&mut head).map_err(|e| Error::io(path, e))? == 4 && &head == CHECKPOINT_MAGIC)
}

fn cmd_eval(a: EvalArgs, name: &'static str) -> Result<()> {
    let mut run = Run::new(name, &a.common)?;
    let model_id = a.model_id.clone().unwrap_or_else(|| stem(&a.model));
    let mut corpus = run.line_corpus(&a.corpus)?;
    if let Some(id) = &a.corpus_id {
        corpus.name = id.clone();
    }
    let mut report = if is_checkpoint(&a.model)? {
        if name == "ngram eval" {
            return Err(Error::Config(format!(
                "{} is a neural checkpoint; use 'eval'",
                a.model.display()
            )));
        }
        let (model, seed) = load_model_checked(&mut run, &a.model, a.arch)?;
        let r = if a.cross {
            cross_lingual_eval(&model, &corpus, &model_id)?
        } else {
            evaluate(&model, &corpus, &model_id)?
        };
        if a.oov_types {
            PerplexityReport {
                oov_rate: oov_type_rate(&corpus, model.input_vocab())?,
                ..r
            }
            .with_seed(seed)
        } else {
            r.with_seed(seed)
        }
    } else {
        if a.arch.is_some() {
            return Err(Error::Config(format!(
                "--arch given but {} is not a neural checkpoint",
                a.model.display()
            )));
        }
        let text = run.read_input(&a.model)?;
        let ng = NgramModel::from_json(serde_json::from_str(&text)?)?;
        let r = evaluate_ngram(&ng, &corpus, &model_id)?;
        if a.oov_types {
            PerplexityReport {
                oov_rate: oov_type_rate(&corpus, ng.vocab())?,
                ..r
            }
        } else {
            r
        }
    };
    run.config.insert("cross".into(), a.cross.into());
    run.config.insert("oov_types".into(), a.oov_types.into());
    report = report.with_timestamp(timestamp()?);

    if a.common.out.is_some() {
        let dir = run.start_outputs(report.seed.unwrap_or(0), &[REPORT_FILE], None)?;
        write_json(&dir.join(REPORT_FILE), &report)?;
    } else {
        run.check_config_keys()?;
    }
    if a.common.json {
        print_json(&report)
    } else {
        println!("{}", PerplexityReport::table_header());
        println!("{}", report.table_line());
        Ok(())
    }
}

fn cmd_ngram_fit(a: NgramFitArgs) -> Result<()> {
    let mut run = Run::new("ngram fit", &a.common)?;
    let seed = run.seed()?;
    let order = run.num("order", a.order, 3usize)?;
    let smoothing = run.pick(
        "smoothing",
        a.smoothing.as_deref().map(Smoothing::parse).transpose()?,
        Smoothing::WittenBell,
        |s| Smoothing::parse(s).map_err(|e| e.to_string()),
    )?;
    let min_count = run.num("min_count", a.min_count, 1usize)?;
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    let corpus = run.line_corpus(&a.train)?;
    let vocab = Vocabulary::build(&corpus, min_count);
    let model = NgramModel::fit(&corpus, &vocab, order, smoothing)?;
    let dir = run.start_outputs(seed, &[NGRAM_FILE], None)?;
    model.save(&dir.join(NGRAM_FILE))?;
    #[derive(Serialize)]
    struct Summary {
        order: usize,
        smoothing: String,
        vocab_size: usize,
        tokens: u64,
    }
    let s = Summary {
        order,
        smoothing: smoothing.to_string(),
        vocab_size: vocab.len(),
        tokens: model.context_total(&[]),
    };
    if a.common.json {
        print_json(&s)
    } else {
        println!(
            "order {} {} n-gram over {} words ({} tokens), saved to {}",
            s.order,
            s.smoothing,
            s.vocab_size,
            s.tokens,
            dir.join(NGRAM_FILE).display()
        );
        Ok(())
    }
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let mut run = Run::new("stats", &a.common)?;
    let corpus = run.line_corpus(&a.corpus)?;
    let stats = corpus_stats(&corpus)?;
    if a.common.out.is_some() {
        let dir = run.start_outputs(0, &["stats.json"], None)?;
        write_json(&dir.join("stats.json"), &stats)?;
    } else {
        run.check_config_keys()?;
    }
    if a.common.json {
        print_json(&stats)
    } else {
        println!(
            "{}: {} sentences, mean length {:.2}, min {}, max {}, vocabulary {}, tokens {}",
            corpus.name,
            stats.sentence_count,
            stats.mean_len,
            stats.min_len,
            stats.max_len,
            stats.vocab_size,
            stats.token_count
        );
        Ok(())
    }
}

fn cmd_matrix(a: MatrixArgs) -> Result<()> {
    let mut run = Run::new("matrix", &a.common)?;
    run.config
        .insert("layout".into(), serde_json::to_value(a.layout)?);
    let mut reports = Vec::with_capacity(a.reports.len());
    for p in &a.reports {
        let text = run.read_input(p)?;
        reports.push(serde_json::from_str::<PerplexityReport>(&text)?);
    }
    let matrix = emit_results_matrix(&reports, a.layout)?;
    let text = matrix.render_text();
    if a.common.out.is_some() {
        let dir = run.start_outputs(0, &["matrix.json", "matrix.txt"], None)?;
        let mut json = matrix.to_json();
        json.push('\n');
        std::fs::write(dir.join("matrix.json"), json).map_err(|e| Error::io(dir.join("matrix.json"), e))?;
        std::fs::write(dir.join("matrix.txt"), &text).map_err(|e| Error::io(dir.join("matrix.txt"), e))?;
    } else {
        run.check_config_keys()?;
    }
    if a.common.json {
        println!("{}", matrix.to_json());
    } else {
        print!("{text}");
    }
    Ok(())
}
