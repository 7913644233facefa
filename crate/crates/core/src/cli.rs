//! The `pdl` command-line tool.
//!
//! One experiment is one TOML config file; flags override single keys.
//! Relative paths in `[paths]` resolve against the output directory
//! (`--out-dir`, else `PDL_OUT_DIR`, else the working directory), which is not
//! part of the config hash.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    build_vocab, generate_zipf_corpus, load_rules, save_rules_with_provenance, tokenize,
    EncodedCorpus, Rule, SynthConfig, TokenizerScheme, Vocab,
};
use crate::error::{Error, Result};
use crate::eval::{
    compare_report, evaluate, make_buckets, BucketSpec, BucketedMetrics, EvalOptions,
};
use crate::gradcheck::{self, GradcheckConfig};
use crate::io::{read_text, write_text};
use crate::model::ModelParams;
use crate::stats::{count_frequencies, FreqMode, FreqTable};
use crate::train::{train, LossKind, TrainConfig, TrainHistory};
use crate::weights::{compute_weights, WeightOptions, WeightTable, DEFAULT_EPSILON};
use crate::{Provenance, TOOL};

pub const DEFAULT_COMPARE: &str = include_str!("../configs/default-compare.toml");
pub const EFFECTIVE_CONFIG: &str = "effective-config.toml";

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_MISSING_FILE: i32 = 4;
pub const EXIT_PARSE: i32 = 5;
pub const EXIT_DATA: i32 = 6;
pub const EXIT_NUMERIC: i32 = 7;
pub const EXIT_GRADCHECK: i32 = 8;

const EXIT_CODES_HELP: &str = "\
Exit codes:
  0  success
  1  other failure
  2  usage error (bad flags)
  3  config error (invalid value or unknown key)
  4  missing or unreadable file
  5  parse error in an input file
  6  data error (inconsistent or insufficient data)
  7  numeric error (non-finite values)
  8  gradient check failed

Errors are printed to stderr as one line:
  error code=<n> kind=<kind> message=\"<json-escaped text>\"";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Raw text input for `synth`; one document per non-empty line. When
    /// unset, `synth` and `compare` generate a Zipf corpus instead.
    pub text: Option<PathBuf>,
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    pub rules: PathBuf,
    pub freq: PathBuf,
    pub weights: PathBuf,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub metrics: PathBuf,
    pub report: PathBuf,
    pub gradcheck: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            text: None,
            corpus: "corpus.txt".into(),
            vocab: "vocab.tsv".into(),
            rules: "rules.tsv".into(),
            freq: "freq.tsv".into(),
            weights: "weights.tsv".into(),
            checkpoint: "model.ckpt".into(),
            history: "history.json".into(),
            metrics: "metrics.json".into(),
            report: "report.json".into(),
            gradcheck: "gradcheck.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub scheme: TokenizerScheme,
    pub min_count: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection {
            scheme: TokenizerScheme::Whitespace,
            min_count: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdlSection {
    pub alpha: f64,
    pub epsilon: f64,
    pub mode: FreqMode,
    pub mean_normalized: bool,
    pub w_max: Option<f64>,
}

impl Default for PdlSection {
    fn default() -> Self {
        PdlSection {
            alpha: 1.0,
            epsilon: DEFAULT_EPSILON,
            mode: FreqMode::Probabilities,
            mean_normalized: true,
            w_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub context_size: usize,
    pub embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            context_size: 2,
            embed_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Share of sequences (taken from the end) held out for validation.
    pub valid_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            loss: LossKind::Pdl,
            learning_rate: 0.5,
            batch_size: 32,
            epochs: 3,
            seed: 0,
            valid_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub num_buckets: usize,
    pub num_prompts: usize,
    pub gen_len: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            num_buckets: crate::eval::DEFAULT_NUM_BUCKETS,
            num_prompts: 50,
            gen_len: 30,
        }
    }
}

/// Full description of one experiment.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsSection,
    pub tokenizer: TokenizerSection,
    pub synth: SynthConfig,
    pub pdl: PdlSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub gradcheck: GradcheckConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<RunConfig> {
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            let msg = e.message().to_string();
            if msg.contains("unknown field") {
                Error::config("config", format!("{}:{line}: {msg}", origin.display()))
            } else {
                Error::parse(origin, line, msg)
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train_config(self.train.loss).validate()?;
        self.gradcheck.validate()?;
        if self.tokenizer.min_count < 1 {
            return Err(Error::config("tokenizer.min_count", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.train.valid_fraction) {
            return Err(Error::config("train.valid_fraction", "must be in [0, 1)"));
        }
        if self.eval.num_buckets < 1 {
            return Err(Error::config("eval.num_buckets", "must be >= 1"));
        }
        if !(self.pdl.alpha >= 0.0 && self.pdl.alpha.is_finite()) {
            return Err(Error::config("pdl.alpha", "must be finite and >= 0"));
        }
        if !(self.pdl.epsilon > 0.0 && self.pdl.epsilon.is_finite()) {
            return Err(Error::config("pdl.epsilon", "must be finite and > 0"));
        }
        if let Some(w) = self.pdl.w_max {
            if w.is_nan() || w <= 0.0 {
                return Err(Error::config("pdl.w_max", "must be > 0"));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            tool: TOOL.to_string(),
            config_hash: self.hash(),
            config: serde_json::to_value(self).expect("config serializes"),
        }
    }

    pub fn train_config(&self, loss: LossKind) -> TrainConfig {
        TrainConfig {
            loss,
            alpha: self.pdl.alpha,
            epsilon: self.pdl.epsilon,
            freq_mode: self.pdl.mode,
            mean_normalized: self.pdl.mean_normalized,
            w_max: self.pdl.w_max,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            seed: self.train.seed,
            context_size: self.model.context_size,
            embed_dim: self.model.embed_dim,
            num_buckets: self.eval.num_buckets,
            weight_table_path: None,
        }
    }

    pub fn weight_options(&self) -> WeightOptions {
        WeightOptions {
            mean_normalized: self.pdl.mean_normalized,
            w_max: self.pdl.w_max,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "pdl",
    version,
    about = "Power-law decay loss: frequency-weighted cross-entropy experiments"
)]
#[command(after_help = EXIT_CODES_HELP, allow_negative_numbers = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run config (TOML). Defaults apply to missing keys.
    #[arg(long, global = true, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Bundled config; `default-compare` is the flagship CE-vs-PDL experiment.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Directory for relative paths in the config.
    #[arg(long, global = true, env = "PDL_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    /// Overrides synth.seed, train.seed and gradcheck.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write corpus, vocab and rules files (Zipf synthesis, or --text ingestion).
    Synth {
        /// Tokenize this text file instead of generating a corpus.
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Count token frequencies over the training split.
    Freq,
    /// Compute the power-law weight table from the frequency table.
    Weights,
    /// Finite-difference check of the loss and model gradients.
    Gradcheck,
    /// Train one model; writes a checkpoint and a history file.
    Train {
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
    },
    /// Evaluate the checkpoint on the validation split.
    Eval {
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
    },
    /// Train CE and PDL with the same seed and write a comparison report.
    Compare,
    /// Print the effective config.
    ShowConfig,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum LossArg {
    Ce,
    Pdl,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Ce => LossKind::Ce,
            LossArg::Pdl => LossKind::Pdl,
        }
    }
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn line(&self) -> String {
        format!(
            "error code={} kind={} message={}",
            self.code,
            self.kind,
            serde_json::to_string(&self.message).expect("string serializes")
        )
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Config { .. } => (EXIT_CONFIG, "config"),
            Error::Io { .. } => (EXIT_MISSING_FILE, "missing_file"),
            Error::Parse { .. } => (EXIT_PARSE, "parse"),
            Error::Data(_)
            | Error::EmptyCorpus
            | Error::UndefinedInformation { .. }
            | Error::InsufficientData(_) => (EXIT_DATA, "data"),
            Error::Numeric(_) => (EXIT_NUMERIC, "numeric"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

/// Resolved config plus output directory.
struct Run {
    config: RunConfig,
    out_dir: PathBuf,
    provenance: Provenance,
}

impl Run {
    fn path(&self, p: &Path) -> PathBuf {
        self.out_dir.join(p)
    }

    fn header(&self) -> String {
        self.provenance.header_fields()
    }

    fn write_json(&self, path: &Path, body: serde_json::Value) -> Result<()> {
        let mut doc = serde_json::Map::new();
        doc.insert("tool".into(), self.provenance.tool.clone().into());
        doc.insert(
            "config_hash".into(),
            self.provenance.config_hash.clone().into(),
        );
        doc.insert("config".into(), self.provenance.config.clone());
        if let serde_json::Value::Object(fields) = body {
            doc.extend(fields);
        }
        let mut text =
            serde_json::to_string_pretty(&serde_json::Value::Object(doc)).expect("json serializes");
        text.push('\n');
        write_text(path, &text)
    }

    fn write_effective_config(&self) -> Result<()> {
        let text = format!("# {}\n{}", self.header(), self.config.to_toml());
        write_text(&self.out_dir.join(EFFECTIVE_CONFIG), &text)
    }

    fn load_vocab_corpus(&self) -> Result<(Vocab, EncodedCorpus)> {
        let vocab = Vocab::load(&self.path(&self.config.paths.vocab))?;
        let corpus = EncodedCorpus::load(&self.path(&self.config.paths.corpus), vocab.len())?;
        Ok((vocab, corpus))
    }
}

pub fn load_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut config = match (&global.config, &global.preset) {
        (Some(path), _) => RunConfig::from_toml(&read_text(path)?, path)?,
        (None, Some(name)) if name == "default-compare" => {
            RunConfig::from_toml(DEFAULT_COMPARE, Path::new("<default-compare>"))?
        }
        (None, Some(name)) => {
            return Err(Error::config("preset", format!("unknown preset {name:?}")))
        }
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        config.synth.seed = seed;
        config.train.seed = seed;
        config.gradcheck.seed = seed;
    }
    if let Some(a) = global.alpha {
        config.pdl.alpha = a;
    }
    if let Some(e) = global.epsilon {
        config.pdl.epsilon = e;
    }
    if let Some(n) = global.epochs {
        config.train.epochs = n;
    }
    config.validate()?;
    Ok(config)
}

/// Splits off the last `valid_fraction` of sequences for validation.
pub fn split_corpus(
    corpus: &EncodedCorpus,
    valid_fraction: f64,
) -> Result<(EncodedCorpus, Option<EncodedCorpus>)> {
    let n = corpus.sequences.len();
    let held = if valid_fraction > 0.0 {
        ((n as f64 * valid_fraction).round() as usize).max(1)
    } else {
        0
    };
    if held >= n {
        return Err(Error::InsufficientData(format!(
            "{n} sequences leave nothing to train on with valid_fraction={valid_fraction}"
        )));
    }
    let train = EncodedCorpus::new(corpus.sequences[..n - held].to_vec(), corpus.vocab_size)?;
    let valid = if held > 0 {
        Some(EncodedCorpus::new(
            corpus.sequences[n - held..].to_vec(),
            corpus.vocab_size,
        )?)
    } else {
        None
    };
    Ok((train, valid))
}

/// Corpus from `paths.text` when set, else the Zipf generator.
fn build_corpus(config: &RunConfig) -> Result<(Vocab, EncodedCorpus, Vec<Rule>)> {
    match &config.paths.text {
        Some(path) => {
            let text = read_text(path)?;
            let docs: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            if docs.is_empty() {
                return Err(Error::InsufficientData(format!(
                    "{} has no non-empty lines",
                    path.display()
                )));
            }
            let scheme = config.tokenizer.scheme;
            let vocab = build_vocab(
                docs.iter().flat_map(|d| tokenize(d, scheme)),
                config.tokenizer.min_count,
            )?;
            let corpus = EncodedCorpus::from_texts(&vocab, &docs, scheme);
            Ok((vocab, corpus, Vec::new()))
        }
        None => {
            let s = generate_zipf_corpus(&config.synth)?;
            Ok((s.vocab, s.corpus, s.rules))
        }
    }
}

fn history_json(loss: LossKind, history: &TrainHistory) -> serde_json::Value {
    serde_json::json!({ "loss": loss, "epochs": history.epochs })
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}-{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{suffix}"),
    };
    path.with_file_name(name)
}

fn buckets_for(freq: &FreqTable, n: usize) -> Result<BucketSpec> {
    make_buckets(freq, n)
}

fn check_weight_file(table: &WeightTable, config: &RunConfig, path: &Path) -> Result<()> {
    let p = &config.pdl;
    if table.alpha != p.alpha
        || table.epsilon != p.epsilon
        || table.freq_mode != p.mode
        || table.mean_normalized != p.mean_normalized
    {
        return Err(Error::config(
            "paths.weights",
            format!(
                "{} was computed with alpha={} epsilon={} mode={} mean_normalized={}; rerun `pdl weights`",
                path.display(),
                table.alpha,
                table.epsilon,
                table.freq_mode.as_str(),
                table.mean_normalized
            ),
        ));
    }
    Ok(())
}

fn cmd_synth(run: &Run) -> Result<String> {
    let (vocab, corpus, rules) = build_corpus(&run.config)?;
    let paths = &run.config.paths;
    let h = run.header();
    vocab.save_with_provenance(&run.path(&paths.vocab), &h)?;
    corpus.save_with_provenance(&run.path(&paths.corpus), &h)?;
    save_rules_with_provenance(&rules, &run.path(&paths.rules), &h)?;
    Ok(format!(
        "synth: {} sequences, {} tokens, vocab {}, {} rules",
        corpus.sequences.len(),
        corpus.num_tokens(),
        vocab.len(),
        rules.len()
    ))
}

fn cmd_freq(run: &Run) -> Result<String> {
    let (vocab, corpus) = run.load_vocab_corpus()?;
    let (train, _) = split_corpus(&corpus, run.config.train.valid_fraction)?;
    let freq = count_frequencies(&train, vocab.len())?;
    freq.save_with_provenance(&run.path(&run.config.paths.freq), &run.header())?;
    Ok(format!(
        "freq: {} tokens over {} ids",
        freq.total(),
        freq.len()
    ))
}

fn cmd_weights(run: &Run) -> Result<String> {
    let freq = FreqTable::load(&run.path(&run.config.paths.freq))?;
    let p = &run.config.pdl;
    let table = compute_weights(
        &freq.with_mode(p.mode)?,
        p.alpha,
        p.epsilon,
        run.config.weight_options(),
    )?;
    table.save_with_provenance(&run.path(&run.config.paths.weights), &run.header())?;
    Ok(format!(
        "weights: {} entries, alpha={}",
        table.len(),
        p.alpha
    ))
}

fn cmd_gradcheck(run: &Run) -> std::result::Result<String, Failure> {
    let report = gradcheck::run(&run.config.gradcheck)?;
    run.write_json(
        &run.path(&run.config.paths.gradcheck),
        serde_json::to_value(&report).expect("report serializes"),
    )?;
    let summary = format!(
        "gradcheck: max relative error logits={:e} model={:e} tolerance={:e}",
        report.max_rel_error_logits, report.max_rel_error_model, report.tolerance
    );
    if report.passed {
        Ok(summary)
    } else {
        Err(Failure {
            code: EXIT_GRADCHECK,
            kind: "gradcheck",
            message: summary,
        })
    }
}

fn cmd_train(run: &Run, loss: LossKind) -> Result<String> {
    let (vocab, corpus) = run.load_vocab_corpus()?;
    let (train_split, valid) = split_corpus(&corpus, run.config.train.valid_fraction)?;
    let freq = FreqTable::load(&run.path(&run.config.paths.freq))?;
    let mut tc = run.config.train_config(loss);
    if loss == LossKind::Pdl {
        let path = run.path(&run.config.paths.weights);
        check_weight_file(&WeightTable::load(&path)?, &run.config, &path)?;
        tc.weight_table_path = Some(path);
    }
    if freq.len() != vocab.len() {
        return Err(Error::Data(format!(
            "frequency table size {} != vocab {}",
            freq.len(),
            vocab.len()
        )));
    }
    let (params, history) = train(&tc, &train_split, &freq, valid.as_ref())?;
    params.save_with_provenance(&run.path(&run.config.paths.checkpoint), &run.header())?;
    run.write_json(
        &run.path(&run.config.paths.history),
        history_json(loss, &history),
    )?;
    let secs: f64 = history.wall_clock_seconds.iter().sum();
    eprintln!("train: {:.1}s", secs);
    let last = history.epochs.last().expect("at least one epoch");
    Ok(format!(
        "train: loss={} epochs={} train_loss={:.6} valid_ce={:.6}",
        serde_json::to_value(loss)
            .expect("loss serializes")
            .as_str()
            .unwrap_or_default(),
        history.epochs.len(),
        last.train_loss,
        last.valid_ce
    ))
}

fn eval_options<'a>(
    config: &RunConfig,
    rules: &'a [Rule],
    weights: Option<&'a WeightTable>,
) -> EvalOptions<'a> {
    EvalOptions {
        rules,
        weights,
        num_prompts: config.eval.num_prompts,
        gen_len: config.eval.gen_len,
    }
}

fn cmd_eval(run: &Run, loss: LossKind) -> Result<String> {
    let (_, corpus) = run.load_vocab_corpus()?;
    let (train_split, valid) = split_corpus(&corpus, run.config.train.valid_fraction)?;
    let target = valid.as_ref().unwrap_or(&train_split);
    let freq = FreqTable::load(&run.path(&run.config.paths.freq))?;
    let buckets = buckets_for(&freq, run.config.eval.num_buckets)?;
    let params = ModelParams::load(&run.path(&run.config.paths.checkpoint))?;
    let rules = load_rules(&run.path(&run.config.paths.rules))?;
    let weights = match loss {
        LossKind::Pdl => {
            let path = run.path(&run.config.paths.weights);
            let table = WeightTable::load(&path)?;
            check_weight_file(&table, &run.config, &path)?;
            Some(table)
        }
        LossKind::Ce => None,
    };
    let metrics = evaluate(
        &params,
        target,
        &buckets,
        &eval_options(&run.config, &rules, weights.as_ref()),
    )?;
    run.write_json(
        &run.path(&run.config.paths.metrics),
        serde_json::json!({
            "loss": loss,
            "split": if valid.is_some() { "valid" } else { "train" },
            "bucket_boundaries": buckets.boundaries,
            "metrics": metrics,
        }),
    )?;
    Ok(format!(
        "eval: perplexity={:.4} accuracy={:.4} rare_accuracy={}",
        metrics.perplexity,
        metrics.accuracy,
        fmt_opt(metrics.rare_bucket().accuracy)
    ))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

/// Everything `compare` computes, for callers that want the numbers.
#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub report: crate::eval::Report,
    pub ce_history: TrainHistory,
    pub pdl_history: TrainHistory,
}

/// Trains CE and PDL with the same seed on the same split and compares them
/// on the validation split (or the training split when none is held out).
pub fn run_compare(config: &RunConfig) -> Result<CompareOutcome> {
    let (_, corpus, rules) = build_corpus(config)?;
    let (train_split, valid) = split_corpus(&corpus, config.train.valid_fraction)?;
    let freq = count_frequencies(&train_split, corpus.vocab_size)?;
    let buckets = buckets_for(&freq, config.eval.num_buckets)?;
    let target = valid.as_ref().unwrap_or(&train_split);

    let mut results = Vec::new();
    for loss in [LossKind::Ce, LossKind::Pdl] {
        let tc = config.train_config(loss);
        let (params, history) = train(&tc, &train_split, &freq, valid.as_ref())?;
        let weights = tc.weight_table(&freq)?;
        let metrics = evaluate(
            &params,
            target,
            &buckets,
            &eval_options(config, &rules, weights.as_ref()),
        )?;
        results.push((metrics, history));
    }
    let (pdl_metrics, pdl_history): (BucketedMetrics, TrainHistory) =
        results.pop().expect("two runs");
    let (ce_metrics, ce_history) = results.pop().expect("two runs");
    let report = compare_report(&ce_metrics, &pdl_metrics, &buckets, &config.provenance())?;
    Ok(CompareOutcome {
        report,
        ce_history,
        pdl_history,
    })
}

fn cmd_compare(run: &Run) -> Result<String> {
    let started = Instant::now();
    let outcome = run_compare(&run.config)?;
    let paths = &run.config.paths;
    let report_path = run.path(&paths.report);
    outcome.report.save(&report_path)?;
    let csv = format!("# {}\n{}", run.header(), outcome.report.to_csv());
    write_text(&report_path.with_extension("csv"), &csv)?;
    let history = run.path(&paths.history);
    run.write_json(
        &sibling(&history, "ce"),
        history_json(LossKind::Ce, &outcome.ce_history),
    )?;
    run.write_json(
        &sibling(&history, "pdl"),
        history_json(LossKind::Pdl, &outcome.pdl_history),
    )?;
    eprintln!("compare: {:.1}s", started.elapsed().as_secs_f64());
    let r = &outcome.report;
    Ok(format!(
        "compare: rare accuracy ce={} pdl={}; rule recall ce={} pdl={}; frequent accuracy ce={} pdl={}",
        fmt_opt(r.ce.rare_bucket().accuracy),
        fmt_opt(r.pdl.rare_bucket().accuracy),
        fmt_opt(r.ce.rule_recall),
        fmt_opt(r.pdl.rule_recall),
        fmt_opt(r.ce.frequent_bucket().accuracy),
        fmt_opt(r.pdl.frequent_bucket().accuracy),
    ))
}

/// Runs a parsed command line; returns the stdout summary.
pub fn execute(cli: Cli) -> std::result::Result<String, Failure> {
    let mut config = load_config(&cli.global)?;
    if let Command::Synth { text: Some(t) } = &cli.command {
        config.paths.text = Some(t.clone());
    }
    let out_dir = cli
        .global
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("."));
    let run = Run {
        provenance: config.provenance(),
        config,
        out_dir,
    };
    if let Command::ShowConfig = cli.command {
        return Ok(format!("# {}\n{}", run.header(), run.config.to_toml())
            .trim_end()
            .to_string());
    }
    run.write_effective_config()?;
    let default_loss = run.config.train.loss;
    let summary = match cli.command {
        Command::Synth { .. } => cmd_synth(&run)?,
        Command::Freq => cmd_freq(&run)?,
        Command::Weights => cmd_weights(&run)?,
        Command::Gradcheck => cmd_gradcheck(&run)?,
        Command::Train { loss } => cmd_train(&run, loss.map_or(default_loss, Into::into))?,
        Command::Eval { loss } => cmd_eval(&run, loss.map_or(default_loss, Into::into))?,
        Command::Compare => cmd_compare(&run)?,
        Command::ShowConfig => unreachable!(),
    };
    Ok(summary)
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(f) => {
            eprintln!("{}", f.line());
            f.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_parses_and_round_trips() {
        let c = RunConfig::from_toml(DEFAULT_COMPARE, Path::new("x")).unwrap();
        assert_eq!(c.synth.vocab_size, 500);
        assert_eq!(c.pdl.alpha, 1.0);
        let again = RunConfig::from_toml(&c.to_toml(), Path::new("y")).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err =
            RunConfig::from_toml("[train]\nlearning_rat = 0.1\n", Path::new("c.toml")).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
        let err = RunConfig::from_toml("[train\n", Path::new("c.toml")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
        let err = RunConfig::from_toml("[pdl]\nalpha = -1.0\n", Path::new("c.toml")).unwrap_err();
        assert!(
            matches!(err, Error::Config { ref field, .. } if field == "pdl.alpha"),
            "{err}"
        );
    }

    #[test]
    fn hash_changes_with_any_key() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn split_takes_tail_sequences() {
        let seqs: Vec<Vec<usize>> = (0..10).map(|i| vec![1, 4 + i % 2, 2]).collect();
        let corpus = EncodedCorpus::new(seqs, 6).unwrap();
        let (t, v) = split_corpus(&corpus, 0.2).unwrap();
        assert_eq!(t.sequences.len(), 8);
        assert_eq!(v.unwrap().sequences.len(), 2);
        let (_, none) = split_corpus(&corpus, 0.0).unwrap();
        assert!(none.is_none());
        let one = EncodedCorpus::new(vec![vec![1, 4, 2]], 6).unwrap();
        assert!(matches!(
            split_corpus(&one, 0.5),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn failure_line_is_single_line() {
        let f = Failure::from(Error::Data("two\nlines \"quoted\"".into()));
        assert_eq!(f.code, EXIT_DATA);
        assert!(!f.line().contains('\n'));
        assert!(f.line().starts_with("error code=6 kind=data message=\""));
    }

    #[test]
    fn sibling_names() {
        assert_eq!(
            sibling(Path::new("a/history.json"), "ce"),
            Path::new("a/history-ce.json")
        );
        assert_eq!(sibling(Path::new("h"), "pdl"), Path::new("h-pdl"));
    }
}
