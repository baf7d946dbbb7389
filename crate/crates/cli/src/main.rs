//! `eer`: sample partial annotations, preprocess, train, decode, evaluate,
//! compare systems and run the synthetic benchmarks.
//!
//! Every subcommand writes its outputs and a `manifest.json` (resolved
//! configuration, seed, version, arguments) into `--out`. Paths to earlier
//! outputs may name the file or its directory: a directory resolves to
//! `corpus.conll`, `predictions.conll` or `model.json` as appropriate.
//!
//! Exit codes: 0 on success, 2 for usage errors (bad flags, missing input
//! files, invalid configuration), 1 when a stage fails at runtime.

mod config;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use eer_ner::conll::{self, ColumnFormatConfig};
use eer_ner::corpus::{Dataset, Tag, TagSet};
use eer_ner::eval::{self, Prf};
use eer_ner::preprocess::{apply_variant, PreprocessVariant};
use eer_ner::samplers::{sample_ee, sample_nns};
use eer_ner::scorer::ScorerParams;
use eer_ner::synthetic::{run_consistency_experiment, run_learning_curve, run_rho_gamma_sweep, RunMetrics};
use eer_ner::trainer::{OptimizerKind, Schedule, TrainConfig, Trainer};
use serde::Serialize;
use serde_json::json;

use config::CliConfig;

const CORPUS_FILE: &str = "corpus.conll";
const PREDICTIONS_FILE: &str = "predictions.conll";
const MODEL_FILE: &str = "model.json";
const O_BIAS_FILE: &str = "o_bias.json";
const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Parser, Debug)]
#[command(name = "eer", version, about = "Train NER taggers from partial annotations with an expected entity ratio loss")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed applied to every component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate partial annotation of a gold corpus.
    Sample(SampleArgs),
    /// Reduce a partial corpus (all, short, shortest).
    Preprocess(PreprocessArgs),
    /// Train a tagger on a partial corpus.
    Train(TrainArgs),
    /// Tag a corpus with a trained model.
    Decode(DecodeArgs),
    /// Span-level scores against a gold corpus.
    Eval(EvalArgs),
    /// Paired document-level bootstrap of the F1 difference of two systems.
    Significance(SignificanceArgs),
    /// Synthetic benchmarks.
    Bench(BenchArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Scheme {
    Nns,
    Ee,
}

/// Column layout of an input corpus.
#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum InputFormat {
    /// `token ... tag`; every entity tag counts as observed.
    Gold,
    /// `token gold observed`, as written by `sample` and `preprocess`.
    Partial,
    /// `token observed`, gold withheld.
    Observed,
}

impl InputFormat {
    fn columns(self) -> ColumnFormatConfig {
        match self {
            InputFormat::Gold => ColumnFormatConfig::default(),
            InputFormat::Partial => ColumnFormatConfig::partial(),
            InputFormat::Observed => ColumnFormatConfig::partial_without_gold(),
        }
    }
}

#[derive(Args, Debug)]
struct CorpusArgs {
    /// Comma-separated class names; inferred from the input when omitted.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    /// Treat each sentence as its own document when the file has no
    /// document markers.
    #[arg(long)]
    sentence_documents: bool,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long, value_enum)]
    scheme: Scheme,
    /// Gold corpus.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    target_recall: Option<f64>,
    #[arg(long)]
    target_precision: Option<f64>,
    #[arg(long)]
    fp_span_max_len: Option<usize>,
    /// EE span budget.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    per_doc_cap: Option<usize>,
    #[arg(long)]
    keep_prob: Option<f64>,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long, value_parser = parse_variant)]
    variant: PreprocessVariant,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "partial")]
    format: InputFormat,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum OptimizerFlag {
    Sgd,
    Adam,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ScheduleFlag {
    Constant,
    Slanted,
    /// Slanted triangular at the fine-tuning learning rate 2e-5.
    FineTuning,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training corpus.
    #[arg(long)]
    train: PathBuf,
    #[arg(long, value_enum, default_value = "partial")]
    format: InputFormat,
    /// Gold dev corpus: reported per epoch and used to tune the O bias.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Continue from `<out>/checkpoint` with the checkpointed settings.
    #[arg(long)]
    resume: bool,
    /// Stop after this many epochs in total, leaving a checkpoint to resume.
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_batch_tokens: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerFlag>,
    #[arg(long, value_enum)]
    schedule: Option<ScheduleFlag>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda_u: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// Model file or training output directory.
    #[arg(long)]
    model: PathBuf,
    /// Corpus to tag; only the token column is read.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the tuned value stored beside the model, else 0.
    #[arg(long)]
    o_bias: Option<f64>,
    #[arg(long)]
    sentence_documents: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Gold corpus (`token ... tag`).
    #[arg(long)]
    gold: PathBuf,
    /// Predictions file or decode output directory.
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    predictions: Option<PathBuf>,
    /// Decode the gold tokens with this model instead.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    o_bias: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
}

#[derive(Args, Debug)]
struct SignificanceArgs {
    #[arg(long)]
    gold: PathBuf,
    /// Predictions of system A.
    #[arg(long)]
    a: PathBuf,
    /// Predictions of system B.
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    confidence: Option<f64>,
    #[command(flatten)]
    corpus: CorpusArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum BenchKind {
    Consistency,
    Sweep,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(value_enum)]
    kind: BenchKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    train_sentences: Option<usize>,
    #[arg(long)]
    test_sentences: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Consistency only: also run the learning curve at these sizes.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Sweep only: model seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

fn parse_variant(s: &str) -> Result<PreprocessVariant, String> {
    s.parse().map_err(|e: eer_ner::preprocess::UnknownVariant| e.to_string())
}

/// Usage errors and runtime failures map to different exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome<T> = Result<T, Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

trait Stage<T> {
    fn stage(self, name: &str) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Stage<T> for Result<T, E> {
    fn stage(self, name: &str) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into().context(name.to_string())))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Outcome<()> {
    let mut config = match &cli.config {
        Some(path) => {
            require_file(path)?;
            CliConfig::load(path).map_err(usage)?
        }
        None => CliConfig::default(),
    };
    if let Some(seed) = cli.seed.or(config.seed) {
        config.apply_seed(seed);
    }
    let args: Vec<String> = std::env::args().collect();
    match cli.command {
        Command::Sample(a) => sample(a, config, &args),
        Command::Preprocess(a) => preprocess(a, config, &args),
        Command::Train(a) => train(a, config, &args),
        Command::Decode(a) => decode(a, config, &args),
        Command::Eval(a) => evaluate(a, config, &args),
        Command::Significance(a) => significance(a, config, &args),
        Command::Bench(a) => bench(a, config, &args),
    }
}

fn require_file(path: &Path) -> Outcome<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(anyhow!("no such file: {}", path.display())))
    }
}

/// A directory stands for the named file inside it.
fn resolve(path: &Path, file: &str) -> Outcome<PathBuf> {
    let path = if path.is_dir() { path.join(file) } else { path.to_path_buf() };
    require_file(&path)?;
    Ok(path)
}

fn prepare_out(out: &Path) -> Outcome<()> {
    fs::create_dir_all(out)
        .with_context(|| format!("cannot create {}", out.display()))
        .stage("output")
}

fn write_text(path: &Path, text: &str) -> Outcome<()> {
    fs::write(path, text)
        .with_context(|| format!("cannot write {}", path.display()))
        .stage("output")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome<()> {
    let text = serde_json::to_string_pretty(value).stage("output")?;
    write_text(path, &(text + "\n"))
}

fn write_manifest<T: Serialize>(out: &Path, command: &str, config: &CliConfig, args: &[String], details: T) -> Outcome<()> {
    write_json(
        &out.join("manifest.json"),
        &json!({
            "tool": "eer",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "args": args,
            "seed": config.seed,
            "config": config,
            "details": details,
        }),
    )
}

/// Class names in order of first appearance among `X-CLASS` labels in
/// any column but the first.
fn infer_classes(texts: &[&str], docstart: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut classes = Vec::new();
    for text in texts {
        for line in text.lines() {
            let mut fields = line.split_whitespace();
            if fields.next().is_none_or(|first| first == docstart) {
                continue;
            }
            for field in fields {
                if let Some((prefix, class)) = field.split_once('-') {
                    if matches!(prefix, "B" | "I" | "L" | "U" | "E" | "S") && !class.is_empty() && seen.insert(class.to_string()) {
                        classes.push(class.to_string());
                    }
                }
            }
        }
    }
    classes
}

fn read_text(path: &Path) -> Outcome<String> {
    fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .stage("input")
}

fn tagset_for(flag: &Option<Vec<String>>, config: &CliConfig, texts: &[&str]) -> Outcome<TagSet> {
    let classes = match flag.as_ref().or(config.classes.as_ref()) {
        Some(c) => c.clone(),
        None => infer_classes(texts, &ColumnFormatConfig::default().docstart_marker),
    };
    if classes.is_empty() {
        return Err(usage(anyhow!("no entity classes found; pass --classes")));
    }
    TagSet::new(&classes).map_err(usage)
}

fn parse(text: &str, path: &Path, format: &ColumnFormatConfig, tagset: &TagSet) -> Outcome<Dataset> {
    conll::parse_corpus(text, format, tagset)
        .with_context(|| format!("cannot parse {}", path.display()))
        .stage("input")
}

fn with_docs(mut format: ColumnFormatConfig, sentence_documents: bool) -> ColumnFormatConfig {
    format.sentence_documents = sentence_documents;
    format
}

/// Partial corpora keep their gold column when they have one.
fn write_partial(dataset: &Dataset, path: &Path) -> Outcome<()> {
    let format = if dataset.sentences().all(|s| s.gold().is_some()) {
        ColumnFormatConfig::partial()
    } else {
        ColumnFormatConfig::partial_without_gold()
    };
    conll::write_corpus(dataset, path, &format).stage("output")
}

fn sample(a: SampleArgs, mut config: CliConfig, args: &[String]) -> Outcome<()> {
    require_file(&a.input)?;
    if let Some(v) = a.target_recall {
        config.nns.target_recall = v;
    }
    if let Some(v) = a.target_precision {
        config.nns.target_precision = v;
    }
    if let Some(v) = a.fp_span_max_len {
        config.nns.fp_span_max_len = v;
    }
    if let Some(v) = a.budget {
        config.ee.total_budget = v;
    }
    if let Some(v) = a.per_doc_cap {
        config.ee.per_doc_cap = v;
    }
    if let Some(v) = a.keep_prob {
        config.ee.keep_prob = v;
    }
    match a.scheme {
        Scheme::Nns => config.nns.validate().map_err(usage)?,
        Scheme::Ee => config.ee.validate().map_err(usage)?,
    }
    let text = read_text(&a.input)?;
    let tagset = tagset_for(&a.corpus.classes, &config, &[&text])?;
    let gold = parse(&text, &a.input, &with_docs(ColumnFormatConfig::default(), a.corpus.sentence_documents), &tagset)?;
    let (partial, stats) = match a.scheme {
        Scheme::Nns => sample_nns(&gold, &config.nns).stage("sample")?,
        Scheme::Ee => sample_ee(&gold, &config.ee).stage("sample")?,
    };
    prepare_out(&a.out)?;
    write_partial(&partial, &a.out.join(CORPUS_FILE))?;
    write_json(&a.out.join("stats.json"), &stats)?;
    log::info!("sampled {} spans (recall {:.3}, precision {:.3})", stats.observed_spans, stats.recall, stats.precision);
    let scheme = if a.scheme == Scheme::Nns { "nns" } else { "ee" };
    write_manifest(&a.out, "sample", &config, args, json!({"scheme": scheme, "input": a.input, "classes": tagset.classes()}))
}

fn preprocess(a: PreprocessArgs, config: CliConfig, args: &[String]) -> Outcome<()> {
    let input = resolve(&a.input, CORPUS_FILE)?;
    let text = read_text(&input)?;
    let tagset = tagset_for(&a.corpus.classes, &config, &[&text])?;
    let data = parse(&text, &input, &with_docs(a.format.columns(), a.corpus.sentence_documents), &tagset)?;
    let out = apply_variant(&data, a.variant);
    if out.empty {
        log::warn!("variant {} left no documents", a.variant);
    }
    prepare_out(&a.out)?;
    write_partial(&out.dataset, &a.out.join(CORPUS_FILE))?;
    write_manifest(
        &a.out,
        "preprocess",
        &config,
        args,
        json!({
            "variant": a.variant,
            "input": input,
            "classes": tagset.classes(),
            "removed_documents": out.removed_documents,
            "removed_sentences": out.removed_sentences,
            "empty": out.empty,
        }),
    )
}

fn apply_train_flags(a: &TrainArgs, config: &mut CliConfig) {
    let t = &mut config.train;
    if let Some(v) = a.schedule {
        match v {
            ScheduleFlag::Constant => t.schedule = Schedule::Constant,
            ScheduleFlag::Slanted => t.schedule = TrainConfig::default().schedule,
            ScheduleFlag::FineTuning => {
                let preset = TrainConfig::fine_tuning();
                t.schedule = preset.schedule;
                t.learning_rate = preset.learning_rate;
            }
        }
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.max_batch_tokens {
        t.max_batch_tokens = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.optimizer {
        t.optimizer = match v {
            OptimizerFlag::Sgd => OptimizerKind::Sgd,
            OptimizerFlag::Adam => OptimizerKind::adam(),
        };
    }
    if let Some(v) = a.rho {
        t.eer.rho = v;
    }
    if let Some(v) = a.gamma {
        t.eer.gamma = v;
    }
    if let Some(v) = a.lambda_u {
        t.eer.lambda_u = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    let s = &mut config.scorer;
    if let Some(v) = a.embed_dim {
        s.embed_dim = v;
    }
    if let Some(v) = a.hidden {
        s.hidden = v;
    }
    if let Some(v) = a.window {
        s.window = v;
    }
}

fn train(a: TrainArgs, mut config: CliConfig, args: &[String]) -> Outcome<()> {
    apply_train_flags(&a, &mut config);
    config.train.log_path = Some(a.out.join("train_log.jsonl"));
    if config.train.checkpoint_every > 0 || a.resume || a.stop_after.is_some() {
        config.train.checkpoint_dir = Some(a.out.join(CHECKPOINT_DIR));
    }
    config.train.validate().map_err(usage)?;
    config.scorer.validate().map_err(usage)?;
    let input = resolve(&a.train, CORPUS_FILE)?;
    let dev_path = a.dev.as_deref().map(|p| resolve(p, CORPUS_FILE)).transpose()?;

    let text = read_text(&input)?;
    let dev_text = dev_path.as_deref().map(read_text).transpose()?;
    let mut texts = vec![text.as_str()];
    texts.extend(dev_text.as_deref());
    let tagset = tagset_for(&a.corpus.classes, &config, &texts)?;
    let data = parse(&text, &input, &with_docs(a.format.columns(), a.corpus.sentence_documents), &tagset)?;
    let dev = match (&dev_text, &dev_path) {
        (Some(t), Some(p)) => Some(parse(t, p, &with_docs(ColumnFormatConfig::default(), a.corpus.sentence_documents), &tagset)?),
        _ => None,
    };

    prepare_out(&a.out)?;
    let mut trainer = if a.resume {
        let dir = a.out.join(CHECKPOINT_DIR);
        if !dir.is_dir() {
            return Err(usage(anyhow!("nothing to resume: {} does not exist", dir.display())));
        }
        log::warn!("resuming: training settings come from the checkpoint");
        Trainer::resume(&dir, &data, dev.as_ref()).stage("train")?
    } else {
        let params = ScorerParams::for_dataset(config.scorer.clone(), &data).stage("train")?;
        Trainer::new(params, config.train.clone(), &data, dev.as_ref()).stage("train")?
    };
    let stop = a.stop_after.unwrap_or(usize::MAX);
    while trainer.epochs_done() < stop && trainer.run_epoch().stage("train")?.is_some() {}
    let complete = trainer.epochs_done() >= trainer.config().epochs;
    if !complete {
        trainer.save_checkpoint(&a.out.join(CHECKPOINT_DIR)).stage("train")?;
        log::info!("stopped after {} epochs; resume with --resume", trainer.epochs_done());
    }
    let (params, report) = trainer.finish().stage("train")?;
    params.save(&a.out.join(MODEL_FILE)).stage("train")?;
    write_json(&a.out.join("report.json"), &report)?;

    let mut tuned = None;
    if let (Some(dev), true) = (&dev, complete) {
        let search = eval::tune_o_bias(&params, dev, &eval::default_o_bias_grid()).stage("tune o-bias")?;
        log::info!("tuned O bias {} (dev F1 {:.4})", search.best, search.best_f1);
        write_json(&a.out.join(O_BIAS_FILE), &search)?;
        tuned = Some(search.best);
    }
    write_manifest(
        &a.out,
        "train",
        &config,
        args,
        json!({
            "train": input,
            "dev": dev_path,
            "format": a.format,
            "classes": tagset.classes(),
            "resumed": a.resume,
            "complete": complete,
            "tuned_o_bias": tuned,
        }),
    )
}

struct LoadedModel {
    params: ScorerParams,
    path: PathBuf,
    tuned_o_bias: Option<f64>,
}

fn load_model(path: &Path) -> Outcome<LoadedModel> {
    let file = resolve(path, MODEL_FILE)?;
    let params = ScorerParams::load(&file).stage("load model")?;
    let tuned = file.with_file_name(O_BIAS_FILE);
    let tuned_o_bias = if tuned.is_file() {
        let search: eval::OBiasSearch = serde_json::from_str(&read_text(&tuned)?)
            .with_context(|| format!("invalid {}", tuned.display()))
            .stage("load model")?;
        Some(search.best)
    } else {
        None
    };
    Ok(LoadedModel {
        params,
        path: file,
        tuned_o_bias,
    })
}

fn choose_o_bias(flag: Option<f64>, config: &CliConfig, model: &LoadedModel) -> Outcome<f64> {
    let b = flag.or(config.decode.o_bias).or(model.tuned_o_bias).unwrap_or(0.0);
    if !b.is_finite() {
        return Err(usage(anyhow!("o-bias must be finite")));
    }
    Ok(b)
}

fn decode(a: DecodeArgs, config: CliConfig, args: &[String]) -> Outcome<()> {
    let model = load_model(&a.model)?;
    let o_bias = choose_o_bias(a.o_bias, &config, &model)?;
    let input = resolve(&a.input, CORPUS_FILE)?;
    let text = read_text(&input)?;
    let data = parse(&text, &input, &with_docs(ColumnFormatConfig::unlabeled(), a.sentence_documents), model.params.tagset())?;
    let predicted = eval::decode(&model.params, &data, o_bias).stage("decode")?;
    prepare_out(&a.out)?;
    write_text(&a.out.join(PREDICTIONS_FILE), &conll::format_predictions(&data, &predicted).stage("decode")?)?;
    write_manifest(
        &a.out,
        "decode",
        &config,
        args,
        json!({"model": model.path, "input": input, "o_bias": o_bias}),
    )
}

#[derive(Serialize)]
struct Metrics {
    spans: Prf,
    token_accuracy: f64,
    sentences: usize,
    tokens: usize,
    /// Model's expected entity ratio on the gold tokens, when a model was given.
    rho_hat: Option<f64>,
    /// Share of non-`O` gold tokens.
    gold_entity_ratio: f64,
}

fn gold_sequences(data: &Dataset) -> Outcome<Vec<Vec<Tag>>> {
    Ok(data.gold_sequences().stage("input")?.into_iter().map(<[Tag]>::to_vec).collect())
}

fn evaluate(a: EvalArgs, config: CliConfig, args: &[String]) -> Outcome<()> {
    let gold_path = resolve(&a.gold, CORPUS_FILE)?;
    let gold_text = read_text(&gold_path)?;
    let format = with_docs(ColumnFormatConfig::default(), a.corpus.sentence_documents);
    let (gold, predicted, rho_hat, details) = if let Some(model_path) = &a.model {
        let model = load_model(model_path)?;
        let o_bias = choose_o_bias(a.o_bias, &config, &model)?;
        let gold = parse(&gold_text, &gold_path, &format, model.params.tagset())?;
        let predicted = eval::decode(&model.params, &gold, o_bias).stage("decode")?;
        let rho_hat = eval::predicted_entity_ratio(&model.params, &gold).stage("eval")?;
        prepare_out(&a.out)?;
        write_text(&a.out.join(PREDICTIONS_FILE), &conll::format_predictions(&gold, &predicted).stage("decode")?)?;
        let details = json!({"gold": gold_path, "model": model.path, "o_bias": o_bias});
        (gold, predicted, Some(rho_hat), details)
    } else {
        let pred_path = resolve(a.predictions.as_deref().expect("clap requires one"), PREDICTIONS_FILE)?;
        let pred_text = read_text(&pred_path)?;
        let tagset = tagset_for(&a.corpus.classes, &config, &[&gold_text, &pred_text])?;
        let gold = parse(&gold_text, &gold_path, &format, &tagset)?;
        let predictions = parse(&pred_text, &pred_path, &format, &tagset)?;
        let predicted = gold_sequences(&predictions)?;
        prepare_out(&a.out)?;
        (gold, predicted, None, json!({"gold": gold_path, "predictions": pred_path}))
    };
    let gold_tags = gold_sequences(&gold)?;
    let metrics = Metrics {
        spans: eval::span_prf(&predicted, &gold_tags).stage("eval")?,
        token_accuracy: eval::token_accuracy(&predicted, &gold_tags).stage("eval")?,
        sentences: gold.sentence_count(),
        tokens: gold.token_count(),
        rho_hat,
        gold_entity_ratio: eer_ner::corpus::entity_token_ratio(&gold).stage("eval")?,
    };
    write_json(&a.out.join("metrics.json"), &metrics)?;
    println!("{}", serde_json::to_string_pretty(&metrics).stage("output")?);
    write_manifest(&a.out, "eval", &config, args, details)
}

fn significance(a: SignificanceArgs, mut config: CliConfig, args: &[String]) -> Outcome<()> {
    if let Some(v) = a.iterations {
        config.bootstrap.iterations = v;
    }
    if let Some(v) = a.confidence {
        config.bootstrap.confidence = v;
    }
    config.bootstrap.validate().map_err(usage)?;
    let gold_path = resolve(&a.gold, CORPUS_FILE)?;
    let a_path = resolve(&a.a, PREDICTIONS_FILE)?;
    let b_path = resolve(&a.b, PREDICTIONS_FILE)?;
    let texts = [read_text(&gold_path)?, read_text(&a_path)?, read_text(&b_path)?];
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let tagset = tagset_for(&a.corpus.classes, &config, &refs)?;
    let format = with_docs(ColumnFormatConfig::default(), a.corpus.sentence_documents);
    let gold = parse(&texts[0], &gold_path, &format, &tagset)?;
    let per_doc = |text: &str, path: &Path| -> Outcome<Vec<eval::SpanCounts>> {
        let system = parse(text, path, &format, &tagset)?;
        let tags = gold_sequences(&system)?;
        let grouped = eval::group_by_document(&gold, &tags).stage("significance")?;
        let gold_grouped = eval::group_by_document(&gold, &gold_sequences(&gold)?).stage("significance")?;
        eval::document_counts(&grouped, &gold_grouped).stage("significance")
    };
    let counts_a = per_doc(&texts[1], &a_path)?;
    let counts_b = per_doc(&texts[2], &b_path)?;
    let result = eval::bootstrap_f1_diff(&counts_a, &counts_b, &config.bootstrap).stage("significance")?;
    prepare_out(&a.out)?;
    write_json(&a.out.join("significance.json"), &result)?;
    println!("{}", serde_json::to_string_pretty(&result).stage("output")?);
    write_manifest(
        &a.out,
        "significance",
        &config,
        args,
        json!({"gold": gold_path, "a": a_path, "b": b_path}),
    )
}

fn metrics_row(name: &str, m: &RunMetrics) -> String {
    format!(
        "{name},{},{},{},{},{},{},{}\n",
        m.token_accuracy, m.sentence_accuracy, m.spans.precision, m.spans.recall, m.spans.f1, m.train_rho_hat, m.test_rho_hat
    )
}

const METRICS_HEADER: &str = "token_accuracy,sentence_accuracy,precision,recall,f1,train_rho_hat,test_rho_hat";

fn bench(a: BenchArgs, mut config: CliConfig, args: &[String]) -> Outcome<()> {
    prepare_out(&a.out)?;
    match a.kind {
        BenchKind::Consistency => {
            let c = &mut config.consistency;
            if let Some(v) = a.train_sentences {
                c.train_sentences = v;
            }
            if let Some(v) = a.test_sentences {
                c.test_sentences = v;
            }
            if let Some(v) = a.epochs {
                c.train.epochs = v;
            }
            let report = run_consistency_experiment(c).stage("bench consistency")?;
            let mut csv = format!("method,{METRICS_HEADER}\n");
            csv += &metrics_row("eer", &report.eer);
            csv += &metrics_row("no_ratio", &report.no_ratio);
            csv += &metrics_row("raw", &report.raw);
            write_text(&a.out.join("consistency.csv"), &csv)?;
            let mut curve_json = None;
            if let Some(sizes) = &a.sizes {
                let curve = run_learning_curve(c, sizes).stage("bench consistency")?;
                let mut csv = format!("train_sentences,rho_star,{METRICS_HEADER}\n");
                for (m, rho_star, metrics) in &curve {
                    csv += &metrics_row(&format!("{m},{rho_star}"), metrics);
                }
                write_text(&a.out.join("learning_curve.csv"), &csv)?;
                curve_json = Some(curve);
            }
            write_json(&a.out.join("consistency.json"), &json!({"report": report, "learning_curve": curve_json}))?;
            println!(
                "rho* {:.4}: eer F1 {:.4} rho_hat {:.4}; no ratio F1 {:.4}; raw F1 {:.4}",
                report.rho_star, report.eer.spans.f1, report.eer.train_rho_hat, report.no_ratio.spans.f1, report.raw.spans.f1
            );
        }
        BenchKind::Sweep => {
            let s = &mut config.sweep;
            if let Some(v) = a.train_sentences {
                s.train_sentences = v;
            }
            if let Some(v) = a.test_sentences {
                s.test_sentences = v;
            }
            if let Some(v) = a.epochs {
                s.train.epochs = v;
            }
            if let Some(v) = &a.seeds {
                s.seeds = v.clone();
            }
            let table = run_rho_gamma_sweep(s).stage("bench sweep")?;
            write_text(&a.out.join("sweep.csv"), &table.to_csv())?;
            write_json(&a.out.join("sweep.json"), &table)?;
            print!("{}", table.render());
        }
    }
    write_manifest(&a.out, "bench", &config, args, json!({"kind": format!("{:?}", a.kind).to_lowercase()}))
}
