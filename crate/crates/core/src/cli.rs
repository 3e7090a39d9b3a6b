//! The `qse` command line: one subcommand per pipeline stage, all reading
//! one TOML config and writing under its `workdir`.
//!
//! Exit codes: 0 success, 1 domain error (including a missing upstream
//! artifact, which names the subcommand that produces it), 2 usage or
//! config error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{
    read_annotation_csv, read_gold, write_gold, AnnotationRecord, AnnotationStore, Decision, GoldRecord,
    ScriptedReviewer, DEFAULT_MAX_ROUNDS,
};
use crate::dataset::{self, FoldPlan};
use crate::evaluator::{aggregate, EvalReport};
use crate::explainer::{explain_text, render_explanations, ExplainerConfig, GlobalSummary};
use crate::ingest::{apply_tag_filter, parse_export, read_corpus, write_corpus, Forum, Post, TagFilter};
use crate::llm::{AuditLog, ChatTransport, HttpTransport, LlmClient, LlmConfig, PromptTemplates, ReplayTransport, RetryPolicy, Speaker};
use crate::model::Pooling;
use crate::plot;
use crate::service::{self, AppState};
use crate::synthetic::KeywordCorpus;
use crate::taxonomy::{report_from_histogram, CategoryHistogram, ChallengeCategory, Rounding};
use crate::tokenizer::TextTokenizer;
use crate::trainer::{self, Checkpoint, ModelHandle, TrainConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(String),
    Missing { artifact: PathBuf, produced_by: &'static str },
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Domain(m) => f.write_str(m),
            CliError::Missing { artifact, produced_by } => write!(
                f,
                "{} not found; run `qse {produced_by}` first",
                artifact.display()
            ),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn domain<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Domain(e.to_string())
}

type CliResult<T = ()> = Result<T, CliError>;

// ---------------------------------------------------------------------------
// Config

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub workdir: PathBuf,
    pub corpus: CorpusSection,
    pub llm: LlmSection,
    pub annotation: AnnotationSection,
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub explain: ExplainSection,
    pub serve: ServeSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            workdir: PathBuf::from("qse-work"),
            corpus: CorpusSection::default(),
            llm: LlmSection::default(),
            annotation: AnnotationSection::default(),
            dataset: DatasetSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            explain: ExplainSection::default(),
            serve: ServeSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportSource {
    pub path: PathBuf,
    pub forum: Forum,
    /// Answers CSV; defaults to `<stem>_answers.csv` next to the export.
    #[serde(default)]
    pub answers: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub exports: Vec<ExportSource>,
    /// Tag set per forum code; forums not listed use the study tag sets.
    pub tags: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    pub url: Option<String>,
    pub model: String,
    pub api_key_env: String,
    /// Recorded replies (JSONL recordings or an audit log) used instead of HTTP.
    pub replay: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
    pub temperature: f64,
    pub max_concurrent: usize,
    pub max_retries: u32,
    pub timeout_secs: u64,
}

impl Default for LlmSection {
    fn default() -> Self {
        LlmSection {
            url: None,
            model: "gpt-3.5-turbo".into(),
            api_key_env: "QSE_LLM_KEY".into(),
            replay: None,
            prompts_dir: None,
            temperature: 0.0,
            max_concurrent: 4,
            max_retries: 3,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationSection {
    pub human_annotator: String,
    /// Human labels to import (`post_id,annotator_id,category[,rationale[,round]]`).
    pub human_labels: Option<PathBuf>,
    pub round: u32,
    pub max_rounds: u32,
    /// Scripted human decisions per post for non-interactive negotiation.
    pub decisions: Option<PathBuf>,
}

impl Default for AnnotationSection {
    fn default() -> Self {
        AnnotationSection {
            human_annotator: "human:A1".into(),
            human_labels: None,
            round: 1,
            max_rounds: DEFAULT_MAX_ROUNDS,
            decisions: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub max_len: usize,
    pub k: usize,
    pub seed: u64,
    pub length_bin: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            max_len: dataset::DEFAULT_MAX_LEN,
            k: 5,
            seed: 42,
            length_bin: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub checkpoint_id: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub pooling: Pooling,
    pub dropout: f32,
    pub vocab_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            checkpoint_id: d.checkpoint_id,
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            warmup_fraction: d.warmup_fraction,
            weight_decay: d.weight_decay,
            pooling: d.pooling,
            dropout: d.dropout,
            vocab_size: d.vocab_size,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub outdir: PathBuf,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { outdir: "eval".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    pub fold: usize,
    pub sample: usize,
    pub top_n: usize,
    pub max_evals: usize,
    pub outdir: PathBuf,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection {
            fold: 0,
            sample: 200,
            top_n: 20,
            max_evals: ExplainerConfig::default().max_evals,
            outdir: "explain".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub port: u16,
    /// Saved model directory; defaults to fold 0 of the current training run.
    pub model_manifest: Option<PathBuf>,
    /// Annotation log; defaults to `<workdir>/annotations.jsonl`.
    pub store_path: Option<PathBuf>,
    pub cors_origin: Option<String>,
    pub workers: usize,
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection {
            port: 8080,
            model_manifest: None,
            store_path: None,
            cors_origin: None,
            workers: 2,
        }
    }
}

impl Config {
    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Config =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.workdir);
        for e in &mut self.corpus.exports {
            fix(&mut e.path);
            if let Some(a) = &mut e.answers {
                fix(a);
            }
        }
        for p in [
            &mut self.llm.replay,
            &mut self.llm.prompts_dir,
            &mut self.annotation.human_labels,
            &mut self.annotation.decisions,
            &mut self.serve.model_manifest,
            &mut self.serve.store_path,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            checkpoint_id: t.checkpoint_id.clone(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            warmup_fraction: t.warmup_fraction,
            weight_decay: t.weight_decay,
            max_len: self.dataset.max_len,
            seed: self.dataset.seed,
            pooling: t.pooling,
            dropout: t.dropout,
            vocab_size: t.vocab_size,
            ..TrainConfig::default()
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.path("corpus.jsonl")
    }

    pub fn store_path(&self) -> PathBuf {
        self.serve.store_path.clone().unwrap_or_else(|| self.path("annotations.jsonl"))
    }

    pub fn gold_path(&self) -> PathBuf {
        self.path("gold.jsonl")
    }

    pub fn folds_path(&self) -> PathBuf {
        self.path("folds.csv")
    }

    /// `runs/<config-hash>` for the current training config.
    pub fn run_dir(&self) -> PathBuf {
        self.path("runs").join(self.train_config().hash())
    }

    pub fn eval_dir(&self) -> PathBuf {
        if self.eval.outdir.is_absolute() {
            self.eval.outdir.clone()
        } else {
            self.workdir.join(&self.eval.outdir)
        }
    }

    pub fn explain_dir(&self) -> PathBuf {
        if self.explain.outdir.is_absolute() {
            self.explain.outdir.clone()
        } else {
            self.workdir.join(&self.explain.outdir)
        }
    }
}

// ---------------------------------------------------------------------------
// Arguments

#[derive(Debug, Parser)]
#[command(name = "qse", version, about = "Quantum software engineering discussion classifier pipeline")]
pub struct Cli {
    /// Pipeline config (TOML).
    #[arg(short, long, global = true, default_value = "qse.toml")]
    pub config: PathBuf,
    /// Overrides `workdir` from the config.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse forum exports, filter by tag set and write corpus.jsonl.
    Ingest {
        /// Single export instead of the configured list.
        #[arg(long, requires = "forum")]
        input: Option<PathBuf>,
        #[arg(long)]
        forum: Option<Forum>,
        /// Comma-separated tag set overriding the configured one.
        #[arg(long, value_delimiter = ',')]
        tags: Option<Vec<String>>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Load human annotations from CSV into the annotation store.
    ImportAnnotations {
        /// Defaults to annotation.human_labels.
        file: Option<PathBuf>,
    },
    /// Label every corpus post with the LLM (skips posts already labelled).
    AnnotateLlm {
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Agreement between the human and LLM labels; opens conflict cases.
    Agreement {
        #[arg(long)]
        a: Option<String>,
        #[arg(long)]
        b: Option<String>,
        #[arg(long)]
        round: Option<u32>,
    },
    /// Negotiate open conflicts, scripted from a decisions file, or request
    /// one elaboration per case for review in the UI.
    Negotiate {
        #[arg(long)]
        decisions: Option<PathBuf>,
        #[arg(long)]
        max_rounds: Option<u32>,
    },
    /// Write gold.jsonl once every conflict is resolved.
    ExportGold {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a gold set of keyword-separable synthetic posts.
    SynthGold {
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Token length distribution of the gold set.
    AnalyzeLengths {
        #[arg(long)]
        bin_width: Option<usize>,
    },
    /// Stratified k-fold plan (folds.csv).
    BuildFolds {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune one model per fold.
    Train {
        /// Train only the first N folds.
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate trained fold models on their validation folds.
    Evaluate {
        #[arg(long)]
        outdir: Option<PathBuf>,
    },
    /// Local and global token attributions.
    Explain {
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long)]
        top_n: Option<usize>,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        cors_origin: Option<String>,
    },
    /// Category frequency table of the gold set (or of consensus labels).
    ReportFrequencies {
        #[arg(long, value_enum, default_value = "half-up")]
        rounding: RoundingArg,
    },
    /// Every stage in order, from ingest to report-frequencies.
    Pipeline,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum RoundingArg {
    HalfUp,
    Truncate,
}

impl From<RoundingArg> for Rounding {
    fn from(r: RoundingArg) -> Self {
        match r {
            RoundingArg::HalfUp => Rounding::HalfUp,
            RoundingArg::Truncate => Rounding::Truncate,
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult {
    let mut cfg = if cli.config.exists() {
        Config::load(&cli.config)?
    } else if matches!(cli.command, Command::SynthGold { .. }) || cli.workdir.is_some() {
        Config::default()
    } else {
        return Err(CliError::Usage(format!("config file {} not found", cli.config.display())));
    };
    if let Some(w) = cli.workdir {
        cfg.workdir = w;
    }
    std::fs::create_dir_all(&cfg.workdir).map_err(domain)?;
    match cli.command {
        Command::Ingest {
            input,
            forum,
            tags,
            output,
        } => ingest(&cfg, input, forum, tags, output).map(drop),
        Command::ImportAnnotations { file } => import_annotations(&cfg, file).map(drop),
        Command::AnnotateLlm { limit } => annotate_llm(&cfg, limit).map(drop),
        Command::Agreement { a, b, round } => agreement(&cfg, a, b, round).map(drop),
        Command::Negotiate { decisions, max_rounds } => negotiate(&cfg, decisions, max_rounds).map(drop),
        Command::ExportGold { output } => export_gold(&cfg, output).map(drop),
        Command::SynthGold { per_class, seed } => synth_gold(&cfg, per_class, seed),
        Command::AnalyzeLengths { bin_width } => analyze_lengths(&cfg, bin_width).map(drop),
        Command::BuildFolds { k, seed } => {
            if let Some(k) = k {
                cfg.dataset.k = k;
            }
            if let Some(s) = seed {
                cfg.dataset.seed = s;
            }
            build_folds(&cfg).map(drop)
        }
        Command::Train {
            folds,
            checkpoint,
            epochs,
        } => {
            if let Some(c) = checkpoint {
                cfg.train.checkpoint_id = c;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            train(&cfg, folds).map(drop)
        }
        Command::Evaluate { outdir } => {
            if let Some(o) = outdir {
                cfg.eval.outdir = o;
            }
            evaluate(&cfg).map(drop)
        }
        Command::Explain { fold, sample, top_n } => {
            if let Some(f) = fold {
                cfg.explain.fold = f;
            }
            if let Some(s) = sample {
                cfg.explain.sample = s;
            }
            if let Some(n) = top_n {
                cfg.explain.top_n = n;
            }
            explain(&cfg).map(drop)
        }
        Command::Serve {
            port,
            model,
            cors_origin,
        } => {
            if let Some(p) = port {
                cfg.serve.port = p;
            }
            if model.is_some() {
                cfg.serve.model_manifest = model;
            }
            if cors_origin.is_some() {
                cfg.serve.cors_origin = cors_origin;
            }
            serve(&cfg)
        }
        Command::ReportFrequencies { rounding } => report_frequencies(&cfg, rounding.into()).map(drop),
        Command::Pipeline => pipeline(&cfg),
    }
}

fn require(path: PathBuf, produced_by: &'static str) -> CliResult<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Missing {
            artifact: path,
            produced_by,
        })
    }
}

// ---------------------------------------------------------------------------
// Stages

fn tag_filter(cfg: &Config, forum: Forum, override_tags: Option<&[String]>) -> CliResult<TagFilter> {
    let configured = cfg
        .corpus
        .tags
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case(forum.code()))
        .map(|(_, v)| v.as_slice());
    match override_tags.or(configured) {
        Some(tags) => TagFilter::new(forum, tags).map_err(|e| CliError::Usage(e.to_string())),
        None => Ok(TagFilter::study(forum)),
    }
}

pub fn ingest(
    cfg: &Config,
    input: Option<PathBuf>,
    forum: Option<Forum>,
    tags: Option<Vec<String>>,
    output: Option<PathBuf>,
) -> CliResult<usize> {
    let sources: Vec<ExportSource> = match (input, forum) {
        (Some(path), Some(forum)) => vec![ExportSource {
            path,
            forum,
            answers: None,
        }],
        (None, Some(forum)) => cfg.corpus.exports.iter().filter(|e| e.forum == forum).cloned().collect(),
        _ => cfg.corpus.exports.clone(),
    };
    if sources.is_empty() {
        return Err(CliError::Usage("no exports configured (corpus.exports or --input/--forum)".into()));
    }
    let mut posts: Vec<Post> = Vec::new();
    for src in &sources {
        let mut parsed = parse_export(&src.path, src.forum).map_err(domain)?;
        if let Some(answers) = &src.answers {
            // Re-read with the explicit answers file.
            let reader = crate::ingest::ExportReader::open(&src.path, src.forum)
                .and_then(|r| r.with_answers(answers))
                .map_err(domain)?;
            parsed.posts = reader.filter_map(Result::ok).collect();
        }
        let filter = tag_filter(cfg, src.forum, tags.as_deref())?;
        let kept = apply_tag_filter(parsed.posts, &filter).map_err(domain)?;
        println!(
            "{}: {} posts kept, {} rows rejected ({})",
            src.forum,
            kept.len(),
            parsed.rejects.len(),
            src.path.display()
        );
        posts.extend(kept);
    }
    let out = output.unwrap_or_else(|| cfg.corpus_path());
    let n = write_corpus(&posts, &out).map_err(domain)?;
    println!("wrote {n} posts to {}", out.display());
    Ok(n)
}

fn open_store(cfg: &Config) -> CliResult<AnnotationStore> {
    let corpus = read_corpus(require(cfg.corpus_path(), "ingest")?).map_err(domain)?;
    AnnotationStore::open(cfg.store_path(), corpus).map_err(domain)
}

pub fn import_annotations(cfg: &Config, file: Option<PathBuf>) -> CliResult<usize> {
    let file = file
        .or_else(|| cfg.annotation.human_labels.clone())
        .ok_or_else(|| CliError::Usage("no annotation file given (argument or annotation.human_labels)".into()))?;
    let records = read_annotation_csv(&file).map_err(domain)?;
    let mut store = open_store(cfg)?;
    let mut added = 0;
    for rec in records {
        let same = store
            .get(&rec.post_id, &rec.annotator_id, rec.round)
            .is_some_and(|old| old.category == rec.category && old.rationale == rec.rationale);
        if !same {
            store.record(rec).map_err(domain)?;
            added += 1;
        }
    }
    println!("imported {added} annotation(s) from {}", file.display());
    Ok(added)
}

pub fn llm_client(cfg: &Config) -> CliResult<LlmClient> {
    let l = &cfg.llm;
    let transport: Arc<dyn ChatTransport> = match (&l.replay, &l.url) {
        (Some(replay), _) => Arc::new(
            ReplayTransport::from_jsonl(require(replay.clone(), "annotate-llm (with a live llm.url)")?)
                .map_err(domain)?,
        ),
        (None, Some(url)) => Arc::new(HttpTransport::new(
            url.clone(),
            std::env::var(&l.api_key_env).ok(),
            Duration::from_secs(l.timeout_secs),
        )),
        (None, None) => return Err(CliError::Usage("no LLM configured: set llm.url or llm.replay".into())),
    };
    let mut client = LlmClient::new(
        transport,
        LlmConfig {
            model_id: l.model.clone(),
            temperature: l.temperature as f32,
            max_concurrent: l.max_concurrent,
            retry: RetryPolicy {
                max_retries: l.max_retries,
                ..RetryPolicy::default()
            },
        },
    );
    if let Some(dir) = &l.prompts_dir {
        client = client.with_templates(PromptTemplates::from_dir(dir).map_err(domain)?);
    }
    let audit = AuditLog::open(cfg.path("llm_audit.jsonl")).map_err(domain)?;
    Ok(client.with_audit(audit))
}

pub fn annotate_llm(cfg: &Config, limit: Option<usize>) -> CliResult<usize> {
    let corpus = read_corpus(require(cfg.corpus_path(), "ingest")?).map_err(domain)?;
    let mut store = AnnotationStore::open(cfg.store_path(), corpus.clone()).map_err(domain)?;
    let client = llm_client(cfg)?;
    let annotator = client.annotator_id();
    let round = cfg.annotation.round;
    let todo: Vec<&Post> = corpus
        .iter()
        .filter(|p| store.get(&p.key(), &annotator, round).is_none())
        .take(limit.unwrap_or(usize::MAX))
        .collect();
    let workers = cfg.llm.max_concurrent.max(1);
    let results: Vec<_> = std::thread::scope(|scope| {
        let chunks: Vec<Vec<&Post>> = (0..workers)
            .map(|w| todo.iter().skip(w).step_by(workers).copied().collect())
            .collect();
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                let client = &client;
                scope.spawn(move || chunk.into_iter().map(|p| (p, client.annotate(p))).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("annotator thread panicked")).collect()
    });
    let mut results = results;
    results.sort_by_key(|(p, _)| p.key());
    let mut ok = 0;
    let mut failed = Vec::new();
    for (post, result) in results {
        match result {
            Ok(resp) => {
                let rec = AnnotationRecord::new(post.key(), &annotator, resp.category, round).with_rationale(resp.rationale);
                store.record(rec).map_err(domain)?;
                ok += 1;
            }
            Err(e) => {
                eprintln!("{}: {e}", post.key());
                failed.push(post.key());
            }
        }
    }
    println!("annotated {ok} post(s) as {annotator}");
    if !failed.is_empty() {
        return Err(CliError::Domain(format!(
            "{} post(s) could not be annotated (see llm_audit.jsonl); rerun to retry",
            failed.len()
        )));
    }
    Ok(ok)
}

fn llm_annotator(cfg: &Config) -> String {
    format!("llm:{}", cfg.llm.model)
}

pub fn agreement(
    cfg: &Config,
    a: Option<String>,
    b: Option<String>,
    round: Option<u32>,
) -> CliResult<crate::annotation::AgreementStats> {
    let mut store = open_store(cfg)?;
    let a = a.unwrap_or_else(|| cfg.annotation.human_annotator.clone());
    let b = b.unwrap_or_else(|| llm_annotator(cfg));
    let round = round.unwrap_or(cfg.annotation.round);
    let stats = store.agreement(&a, &b, round).map_err(|e| match e {
        crate::annotation::AnnotationError::UnknownAnnotator(..) => CliError::Domain(format!(
            "{e}; run `qse import-annotations` and `qse annotate-llm` first"
        )),
        other => domain(other),
    })?;
    let opened = store.open_conflicts(&a, &b, round).map_err(domain)?;
    std::fs::write(cfg.path("agreement.csv"), stats.to_csv()).map_err(domain)?;
    std::fs::write(cfg.path("agreement_confusion.csv"), stats.confusion_csv()).map_err(domain)?;
    println!(
        "{} items, {} agree ({:.2}%), kappa {:.4} [{:.4}, {:.4}]; {} new conflict case(s), {} open",
        stats.n_items,
        stats.n_agree,
        100.0 * stats.percent_agreement,
        stats.kappa,
        stats.kappa_ci95.0,
        stats.kappa_ci95.1,
        opened,
        store.open_cases().len()
    );
    Ok(stats)
}

/// Decisions file: `{ "<post key>": [ {"action": "concede"}, ... ] }`.
pub fn read_decisions(path: &Path) -> CliResult<ScriptedReviewer> {
    let text = std::fs::read_to_string(path).map_err(domain)?;
    let map: BTreeMap<String, Vec<Decision>> =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(map.into_iter().fold(ScriptedReviewer::new(), |r, (post, d)| r.script(post, d)))
}

pub fn negotiate(cfg: &Config, decisions: Option<PathBuf>, max_rounds: Option<u32>) -> CliResult<usize> {
    let mut store = open_store(cfg)?;
    if store.adjudication_pair().is_none() {
        return Err(CliError::Domain("no conflicts detected yet; run `qse agreement` first".into()));
    }
    let client = llm_client(cfg)?;
    let max_rounds = max_rounds.unwrap_or(cfg.annotation.max_rounds);
    let open: Vec<String> = store.open_cases().iter().map(|c| c.post_id.clone()).collect();
    let decisions = decisions.or_else(|| cfg.annotation.decisions.clone());
    let mut failures = 0;
    match decisions {
        Some(path) => {
            let mut reviewer = read_decisions(&path)?;
            for id in &open {
                match store.negotiate(id, max_rounds, &client, &mut reviewer) {
                    Ok(case) => match case.resolution {
                        Some(r) => println!("{id}: resolved as {} (conceded by {:?})", r.final_label, r.conceded_by),
                        None => println!("{id}: unresolved after {} round(s), needs senior review", case.rounds),
                    },
                    Err(e) => {
                        eprintln!("{id}: {e}");
                        failures += 1;
                    }
                }
            }
        }
        None => {
            // One elaboration per case awaiting the LLM; the human answers via `serve`.
            for id in &open {
                let case = store.case(id).expect("listed").clone();
                if case.turns.last().is_some_and(|t| t.speaker == Speaker::Llm) && case.rounds > 0 {
                    continue;
                }
                let post = store.post(id).expect("cases refer to corpus posts").clone();
                match crate::annotation::Elaborator::elaborate(&client, &case, &post.title, &post.body_text) {
                    Ok(turn) => {
                        store.add_turn(id, turn).map_err(domain)?;
                    }
                    Err(e) => {
                        eprintln!("{id}: {e}");
                        failures += 1;
                    }
                }
            }
            println!("requested elaboration on {} case(s); decide them with `qse serve`", open.len());
        }
    }
    let remaining = store.open_cases().len();
    println!("{remaining} case(s) still open");
    if failures > 0 {
        return Err(CliError::Domain(format!("{failures} case(s) stopped on LLM errors")));
    }
    Ok(remaining)
}

pub fn export_gold(cfg: &Config, output: Option<PathBuf>) -> CliResult<CategoryHistogram> {
    let store = open_store(cfg)?;
    let out = output.unwrap_or_else(|| cfg.gold_path());
    let hist = store.export_gold(&out).map_err(|e| match e {
        crate::annotation::AnnotationError::ExportBlocked(reason) => {
            let hint = match reason {
                crate::annotation::BlockReason::OpenCases(_) => "resolve them with `qse negotiate` or `qse serve`",
                _ => "run `qse agreement` first",
            };
            CliError::Domain(format!("export blocked: {reason}; {hint}"))
        }
        other => domain(other),
    })?;
    println!("wrote {} gold records to {}", hist.total, out.display());
    Ok(hist)
}

fn synth_gold(cfg: &Config, per_class: usize, seed: u64) -> CliResult {
    let gold = KeywordCorpus {
        per_class,
        seed,
        ..KeywordCorpus::default()
    }
    .generate();
    write_gold(&gold, cfg.gold_path()).map_err(domain)?;
    println!("wrote {} synthetic gold records to {}", gold.len(), cfg.gold_path().display());
    Ok(())
}

fn load_gold(cfg: &Config) -> CliResult<Vec<GoldRecord>> {
    read_gold(require(cfg.gold_path(), "export-gold")?).map_err(domain)
}

/// The run's tokenizer, trained once per config hash and then reused.
fn checkpoint(cfg: &Config, gold: &[GoldRecord]) -> CliResult<Checkpoint> {
    let tcfg = cfg.train_config();
    let path = cfg.run_dir().join("tokenizer.json");
    let family = crate::model::PRESETS
        .iter()
        .find(|p| p.0 == tcfg.checkpoint_id)
        .map(|p| p.1);
    match family {
        Some(family) if path.exists() => {
            let tok = TextTokenizer::load(&path, family).map_err(domain)?;
            Checkpoint::from_tokenizer(&tcfg, tok).map_err(domain)
        }
        Some(_) => {
            let texts = gold.iter().map(|g| crate::ingest::classifier_text(&g.title, &g.body_text));
            let ck = Checkpoint::resolve(&tcfg, texts).map_err(domain)?;
            std::fs::create_dir_all(cfg.run_dir()).map_err(domain)?;
            ck.tokenizer.save(&path).map_err(domain)?;
            Ok(ck)
        }
        None => Checkpoint::resolve(&tcfg, std::iter::empty::<String>()).map_err(|e| CliError::Usage(e.to_string())),
    }
}

pub fn analyze_lengths(cfg: &Config, bin_width: Option<usize>) -> CliResult<dataset::LengthAnalysis> {
    let gold = load_gold(cfg)?;
    let ck = checkpoint(cfg, &gold)?;
    let analysis = dataset::analyze_lengths_with(&gold, &ck.tokenizer, cfg.dataset.max_len).map_err(domain)?;
    let dir = cfg.path("lengths");
    std::fs::create_dir_all(&dir).map_err(domain)?;
    let bin = bin_width.unwrap_or(cfg.dataset.length_bin);
    std::fs::write(dir.join("histogram.csv"), analysis.histogram_csv(bin)).map_err(domain)?;
    std::fs::write(dir.join("percentiles.csv"), analysis.percentiles_csv()).map_err(domain)?;
    std::fs::write(
        dir.join("histogram.svg"),
        plot::histogram("Tokens per post", "tokens", &analysis.histogram(bin)),
    )
    .map_err(domain)?;
    println!(
        "p50 {} p90 {} p95 {} p99 {} max {}; {:.1}% fit in {} tokens",
        analysis.p50,
        analysis.p90,
        analysis.p95,
        analysis.p99,
        analysis.max,
        100.0 * analysis.coverage_at_recommended,
        analysis.recommended_max_len
    );
    Ok(analysis)
}

pub fn build_folds(cfg: &Config) -> CliResult<FoldPlan> {
    let gold = load_gold(cfg)?;
    let plan = dataset::stratified_folds(&gold, cfg.dataset.k, cfg.dataset.seed).map_err(domain)?;
    plan.write_csv(cfg.folds_path()).map_err(domain)?;
    let counts = plan.class_counts(gold.iter().map(|g| (g.post_id.as_str(), g.category())));
    for (i, c) in counts.iter().enumerate() {
        let row: Vec<String> = c.iter().map(|(cat, n)| format!("{}={n}", cat.slug())).collect();
        println!("fold {i}: {}", row.join(" "));
    }
    Ok(plan)
}

fn load_plan(cfg: &Config) -> CliResult<FoldPlan> {
    FoldPlan::read_csv(require(cfg.folds_path(), "build-folds")?, cfg.dataset.seed).map_err(domain)
}

pub fn train(cfg: &Config, folds: Option<usize>) -> CliResult<Vec<trainer::FoldResult>> {
    let gold = load_gold(cfg)?;
    let plan = load_plan(cfg)?;
    let tcfg = cfg.train_config();
    let ck = checkpoint(cfg, &gold)?;
    let n = folds.unwrap_or(plan.k);
    if n == 0 || n > plan.k {
        return Err(CliError::Usage(format!("--folds must be in 1..={}", plan.k)));
    }
    let fold_ids: Vec<usize> = (0..n).collect();
    let runs = cfg.path("runs");
    std::fs::write(
        cfg.run_dir().join("train_config.json"),
        serde_json::to_string_pretty(&tcfg).map_err(domain)?,
    )
    .map_err(domain)?;
    let results = trainer::cross_validate_folds(&gold, &plan, &tcfg, &ck, Some(&runs), &fold_ids).map_err(domain)?;
    for r in &results {
        println!(
            "fold {}: best epoch {} val acc {:.4} -> {}",
            r.fold,
            r.model.best_epoch,
            r.model.best_val_acc,
            trainer::fold_dir(&runs, &tcfg, r.fold).display()
        );
    }
    Ok(results)
}

pub fn evaluate(cfg: &Config) -> CliResult<Vec<EvalReport>> {
    let gold = load_gold(cfg)?;
    let plan = load_plan(cfg)?;
    let tcfg = cfg.train_config();
    let runs = cfg.path("runs");
    let outdir = cfg.eval_dir();
    let mut reports = Vec::new();
    let mut predictions = String::from("post_id,fold,actual,predicted,confidence\n");
    for fold in 0..plan.k {
        let dir = trainer::fold_dir(&runs, &tcfg, fold);
        if !dir.join("handle.json").exists() {
            continue;
        }
        let model = ModelHandle::load(&dir).map_err(domain)?;
        let val: Vec<GoldRecord> = gold
            .iter()
            .filter(|g| plan.fold_of(&g.post_id) == Some(fold))
            .cloned()
            .collect();
        let examples = dataset::tokenize(&val, model.tokenizer()).map_err(domain)?;
        let probs = trainer::predict(&model, &examples).map_err(domain)?;
        let actual: Vec<usize> = val.iter().map(|g| g.label_index).collect();
        let report = EvalReport::from_probabilities(&actual, &probs).map_err(domain)?;
        report
            .render(outdir.join(format!("fold{fold}")), &tcfg.checkpoint_id)
            .map_err(domain)?;
        for (g, p) in val.iter().zip(&probs) {
            let pred = crate::evaluator::argmax(p);
            predictions.push_str(&format!(
                "{},{fold},{},{},{:.6}\n",
                g.post_id, g.label_index, pred, p[pred]
            ));
        }
        println!(
            "fold {fold}: accuracy {:.4} macro F1 {:.4}",
            report.overall_accuracy, report.macro_f1
        );
        reports.push(report);
    }
    if reports.is_empty() {
        return Err(CliError::Missing {
            artifact: cfg.run_dir(),
            produced_by: "train",
        });
    }
    let summary = aggregate(&reports).map_err(domain)?;
    std::fs::create_dir_all(&outdir).map_err(domain)?;
    std::fs::write(outdir.join("summary.md"), summary.markdown()).map_err(domain)?;
    std::fs::write(
        outdir.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(domain)?,
    )
    .map_err(domain)?;
    std::fs::write(outdir.join("predictions.csv"), predictions).map_err(domain)?;
    print!("{}", summary.markdown());
    Ok(reports)
}

fn load_model(cfg: &Config, fold: usize) -> CliResult<ModelHandle> {
    let dir = match &cfg.serve.model_manifest {
        Some(d) => d.clone(),
        None => trainer::fold_dir(&cfg.path("runs"), &cfg.train_config(), fold),
    };
    ModelHandle::load(require(dir, "train")?).map_err(domain)
}

/// Seeded sample of up to `n` records, stratified by proportional allocation.
pub fn stratified_sample(gold: &[GoldRecord], n: usize, seed: u64) -> Vec<GoldRecord> {
    if n >= gold.len() {
        return gold.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in ChallengeCategory::ALL {
        let mut class: Vec<&GoldRecord> = gold.iter().filter(|g| g.label_index == c.index()).collect();
        class.shuffle(&mut rng);
        let take = ((class.len() * n) as f64 / gold.len() as f64).round() as usize;
        out.extend(class.into_iter().take(take.max(1)).cloned());
    }
    out.sort_by(|a, b| a.post_id.cmp(&b.post_id));
    out
}

pub fn explain(cfg: &Config) -> CliResult<GlobalSummary> {
    let gold = load_gold(cfg)?;
    let model = load_model(cfg, cfg.explain.fold)?;
    let sample = stratified_sample(&gold, cfg.explain.sample, cfg.dataset.seed);
    let ecfg = ExplainerConfig {
        max_evals: cfg.explain.max_evals,
        ..ExplainerConfig::default()
    };
    let locals = sample
        .iter()
        .map(|g| {
            explain_text(
                &model,
                &g.post_id,
                &crate::ingest::classifier_text(&g.title, &g.body_text),
                &ecfg,
            )
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(domain)?;
    let global = GlobalSummary::from_locals(&locals, cfg.explain.top_n).map_err(domain)?;
    render_explanations(&locals, Some(&global), cfg.explain_dir()).map_err(domain)?;
    let approx = locals.iter().filter(|l| l.approximate).count();
    println!(
        "explained {} post(s) ({approx} approximate); top features: {}",
        locals.len(),
        global
            .features
            .iter()
            .take(5)
            .map(|f| format!("{} ({:.4})", f.token, f.mean_abs_value))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(global)
}

pub fn serve(cfg: &Config) -> CliResult {
    let mut state = AppState::new()
        .with_workers(cfg.serve.workers)
        .with_api_token(std::env::var("QSE_API_TOKEN").ok())
        .with_explainer(ExplainerConfig {
            max_evals: cfg.explain.max_evals,
            ..ExplainerConfig::default()
        });
    match load_model(cfg, 0) {
        Ok(m) => state = state.with_model(m),
        Err(e) => log::warn!("serving without a model: {e}"),
    }
    match open_store(cfg) {
        Ok(s) => state = state.with_store(s),
        Err(e) => log::warn!("serving without an annotation store: {e}"),
    }
    match llm_client(cfg) {
        Ok(c) => state = state.with_elaborator(Arc::new(c)),
        Err(e) => log::warn!("serving without an LLM: {e}"),
    }
    let addr = std::net::SocketAddr::from(([127, 0, 0, 1], cfg.serve.port));
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(domain)?;
    rt.block_on(service::serve(state, addr, cfg.serve.cors_origin.as_deref()))
        .map_err(domain)
}

pub fn report_frequencies(cfg: &Config, rounding: Rounding) -> CliResult<crate::taxonomy::FrequencyReport> {
    let labels: Vec<ChallengeCategory> = if cfg.gold_path().exists() {
        load_gold(cfg)?.iter().map(GoldRecord::category).collect()
    } else {
        let store = open_store(cfg)?;
        let labels: Vec<ChallengeCategory> = store.final_labels().into_values().collect();
        if labels.is_empty() {
            return Err(CliError::Missing {
                artifact: cfg.gold_path(),
                produced_by: "export-gold",
            });
        }
        labels
    };
    let report = report_from_histogram(CategoryHistogram::from_labels(labels), rounding);
    std::fs::write(cfg.path("frequencies.csv"), report.to_csv()).map_err(domain)?;
    let names: Vec<String> = report.rows.iter().map(|r| r.category.name().to_string()).collect();
    let values: Vec<f64> = report.rows.iter().map(|r| r.percent()).collect();
    std::fs::write(
        cfg.path("frequencies.svg"),
        plot::bar_chart("Share of posts by category (%)", &names, &values),
    )
    .map_err(domain)?;
    print!("{}", report.to_csv());
    Ok(report)
}

pub fn pipeline(cfg: &Config) -> CliResult {
    ingest(cfg, None, None, None, None)?;
    if cfg.annotation.human_labels.is_some() {
        import_annotations(cfg, None)?;
    }
    annotate_llm(cfg, None)?;
    agreement(cfg, None, None, None)?;
    if cfg.annotation.decisions.is_none() {
        return Err(CliError::Usage(
            "pipeline needs annotation.decisions to negotiate non-interactively".into(),
        ));
    }
    negotiate(cfg, None, None)?;
    export_gold(cfg, None)?;
    analyze_lengths(cfg, None)?;
    build_folds(cfg)?;
    train(cfg, None)?;
    evaluate(cfg)?;
    explain(cfg)?;
    report_frequencies(cfg, Rounding::default())?;
    Ok(())
}
