//! Command-line front end: argument parsing, layered run configuration and
//! the pipeline subcommands. Every stage reads and writes plain files.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{self, classify_provisions, ClassificationTemplate, ClassifyError, ClassifyOptions};
use crate::compliance::{self, assemble_report, check_units, render_markdown, CheckError, CheckUnit};
use crate::corpus::{
    chunk_paragraphs, parse_document, split_sentences, Block, CharHeuristic, CorpusError, DocumentFormat,
    SourceDocument,
};
use crate::eval::{self, Averaging, EvalError, MatchMode, MetricsReport, PredSource};
use crate::llm::{Backend, BackendConfig, BackendKind, CostLedger, CostTotals, LlmError, PriceTable, ResponseCache, StubScript};
use crate::records::{to_lines, write_atomic};
use crate::taxonomy::{load_concept_model, load_ruleset, TaxonomyError};

pub const DEFAULT_BUDGET: usize = 4096;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Backend(String),
    #[error("{failures} unparseable response(s) exceed the limit of {limit}")]
    ParseFailures { failures: usize, limit: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Backend(_) => 3,
            CliError::ParseFailures { .. } => 4,
        }
    }
}

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        input(e)
    }
}

impl From<TaxonomyError> for CliError {
    fn from(e: TaxonomyError) -> Self {
        input(e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        input(e)
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::Backend { .. } | LlmError::ScriptExhausted(_) => CliError::Backend(e.to_string()),
            LlmError::InvalidMessages(_) | LlmError::UnknownModelPrice(_) | LlmError::Config(_) => input(e),
        }
    }
}

impl From<CheckError> for CliError {
    fn from(e: CheckError) -> Self {
        match e {
            CheckError::Backend(e) => e.into(),
            parse @ CheckError::Parse { .. } => CliError::Backend(parse.to_string()),
        }
    }
}

impl From<ClassifyError> for CliError {
    fn from(e: ClassifyError) -> Self {
        match e {
            ClassifyError::Backend(e) => e.into(),
            other => input(other),
        }
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    write_atomic(path, contents.as_ref()).map_err(|e| input(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("outputs serialize");
    s.push('\n');
    s
}

// ---------------------------------------------------------------------------
// arguments

#[derive(Debug, Parser)]
#[command(name = "lexcheck", version, about = "Classify regulatory provisions and check artifacts against compliance rules")]
pub struct Cli {
    /// TOML file with run defaults; flags override it, and it overrides
    /// LEXCHECK_* environment variables.
    #[arg(long, global = true, env = "LEXCHECK_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a document into provisions (sentence) or passages (paragraph).
    Segment(SegmentArgs),
    /// Label the provisions of a document with concepts.
    Classify(ClassifyArgs),
    /// Check an artifact against a ruleset and write a compliance report.
    Check(CheckArgs),
    /// Score predictions against gold labels.
    Eval(EvalArgs),
    /// Compare sentence-level and paragraph-level accuracies.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Sentence,
    Paragraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Plain,
    Structured,
}

impl From<FormatArg> for DocumentFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Plain => DocumentFormat::Plain,
            FormatArg::Structured => DocumentFormat::Structured,
        }
    }
}

#[derive(Debug, Clone, Args, Default)]
pub struct DocArgs {
    /// Input layout: plain text or the structured block markup.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Document id used in unit references (default: input file stem).
    #[arg(long)]
    pub doc_id: Option<String>,
    /// Jurisdiction tag attached to the parsed document.
    #[arg(long)]
    pub jurisdiction: Option<String>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct BackendArgs {
    /// Model backend: an OpenAI-compatible endpoint or a scripted stub.
    #[arg(long, value_enum)]
    pub backend: Option<BackendChoice>,
    /// Stub script (JSONL of {exact|contains, response}).
    #[arg(long)]
    pub stub_script: Option<PathBuf>,
    /// Base URL of the chat-completions API.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Maximum concurrent requests.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Attempts per request, including the first.
    #[arg(long)]
    pub max_attempts: Option<u32>,
    /// Backoff before the first retry, doubled after each failure.
    #[arg(long)]
    pub base_backoff_ms: Option<u64>,
    /// Directory of the persistent response cache.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// JSON map of model -> {input_per_1k, output_per_1k}; costs are zero without one.
    #[arg(long)]
    pub price_table: Option<PathBuf>,
    /// Exit with status 4 when more responses than this cannot be parsed.
    #[arg(long)]
    pub max_parse_failures: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    Http,
    Stub,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub doc: DocArgs,
    #[arg(long, value_enum)]
    pub granularity: Option<Granularity>,
    /// Token budget per passage (paragraph granularity).
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub doc: DocArgs,
    /// Concept model (JSONL).
    #[arg(long)]
    pub concepts: PathBuf,
    /// Classification prompt template with [system]/[user] sections.
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Run the keyword classifier alone, without a model backend.
    #[arg(long)]
    pub keyword_only: bool,
    /// Match keywords on English stems.
    #[arg(long)]
    pub stem: bool,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Labels file (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    /// Per-call cost ledger (JSONL).
    #[arg(long)]
    pub ledger: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub artifact: PathBuf,
    #[command(flatten)]
    pub doc: DocArgs,
    /// Ruleset (JSONL).
    #[arg(long)]
    pub rules: PathBuf,
    #[arg(long, value_enum)]
    pub granularity: Option<Granularity>,
    /// Send the enclosing paragraph as context.
    #[arg(long, value_enum)]
    pub context: Option<Toggle>,
    #[arg(long)]
    pub budget: Option<usize>,
    /// Compliance prompt template containing {rules}, {text} and {context}.
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Repeat the run N times; repeated runs skip cache reads.
    #[arg(long)]
    pub runs: Option<usize>,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Gold labels (JSONL of {unit_ref, labels}).
    #[arg(long)]
    pub gold: PathBuf,
    /// Predictions: a labels file or a compliance report.
    #[arg(long, conflicts_with = "runs_dir", required_unless_present = "runs_dir")]
    pub pred: Option<PathBuf>,
    /// Directory of repeated runs: prediction files or run directories holding report.json.
    #[arg(long)]
    pub runs_dir: Option<PathBuf>,
    #[arg(long, default_value = "micro")]
    pub averaging: Averaging,
    /// Unit correctness: exact set match or any overlap (default: overlap for
    /// compliance reports, exact otherwise).
    #[arg(long = "match")]
    pub match_mode: Option<MatchMode>,
    /// Ruleset whose ids join the label universe.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Concept model whose ids join the label universe.
    #[arg(long)]
    pub concepts: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// `name=sentence,paragraph`, repeatable.
    #[arg(long = "pair")]
    pub pairs: Vec<String>,
    /// Metrics file of a sentence-level run (paired with --paragraph).
    #[arg(long, requires = "paragraph")]
    pub sentence: Option<PathBuf>,
    #[arg(long, requires = "sentence")]
    pub paragraph: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// configuration layers

/// One source of settings. Layers are merged flags over config file over
/// environment, then resolved against the built-in defaults.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub format: Option<FormatArg>,
    pub granularity: Option<Granularity>,
    pub context: Option<Toggle>,
    pub budget: Option<usize>,
    pub runs: Option<usize>,
    pub template: Option<PathBuf>,
    pub backend: Option<BackendChoice>,
    pub stub_script: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<u32>,
    pub parallelism: Option<usize>,
    pub max_attempts: Option<u32>,
    pub base_backoff_ms: Option<u64>,
    pub timeout_ms: Option<u64>,
    pub api_key_env: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub price_table: Option<PathBuf>,
    pub max_parse_failures: Option<usize>,
}

macro_rules! merge_fields {
    ($hi:expr, $lo:expr, $($f:ident),*) => {
        Layer { $($f: $hi.$f.or($lo.$f)),* }
    };
}

impl Layer {
    pub fn over(self, lower: Layer) -> Layer {
        merge_fields!(
            self, lower, format, granularity, context, budget, runs, template, backend, stub_script, endpoint, model,
            temperature, max_output_tokens, parallelism, max_attempts, base_backoff_ms, timeout_ms, api_key_env,
            cache_dir, price_table, max_parse_failures
        )
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Layer, CliError> {
        toml::from_str(text).map_err(|e| input(format!("{}: {e}", path.display())))
    }

    /// Reads `LEXCHECK_<FIELD>` variables, e.g. `LEXCHECK_ENDPOINT`.
    pub fn from_env(get: impl Fn(&str) -> Option<String>) -> Result<Layer, CliError> {
        let mut table = toml::Table::new();
        for key in [
            "format", "granularity", "context", "template", "backend", "stub_script", "endpoint", "model",
            "api_key_env", "cache_dir", "price_table",
        ] {
            if let Some(v) = get(&format!("LEXCHECK_{}", key.to_uppercase())) {
                table.insert(key.into(), toml::Value::String(v));
            }
        }
        for key in [
            "budget", "runs", "max_output_tokens", "parallelism", "max_attempts", "base_backoff_ms", "timeout_ms",
            "max_parse_failures",
        ] {
            if let Some(v) = get(&format!("LEXCHECK_{}", key.to_uppercase())) {
                let n: i64 = v.parse().map_err(|_| input(format!("LEXCHECK_{}: not an integer: {v}", key.to_uppercase())))?;
                table.insert(key.into(), toml::Value::Integer(n));
            }
        }
        if let Some(v) = get("LEXCHECK_TEMPERATURE") {
            let t: f64 = v.parse().map_err(|_| input(format!("LEXCHECK_TEMPERATURE: not a number: {v}")))?;
            table.insert("temperature".into(), toml::Value::Float(t));
        }
        table.try_into().map_err(|e| input(format!("environment: {e}")))
    }

    fn from_backend_args(b: &BackendArgs) -> Layer {
        Layer {
            backend: b.backend,
            stub_script: b.stub_script.clone(),
            endpoint: b.endpoint.clone(),
            model: b.model.clone(),
            temperature: b.temperature,
            parallelism: b.parallelism,
            max_attempts: b.max_attempts,
            base_backoff_ms: b.base_backoff_ms,
            cache_dir: b.cache_dir.clone(),
            price_table: b.price_table.clone(),
            max_parse_failures: b.max_parse_failures,
            ..Layer::default()
        }
    }
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub format: FormatArg,
    pub granularity: Granularity,
    pub context: bool,
    pub budget: usize,
    pub runs: usize,
    pub template: Option<PathBuf>,
    pub backend: BackendConfig,
    pub stub_script: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub price_table: Option<PathBuf>,
    pub max_parse_failures: Option<usize>,
}

impl RunConfig {
    pub fn resolve(layer: Layer) -> Result<RunConfig, CliError> {
        let defaults = BackendConfig::default();
        let mut backend = BackendConfig {
            kind: match layer.backend {
                Some(BackendChoice::Http) => BackendKind::Http,
                Some(BackendChoice::Stub) => BackendKind::Stub,
                None if layer.endpoint.is_some() => BackendKind::Http,
                None => BackendKind::Stub,
            },
            endpoint: layer.endpoint,
            model_name: layer.model.unwrap_or(defaults.model_name),
            temperature: layer.temperature.unwrap_or(defaults.temperature),
            max_output_tokens: layer.max_output_tokens.unwrap_or(defaults.max_output_tokens),
            parallelism: layer.parallelism.unwrap_or(defaults.parallelism),
            api_key_env: layer.api_key_env.unwrap_or(defaults.api_key_env),
            ..defaults
        };
        if let Some(n) = layer.max_attempts {
            backend.retry.max_attempts = n;
        }
        if let Some(ms) = layer.base_backoff_ms {
            backend.retry.base_backoff = std::time::Duration::from_millis(ms);
        }
        if let Some(ms) = layer.timeout_ms {
            backend.request_timeout = std::time::Duration::from_millis(ms);
        }
        backend.validate().map_err(input)?;
        let cfg = RunConfig {
            format: layer.format.unwrap_or(FormatArg::Plain),
            granularity: layer.granularity.unwrap_or(Granularity::Paragraph),
            context: layer.context.unwrap_or(Toggle::On) == Toggle::On,
            budget: layer.budget.unwrap_or(DEFAULT_BUDGET),
            runs: layer.runs.unwrap_or(1),
            template: layer.template,
            backend,
            stub_script: layer.stub_script,
            cache_dir: layer.cache_dir,
            price_table: layer.price_table,
            max_parse_failures: layer.max_parse_failures,
        };
        if cfg.budget == 0 {
            return Err(input("--budget must be positive"));
        }
        if cfg.runs == 0 {
            return Err(input("--runs must be at least 1"));
        }
        Ok(cfg)
    }

    pub fn prices(&self) -> Result<PriceTable, CliError> {
        match &self.price_table {
            Some(p) => PriceTable::load(p).map_err(input),
            None => Ok(PriceTable::free()),
        }
    }

    /// A fresh backend; stub scripts restart from their first entry.
    pub fn build_backend(&self, bypass_cache_reads: bool) -> Result<Backend, CliError> {
        let backend = match self.backend.kind {
            BackendKind::Http => Backend::http(self.backend.clone())?,
            BackendKind::Stub => {
                let path = self
                    .stub_script
                    .as_ref()
                    .ok_or_else(|| input("the stub backend needs --stub-script"))?;
                let script = StubScript::parse(&read_file(path)?).map_err(|e| input(format!("{}: {e}", path.display())))?;
                Backend::stub(self.backend.clone(), script)?
            }
        };
        Ok(match &self.cache_dir {
            Some(dir) => {
                let cache = ResponseCache::persistent(dir).map_err(|e| input(format!("{}: {e}", dir.display())))?;
                backend.with_cache(Arc::new(cache)).bypass_cache_reads(bypass_cache_reads)
            }
            None => backend,
        })
    }
}

fn load_layers(config: Option<&Path>, flags: Layer) -> Result<RunConfig, CliError> {
    let env = Layer::from_env(|k| std::env::var(k).ok())?;
    let file = match config {
        Some(p) => Layer::from_toml(&read_file(p)?, p)?,
        None => Layer::default(),
    };
    RunConfig::resolve(flags.over(file).over(env))
}

// ---------------------------------------------------------------------------
// pipeline helpers

pub fn load_document(path: &Path, args: &DocArgs, format: FormatArg) -> Result<SourceDocument, CliError> {
    let raw = read_file(path)?;
    let doc_id = match &args.doc_id {
        Some(id) => id.clone(),
        None => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "doc".into()),
    };
    let doc = parse_document(&doc_id, &raw, format.into()).map_err(|e| input(format!("{}: {e}", path.display())))?;
    Ok(match &args.jurisdiction {
        Some(j) => doc.with_jurisdiction(j.clone()),
        None => doc,
    })
}

/// Units to check at the given granularity. With context on, a sentence
/// carries its enclosing block and a passage cut from a larger block
/// carries that block; a passage that is a whole block needs none.
pub fn check_units_for(
    doc: &SourceDocument,
    granularity: Granularity,
    budget: usize,
    context: bool,
) -> Result<Vec<CheckUnit>, CorpusError> {
    let block_text = |index: usize| doc.blocks.iter().find(|b| b.index() == index).map(Block::text);
    Ok(match granularity {
        Granularity::Sentence => split_sentences(doc)
            .iter()
            .map(|p| CheckUnit::from(p).with_context(context.then(|| block_text(p.id.block)).flatten()))
            .collect(),
        Granularity::Paragraph => chunk_paragraphs(doc, budget, &CharHeuristic)?
            .iter()
            .map(|p| {
                let whole = block_text(p.first_block);
                let ctx = whole.filter(|w| context && w.trim() != p.text.trim());
                CheckUnit::from(p).with_context(ctx)
            })
            .collect(),
    })
}

fn check_parse_limit(failures: usize, limit: Option<usize>) -> Result<(), CliError> {
    match limit {
        Some(limit) if failures > limit => Err(CliError::ParseFailures { failures, limit }),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostSummary {
    pub model: String,
    pub runs: Vec<CostTotals>,
}

// ---------------------------------------------------------------------------
// subcommands

pub fn cmd_segment(args: &SegmentArgs, cfg: &RunConfig) -> Result<usize, CliError> {
    let doc = load_document(&args.input, &args.doc, cfg.format)?;
    let (lines, n) = match cfg.granularity {
        Granularity::Sentence => {
            let p = split_sentences(&doc);
            (to_lines(&p), p.len())
        }
        Granularity::Paragraph => {
            let p = chunk_paragraphs(&doc, cfg.budget, &CharHeuristic)?;
            (to_lines(&p), p.len())
        }
    };
    write_file(&args.out, lines)?;
    Ok(n)
}

pub fn cmd_classify(args: &ClassifyArgs, cfg: &RunConfig) -> Result<usize, CliError> {
    let model = load_concept_model(&args.concepts)?;
    let doc = load_document(&args.input, &args.doc, cfg.format)?;
    let template_text = match &cfg.template {
        Some(p) => read_file(p)?,
        None => classify::DEFAULT_TEMPLATE.to_string(),
    };
    let template = ClassificationTemplate::parse(&template_text)?;
    let backend = if args.keyword_only { None } else { Some(cfg.build_backend(false)?) };
    let ledger = CostLedger::new(cfg.prices()?);
    let provisions = split_sentences(&doc);
    let records = classify_provisions(
        &provisions,
        &model,
        &ClassifyOptions {
            backend: backend.as_ref(),
            template: &template,
            stem_keywords: args.stem,
        },
        &ledger,
    )?;
    write_file(&args.out, to_lines(&records))?;
    if let Some(path) = &args.ledger {
        write_file(path, to_lines(&ledger.entries()))?;
    }
    let failures = records.iter().filter(|r| r.parse_error.is_some()).count();
    check_parse_limit(failures, cfg.max_parse_failures)?;
    Ok(records.len())
}

pub fn cmd_check(args: &CheckArgs, cfg: &RunConfig) -> Result<Vec<compliance::ComplianceReport>, CliError> {
    let rules = load_ruleset(&args.rules)?;
    let doc = load_document(&args.artifact, &args.doc, cfg.format)?;
    let template = match &cfg.template {
        Some(p) => read_file(p)?,
        None => compliance::DEFAULT_TEMPLATE.to_string(),
    };
    compliance::validate_template(&template).map_err(input)?;
    let units = check_units_for(&doc, cfg.granularity, cfg.budget, cfg.context)?;
    let artifact_ref = args
        .artifact
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let prices = cfg.prices()?;

    let mut reports = Vec::new();
    let mut totals = Vec::new();
    for run in 0..cfg.runs {
        let dir = if cfg.runs == 1 {
            args.out_dir.clone()
        } else {
            args.out_dir.join(format!("run-{:03}", run + 1))
        };
        let backend = cfg.build_backend(cfg.runs > 1)?;
        let ledger = CostLedger::new(prices.clone());
        let findings = check_units(&units, &rules, &template, &backend, &ledger)?;
        let report = assemble_report(findings, &rules, &artifact_ref);
        write_file(&dir.join("report.json"), to_json(&report))?;
        write_file(&dir.join("report.md"), render_markdown(&report, &rules))?;
        write_file(&dir.join("ledger.jsonl"), to_lines(&ledger.entries()))?;
        totals.push(ledger.totals());
        reports.push(report);
    }
    write_file(
        &args.out_dir.join("costs.json"),
        to_json(&CostSummary {
            model: cfg.backend.model_name.clone(),
            runs: totals,
        }),
    )?;
    let worst = reports.iter().map(|r| r.totals.parse_failures).max().unwrap_or(0);
    check_parse_limit(worst, cfg.max_parse_failures)?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunsReport {
    pub runs: Vec<NamedReport>,
    pub aggregate: eval::RunAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedReport {
    pub source: String,
    #[serde(flatten)]
    pub report: MetricsReport,
}

/// Prediction sources of a runs directory in name order: the `report.json`
/// of every run subdirectory when there are any (as written by
/// `check --runs`), otherwise every `*.json` and `*.jsonl` file.
pub fn run_sources(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| input(format!("{}: {e}", dir.display())))?;
    let mut reports = Vec::new();
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(input)?.path();
        if path.is_dir() && path.join("report.json").is_file() {
            reports.push(path.join("report.json"));
        } else if path.is_file() && matches!(path.extension().and_then(|e| e.to_str()), Some("json" | "jsonl")) {
            files.push(path);
        }
    }
    let mut out = if reports.is_empty() { files } else { reports };
    out.sort();
    if out.is_empty() {
        return Err(input(format!("{}: no prediction files", dir.display())));
    }
    Ok(out)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Vec<MetricsReport>, CliError> {
    let gold = eval::load_gold(&args.gold)?;
    let mut universe: Vec<String> = Vec::new();
    if let Some(p) = &args.rules {
        universe.extend(load_ruleset(p)?.ids().map(|id| id.as_str().to_string()));
    }
    if let Some(p) = &args.concepts {
        universe.extend(load_concept_model(p)?.concepts.iter().map(|c| c.id.clone()));
    }
    let sources = match (&args.pred, &args.runs_dir) {
        (Some(p), _) => vec![p.clone()],
        (None, Some(dir)) => run_sources(dir)?,
        (None, None) => return Err(input("either --pred or --runs-dir is required")),
    };

    let mut named = Vec::new();
    for src in &sources {
        let (preds, kind) = eval::load_predictions(src)?;
        let mode = args.match_mode.unwrap_or(match kind {
            PredSource::ComplianceReport => MatchMode::AnyOverlap,
            PredSource::Records => MatchMode::Exact,
        });
        let report = eval::evaluate(&preds, &gold, &universe, args.averaging, mode)?;
        named.push(NamedReport {
            source: src.display().to_string(),
            report,
        });
    }

    if args.runs_dir.is_some() {
        let reports: Vec<MetricsReport> = named.iter().map(|n| n.report.clone()).collect();
        let aggregate = eval::aggregate_runs(&reports)?;
        write_file(&args.out_dir.join("boxplot.tsv"), eval::render_box_table(&aggregate))?;
        write_file(&args.out_dir.join("metrics.json"), to_json(&RunsReport { runs: named, aggregate }))?;
        Ok(reports)
    } else {
        let report = named.remove(0).report;
        write_file(&args.out_dir.join("metrics.json"), to_json(&report))?;
        Ok(vec![report])
    }
}

fn parse_pair(s: &str) -> Result<(String, f64, f64), CliError> {
    let bad = || input(format!("--pair {s:?}: expected name=sentence,paragraph"));
    let (name, nums) = s.split_once('=').ok_or_else(bad)?;
    let (a, b) = nums.split_once(',').ok_or_else(bad)?;
    let a: f64 = a.trim().parse().map_err(|_| bad())?;
    let b: f64 = b.trim().parse().map_err(|_| bad())?;
    if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
        return Err(input(format!("--pair {s:?}: accuracies must lie in [0, 1]")));
    }
    Ok((name.trim().to_string(), a, b))
}

fn metrics_accuracy(path: &Path) -> Result<f64, CliError> {
    #[derive(Deserialize)]
    struct Acc {
        accuracy: f64,
    }
    let acc: Acc = serde_json::from_str(&read_file(path)?).map_err(|e| input(format!("{}: {e}", path.display())))?;
    Ok(acc.accuracy)
}

pub fn cmd_compare(args: &CompareArgs) -> Result<eval::GranularityComparison, CliError> {
    let mut pairs = args.pairs.iter().map(|p| parse_pair(p)).collect::<Result<Vec<_>, _>>()?;
    if let (Some(s), Some(p)) = (&args.sentence, &args.paragraph) {
        pairs.push(("run".into(), metrics_accuracy(s)?, metrics_accuracy(p)?));
    }
    if pairs.is_empty() {
        return Err(input("nothing to compare: give --pair or --sentence/--paragraph"));
    }
    let cmp = eval::compare_granularity_batch(pairs.iter().map(|(n, s, p)| (n.as_str(), *s, *p)));
    let json = to_json(&cmp);
    match &args.out {
        Some(path) => write_file(path, json)?,
        None => print!("{json}"),
    }
    Ok(cmp)
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = cli.config.as_deref();
    match &cli.command {
        Command::Segment(a) => {
            let flags = Layer {
                format: a.doc.format,
                granularity: a.granularity,
                budget: a.budget,
                ..Layer::default()
            };
            let n = cmd_segment(a, &load_layers(config, flags)?)?;
            eprintln!("wrote {n} units to {}", a.out.display());
        }
        Command::Classify(a) => {
            let mut flags = Layer::from_backend_args(&a.backend);
            flags.format = a.doc.format;
            flags.template = a.template.clone();
            let n = cmd_classify(a, &load_layers(config, flags)?)?;
            eprintln!("classified {n} provisions into {}", a.out.display());
        }
        Command::Check(a) => {
            let mut flags = Layer::from_backend_args(&a.backend);
            flags.format = a.doc.format;
            flags.granularity = a.granularity;
            flags.context = a.context;
            flags.budget = a.budget;
            flags.template = a.template.clone();
            flags.runs = a.runs;
            let reports = cmd_check(a, &load_layers(config, flags)?)?;
            for r in &reports {
                eprintln!(
                    "{} units, {} of {} rules covered, uncovered: {}",
                    r.totals.findings,
                    r.totals.rules_covered,
                    r.totals.rules,
                    r.uncovered_rules.iter().map(|id| id.as_str()).collect::<Vec<_>>().join(", ")
                );
            }
        }
        Command::Eval(a) => {
            for r in cmd_eval(a)? {
                let h = r.headline();
                eprintln!(
                    "accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4} ({} units, {} parse failures)",
                    r.accuracy, h.precision, h.recall, h.f1, r.units, r.parse_failure_count
                );
            }
        }
        Command::Compare(a) => {
            cmd_compare(a)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_over_file_over_env() {
        let env = Layer::from_env(|k| match k {
            "LEXCHECK_MODEL" => Some("env-model".into()),
            "LEXCHECK_ENDPOINT" => Some("http://env".into()),
            "LEXCHECK_PARALLELISM" => Some("2".into()),
            _ => None,
        })
        .unwrap();
        let file = Layer::from_toml("model = \"file-model\"\nbudget = 300\nparallelism = 3\n", Path::new("c.toml")).unwrap();
        let flags = Layer {
            model: Some("flag-model".into()),
            backend: Some(BackendChoice::Http),
            ..Layer::default()
        };
        let cfg = RunConfig::resolve(flags.over(file).over(env)).unwrap();
        assert_eq!(cfg.backend.model_name, "flag-model");
        assert_eq!(cfg.backend.endpoint.as_deref(), Some("http://env"));
        assert_eq!(cfg.backend.parallelism, 3);
        assert_eq!(cfg.budget, 300);
        assert!(cfg.context);
    }

    #[test]
    fn config_validation() {
        assert!(Layer::from_toml("colour = 1\n", Path::new("c.toml")).is_err());
        assert!(Layer::from_env(|k| (k == "LEXCHECK_BUDGET").then(|| "many".into())).is_err());
        let stub_without_script = RunConfig::resolve(Layer::default()).unwrap().build_backend(false);
        assert_eq!(stub_without_script.err().map(|e| e.exit_code()), Some(2));
        let http_without_endpoint = RunConfig::resolve(Layer {
            backend: Some(BackendChoice::Http),
            ..Layer::default()
        });
        assert!(http_without_endpoint.is_err());
    }

    #[test]
    fn endpoint_selects_http_unless_backend_given() {
        let endpoint = || Some("http://localhost:1".to_string());
        let implied = RunConfig::resolve(Layer {
            endpoint: endpoint(),
            ..Layer::default()
        })
        .unwrap();
        assert_eq!(implied.backend.kind, BackendKind::Http);
        let pinned = RunConfig::resolve(Layer {
            endpoint: endpoint(),
            backend: Some(BackendChoice::Stub),
            ..Layer::default()
        })
        .unwrap();
        assert_eq!(pinned.backend.kind, BackendKind::Stub);
    }

    #[test]
    fn error_exit_codes() {
        let backend: CliError = LlmError::Backend {
            attempts: 3,
            last_status: Some(503),
            message: "down".into(),
        }
        .into();
        assert_eq!(backend.exit_code(), 3);
        assert_eq!(CliError::from(LlmError::UnknownModelPrice("m".into())).exit_code(), 2);
        assert_eq!(CliError::ParseFailures { failures: 2, limit: 1 }.exit_code(), 4);
    }

    #[test]
    fn pair_syntax() {
        assert_eq!(parse_pair("gpt=0.30,0.63").unwrap(), ("gpt".into(), 0.30, 0.63));
        assert!(parse_pair("gpt=0.3").is_err());
        assert!(parse_pair("gpt=1.3,0.2").is_err());
    }

    #[test]
    fn sentence_units_carry_their_paragraph() {
        let doc = parse_document("d", "One rule. Two rule.\n\nAlone.\n", DocumentFormat::Plain).unwrap();
        let units = check_units_for(&doc, Granularity::Sentence, 100, true).unwrap();
        assert_eq!(units.len(), 3);
        assert_eq!(units[0].context.as_deref(), Some("One rule. Two rule."));
        let units = check_units_for(&doc, Granularity::Paragraph, 100, true).unwrap();
        assert!(units.iter().all(|u| u.context.is_none()));
        let units = check_units_for(&doc, Granularity::Paragraph, 3, true).unwrap();
        assert_eq!(units[0].text, "One rule.");
        assert_eq!(units[0].context.as_deref(), Some("One rule. Two rule."));
        let off = check_units_for(&doc, Granularity::Sentence, 100, false).unwrap();
        assert!(off.iter().all(|u| u.context.is_none()));
    }
}
