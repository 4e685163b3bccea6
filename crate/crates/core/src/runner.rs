//! Experiment configuration and the end-to-end commands.
//!
//! Output layout under the configured directory:
//!
//! ```text
//! datasets/  <name>.ingested.jsonl, <name>.rejections.jsonl,
//!            <name>.jsonl (sampled), <name>.manifest.json
//! ledgers/   run.jsonl
//! results/   results.jsonl, votes.jsonl
//! reports/   report.json and one TSV per table
//! ```
//!
//! Everything after `run` reads `results/results.jsonl` only and never
//! touches a backend.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    self, count_pending, run_batch, BackendError, BackendProfile, BatchError, BatchJob, BatchOptions, BatchSummary,
    ChatBackend, ExchangeKey, Ledger, LedgerError, Sleeper, Turn,
};
use crate::corpus::{self, CorpusError, DatasetSpec, Label, Mode, Record};
use crate::ensemble::{self, Algorithm, Ballot, Vote, VoteOutcome};
use crate::metrics::{self, AblationTable, AggregateReport, CellMetrics, ErrorBreakdown, MacroPolicy, MetricsError};
use crate::parsing::{parse_prediction, Prediction};
use crate::promptgen::{PromptError, PromptGenerator, PromptId, TemplateSet, ThesisTable};
use crate::seed::derive_seed;

pub const RESULTS_SCHEMA: &str = "stancevote.results/1";
pub const VOTES_SCHEMA: &str = "stancevote.votes/1";
pub const MANIFEST_SCHEMA: &str = "stancevote.manifest/1";
pub const REPORT_SCHEMA: &str = "stancevote.report/1";

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_prompts() -> Vec<PromptId> {
    PromptId::RAR.to_vec()
}

fn default_true() -> bool {
    true
}

fn default_repeats() -> u32 {
    1
}

fn default_voting() -> Vec<Algorithm> {
    Algorithm::ALL.to_vec()
}

fn default_concurrency() -> usize {
    4
}

/// Contents of the experiment TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_prompts")]
    pub prompts: Vec<PromptId>,
    #[serde(default = "default_true")]
    pub certainty: bool,
    #[serde(default = "default_repeats")]
    pub repeats: u32,
    #[serde(default = "default_voting")]
    pub voting: Vec<Algorithm>,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub macro_policy: MacroPolicy,
    /// TOML file with replacement prompt templates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    /// TOML file with a replacement thesis table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theses: Option<PathBuf>,
    pub datasets: Vec<DatasetSpec>,
    pub backends: Vec<BackendProfile>,
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("dataset `{dataset}`: {source}")]
    Corpus {
        dataset: String,
        #[source]
        source: CorpusError,
    },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("backend: {0}")]
    Backend(String),
    #[error("{0}")]
    Metrics(String),
    #[error("{path} line {line}: {message}")]
    BadResults { path: PathBuf, line: usize, message: String },
}

impl RunnerError {
    /// 1 configuration, 2 I/O, 3 backend failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_) | RunnerError::Metrics(_) => 1,
            RunnerError::Corpus { source, .. } => match source {
                CorpusError::Io { .. } => 2,
                _ => 1,
            },
            RunnerError::Io { .. } | RunnerError::Ledger(_) | RunnerError::BadResults { .. } => 2,
            RunnerError::Backend(_) => 3,
        }
    }
}

impl From<PromptError> for RunnerError {
    fn from(e: PromptError) -> Self {
        RunnerError::Config(e.to_string())
    }
}

impl From<BackendError> for RunnerError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Config(m) => RunnerError::Config(m),
            BackendError::Io { path, message } => RunnerError::Io { path, message },
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> RunnerError {
    RunnerError::Io { path: path.to_path_buf(), message: e.to_string() }
}

fn is_safe_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig, RunnerError> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| RunnerError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig, RunnerError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        self.templates.as_mut().map(fix);
        self.theses.as_mut().map(fix);
        for d in &mut self.datasets {
            fix(&mut d.path);
        }
        for b in &mut self.backends {
            b.script.as_mut().map(fix);
        }
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        let fail = |m: String| Err(RunnerError::Config(m));
        if self.datasets.is_empty() {
            return fail("at least one dataset is required".into());
        }
        if self.backends.is_empty() {
            return fail("at least one backend is required".into());
        }
        if self.repeats == 0 {
            return fail("repeats must be at least 1".into());
        }
        if self.concurrency == 0 {
            return fail("concurrency must be at least 1".into());
        }
        if self.prompts.is_empty() {
            return fail("prompts must not be empty".into());
        }
        let mut seen = BTreeSet::new();
        for p in &self.prompts {
            if *p == PromptId::CertaintyFollowup {
                return fail("CERTAINTY_FOLLOWUP is not a classification prompt".into());
            }
            if !seen.insert(*p) {
                return fail(format!("prompt {p} listed twice"));
            }
        }
        let rar = self.rar_prompts();
        if self.certainty && rar.is_empty() {
            return fail("certainty requires at least one of P1-P4".into());
        }
        if !self.voting.is_empty() && rar.is_empty() {
            return fail("voting requires at least one of P1-P4".into());
        }
        let mut names = BTreeSet::new();
        for d in &self.datasets {
            if !is_safe_name(&d.name) {
                return fail(format!("dataset name `{}` must use only letters, digits, '-', '_' or '.'", d.name));
            }
            if !names.insert(&d.name) {
                return fail(format!("dataset `{}` defined twice", d.name));
            }
        }
        let mut names = BTreeSet::new();
        for b in &self.backends {
            if !is_safe_name(&b.name) {
                return fail(format!("backend name `{}` must use only letters, digits, '-', '_' or '.'", b.name));
            }
            if !names.insert(&b.name) {
                return fail(format!("backend `{}` defined twice", b.name));
            }
            b.validate()?;
        }
        Ok(())
    }

    /// Voting prompts in ballot order.
    pub fn rar_prompts(&self) -> Vec<PromptId> {
        PromptId::RAR.into_iter().filter(|p| self.prompts.contains(p)).collect()
    }

    pub fn datasets_dir(&self) -> PathBuf {
        self.output_dir.join("datasets")
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.output_dir.join("ledgers").join("run.jsonl")
    }

    pub fn results_path(&self) -> PathBuf {
        self.output_dir.join("results").join("results.jsonl")
    }

    pub fn votes_path(&self) -> PathBuf {
        self.output_dir.join("results").join("votes.jsonl")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.output_dir.join("reports")
    }

    pub fn sampled_path(&self, dataset: &str) -> PathBuf {
        self.datasets_dir().join(format!("{dataset}.jsonl"))
    }

    /// Keeps only the named datasets. Unknown names are a config error.
    pub fn select_datasets(&mut self, names: &[String]) -> Result<(), RunnerError> {
        select(&mut self.datasets, names, |d| &d.name, "dataset")
    }

    /// Keeps only the named backends. Unknown names are a config error.
    pub fn select_backends(&mut self, names: &[String]) -> Result<(), RunnerError> {
        select(&mut self.backends, names, |b| &b.name, "backend")
    }
}

fn select<T>(items: &mut Vec<T>, names: &[String], name: impl Fn(&T) -> &String, what: &str) -> Result<(), RunnerError> {
    if names.is_empty() {
        return Ok(());
    }
    if let Some(missing) = names.iter().find(|n| !items.iter().any(|i| name(i) == *n)) {
        return Err(RunnerError::Config(format!("unknown {what} `{missing}`")));
    }
    items.retain(|i| names.contains(name(i)));
    Ok(())
}

/// Creates backends from profiles; tests substitute their own.
pub type BackendFactory =
    Arc<dyn Fn(&BackendProfile, u64, &Path) -> Result<Arc<dyn ChatBackend>, BackendError> + Send + Sync>;

#[derive(Clone)]
pub struct RunOptions {
    /// Keep and extend an existing ledger. When false the ledger is removed
    /// first.
    pub resume: bool,
    /// Stop after this many new exchanges.
    pub max_exchanges: Option<usize>,
    pub progress: bool,
    pub sleeper: Option<Sleeper>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { resume: true, max_exchanges: None, progress: false, sleeper: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub dataset: String,
    pub records: usize,
    pub rejected: usize,
    pub path: PathBuf,
}

/// Written next to each sampled dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub schema: String,
    pub dataset: String,
    pub mode: Mode,
    pub seed: u64,
    pub ingested: usize,
    pub rejected: usize,
    pub crop_limit: usize,
    pub dropped_by_crop: usize,
    pub after_crop: BTreeMap<Label, usize>,
    /// `None` when trimming is disabled.
    pub target: Option<usize>,
    pub quotas: BTreeMap<Label, usize>,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingCount {
    pub backend: String,
    pub dataset: String,
    pub exchanges: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DryRun {
    pub pending: Vec<PendingCount>,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub batch: BatchSummary,
    /// Result rows produced for the selected backends and datasets.
    pub rows: usize,
    /// Failed exchanges in the ledger for this experiment, old or new.
    pub failed_exchanges: usize,
    /// Answer exchanges not yet in the ledger.
    pub missing: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Failed,
    Missing,
}

/// One parsed prediction, keyed like the ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub schema: String,
    pub backend: String,
    pub dataset: String,
    pub mode: Mode,
    pub record_id: String,
    pub prompt_id: PromptId,
    pub repeat: u32,
    pub gold: Label,
    pub prediction: Prediction,
    pub answer_status: RowStatus,
    /// `None` when no certainty was requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certainty_status: Option<RowStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRow {
    pub schema: String,
    pub backend: String,
    pub dataset: String,
    pub record_id: String,
    pub repeat: u32,
    pub gold: Label,
    pub outcome: VoteOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub backend: String,
    pub dataset: String,
    pub table: AblationTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaEntry {
    pub backend: String,
    pub dataset: String,
    pub method: String,
    pub kappa: Option<f64>,
    pub items: usize,
    pub excluded: usize,
    pub raters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaSummary {
    pub backend: String,
    pub method: String,
    pub datasets: usize,
    pub kappa: f64,
    pub kappa_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaReport {
    pub entries: Vec<KappaEntry>,
    pub summary: Vec<KappaSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEntry {
    pub backend: String,
    pub dataset: String,
    pub method: String,
    pub breakdown: ErrorBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub backend: String,
    pub algorithm: Algorithm,
    /// Voted accuracy minus mean single-prompt accuracy, in percentage points.
    pub accuracy_pp: f64,
    pub f1_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub seed: u64,
    pub aggregate: AggregateReport,
    pub improvement: Vec<Improvement>,
    pub ablation: Vec<AblationEntry>,
    /// `None` when the run has a single repeat.
    pub kappa: Option<KappaReport>,
    pub errors: Vec<ErrorEntry>,
}

/// Method name of a single-prompt cell.
const ZERO_SHOT: &str = "zero_shot";
const COT: &str = "cot";

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), RunnerError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(|e| io_error(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row).expect("row serializes");
        out.push(b'\n');
    }
    out
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("value serializes");
    out.push(b'\n');
    out
}

/// Reads a results file written by [`Runner::run`].
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, RunnerError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| RunnerError::BadResults { path: path.to_path_buf(), line: i + 1, message };
        let row: ResultRow = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if row.schema != RESULTS_SCHEMA {
            return Err(bad(format!("unsupported schema `{}`", row.schema)));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Runs the pipeline stages for one experiment.
pub struct Runner {
    pub config: ExperimentConfig,
    factory: BackendFactory,
    options: RunOptions,
}

impl Runner {
    pub fn new(config: ExperimentConfig) -> Runner {
        Runner { config, factory: Arc::new(backend::build_backend), options: RunOptions::default() }
    }

    pub fn with_factory(mut self, factory: BackendFactory) -> Runner {
        self.factory = factory;
        self
    }

    pub fn with_options(mut self, options: RunOptions) -> Runner {
        self.options = options;
        self
    }

    fn generator(&self) -> Result<PromptGenerator, RunnerError> {
        let templates = match &self.config.templates {
            Some(path) => TemplateSet::from_toml(&std::fs::read_to_string(path).map_err(|e| io_error(path, e))?)?,
            None => TemplateSet::default(),
        };
        let theses = match &self.config.theses {
            Some(path) => ThesisTable::from_toml(&std::fs::read_to_string(path).map_err(|e| io_error(path, e))?)?,
            None => ThesisTable::default(),
        };
        Ok(PromptGenerator::new(templates, theses))
    }

    /// Converts each source file to canonical records.
    pub fn ingest(&self) -> Result<Vec<IngestSummary>, RunnerError> {
        let mut out = Vec::new();
        for spec in &self.config.datasets {
            let report = corpus::ingest(spec).map_err(|source| RunnerError::Corpus { dataset: spec.name.clone(), source })?;
            let dir = self.config.datasets_dir();
            let path = dir.join(format!("{}.ingested.jsonl", spec.name));
            write_atomic(&path, records_bytes(&report.records).as_bytes())?;
            write_atomic(&dir.join(format!("{}.rejections.jsonl", spec.name)), &jsonl(&report.rejections))?;
            out.push(IngestSummary { dataset: spec.name.clone(), records: report.records.len(), rejected: report.rejections.len(), path });
        }
        Ok(out)
    }

    /// Ingests, crops and stratified-trims every dataset.
    pub fn sample(&self) -> Result<Vec<SampleManifest>, RunnerError> {
        let mut out = Vec::new();
        for spec in &self.config.datasets {
            let wrap = |source| RunnerError::Corpus { dataset: spec.name.clone(), source };
            let report = corpus::ingest(spec).map_err(wrap)?;
            let rejected = report.rejections.len();
            let ingested = report.records.len();
            let cropped = corpus::crop(report.records, spec.crop_limit).map_err(wrap)?;
            let after_crop = corpus::class_counts(&cropped.records);
            let seed = derive_seed(self.config.seed, &["sample", &spec.name]);
            let (records, target, quotas) = if spec.skip_trim {
                (cropped.records, None, after_crop.clone())
            } else {
                let trimmed = corpus::stratified_trim(&cropped.records, spec.trim_target, seed).map_err(wrap)?;
                (trimmed.records, Some(spec.trim_target), trimmed.quotas)
            };
            let manifest = SampleManifest {
                schema: MANIFEST_SCHEMA.into(),
                dataset: spec.name.clone(),
                mode: spec.mode,
                seed,
                ingested,
                rejected,
                crop_limit: spec.crop_limit,
                dropped_by_crop: cropped.dropped,
                after_crop,
                target,
                quotas,
                records: records.len(),
            };
            write_atomic(&self.config.sampled_path(&spec.name), records_bytes(&records).as_bytes())?;
            write_atomic(&self.config.datasets_dir().join(format!("{}.manifest.json", spec.name)), &pretty(&manifest))?;
            out.push(manifest);
        }
        Ok(out)
    }

    fn load_sampled(&self) -> Result<Vec<(&DatasetSpec, Vec<Record>)>, RunnerError> {
        self.config
            .datasets
            .iter()
            .map(|spec| {
                let path = self.config.sampled_path(&spec.name);
                if !path.exists() {
                    return Err(RunnerError::Io {
                        path,
                        message: format!("dataset `{}` is not prepared; run `sample` first", spec.name),
                    });
                }
                let records =
                    corpus::read_records(&path).map_err(|source| RunnerError::Corpus { dataset: spec.name.clone(), source })?;
                Ok((spec, records))
            })
            .collect()
    }

    fn jobs(&self, datasets: &[(&DatasetSpec, Vec<Record>)]) -> Result<Vec<BatchJob>, RunnerError> {
        let generator = self.generator()?;
        let mut jobs = Vec::new();
        for (spec, records) in datasets {
            for record in records {
                for &prompt in &self.config.prompts {
                    let instance = generator.render(record, spec.mode, prompt)?;
                    let certainty = (self.config.certainty && prompt.supports_certainty())
                        .then(|| generator.templates.certainty_followup().to_string());
                    jobs.push(BatchJob { dataset: spec.name.clone(), mode: spec.mode, gold: Some(record.gold), instance, certainty });
                }
            }
        }
        Ok(jobs)
    }

    /// Exchanges `run` would issue, per backend and dataset.
    pub fn dry_run(&self) -> Result<DryRun, RunnerError> {
        let datasets = self.load_sampled()?;
        let jobs = self.jobs(&datasets)?;
        let ledger = if self.options.resume { Ledger::load(&self.config.ledger_path())? } else { Ledger::default() };
        let mut pending = Vec::new();
        for profile in &self.config.backends {
            for (spec, _) in &datasets {
                let subset: Vec<BatchJob> = jobs.iter().filter(|j| j.dataset == spec.name).cloned().collect();
                let exchanges = count_pending(std::slice::from_ref(profile), &subset, self.config.repeats, &ledger);
                pending.push(PendingCount { backend: profile.name.clone(), dataset: spec.name.clone(), exchanges });
            }
        }
        let total = pending.iter().map(|p| p.exchanges).sum();
        Ok(DryRun { pending, total })
    }

    /// Sends every pending exchange, then rewrites the results file from
    /// the ledger.
    pub fn run(&self) -> Result<RunSummary, RunnerError> {
        let datasets = self.load_sampled()?;
        let jobs = self.jobs(&datasets)?;
        let base = self.config.output_dir.clone();
        let backends = self
            .config
            .backends
            .iter()
            .map(|p| Ok((p.clone(), (self.factory)(p, self.config.seed, &base)?)))
            .collect::<Result<Vec<_>, RunnerError>>()?;

        let ledger_path = self.config.ledger_path();
        if let Some(dir) = ledger_path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        }
        if !self.options.resume && ledger_path.exists() {
            std::fs::remove_file(&ledger_path).map_err(|e| io_error(&ledger_path, e))?;
        }
        let mut batch_options = BatchOptions::new(&ledger_path, self.config.concurrency);
        batch_options.max_exchanges = self.options.max_exchanges;
        batch_options.progress = self.options.progress;
        if let Some(s) = &self.options.sleeper {
            batch_options.sleeper = s.clone();
        }
        let batch = match run_batch(&backends, &jobs, self.config.repeats, &batch_options) {
            Ok(s) => s,
            Err(BatchError::Ledger(e)) => return Err(e.into()),
            Err(e) => return Err(RunnerError::Backend(e.to_string())),
        };

        let ledger = Ledger::load(&ledger_path)?;
        let mut rows = Vec::new();
        let mut failed_exchanges = 0;
        let mut missing = 0;
        for profile in &self.config.backends {
            for job in &jobs {
                for repeat in 0..self.config.repeats {
                    let key = |turn| ExchangeKey {
                        backend: profile.name.clone(),
                        dataset: job.dataset.clone(),
                        record_id: job.instance.record_id.clone(),
                        prompt_id: job.instance.prompt_id,
                        repeat,
                        turn,
                    };
                    let status = |e: Option<&backend::Exchange>| match e {
                        None => RowStatus::Missing,
                        Some(e) if e.ok() => RowStatus::Ok,
                        Some(_) => RowStatus::Failed,
                    };
                    let answer = ledger.get(&key(Turn::Answer));
                    let certainty = job.certainty.as_ref().map(|_| ledger.get(&key(Turn::Certainty)));
                    let answer_status = status(answer);
                    let certainty_status = certainty.map(status);
                    failed_exchanges += (answer_status == RowStatus::Failed) as usize;
                    failed_exchanges += (certainty_status == Some(RowStatus::Failed)) as usize;
                    missing += (answer_status == RowStatus::Missing) as usize;
                    let prediction = parse_prediction(
                        answer.map_or("", |e| e.response.as_str()),
                        certainty.flatten().map(|e| e.response.as_str()),
                        job.instance.format,
                        job.mode,
                    );
                    rows.push(ResultRow {
                        schema: RESULTS_SCHEMA.into(),
                        backend: profile.name.clone(),
                        dataset: job.dataset.clone(),
                        mode: job.mode,
                        record_id: job.instance.record_id.clone(),
                        prompt_id: job.instance.prompt_id,
                        repeat,
                        gold: job.gold.expect("jobs carry gold"),
                        prediction,
                        answer_status,
                        certainty_status,
                    });
                }
            }
        }
        let produced = rows.len();
        let results_path = self.config.results_path();
        if results_path.exists() {
            let selected = |r: &ResultRow| {
                self.config.backends.iter().any(|b| b.name == r.backend) && self.config.datasets.iter().any(|d| d.name == r.dataset)
            };
            rows.extend(read_results(&results_path)?.into_iter().filter(|r| !selected(r)));
        }
        rows.sort_by(|a, b| {
            (&a.backend, &a.dataset, &a.record_id, a.prompt_id, a.repeat).cmp(&(&b.backend, &b.dataset, &b.record_id, b.prompt_id, b.repeat))
        });
        write_atomic(&results_path, &jsonl(&rows))?;
        Ok(RunSummary { batch, rows: produced, failed_exchanges, missing })
    }

    fn results(&self) -> Result<Vec<ResultRow>, RunnerError> {
        let path = self.config.results_path();
        if !path.exists() {
            return Err(RunnerError::Io { path, message: "no results; run `run` first".into() });
        }
        read_results(&path)
    }

    /// Votes every (record, repeat) ballot and writes `votes.jsonl`.
    pub fn vote(&self) -> Result<Vec<VoteRow>, RunnerError> {
        let results = self.results()?;
        let derived = Derived::new(&self.config, &results);
        let rows = derived.vote_rows();
        write_atomic(&self.config.votes_path(), &jsonl(&rows))?;
        Ok(rows)
    }

    /// Leave-one-out prompt ablation per backend, dataset and algorithm.
    pub fn ablate(&self) -> Result<Vec<AblationEntry>, RunnerError> {
        let results = self.results()?;
        let entries = Derived::new(&self.config, &results).ablation()?;
        let dir = self.config.reports_dir();
        write_atomic(&dir.join("ablation.json"), &pretty(&entries))?;
        write_atomic(&dir.join("ablation.tsv"), ablation_tsv(&entries).as_bytes())?;
        Ok(entries)
    }

    /// Agreement across repeats; needs at least two repeats.
    pub fn kappa(&self) -> Result<KappaReport, RunnerError> {
        let results = self.results()?;
        let report = Derived::new(&self.config, &results).kappa()?;
        let dir = self.config.reports_dir();
        write_atomic(&dir.join("kappa.json"), &pretty(&report))?;
        write_atomic(&dir.join("kappa.tsv"), kappa_tsv(&report).as_bytes())?;
        Ok(report)
    }

    /// Every derived table, from the results file alone.
    pub fn report(&self) -> Result<Report, RunnerError> {
        let results = self.results()?;
        let derived = Derived::new(&self.config, &results);
        let aggregate = metrics::aggregate(&derived.cells()?);
        let improvement = improvement(&aggregate);
        let ablation = derived.ablation()?;
        let kappa = if derived.repeats() >= 2 { Some(derived.kappa()?) } else { None };
        let errors = derived.errors()?;
        let report = Report {
            schema: REPORT_SCHEMA.into(),
            seed: self.config.seed,
            aggregate,
            improvement,
            ablation,
            kappa,
            errors,
        };
        let dir = self.config.reports_dir();
        write_atomic(&dir.join("report.json"), &pretty(&report))?;
        write_atomic(&dir.join("prompts.tsv"), cells_tsv(&report.aggregate.cells).as_bytes())?;
        write_atomic(&dir.join("summary.tsv"), summary_tsv(&report.aggregate).as_bytes())?;
        write_atomic(&dir.join("improvement.tsv"), improvement_tsv(&report.improvement).as_bytes())?;
        write_atomic(&dir.join("ablation.tsv"), ablation_tsv(&report.ablation).as_bytes())?;
        write_atomic(&dir.join("errors.tsv"), errors_tsv(&report.errors).as_bytes())?;
        if let Some(k) = &report.kappa {
            write_atomic(&dir.join("kappa.tsv"), kappa_tsv(k).as_bytes())?;
        }
        Ok(report)
    }
}

fn records_bytes(records: &[Record]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}

type Group<'a> = BTreeMap<(String, String), (Mode, Vec<&'a ResultRow>)>;

/// Post-run computations over a results file.
struct Derived<'a> {
    config: &'a ExperimentConfig,
    groups: Group<'a>,
}

impl<'a> Derived<'a> {
    fn new(config: &'a ExperimentConfig, rows: &'a [ResultRow]) -> Self {
        let mut groups: Group<'a> = BTreeMap::new();
        let selected = |r: &ResultRow| {
            config.backends.iter().any(|b| b.name == r.backend) && config.datasets.iter().any(|d| d.name == r.dataset)
        };
        for row in rows.iter().filter(|r| selected(r)) {
            groups.entry((row.backend.clone(), row.dataset.clone())).or_insert_with(|| (row.mode, Vec::new())).1.push(row);
        }
        Derived { config, groups }
    }

    fn repeats(&self) -> u32 {
        self.groups.values().flat_map(|(_, rows)| rows.iter().map(|r| r.repeat + 1)).max().unwrap_or(0)
    }

    /// Gold and ballot per (record, repeat), votes in P1..P4 order.
    fn ballots(&self, rows: &[&ResultRow]) -> Vec<(u32, Label, Ballot)> {
        let voters = self.config.rar_prompts();
        let mut by_record: BTreeMap<(u32, &str), (Label, BTreeMap<PromptId, Vote>)> = BTreeMap::new();
        for row in rows.iter().filter(|r| voters.contains(&r.prompt_id)) {
            by_record
                .entry((row.repeat, &row.record_id))
                .or_insert_with(|| (row.gold, BTreeMap::new()))
                .1
                .insert(row.prompt_id, Vote::from(&row.prediction));
        }
        by_record
            .into_iter()
            .map(|((repeat, id), (gold, votes))| {
                let votes = voters.iter().map(|p| votes.get(p).copied().unwrap_or_else(Vote::invalid)).collect();
                (repeat, gold, Ballot::new(id, votes))
            })
            .collect()
    }

    fn vote_seed(&self, backend: &str, dataset: &str, repeat: u32) -> u64 {
        derive_seed(self.config.seed, &["vote", backend, dataset, &repeat.to_string()])
    }

    fn vote_rows(&self) -> Vec<VoteRow> {
        let mut out = Vec::new();
        for ((backend, dataset), (_, rows)) in &self.groups {
            for (repeat, gold, ballot) in self.ballots(rows) {
                for &algorithm in &self.config.voting {
                    out.push(VoteRow {
                        schema: VOTES_SCHEMA.into(),
                        backend: backend.clone(),
                        dataset: dataset.clone(),
                        record_id: ballot.record_id.clone(),
                        repeat,
                        gold,
                        outcome: ensemble::vote_seeded(algorithm, &ballot, self.vote_seed(backend, dataset, repeat)),
                    });
                }
            }
        }
        out
    }

    /// (gold, predicted) pairs per method, pooled over repeats.
    fn method_pairs(&self, rows: &[&ResultRow], backend: &str, dataset: &str) -> BTreeMap<String, Vec<(u32, String, Label, Option<Label>)>> {
        let mut out: BTreeMap<String, Vec<_>> = BTreeMap::new();
        for row in rows {
            out.entry(row.prompt_id.to_string()).or_default().push((row.repeat, row.record_id.clone(), row.gold, row.prediction.label));
        }
        for (repeat, gold, ballot) in self.ballots(rows) {
            for &algorithm in &self.config.voting {
                let outcome = ensemble::vote_seeded(algorithm, &ballot, self.vote_seed(backend, dataset, repeat));
                out.entry(algorithm.to_string()).or_default().push((repeat, ballot.record_id.clone(), gold, outcome.final_label));
            }
        }
        out
    }

    fn cells(&self) -> Result<Vec<CellMetrics>, RunnerError> {
        let mut cells = Vec::new();
        for ((backend, dataset), (mode, rows)) in &self.groups {
            for (method, entries) in self.method_pairs(rows, backend, dataset) {
                let pairs: Vec<(Label, Option<Label>)> = entries.iter().map(|e| (e.2, e.3)).collect();
                let scores = metrics::score(&pairs, *mode, self.config.macro_policy).map_err(metrics_error)?;
                let prompt: Option<PromptId> = method.parse().ok();
                let column = match prompt {
                    Some(PromptId::P5Cot) => COT.to_string(),
                    Some(_) => ZERO_SHOT.to_string(),
                    None => method.clone(),
                };
                let own_rows = || rows.iter().filter(|r| Some(r.prompt_id) == prompt);
                cells.push(CellMetrics {
                    model: backend.clone(),
                    dataset: dataset.clone(),
                    method: method.clone(),
                    column,
                    n: scores.n,
                    accuracy: scores.accuracy,
                    precision: scores.macro_precision,
                    recall: scores.macro_recall,
                    f1: scores.macro_f1,
                    invalid_answers: own_rows().filter(|r| !r.prediction.answer_valid).count(),
                    invalid_certainties: own_rows()
                        .filter(|r| r.certainty_status.is_some() && !r.prediction.certainty_valid)
                        .count(),
                });
            }
        }
        Ok(cells)
    }

    fn ablation(&self) -> Result<Vec<AblationEntry>, RunnerError> {
        let voters = self.config.rar_prompts().len();
        if voters < 2 {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for ((backend, dataset), (mode, rows)) in &self.groups {
            let ballots: Vec<(Label, Ballot)> = self
                .ballots(rows)
                .into_iter()
                .map(|(repeat, gold, b)| (gold, Ballot::new(format!("{}#{repeat}", b.record_id), b.votes)))
                .collect();
            for &algorithm in &self.config.voting {
                let seed = derive_seed(self.config.seed, &["ablate", backend, dataset]);
                let table = metrics::ablate(&ballots, algorithm, *mode, seed, voters).map_err(metrics_error)?;
                out.push(AblationEntry { backend: backend.clone(), dataset: dataset.clone(), table });
            }
        }
        Ok(out)
    }

    fn kappa(&self) -> Result<KappaReport, RunnerError> {
        if self.repeats() < 2 {
            return Err(RunnerError::Metrics("kappa requires repeats ≥ 2".into()));
        }
        let mut entries = Vec::new();
        for ((backend, dataset), (_, rows)) in &self.groups {
            for (method, pairs) in self.method_pairs(rows, backend, dataset) {
                let mut by_record: BTreeMap<String, BTreeMap<u32, Option<Label>>> = BTreeMap::new();
                for (repeat, record, _, label) in pairs {
                    by_record.entry(record).or_default().insert(repeat, label);
                }
                let ratings: Vec<Vec<Option<Label>>> = by_record.into_values().map(|r| r.into_values().collect()).collect();
                let agreement = metrics::agreement_from_ratings(&ratings).map_err(metrics_error)?;
                entries.push(KappaEntry {
                    backend: backend.clone(),
                    dataset: dataset.clone(),
                    method,
                    kappa: agreement.kappa,
                    items: agreement.items,
                    excluded: agreement.excluded,
                    raters: agreement.raters,
                });
            }
        }
        let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for e in &entries {
            if let Some(k) = e.kappa {
                groups.entry((e.backend.clone(), e.method.clone())).or_default().push(k);
            }
        }
        let summary = groups
            .into_iter()
            .map(|((backend, method), values)| {
                let (kappa, kappa_se) = metrics::mean_and_se(&values).expect("nonempty");
                KappaSummary { backend, method, datasets: values.len(), kappa, kappa_se }
            })
            .collect();
        Ok(KappaReport { entries, summary })
    }

    fn errors(&self) -> Result<Vec<ErrorEntry>, RunnerError> {
        let mut out = Vec::new();
        for ((backend, dataset), (mode, rows)) in &self.groups {
            if *mode != Mode::ThreeClass {
                continue;
            }
            for (method, entries) in self.method_pairs(rows, backend, dataset) {
                let pairs: Vec<(Label, Option<Label>)> = entries.iter().map(|e| (e.2, e.3)).collect();
                let breakdown = metrics::error_breakdown(&pairs, *mode).map_err(metrics_error)?;
                out.push(ErrorEntry { backend: backend.clone(), dataset: dataset.clone(), method, breakdown });
            }
        }
        Ok(out)
    }
}

fn metrics_error(e: MetricsError) -> RunnerError {
    RunnerError::Metrics(e.to_string())
}

fn improvement(aggregate: &AggregateReport) -> Vec<Improvement> {
    let baseline: BTreeMap<&str, (f64, f64)> = aggregate
        .per_model
        .iter()
        .filter(|m| m.column == ZERO_SHOT)
        .map(|m| (m.model.as_str(), (m.accuracy, m.f1)))
        .collect();
    aggregate
        .per_model
        .iter()
        .filter_map(|m| {
            let algorithm: Algorithm = m.column.parse().ok()?;
            let (acc, f1) = baseline.get(m.model.as_str())?;
            Some(Improvement {
                backend: m.model.clone(),
                algorithm,
                accuracy_pp: (m.accuracy - acc) * 100.0,
                f1_pp: (m.f1 - f1) * 100.0,
            })
        })
        .collect()
}

fn num(v: f64) -> String {
    format!("{v:.4}")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), num)
}

fn cells_tsv(cells: &[CellMetrics]) -> String {
    let mut s = String::from("model\tdataset\tmethod\tn\taccuracy\tprecision\trecall\tf1\tinvalid_answers\tinvalid_certainties\n");
    for c in cells {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.model,
            c.dataset,
            c.method,
            c.n,
            num(c.accuracy),
            num(c.precision),
            num(c.recall),
            num(c.f1),
            c.invalid_answers,
            c.invalid_certainties
        );
    }
    s
}

fn summary_tsv(aggregate: &AggregateReport) -> String {
    let mut s = String::from("model\tcolumn\tdatasets\taccuracy\taccuracy_se\tf1\tf1_se\n");
    for m in &aggregate.per_model {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            m.model,
            m.column,
            m.datasets,
            num(m.accuracy),
            opt(m.accuracy_se),
            num(m.f1),
            opt(m.f1_se)
        );
    }
    s
}

fn improvement_tsv(rows: &[Improvement]) -> String {
    let mut s = String::from("model\talgorithm\taccuracy_pp\tf1_pp\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{:.2}\t{:.2}", r.backend, r.algorithm, r.accuracy_pp, r.f1_pp);
    }
    s
}

fn ablation_tsv(entries: &[AblationEntry]) -> String {
    let mut s = String::new();
    if let Some(first) = entries.first() {
        let header: Vec<String> = first.table.row().into_iter().map(|(name, _)| name).collect();
        let _ = writeln!(s, "model\tdataset\talgorithm\t{}", header.join("\t"));
    }
    for e in entries {
        let values: Vec<String> = e.table.row().into_iter().map(|(_, v)| num(v)).collect();
        let _ = writeln!(s, "{}\t{}\t{}\t{}", e.backend, e.dataset, e.table.algorithm, values.join("\t"));
    }
    s
}

fn kappa_tsv(report: &KappaReport) -> String {
    let mut s = String::from("model\tdataset\tmethod\tkappa\titems\texcluded\traters\n");
    for e in &report.entries {
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}\t{}", e.backend, e.dataset, e.method, opt(e.kappa), e.items, e.excluded, e.raters);
    }
    s.push_str("\nmodel\tmethod\tdatasets\tkappa\tkappa_se\n");
    for m in &report.summary {
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", m.backend, m.method, m.datasets, num(m.kappa), opt(m.kappa_se));
    }
    s
}

fn errors_tsv(entries: &[ErrorEntry]) -> String {
    let mut s = String::from("model\tdataset\tmethod\ttype\tcount\tshare_all\tshare_predicted\n");
    for e in entries {
        for (t, count) in &e.breakdown.counts {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:?}\t{}\t{}\t{}",
                e.backend,
                e.dataset,
                e.method,
                t,
                count,
                opt(e.breakdown.shares.get(t).copied()),
                opt(e.breakdown.shares_of_predicted.get(t).copied())
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::BackendKind;
    use crate::corpus::SourceFormat;

    fn config() -> ExperimentConfig {
        let mut backend = BackendProfile::new("mock", BackendKind::MockStochastic);
        backend.stochastic = Some(Default::default());
        ExperimentConfig {
            seed: 7,
            output_dir: "out".into(),
            prompts: default_prompts(),
            certainty: true,
            repeats: 1,
            voting: default_voting(),
            concurrency: 2,
            macro_policy: MacroPolicy::default(),
            templates: None,
            theses: None,
            datasets: vec![DatasetSpec::new("ukp", Mode::ThreeClass, "data.tsv", SourceFormat::Canonical)],
            backends: vec![backend],
        }
    }

    #[test]
    fn toml_round_trip() {
        let c = config();
        let text = c.to_toml_string();
        let parsed = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(parsed, c);
        assert_eq!(parsed.to_toml_string(), text);
    }

    #[test]
    fn validation_rules() {
        let mut c = config();
        c.repeats = 0;
        assert!(matches!(c.validate(), Err(RunnerError::Config(_))));
        let mut c = config();
        c.prompts = vec![PromptId::P5Cot];
        assert!(c.validate().is_err());
        c.certainty = false;
        c.voting.clear();
        assert!(c.validate().is_ok());
        let mut c = config();
        c.backends.clear();
        assert!(c.validate().is_err());
        let mut c = config();
        c.datasets[0].name = "../x".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_prompt_is_config_error() {
        let text = config().to_toml_string().replace("\"P4\"", "\"P9\"");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn dataset_selection() {
        let mut c = config();
        assert!(c.select_datasets(&["nope".into()]).is_err());
        c.select_backends(&["mock".into()]).unwrap();
        assert_eq!(c.backends.len(), 1);
    }
}
