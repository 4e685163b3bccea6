//! Corpus ingestion, length cropping and class-stratified sampling.
//!
//! Every source format is funnelled into [`Record`], whose canonical on-disk
//! form is one JSON object per line. Column-mapped adapters cover delimited
//! exports (e.g. the UKP sentence files) and JSON exports (e.g. Args.me).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stance of a text towards a thesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    For,
    Against,
    NoArgument,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::For, Label::Against, Label::NoArgument];

    pub fn index(self) -> usize {
        match self {
            Label::For => 0,
            Label::Against => 1,
            Label::NoArgument => 2,
        }
    }

    /// Single-letter code used by letter-format prompts and the error taxonomy.
    pub fn letter(self) -> char {
        match self {
            Label::For => 'F',
            Label::Against => 'A',
            Label::NoArgument => 'N',
        }
    }

    /// Maps a corpus annotation onto a label using the built-in alias table.
    ///
    /// Matching ignores case and any non-alphanumeric characters, so
    /// `"Argument_for"`, `"argument for"` and `"ARGUMENTFOR"` are equivalent.
    pub fn from_alias(raw: &str) -> Option<Label> {
        match normalize_alias(raw).as_str() {
            "for" | "pro" | "argumentfor" | "support" | "supports" => Some(Label::For),
            "against" | "con" | "argumentagainst" | "oppose" | "opposes" => Some(Label::Against),
            "noargument" | "none" | "neutral" => Some(Label::NoArgument),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::For => "For",
            Label::Against => "Against",
            Label::NoArgument => "NoArgument",
        })
    }
}

impl FromStr for Label {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::from_alias(s).ok_or_else(|| CorpusError::UnknownLabel(s.to_string()))
    }
}

pub(crate) fn normalize_alias(raw: &str) -> String {
    raw.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Label space of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// For / Against / NoArgument (UKP-style sentence corpora).
    ThreeClass,
    /// For / Against with an explicit thesis per record (Args.me-style).
    TwoClass,
}

impl Mode {
    pub fn labels(self) -> &'static [Label] {
        match self {
            Mode::ThreeClass => &Label::ALL,
            Mode::TwoClass => &Label::ALL[..2],
        }
    }

    pub fn admits(self, label: Label) -> bool {
        self.labels().contains(&label)
    }
}

/// One corpus item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub topic: String,
    pub text: String,
    pub thesis: Option<String>,
    pub gold: Label,
    pub source: String,
}

impl Record {
    /// Serializes to one canonical line (no trailing newline).
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serialization is infallible")
    }

    /// Decodes one canonical line.
    pub fn from_line(line: &str) -> Result<Record, CorpusError> {
        let record: Record =
            serde_json::from_str(line).map_err(|e| CorpusError::BadLine { line: 0, message: e.to_string() })?;
        if record.text.is_empty() {
            return Err(CorpusError::BadLine { line: 0, message: "empty text".into() });
        }
        Ok(record)
    }

    /// Text length in Unicode scalar values.
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset {dataset}: column `{column}` not found in input")]
    UnmappedColumn { dataset: String, column: String },
    #[error("dataset {dataset}: a column mapping is required for this format")]
    MissingColumnMap { dataset: String },
    #[error("dataset {dataset}: malformed input: {message}")]
    Malformed { dataset: String, message: String },
    #[error("line {line}: {message}")]
    BadLine { line: usize, message: String },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("sample target {target} exceeds the {available} available records")]
    TargetTooLarge { target: usize, available: usize },
    #[error("crop limit must be positive")]
    ZeroCropLimit,
}

/// Input layout of a source file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceFormat {
    /// One canonical [`Record`] per line.
    Canonical,
    /// Tab- or comma-separated values addressed by column name (or by
    /// zero-based index when there is no header).
    Delimited {
        #[serde(default = "default_delimiter")]
        delimiter: char,
        #[serde(default = "default_true")]
        has_header: bool,
        /// Honour double-quote quoting. UKP sentence files contain bare
        /// quotes and should set this to false.
        #[serde(default = "default_true")]
        quoting: bool,
    },
    /// A JSON document (with `records_pointer` locating the array) or JSON
    /// lines (pointer absent). Columns are JSON pointers such as
    /// `/premises/0/text`.
    Json {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        records_pointer: Option<String>,
    },
}

fn default_delimiter() -> char {
    '\t'
}

fn default_true() -> bool {
    true
}

/// Field name (or JSON pointer) for each record attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thesis: Option<String>,
    pub gold: String,
}

fn default_crop_limit() -> usize {
    2000
}

fn default_trim_target() -> usize {
    2000
}

/// Where a dataset lives and how to read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub mode: Mode,
    pub path: PathBuf,
    pub format: SourceFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<ColumnMap>,
    /// Topic for every record when no topic column is mapped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    /// Extra label aliases, consulted before the built-in table.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub label_aliases: BTreeMap<String, Label>,
    #[serde(default = "default_crop_limit")]
    pub crop_limit: usize,
    #[serde(default = "default_trim_target")]
    pub trim_target: usize,
    /// Keep the full cropped set instead of sampling `trim_target` records.
    #[serde(default)]
    pub skip_trim: bool,
}

impl DatasetSpec {
    pub fn new(name: impl Into<String>, mode: Mode, path: impl Into<PathBuf>, format: SourceFormat) -> Self {
        DatasetSpec {
            name: name.into(),
            mode,
            path: path.into(),
            format,
            columns: None,
            topic: None,
            label_aliases: BTreeMap::new(),
            crop_limit: default_crop_limit(),
            trim_target: default_trim_target(),
            skip_trim: false,
        }
    }

    fn resolve_label(&self, raw: &str) -> Option<Label> {
        let key = normalize_alias(raw);
        self.label_aliases
            .iter()
            .find(|(alias, _)| normalize_alias(alias) == key)
            .map(|(_, label)| *label)
            .or_else(|| Label::from_alias(raw))
    }
}

/// A row that could not become a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub records: Vec<Record>,
    pub rejections: Vec<Rejection>,
}

/// Reads the dataset described by `spec` from disk.
pub fn ingest(spec: &DatasetSpec) -> Result<IngestReport, CorpusError> {
    let file = File::open(&spec.path).map_err(|source| CorpusError::Io { path: spec.path.clone(), source })?;
    ingest_reader(spec, BufReader::new(file))
}

/// Same as [`ingest`] but over an arbitrary byte source.
pub fn ingest_reader<R: Read>(spec: &DatasetSpec, reader: R) -> Result<IngestReport, CorpusError> {
    let rows = match &spec.format {
        SourceFormat::Canonical => return ingest_canonical(spec, reader),
        SourceFormat::Delimited { delimiter, has_header, quoting } => {
            read_delimited(spec, reader, *delimiter, *has_header, *quoting)?
        }
        SourceFormat::Json { records_pointer } => read_json(spec, reader, records_pointer.as_deref())?,
    };
    Ok(build_records(spec, rows))
}

/// Raw field values of one source row, already resolved through the column map.
struct RawRow {
    row: usize,
    id: Option<String>,
    topic: Option<String>,
    text: Option<String>,
    thesis: Option<String>,
    gold: Option<String>,
    error: Option<String>,
}

impl RawRow {
    fn unreadable(row: usize, error: String) -> RawRow {
        RawRow { row, id: None, topic: None, text: None, thesis: None, gold: None, error: Some(error) }
    }
}

fn ingest_canonical<R: Read>(spec: &DatasetSpec, reader: R) -> Result<IngestReport, CorpusError> {
    let mut report = IngestReport::default();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let row = i + 1;
        let line = line.map_err(|source| CorpusError::Io { path: spec.path.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        match Record::from_line(&line) {
            Ok(record) => {
                if let Some(reason) = row_problem(spec, &record, &seen) {
                    report.rejections.push(Rejection { row, reason });
                } else {
                    seen.insert(record.id.clone());
                    report.records.push(record);
                }
            }
            Err(CorpusError::BadLine { message, .. }) => report.rejections.push(Rejection { row, reason: message }),
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

fn row_problem(spec: &DatasetSpec, record: &Record, seen: &HashSet<String>) -> Option<String> {
    if record.text.is_empty() {
        return Some("empty text".into());
    }
    if !spec.mode.admits(record.gold) {
        return Some(format!("label {} is not allowed in two-class mode", record.gold));
    }
    if spec.mode == Mode::TwoClass && record.thesis.as_deref().is_none_or(str::is_empty) {
        return Some("missing thesis".into());
    }
    if seen.contains(&record.id) {
        return Some(format!("duplicate id `{}`", record.id));
    }
    None
}

fn columns(spec: &DatasetSpec) -> Result<&ColumnMap, CorpusError> {
    spec.columns.as_ref().ok_or_else(|| CorpusError::MissingColumnMap { dataset: spec.name.clone() })
}

fn read_delimited<R: Read>(
    spec: &DatasetSpec,
    reader: R,
    delimiter: char,
    has_header: bool,
    quoting: bool,
) -> Result<Vec<RawRow>, CorpusError> {
    let map = columns(spec)?;
    let delimiter = u8::try_from(delimiter).map_err(|_| CorpusError::Malformed {
        dataset: spec.name.clone(),
        message: "delimiter must be a single-byte character".into(),
    })?;
    let mut csv_reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(has_header)
        .quoting(quoting)
        .flexible(true)
        .from_reader(reader);

    let header: Vec<String> = if has_header {
        csv_reader
            .headers()
            .map_err(|e| CorpusError::Malformed { dataset: spec.name.clone(), message: e.to_string() })?
            .iter()
            .map(|h| h.trim().to_string())
            .collect()
    } else {
        Vec::new()
    };
    let locate = |column: &str| -> Result<usize, CorpusError> {
        let found = if has_header {
            header.iter().position(|h| h == column)
        } else {
            column.parse::<usize>().ok()
        };
        found.ok_or_else(|| CorpusError::UnmappedColumn { dataset: spec.name.clone(), column: column.to_string() })
    };
    let locate_opt = |column: &Option<String>| column.as_deref().map(locate).transpose();
    let text_col = locate(&map.text)?;
    let gold_col = locate(&map.gold)?;
    let id_col = locate_opt(&map.id)?;
    let topic_col = locate_opt(&map.topic)?;
    let thesis_col = locate_opt(&map.thesis)?;

    let mut rows = Vec::new();
    for (i, result) in csv_reader.records().enumerate() {
        let row = i + 1;
        let fields = match result {
            Ok(fields) => fields,
            Err(e) => {
                rows.push(RawRow::unreadable(row, e.to_string()));
                continue;
            }
        };
        let get = |col: Option<usize>| col.and_then(|c| fields.get(c)).map(str::to_string);
        rows.push(RawRow {
            row,
            id: get(id_col),
            topic: get(topic_col),
            text: get(Some(text_col)),
            thesis: get(thesis_col),
            gold: get(Some(gold_col)),
            error: None,
        });
    }
    Ok(rows)
}

fn read_json<R: Read>(spec: &DatasetSpec, mut reader: R, pointer: Option<&str>) -> Result<Vec<RawRow>, CorpusError> {
    let map = columns(spec)?;
    let malformed = |message: String| CorpusError::Malformed { dataset: spec.name.clone(), message };
    let mut items: Vec<(usize, Option<serde_json::Value>)> = Vec::new();
    match pointer {
        Some(pointer) => {
            let mut buf = String::new();
            reader
                .read_to_string(&mut buf)
                .map_err(|source| CorpusError::Io { path: spec.path.clone(), source })?;
            let doc: serde_json::Value = serde_json::from_str(&buf).map_err(|e| malformed(e.to_string()))?;
            let array = doc
                .pointer(pointer)
                .and_then(|v| v.as_array())
                .ok_or_else(|| malformed(format!("`{pointer}` does not locate an array")))?;
            items.extend(array.iter().enumerate().map(|(i, v)| (i + 1, Some(v.clone()))));
        }
        None => {
            for (i, line) in BufReader::new(reader).lines().enumerate() {
                let line = line.map_err(|source| CorpusError::Io { path: spec.path.clone(), source })?;
                if line.trim().is_empty() {
                    continue;
                }
                items.push((i + 1, serde_json::from_str(&line).ok()));
            }
        }
    }

    let field = |value: &serde_json::Value, ptr: &str| -> Option<String> {
        let ptr = if ptr.starts_with('/') { ptr.to_string() } else { format!("/{ptr}") };
        match value.pointer(&ptr)? {
            serde_json::Value::String(s) => Some(s.clone()),
            serde_json::Value::Null => None,
            other => Some(other.to_string()),
        }
    };
    Ok(items
        .into_iter()
        .map(|(row, value)| match value {
            Some(value) => RawRow {
                row,
                id: map.id.as_deref().and_then(|p| field(&value, p)),
                topic: map.topic.as_deref().and_then(|p| field(&value, p)),
                text: field(&value, &map.text),
                thesis: map.thesis.as_deref().and_then(|p| field(&value, p)),
                gold: field(&value, &map.gold),
                error: None,
            },
            None => RawRow::unreadable(row, "invalid JSON".into()),
        })
        .collect())
}

fn build_records(spec: &DatasetSpec, rows: Vec<RawRow>) -> IngestReport {
    let mut report = IngestReport::default();
    let mut seen = HashSet::new();
    for raw in rows {
        let row = raw.row;
        let reject = |reason: String| Rejection { row, reason };
        if let Some(err) = raw.error {
            report.rejections.push(reject(format!("unreadable row: {err}")));
            continue;
        }
        let gold_raw = raw.gold.unwrap_or_default();
        let Some(gold) = spec.resolve_label(&gold_raw) else {
            report.rejections.push(reject(format!("unknown label `{}`", gold_raw.trim())));
            continue;
        };
        let record = Record {
            id: raw.id.map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).unwrap_or_else(|| format!("{}-{row}", spec.name)),
            topic: raw
                .topic
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .or_else(|| spec.topic.clone())
                .unwrap_or_else(|| spec.name.clone()),
            text: raw.text.unwrap_or_default(),
            thesis: raw.thesis.filter(|s| !s.trim().is_empty()),
            gold,
            source: spec.name.clone(),
        };
        if let Some(reason) = row_problem(spec, &record, &seen) {
            report.rejections.push(reject(reason));
            continue;
        }
        seen.insert(record.id.clone());
        report.records.push(record);
    }
    report
}

/// Records kept by [`crop`] and how many were removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropOutcome {
    pub records: Vec<Record>,
    pub dropped: usize,
}

/// Drops records whose text is longer than `limit` characters.
pub fn crop<I>(records: I, limit: usize) -> Result<CropOutcome, CorpusError>
where
    I: IntoIterator<Item = Record>,
{
    if limit == 0 {
        return Err(CorpusError::ZeroCropLimit);
    }
    let mut dropped = 0;
    let records = records
        .into_iter()
        .filter(|r| {
            let keep = r.char_len() <= limit;
            if !keep {
                dropped += 1;
            }
            keep
        })
        .collect();
    Ok(CropOutcome { records, dropped })
}

/// Apportions `target` among classes proportionally to `counts` with the
/// largest-remainder method.
///
/// Floors of the exact shares are assigned first; the leftover units go to the
/// classes with the largest fractional parts, ties going to the earlier class.
/// Remainders are compared as exact integers.
pub fn largest_remainder_quotas(counts: &[usize], target: usize) -> Result<Vec<usize>, CorpusError> {
    let total: usize = counts.iter().sum();
    if target > total {
        return Err(CorpusError::TargetTooLarge { target, available: total });
    }
    if total == 0 {
        return Ok(vec![0; counts.len()]);
    }
    let (target_w, total_w) = (target as u128, total as u128);
    let mut quotas: Vec<usize> = counts.iter().map(|&c| (target_w * c as u128 / total_w) as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(target_w * counts[i] as u128 % total_w));
    let assigned: usize = quotas.iter().sum();
    for &i in order.iter().take(target - assigned) {
        quotas[i] += 1;
    }
    Ok(quotas)
}

/// Output of [`stratified_trim`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrimOutcome {
    pub records: Vec<Record>,
    pub quotas: BTreeMap<Label, usize>,
    pub class_counts: BTreeMap<Label, usize>,
}

/// Samples `target` records preserving the class proportions of `records`.
pub fn stratified_trim(records: &[Record], target: usize, seed: u64) -> Result<TrimOutcome, CorpusError> {
    if target > records.len() {
        return Err(CorpusError::TargetTooLarge { target, available: records.len() });
    }
    let mut by_class: BTreeMap<Label, Vec<&Record>> = BTreeMap::new();
    for record in records {
        by_class.entry(record.gold).or_default().push(record);
    }
    let labels: Vec<Label> = by_class.keys().copied().collect();
    let counts: Vec<usize> = by_class.values().map(Vec::len).collect();
    let quota_list = largest_remainder_quotas(&counts, target)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(target);
    for (label, quota) in labels.iter().zip(&quota_list) {
        let members = &by_class[label];
        let mut picks = index::sample(&mut rng, members.len(), *quota).into_vec();
        picks.sort_unstable();
        chosen.extend(picks.into_iter().map(|i| members[i].clone()));
    }
    chosen.shuffle(&mut rng);

    Ok(TrimOutcome {
        records: chosen,
        quotas: labels.iter().copied().zip(quota_list).collect(),
        class_counts: labels.into_iter().zip(counts).collect(),
    })
}

/// Per-class record counts.
pub fn class_counts(records: &[Record]) -> BTreeMap<Label, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.gold).or_insert(0) += 1;
    }
    counts
}

/// Writes records in the canonical line format.
pub fn write_records(path: &Path, records: &[Record]) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for record in records {
        writeln!(out, "{}", record.to_line()).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Reads a canonical file strictly: any bad line is an error.
pub fn read_records(path: &Path) -> Result<Vec<Record>, CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let file = File::open(path).map_err(io_err)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record = Record::from_line(&line).map_err(|e| match e {
            CorpusError::BadLine { message, .. } => CorpusError::BadLine { line: i + 1, message },
            other => other,
        })?;
        records.push(record);
    }
    Ok(records)
}
