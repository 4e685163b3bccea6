//! Evaluation: classification scores, two-stage aggregation with standard
//! error, Fleiss' kappa, the six-way error taxonomy, and leave-one-prompt-out
//! ablation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Label, Mode};
use crate::ensemble::{self, Algorithm, Ballot};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("nothing to score")]
    Empty,
    #[error("item {item} has {found} ratings, expected {expected}")]
    MixedRaterCounts { item: usize, expected: usize, found: usize },
    #[error("agreement needs at least two ratings per item")]
    TooFewRaters,
    #[error("error taxonomy is defined for three-class data only")]
    NotThreeClass,
    #[error("ablation needs ballots of {expected} votes, record `{record}` has {found}")]
    BallotSize { record: String, expected: usize, found: usize },
}

/// Whether classes absent from both gold and predictions enter macro averages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacroPolicy {
    /// Skip classes with zero gold and zero predicted occurrences.
    #[default]
    ExcludeAbsent,
    /// Average over every label of the mode.
    FullLabelSet,
}

/// Rows: gold label. Columns: predicted label, then abstention.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; 4]; 3],
}

impl ConfusionMatrix {
    pub const ABSTAIN: usize = 3;

    pub fn from_pairs(pairs: &[(Label, Option<Label>)]) -> ConfusionMatrix {
        let mut m = ConfusionMatrix::default();
        for &(gold, pred) in pairs {
            m.counts[gold.index()][pred.map_or(Self::ABSTAIN, Label::index)] += 1;
        }
        m
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    pub fn abstentions(&self) -> usize {
        (0..3).map(|i| self.counts[i][Self::ABSTAIN]).sum()
    }

    fn gold_count(&self, label: Label) -> usize {
        self.counts[label.index()].iter().sum()
    }

    fn predicted_count(&self, label: Label) -> usize {
        (0..3).map(|g| self.counts[g][label.index()]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub n: usize,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub abstentions: usize,
    pub per_class: BTreeMap<Label, ClassScores>,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores (gold, prediction) pairs; abstentions count as incorrect.
pub fn score(pairs: &[(Label, Option<Label>)], mode: Mode, policy: MacroPolicy) -> Result<Scores, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let confusion = ConfusionMatrix::from_pairs(pairs);
    let mut per_class = BTreeMap::new();
    for &label in mode.labels() {
        let support = confusion.gold_count(label);
        let predicted = confusion.predicted_count(label);
        if policy == MacroPolicy::ExcludeAbsent && support == 0 && predicted == 0 {
            continue;
        }
        let tp = confusion.counts[label.index()][label.index()];
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        per_class.insert(label, ClassScores { precision, recall, f1, support });
    }
    let k = per_class.len().max(1) as f64;
    let mean = |f: fn(&ClassScores) -> f64| per_class.values().map(f).sum::<f64>() / k;
    Ok(Scores {
        n: pairs.len(),
        accuracy: ratio(confusion.correct(), confusion.total()),
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        abstentions: confusion.abstentions(),
        per_class,
        confusion,
    })
}

/// Mean and standard error (sample standard deviation over `sqrt(k)`).
/// The standard error is absent for fewer than two values.
pub fn mean_and_se(values: &[f64]) -> Option<(f64, Option<f64>)> {
    if values.is_empty() {
        return None;
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return Some((mean, None));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    Some((mean, Some(var.sqrt() / k.sqrt())))
}

/// Metrics for one (model, dataset, method) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub model: String,
    pub dataset: String,
    pub method: String,
    /// Column this cell is averaged into at the dataset level; several
    /// prompts share the zero-shot column.
    pub column: String,
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub invalid_answers: usize,
    pub invalid_certainties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub model: String,
    pub dataset: String,
    pub column: String,
    pub cells: usize,
    pub n: usize,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub column: String,
    pub datasets: usize,
    pub accuracy: f64,
    pub accuracy_se: Option<f64>,
    pub f1: f64,
    pub f1_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub cells: Vec<CellMetrics>,
    pub per_dataset: Vec<DatasetSummary>,
    pub per_model: Vec<ModelSummary>,
}

/// Averages cells within each (model, dataset, column), then takes mean and
/// standard error across datasets per (model, column). Output is sorted by
/// key, so input order does not matter.
pub fn aggregate(cells: &[CellMetrics]) -> AggregateReport {
    let mut sorted = cells.to_vec();
    sorted.sort_by(|a, b| (&a.model, &a.dataset, &a.column, &a.method).cmp(&(&b.model, &b.dataset, &b.column, &b.method)));

    let mut groups: BTreeMap<(String, String, String), Vec<&CellMetrics>> = BTreeMap::new();
    for cell in &sorted {
        groups.entry((cell.model.clone(), cell.dataset.clone(), cell.column.clone())).or_default().push(cell);
    }
    let per_dataset: Vec<DatasetSummary> = groups
        .into_iter()
        .map(|((model, dataset, column), members)| {
            let k = members.len() as f64;
            DatasetSummary {
                model,
                dataset,
                column,
                cells: members.len(),
                n: members.iter().map(|c| c.n).sum(),
                accuracy: members.iter().map(|c| c.accuracy).sum::<f64>() / k,
                f1: members.iter().map(|c| c.f1).sum::<f64>() / k,
            }
        })
        .collect();

    let mut by_model: BTreeMap<(String, String), Vec<&DatasetSummary>> = BTreeMap::new();
    for d in &per_dataset {
        by_model.entry((d.model.clone(), d.column.clone())).or_default().push(d);
    }
    let per_model = by_model
        .into_iter()
        .map(|((model, column), members)| {
            let acc: Vec<f64> = members.iter().map(|d| d.accuracy).collect();
            let f1: Vec<f64> = members.iter().map(|d| d.f1).collect();
            let (accuracy, accuracy_se) = mean_and_se(&acc).expect("group is nonempty");
            let (f1, f1_se) = mean_and_se(&f1).expect("group is nonempty");
            ModelSummary { model, column, datasets: members.len(), accuracy, accuracy_se, f1, f1_se }
        })
        .collect();

    AggregateReport { cells: sorted, per_dataset, per_model }
}

/// Fleiss' kappa over per-item category counts.
///
/// Every row must sum to the same rater count `n >= 2`. When expected
/// agreement is 1 (a single category overall) kappa is 1 if observed
/// agreement is also 1 and undefined (`None`) otherwise.
pub fn fleiss_kappa(table: &[Vec<usize>]) -> Result<Option<f64>, MetricsError> {
    let Some(first) = table.first() else {
        return Err(MetricsError::Empty);
    };
    let n: usize = first.iter().sum();
    if n < 2 {
        return Err(MetricsError::TooFewRaters);
    }
    let categories = table.iter().map(Vec::len).max().unwrap_or(0);
    let mut totals = vec![0usize; categories];
    let mut agreement = 0.0;
    for (item, row) in table.iter().enumerate() {
        let found: usize = row.iter().sum();
        if found != n {
            return Err(MetricsError::MixedRaterCounts { item, expected: n, found });
        }
        let squares: usize = row.iter().map(|c| c * c).sum();
        agreement += (squares - n) as f64 / (n * (n - 1)) as f64;
        for (j, c) in row.iter().enumerate() {
            totals[j] += c;
        }
    }
    let items = table.len() as f64;
    let p_bar = agreement / items;
    let all = (n * table.len()) as f64;
    let p_e: f64 = totals.iter().map(|&t| (t as f64 / all).powi(2)).sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(((1.0 - p_bar).abs() < 1e-15).then_some(1.0));
    }
    Ok(Some((p_bar - p_e) / (1.0 - p_e)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub kappa: Option<f64>,
    pub items: usize,
    /// Items dropped because at least one rating was invalid.
    pub excluded: usize,
    pub raters: usize,
}

/// Kappa over repeated labelings: one inner vector of ratings per item.
/// Items with any invalid rating are excluded and counted.
pub fn agreement_from_ratings(ratings: &[Vec<Option<Label>>]) -> Result<Agreement, MetricsError> {
    let raters = ratings.first().map_or(0, Vec::len);
    if raters < 2 {
        return Err(MetricsError::TooFewRaters);
    }
    let mut table = Vec::new();
    let mut excluded = 0;
    for (item, row) in ratings.iter().enumerate() {
        if row.len() != raters {
            return Err(MetricsError::MixedRaterCounts { item, expected: raters, found: row.len() });
        }
        if row.iter().any(Option::is_none) {
            excluded += 1;
            continue;
        }
        let mut counts = vec![0usize; 3];
        for label in row.iter().flatten() {
            counts[label.index()] += 1;
        }
        table.push(counts);
    }
    let kappa = if table.is_empty() { None } else { fleiss_kappa(&table)? };
    Ok(Agreement { kappa, items: table.len(), excluded, raters })
}

/// Misclassification bucket: gold letter followed by predicted letter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorType {
    AF,
    AN,
    FA,
    FN,
    NA,
    NF,
}

impl ErrorType {
    pub const ALL: [ErrorType; 6] = [ErrorType::AF, ErrorType::AN, ErrorType::FA, ErrorType::FN, ErrorType::NA, ErrorType::NF];

    pub fn of(gold: Label, predicted: Label) -> Option<ErrorType> {
        use Label::*;
        Some(match (gold, predicted) {
            (Against, For) => ErrorType::AF,
            (Against, NoArgument) => ErrorType::AN,
            (For, Against) => ErrorType::FA,
            (For, NoArgument) => ErrorType::FN,
            (NoArgument, Against) => ErrorType::NA,
            (NoArgument, For) => ErrorType::NF,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub counts: BTreeMap<ErrorType, usize>,
    /// Share of all records, abstentions included.
    pub shares: BTreeMap<ErrorType, f64>,
    /// Share of records that received a label.
    pub shares_of_predicted: BTreeMap<ErrorType, f64>,
    pub total: usize,
    pub correct: usize,
    pub abstentions: usize,
}

pub fn error_breakdown(pairs: &[(Label, Option<Label>)], mode: Mode) -> Result<ErrorBreakdown, MetricsError> {
    if mode != Mode::ThreeClass {
        return Err(MetricsError::NotThreeClass);
    }
    let mut counts: BTreeMap<ErrorType, usize> = ErrorType::ALL.iter().map(|t| (*t, 0)).collect();
    let (mut correct, mut abstentions) = (0, 0);
    for &(gold, pred) in pairs {
        match pred {
            None => abstentions += 1,
            Some(p) if p == gold => correct += 1,
            Some(p) => *counts.get_mut(&ErrorType::of(gold, p).expect("labels differ")).unwrap() += 1,
        }
    }
    let total = pairs.len();
    let share = |den: usize| counts.iter().map(|(t, &c)| (*t, ratio(c, den))).collect();
    Ok(ErrorBreakdown {
        shares: share(total),
        shares_of_predicted: share(total - abstentions),
        counts,
        total,
        correct,
        abstentions,
    })
}

/// Accuracy of one prompt subset in an ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationColumn {
    /// e.g. `"P2,3,4"`.
    pub name: String,
    /// Zero-based ballot positions used.
    pub positions: Vec<usize>,
    pub accuracy: f64,
    pub f1: f64,
}

/// Leave-one-out columns, their mean, and the full ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub algorithm: Algorithm,
    pub subsets: Vec<AblationColumn>,
    pub subset_mean_accuracy: f64,
    pub full: AblationColumn,
}

impl AblationTable {
    /// Header and accuracy row in the order
    /// `P2,3,4 | P1,3,4 | P1,2,4 | P1,2,3 | avg | P1,2,3,4`.
    pub fn row(&self) -> Vec<(String, f64)> {
        let mut row: Vec<(String, f64)> = self.subsets.iter().map(|c| (c.name.clone(), c.accuracy)).collect();
        row.push(("avg".into(), self.subset_mean_accuracy));
        row.push((self.full.name.clone(), self.full.accuracy));
        row
    }
}

fn subset_name(positions: &[usize]) -> String {
    let nums: Vec<String> = positions.iter().map(|p| (p + 1).to_string()).collect();
    format!("P{}", nums.join(","))
}

/// Re-runs voting on every leave-one-out subset of the recorded ballots.
///
/// Tie randomness is seeded per (seed, subset, record, algorithm).
pub fn ablate(
    ballots: &[(Label, Ballot)],
    algorithm: Algorithm,
    mode: Mode,
    seed: u64,
    voters: usize,
) -> Result<AblationTable, MetricsError> {
    if ballots.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some((_, b)) = ballots.iter().find(|(_, b)| b.votes.len() != voters) {
        return Err(MetricsError::BallotSize { record: b.record_id.clone(), expected: voters, found: b.votes.len() });
    }
    let column = |positions: Vec<usize>| -> Result<AblationColumn, MetricsError> {
        let name = subset_name(&positions);
        let subset_seed = crate::seed::derive_seed(seed, &["ablation", &name]);
        let pairs: Vec<(Label, Option<Label>)> = ballots
            .iter()
            .map(|(gold, ballot)| (*gold, ensemble::vote_seeded(algorithm, &ballot.subset(&positions), subset_seed).final_label))
            .collect();
        let scores = score(&pairs, mode, MacroPolicy::default())?;
        Ok(AblationColumn { name, positions, accuracy: scores.accuracy, f1: scores.macro_f1 })
    };
    let subsets = (0..voters)
        .map(|drop| column((0..voters).filter(|&i| i != drop).collect()))
        .collect::<Result<Vec<_>, _>>()?;
    let subset_mean_accuracy = subsets.iter().map(|c| c.accuracy).sum::<f64>() / subsets.len() as f64;
    let full = column((0..voters).collect())?;
    Ok(AblationTable { algorithm, subsets, subset_mean_accuracy, full })
}
