//! Combining per-prompt answers into one label.
//!
//! With `V(q)` the number of valid votes for label `q` and `S(q)` the sum of
//! their certainties:
//!
//! * **Simple**: pick from `argmax V`, uniformly at random on ties.
//! * **Tiebreak**: pick from `argmax V`; on ties pick `argmax S` within the
//!   tied set, falling back to a uniform draw if `S` ties too.
//! * **Weighted**: pick `argmax S` over labels with at least one vote,
//!   uniformly at random on ties.
//!
//! Invalid votes are ignored. A valid vote without a certainty counts in `V`
//! and contributes 0 to `S`. A ballot with no valid votes abstains.
//!
//! Random draws come from a generator seeded per (experiment seed, record,
//! algorithm), see [`tie_rng`], so outcomes do not depend on processing order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::parsing::Prediction;

/// Certainty sums closer than this are treated as tied.
pub const SCORE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Simple,
    Tiebreak,
    Weighted,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Simple, Algorithm::Tiebreak, Algorithm::Weighted];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Simple => "simple",
            Algorithm::Tiebreak => "tiebreak",
            Algorithm::Weighted => "weighted",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "simple" => Ok(Algorithm::Simple),
            "tiebreak" => Ok(Algorithm::Tiebreak),
            "weighted" => Ok(Algorithm::Weighted),
            other => Err(format!("unknown voting algorithm `{other}`")),
        }
    }
}

/// One prompt's contribution to a ballot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    /// `None` for an invalid answer.
    pub label: Option<Label>,
    pub certainty: Option<f64>,
}

impl Vote {
    pub fn valid(label: Label, certainty: f64) -> Vote {
        Vote { label: Some(label), certainty: Some(certainty) }
    }

    pub fn invalid() -> Vote {
        Vote { label: None, certainty: None }
    }
}

impl From<&Prediction> for Vote {
    fn from(p: &Prediction) -> Vote {
        Vote { label: p.label, certainty: p.certainty }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ballot {
    pub record_id: String,
    pub votes: Vec<Vote>,
}

impl Ballot {
    pub fn new(record_id: impl Into<String>, votes: Vec<Vote>) -> Ballot {
        Ballot { record_id: record_id.into(), votes }
    }

    /// A ballot restricted to the votes at `positions`.
    pub fn subset(&self, positions: &[usize]) -> Ballot {
        Ballot { record_id: self.record_id.clone(), votes: positions.iter().map(|&i| self.votes[i]).collect() }
    }

    /// `(V, S)` per label, indexed by [`Label::index`].
    pub fn tally(&self) -> ([usize; 3], [f64; 3]) {
        let mut counts = [0usize; 3];
        let mut scores = [0f64; 3];
        for vote in &self.votes {
            if let Some(label) = vote.label {
                counts[label.index()] += 1;
                scores[label.index()] += vote.certainty.unwrap_or(0.0);
            }
        }
        (counts, scores)
    }
}

/// How the final label was singled out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieBreak {
    None,
    Certainty,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub algorithm: Algorithm,
    /// `None` when the ballot had no valid vote.
    pub final_label: Option<Label>,
    pub tally: BTreeMap<Label, usize>,
    pub scores: BTreeMap<Label, f64>,
    /// Size of the first-stage winner set (`argmax V`, or `argmax S` for
    /// weighted voting).
    pub winners: usize,
    /// Labels the final choice was drawn from; a single label when no random
    /// draw was needed.
    pub candidates: Vec<Label>,
    pub tie_broken_by: TieBreak,
}

impl VoteOutcome {
    pub fn abstained(&self) -> bool {
        self.final_label.is_none()
    }
}

/// Generator for the random tie-breaks of one record under one algorithm.
pub fn tie_rng(seed: u64, record_id: &str, algorithm: Algorithm) -> ChaCha8Rng {
    crate::seed::rng_for(seed, &["tie", algorithm.as_str(), record_id])
}

fn argmax_counts(counts: &[usize; 3], among: &[Label]) -> Vec<Label> {
    let best = among.iter().map(|l| counts[l.index()]).max().unwrap_or(0);
    among.iter().copied().filter(|l| counts[l.index()] == best).collect()
}

fn argmax_scores(scores: &[f64; 3], among: &[Label]) -> Vec<Label> {
    let best = among.iter().map(|l| scores[l.index()]).fold(f64::NEG_INFINITY, f64::max);
    among.iter().copied().filter(|l| best - scores[l.index()] <= SCORE_EPSILON).collect()
}

fn draw<R: Rng + ?Sized>(candidates: &[Label], rng: &mut R) -> Label {
    candidates[rng.random_range(0..candidates.len())]
}

fn outcome(algorithm: Algorithm, counts: [usize; 3], scores: [f64; 3]) -> VoteOutcome {
    let voted = |l: &Label| counts[l.index()] > 0;
    VoteOutcome {
        algorithm,
        final_label: None,
        tally: Label::ALL.iter().filter(|l| voted(l)).map(|l| (*l, counts[l.index()])).collect(),
        scores: Label::ALL.iter().filter(|l| voted(l)).map(|l| (*l, scores[l.index()])).collect(),
        winners: 0,
        candidates: Vec::new(),
        tie_broken_by: TieBreak::None,
    }
}

fn voted_labels(counts: &[usize; 3]) -> Vec<Label> {
    Label::ALL.iter().copied().filter(|l| counts[l.index()] > 0).collect()
}

/// Count majority with uniform random tie-breaking; certainties are ignored.
pub fn vote_simple<R: Rng + ?Sized>(ballot: &Ballot, rng: &mut R) -> VoteOutcome {
    let (counts, scores) = ballot.tally();
    let mut out = outcome(Algorithm::Simple, counts, scores);
    let voted = voted_labels(&counts);
    if voted.is_empty() {
        return out;
    }
    let winners = argmax_counts(&counts, &voted);
    out.winners = winners.len();
    out.final_label = Some(draw(&winners, rng));
    if winners.len() > 1 {
        out.tie_broken_by = TieBreak::Random;
    }
    out.candidates = winners;
    out
}

/// Count majority; ties resolved by the highest certainty sum, then by a
/// uniform draw.
pub fn vote_tiebreak<R: Rng + ?Sized>(ballot: &Ballot, rng: &mut R) -> VoteOutcome {
    let (counts, scores) = ballot.tally();
    let mut out = outcome(Algorithm::Tiebreak, counts, scores);
    let voted = voted_labels(&counts);
    if voted.is_empty() {
        return out;
    }
    let winners = argmax_counts(&counts, &voted);
    out.winners = winners.len();
    if winners.len() == 1 {
        out.final_label = Some(winners[0]);
        out.candidates = winners;
        return out;
    }
    let best = argmax_scores(&scores, &winners);
    out.tie_broken_by = if best.len() == 1 { TieBreak::Certainty } else { TieBreak::Random };
    out.final_label = Some(if best.len() == 1 { best[0] } else { draw(&best, rng) });
    out.candidates = best;
    out
}

/// Highest certainty sum among labels that received a vote; uniform draw on
/// ties.
pub fn vote_weighted<R: Rng + ?Sized>(ballot: &Ballot, rng: &mut R) -> VoteOutcome {
    let (counts, scores) = ballot.tally();
    let mut out = outcome(Algorithm::Weighted, counts, scores);
    let voted = voted_labels(&counts);
    if voted.is_empty() {
        return out;
    }
    let best = argmax_scores(&scores, &voted);
    out.winners = best.len();
    out.final_label = Some(draw(&best, rng));
    if best.len() > 1 {
        out.tie_broken_by = TieBreak::Random;
    }
    out.candidates = best;
    out
}

pub fn vote<R: Rng + ?Sized>(algorithm: Algorithm, ballot: &Ballot, rng: &mut R) -> VoteOutcome {
    match algorithm {
        Algorithm::Simple => vote_simple(ballot, rng),
        Algorithm::Tiebreak => vote_tiebreak(ballot, rng),
        Algorithm::Weighted => vote_weighted(ballot, rng),
    }
}

/// Votes with the per-record seeded generator.
pub fn vote_seeded(algorithm: Algorithm, ballot: &Ballot, seed: u64) -> VoteOutcome {
    vote(algorithm, ballot, &mut tie_rng(seed, &ballot.record_id, algorithm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Against as A, For as F, NoArgument as N};

    fn ballot(votes: &[(Label, f64)]) -> Ballot {
        Ballot::new("r", votes.iter().map(|&(l, c)| Vote::valid(l, c)).collect())
    }

    fn labels(labels: &[Label]) -> Ballot {
        ballot(&labels.iter().map(|&l| (l, 0.5)).collect::<Vec<_>>())
    }

    #[test]
    fn simple_majority() {
        let out = vote_seeded(Algorithm::Simple, &labels(&[F, F, A, N]), 1);
        assert_eq!(out.final_label, Some(F));
        assert_eq!(out.tie_broken_by, TieBreak::None);
        assert_eq!(out.tally[&F], 2);
    }

    #[test]
    fn simple_tie_is_fair() {
        let b = labels(&[F, A]);
        let fors = (0..4000u64).filter(|&s| vote_seeded(Algorithm::Simple, &b, s).final_label == Some(F)).count();
        // binomial(4000, 1/2): sd ~31.6, allow 5 sd
        assert!((fors as i64 - 2000).abs() < 160, "{fors}");
    }

    #[test]
    fn all_invalid_abstains() {
        let b = Ballot::new("r", vec![Vote::invalid(); 4]);
        for alg in Algorithm::ALL {
            let out = vote_seeded(alg, &b, 3);
            assert!(out.abstained());
            assert!(out.tally.is_empty());
        }
    }

    #[test]
    fn tiebreak_uses_certainty() {
        let out = vote_seeded(Algorithm::Tiebreak, &ballot(&[(F, 0.9), (F, 0.5), (A, 0.8), (A, 0.7)]), 0);
        assert_eq!(out.final_label, Some(A));
        assert_eq!(out.tie_broken_by, TieBreak::Certainty);
        assert!((out.scores[&F] - 1.4).abs() < 1e-12 && (out.scores[&A] - 1.5).abs() < 1e-12);

        let out = vote_seeded(Algorithm::Tiebreak, &ballot(&[(F, 0.1), (A, 0.9), (N, 0.9), (F, 0.1)]), 0);
        assert_eq!(out.final_label, Some(F));
        assert_eq!(out.tie_broken_by, TieBreak::None);

        let out = vote_seeded(Algorithm::Tiebreak, &ballot(&[(F, 0.5), (A, 0.5)]), 0);
        assert_eq!(out.tie_broken_by, TieBreak::Random);
        assert_eq!(out.candidates, vec![F, A]);
    }

    #[test]
    fn weighted_diverges_from_count() {
        let b = ballot(&[(F, 1.0), (A, 0.4), (A, 0.4), (N, 0.1)]);
        assert_eq!(vote_seeded(Algorithm::Weighted, &b, 0).final_label, Some(F));
        assert_eq!(vote_seeded(Algorithm::Simple, &b, 0).final_label, Some(A));
        assert_eq!(vote_seeded(Algorithm::Weighted, &ballot(&[(F, 0.3)]), 0).final_label, Some(F));
    }

    #[test]
    fn weighted_all_zero_draws_among_voted() {
        let b = ballot(&[(F, 0.0), (A, 0.0)]);
        let out = vote_seeded(Algorithm::Weighted, &b, 0);
        assert_eq!(out.candidates, vec![F, A]);
        assert_eq!(out.tie_broken_by, TieBreak::Random);
    }

    #[test]
    fn missing_certainty_counts_zero() {
        let b = Ballot::new("r", vec![Vote { label: Some(F), certainty: None }, Vote::valid(A, 0.2)]);
        let out = vote_seeded(Algorithm::Tiebreak, &b, 0);
        assert_eq!(out.final_label, Some(A));
        assert_eq!(out.scores[&F], 0.0);
    }

    #[test]
    fn subset_selects_positions() {
        let b = labels(&[F, F, A, N]);
        assert_eq!(b.subset(&[0, 1]).votes.len(), 2);
        assert_eq!(vote_seeded(Algorithm::Tiebreak, &b.subset(&[0, 1]), 0).final_label, Some(F));
    }
}
