//! Extraction of labels and certainty values from raw model replies.
//!
//! Word and letter answers are matched on the cleaned reply, anchored at its
//! start or end. When neither anchor matches, the raw reply is searched for a
//! keyword wrapped in quotes or `**`. Reasoning replies are read from their
//! last `FINAL:` line. Certainty is the first run of digits, read as a
//! percentage.
//!
//! Cleaning removes punctuation in the Unicode `P` general category except
//! the ASCII emphasis marks `'`, `"` and `*`. Keeping them means a quoted
//! keyword (`is "for".`) is not mistaken for an anchored answer and falls
//! through to the emphasis rule. Symbols (`$`, `+`, `%`) are kept.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, Mode};

/// Shape of the answer a prompt asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerFormat {
    Words,
    Letters,
    CotFinalLine,
    Number,
}

/// Which extraction rule produced a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchedRule {
    Anchored,
    Emphasized,
    FinalLine,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Option<Label>,
    /// Normalized to `[0, 1]`.
    pub certainty: Option<f64>,
    pub answer_valid: bool,
    pub certainty_valid: bool,
    pub matched_rule: MatchedRule,
}

impl Prediction {
    pub fn new(answer: LabelMatch, certainty: Option<f64>) -> Prediction {
        Prediction {
            label: answer.label,
            certainty,
            answer_valid: answer.label.is_some(),
            certainty_valid: certainty.is_some(),
            matched_rule: answer.rule,
        }
    }
}

/// Label half of a [`Prediction`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelMatch {
    pub label: Option<Label>,
    pub rule: MatchedRule,
}

impl LabelMatch {
    const NONE: LabelMatch = LabelMatch { label: None, rule: MatchedRule::None };
}

static PUNCTUATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#"[\p{P}--['"*]]+"#).unwrap());
static WHITESPACE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s+").unwrap());

/// Lowercases, removes punctuation other than emphasis marks, and collapses
/// whitespace.
pub fn clean(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let stripped = PUNCTUATION.replace_all(&lowered, "");
    WHITESPACE.replace_all(stripped.trim(), " ").into_owned()
}

struct Patterns {
    start: Regex,
    end: Regex,
    emphasized: Regex,
}

impl Patterns {
    fn new(alternatives: &str) -> Patterns {
        Patterns {
            start: Regex::new(&format!(r"^\b({alternatives})\b")).unwrap(),
            end: Regex::new(&format!(r"\b({alternatives})\b$")).unwrap(),
            emphasized: Regex::new(&format!(r#"(?i)(?:'|"|\*\*)(\s*)({alternatives})(\s*)(?:'|"|\*\*)"#)).unwrap(),
        }
    }
}

static THREE_WORDS: LazyLock<Patterns> = LazyLock::new(|| Patterns::new("for|against|no argument"));
static THREE_LETTERS: LazyLock<Patterns> = LazyLock::new(|| Patterns::new("f|a|n"));
static TWO_WORDS: LazyLock<Patterns> = LazyLock::new(|| Patterns::new("for|against"));
static TWO_LETTERS: LazyLock<Patterns> = LazyLock::new(|| Patterns::new("f|a"));

static FINAL_THREE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)final\s*\**\s*:\s*\**\s*<?\s*(for|against|no argument)\b").unwrap());
static FINAL_TWO: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)final\s*\**\s*:\s*\**\s*<?\s*(for|against)\b").unwrap());

static DIGITS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[0-9]+").unwrap());

fn token_label(token: &str) -> Option<Label> {
    match token.to_lowercase().as_str() {
        "for" | "f" => Some(Label::For),
        "against" | "a" => Some(Label::Against),
        "no argument" | "n" => Some(Label::NoArgument),
        _ => None,
    }
}

/// Extracts a label from `raw` according to the prompt's answer format.
///
/// Start- and end-anchored matches that name different labels make the
/// answer invalid. [`AnswerFormat::Number`] never yields a label.
pub fn parse_answer(raw: &str, format: AnswerFormat, mode: Mode) -> LabelMatch {
    let patterns: &Patterns = match (format, mode) {
        (AnswerFormat::Words, Mode::ThreeClass) => &THREE_WORDS,
        (AnswerFormat::Letters, Mode::ThreeClass) => &THREE_LETTERS,
        (AnswerFormat::Words, Mode::TwoClass) => &TWO_WORDS,
        (AnswerFormat::Letters, Mode::TwoClass) => &TWO_LETTERS,
        (AnswerFormat::CotFinalLine, _) => return parse_final_line(raw, mode),
        (AnswerFormat::Number, _) => return LabelMatch::NONE,
    };

    let cleaned = clean(raw);
    let capture = |re: &Regex| re.captures(&cleaned).and_then(|c| token_label(&c[1]));
    match (capture(&patterns.start), capture(&patterns.end)) {
        (Some(a), Some(b)) if a != b => return LabelMatch::NONE,
        (Some(label), _) | (None, Some(label)) => {
            return LabelMatch { label: Some(label), rule: MatchedRule::Anchored };
        }
        (None, None) => {}
    }

    patterns
        .emphasized
        .captures(raw)
        .and_then(|c| token_label(&c[2]))
        .map_or(LabelMatch::NONE, |label| LabelMatch { label: Some(label), rule: MatchedRule::Emphasized })
}

fn parse_final_line(raw: &str, mode: Mode) -> LabelMatch {
    let re: &Regex = match mode {
        Mode::ThreeClass => &FINAL_THREE,
        Mode::TwoClass => &FINAL_TWO,
    };
    raw.lines()
        .rev()
        .find_map(|line| re.captures(line).and_then(|c| token_label(&c[1])))
        .map_or(LabelMatch::NONE, |label| LabelMatch { label: Some(label), rule: MatchedRule::FinalLine })
}

/// Reads the first digit run as an integer percentage in `0..=100`.
///
/// A decimal such as `87.5` yields its integer part. Values above 100 and
/// replies without digits are invalid.
pub fn parse_certainty(raw: &str) -> Option<f64> {
    let digits = DIGITS.find(raw)?.as_str();
    let trimmed = digits.trim_start_matches('0');
    if trimmed.len() > 3 {
        return None;
    }
    let value: u32 = if trimmed.is_empty() { 0 } else { trimmed.parse().ok()? };
    (value <= 100).then(|| f64::from(value) / 100.0)
}

/// Parses an answer reply and, when present, its certainty reply.
pub fn parse_prediction(answer: &str, certainty: Option<&str>, format: AnswerFormat, mode: Mode) -> Prediction {
    Prediction::new(parse_answer(answer, format, mode), certainty.and_then(parse_certainty))
}
