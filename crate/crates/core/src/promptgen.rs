//! Prompt templates and rendering.
//!
//! Four rephrasings of the classification task (P1–P4) differ in answer
//! format (words vs. letters) and in how verbosely the thesis is presented.
//! P5 asks for step-by-step reasoning ending in a `FINAL:` line. A fixed
//! follow-up turn asks the model for its certainty after a P1–P4 answer.
//!
//! Templates use two placeholders, `{sentence}` and `{thesis}`, substituted
//! literally in a single pass. Both the templates and the thesis table are
//! configuration: the built-in values can be replaced from TOML files.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_alias, Mode, Record};
use crate::parsing::AnswerFormat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PromptId {
    P1,
    P2,
    P3,
    P4,
    #[serde(rename = "P5_CoT")]
    P5Cot,
    #[serde(rename = "CERTAINTY_FOLLOWUP")]
    CertaintyFollowup,
}

impl PromptId {
    /// The rephrased prompts that take part in voting.
    pub const RAR: [PromptId; 4] = [PromptId::P1, PromptId::P2, PromptId::P3, PromptId::P4];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptId::P1 => "P1",
            PromptId::P2 => "P2",
            PromptId::P3 => "P3",
            PromptId::P4 => "P4",
            PromptId::P5Cot => "P5_CoT",
            PromptId::CertaintyFollowup => "CERTAINTY_FOLLOWUP",
        }
    }

    pub fn answer_format(self) -> AnswerFormat {
        match self {
            PromptId::P1 | PromptId::P3 => AnswerFormat::Words,
            PromptId::P2 | PromptId::P4 => AnswerFormat::Letters,
            PromptId::P5Cot => AnswerFormat::CotFinalLine,
            PromptId::CertaintyFollowup => AnswerFormat::Number,
        }
    }

    /// Whether a certainty follow-up may be appended to this prompt.
    pub fn supports_certainty(self) -> bool {
        Self::RAR.contains(&self)
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "P1" => Ok(PromptId::P1),
            "P2" => Ok(PromptId::P2),
            "P3" => Ok(PromptId::P3),
            "P4" => Ok(PromptId::P4),
            "P5" | "P5_COT" | "COT" => Ok(PromptId::P5Cot),
            "CERTAINTY_FOLLOWUP" => Ok(PromptId::CertaintyFollowup),
            _ => Err(PromptError::UnknownPrompt(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

/// A rendered conversation for one (record, prompt) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub record_id: String,
    pub prompt_id: PromptId,
    pub messages: Vec<ChatMessage>,
    pub format: AnswerFormat,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown prompt id `{0}`")]
    UnknownPrompt(String),
    #[error("no thesis known for topic `{0}`")]
    UnknownTopic(String),
    #[error("record `{0}` has no thesis")]
    MissingThesis(String),
    #[error("template for {prompt} has an unknown placeholder `{{{placeholder}}}`")]
    BadPlaceholder { prompt: String, placeholder: String },
    #[error("no template for {0}")]
    MissingTemplate(String),
    #[error("certainty follow-up needs a P1-P4 instance, got {0}")]
    NotCertaintyEligible(PromptId),
    #[error("certainty follow-up needs the prior assistant answer")]
    MissingAnswer,
    #[error("cannot parse configuration: {0}")]
    Config(String),
}

/// Verbatim follow-up turn asking for self-rated certainty.
pub const CERTAINTY_FOLLOWUP: &str =
    "Return the certainty of your answer as a percentage. Output only a single number between 0 and 100, with no additional text.";

const THREE_CLASS_TEMPLATES: [(PromptId, &str); 5] = [
    (
        PromptId::P1,
        "Is the sentence: \"{sentence}\" an argument for or against {thesis}, or is it no argument? Return one of the expressions: \"For\", \"Against\" or \"No argument\", without any additional commentary.",
    ),
    (
        PromptId::P2,
        "The thesis is: \"{thesis}\" Indicate if the argument \"{sentence}\" is for this thesis (F), against this thesis (A), or neutral (N). Please respond with only one letter: F, A, or N, without any additional commentary.",
    ),
    (
        PromptId::P3,
        "In the context of the ongoing public debate, evaluate whether the text \"{sentence}\" represents an argument supporting or opposing \"{thesis}\", or whether it does not qualify as an argument at all. Respond with one of the expressions: \"For\", \"Against\" or \"No Argument\".",
    ),
    (
        PromptId::P4,
        "Is the sentence: \"{sentence}\" an argument for (F) or against (A) {thesis}, or is it no argument (N)? Return a single letter: F, A, or N, without any additional commentary.",
    ),
    (
        PromptId::P5Cot,
        "Is the sentence: \"{sentence}\" an argument for or against {thesis} or is it no argument?\nSolve the argument classification problem. Think through the problem step by step to solve it.\nThen output one final line exactly in the format: FINAL: <For|Against|No Argument>\nDo not include anything after the FINAL line.",
    ),
];

const TWO_CLASS_TEMPLATES: [(PromptId, &str); 5] = [
    (
        PromptId::P1,
        "Is the sentence: \"{sentence}\" an argument for or against \"{thesis}\"? Return one of the expressions: \"For\" or \"Against\", without any additional commentary.",
    ),
    (
        PromptId::P2,
        "The thesis is: \"{thesis}\" Indicate if the argument \"{sentence}\" is for this thesis (F) or against this thesis (A). Please respond with only one letter: F or A, without any additional commentary.",
    ),
    (
        PromptId::P3,
        "In the context of the ongoing public debate, evaluate whether the text \"{sentence}\" represents an argument supporting or opposing \"{thesis}\". Respond with one of the expressions: \"For\" or \"Against\".",
    ),
    (
        PromptId::P4,
        "Is the sentence: \"{sentence}\" an argument for (F) or against (A) {thesis}? Return a single letter: F or A, without any additional commentary.",
    ),
    (
        PromptId::P5Cot,
        "Is the sentence: \"{sentence}\" an argument for or against {thesis}?\nSolve the argument classification problem. Think through the problem step by step to solve it.\nThen output one final line exactly in the format: FINAL: <For|Against>\nDo not include anything after the FINAL line.",
    ),
];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Sentence,
    Thesis,
}

/// A template split into literal text and placeholder slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    source: String,
    segments: Vec<Segment>,
}

impl Template {
    /// Parses template text. Any `{identifier}` other than the two known
    /// placeholders is rejected; other braces are literal.
    pub fn parse(prompt: &str, text: &str) -> Result<Template, PromptError> {
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut rest = text;
        while let Some(open) = rest.find('{') {
            literal.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let close = after.find('}');
            let name = close.map(|c| &after[..c]);
            match name {
                Some(name) if is_identifier(name) => {
                    let slot = match name {
                        "sentence" => Segment::Sentence,
                        "thesis" => Segment::Thesis,
                        _ => {
                            return Err(PromptError::BadPlaceholder {
                                prompt: prompt.to_string(),
                                placeholder: name.to_string(),
                            })
                        }
                    };
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(slot);
                    rest = &after[name.len() + 1..];
                }
                _ => {
                    literal.push('{');
                    rest = after;
                }
            }
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Ok(Template { source: text.to_string(), segments })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn uses_thesis(&self) -> bool {
        self.segments.contains(&Segment::Thesis)
    }

    pub fn render(&self, sentence: &str, thesis: &str) -> String {
        let mut out = String::with_capacity(self.source.len() + sentence.len() + thesis.len());
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Sentence => out.push_str(sentence),
                Segment::Thesis => out.push_str(thesis),
            }
        }
        out
    }
}

fn is_identifier(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Template text per mode and prompt, as stored in a TOML file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateConfig {
    pub three_class: BTreeMap<PromptId, String>,
    pub two_class: BTreeMap<PromptId, String>,
    #[serde(default = "default_followup")]
    pub certainty_followup: String,
}

fn default_followup() -> String {
    CERTAINTY_FOLLOWUP.to_string()
}

impl Default for TemplateConfig {
    fn default() -> Self {
        let collect = |table: &[(PromptId, &str)]| table.iter().map(|(id, t)| (*id, t.to_string())).collect();
        TemplateConfig {
            three_class: collect(&THREE_CLASS_TEMPLATES),
            two_class: collect(&TWO_CLASS_TEMPLATES),
            certainty_followup: default_followup(),
        }
    }
}

/// Parsed templates ready for rendering.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    three_class: BTreeMap<PromptId, Template>,
    two_class: BTreeMap<PromptId, Template>,
    certainty_followup: String,
}

impl TemplateSet {
    pub fn from_config(config: &TemplateConfig) -> Result<TemplateSet, PromptError> {
        let parse_all = |table: &BTreeMap<PromptId, String>| -> Result<BTreeMap<PromptId, Template>, PromptError> {
            table
                .iter()
                .map(|(id, text)| Ok((*id, Template::parse(id.as_str(), text)?)))
                .collect()
        };
        let followup = Template::parse("CERTAINTY_FOLLOWUP", &config.certainty_followup)?;
        if followup.segments.iter().any(|s| !matches!(s, Segment::Literal(_))) {
            return Err(PromptError::BadPlaceholder {
                prompt: "CERTAINTY_FOLLOWUP".into(),
                placeholder: "sentence/thesis".into(),
            });
        }
        Ok(TemplateSet {
            three_class: parse_all(&config.three_class)?,
            two_class: parse_all(&config.two_class)?,
            certainty_followup: config.certainty_followup.clone(),
        })
    }

    pub fn from_toml(text: &str) -> Result<TemplateSet, PromptError> {
        let config: TemplateConfig = toml::from_str(text).map_err(|e| PromptError::Config(e.to_string()))?;
        Self::from_config(&config)
    }

    pub fn certainty_followup(&self) -> &str {
        &self.certainty_followup
    }

    pub fn get(&self, mode: Mode, prompt: PromptId) -> Result<&Template, PromptError> {
        let table = match mode {
            Mode::ThreeClass => &self.three_class,
            Mode::TwoClass => &self.two_class,
        };
        table.get(&prompt).ok_or_else(|| PromptError::MissingTemplate(format!("{prompt} ({mode:?})")))
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet::from_config(&TemplateConfig::default()).expect("built-in templates are valid")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThesisEntry {
    pub topic: String,
    /// Other topic spellings that select this entry (dataset file names,
    /// corpus topic strings).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
    pub short_thesis: String,
    pub long_thesis: String,
}

/// Theses injected for corpora that do not carry one per record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThesisTable {
    pub entries: Vec<ThesisEntry>,
}

impl Default for ThesisTable {
    fn default() -> Self {
        let entry = |topic: &str, aliases: &[&str], short: &str, long: &str| ThesisEntry {
            topic: topic.into(),
            aliases: aliases.iter().map(|a| a.to_string()).collect(),
            short_thesis: short.into(),
            long_thesis: long.into(),
        };
        ThesisTable {
            entries: vec![
                entry("abortion", &[], "abortion", "Abortion should be fully accessible."),
                entry("cloning", &[], "cloning", "Cloning should be allowed."),
                entry("death penalty", &["death"], "death penalty", "The death penalty should be allowed."),
                entry(
                    "marijuana legalization",
                    &["marijuana", "legalisation of marijuana"],
                    "legalisation of marijuana",
                    "Marijuana should be legal.",
                ),
                entry("gun control", &["gun", "gun laws"], "stricter gun laws", "Gun access should be limited."),
                entry(
                    "minimum wage",
                    &["wage"],
                    "minimum wage",
                    "The minimum wage is justified and should be increased.",
                ),
                entry("nuclear energy", &["nuclear"], "nuclear energy", "Nuclear energy should be developed."),
                entry(
                    "school uniforms",
                    &["school"],
                    "school uniforms",
                    "School uniforms should be the standard in education.",
                ),
            ],
        }
    }
}

impl ThesisTable {
    pub fn from_toml(text: &str) -> Result<ThesisTable, PromptError> {
        let table: ThesisTable = toml::from_str(text).map_err(|e| PromptError::Config(e.to_string()))?;
        if let Some(bad) = table.entries.iter().find(|e| e.short_thesis.is_empty() || e.long_thesis.is_empty()) {
            return Err(PromptError::Config(format!("empty thesis for topic `{}`", bad.topic)));
        }
        Ok(table)
    }

    /// Finds the entry for `topic`, ignoring case, punctuation and spacing.
    pub fn lookup(&self, topic: &str) -> Option<&ThesisEntry> {
        let key = normalize_alias(topic);
        self.entries
            .iter()
            .find(|e| normalize_alias(&e.topic) == key || e.aliases.iter().any(|a| normalize_alias(a) == key))
    }
}

/// Renders prompt instances for records.
#[derive(Debug, Clone, Default)]
pub struct PromptGenerator {
    pub templates: TemplateSet,
    pub theses: ThesisTable,
}

impl PromptGenerator {
    pub fn new(templates: TemplateSet, theses: ThesisTable) -> Self {
        PromptGenerator { templates, theses }
    }

    /// Thesis text to inject for `record` under `prompt`.
    ///
    /// Two-class records carry their own thesis. Three-class records use the
    /// thesis table: the long formulation for P2, the short one otherwise. A
    /// three-class record whose topic is not in the table falls back to its
    /// own thesis when it has one.
    pub fn resolve_thesis(&self, record: &Record, mode: Mode, prompt: PromptId) -> Result<String, PromptError> {
        match mode {
            Mode::TwoClass => record.thesis.clone().ok_or_else(|| PromptError::MissingThesis(record.id.clone())),
            Mode::ThreeClass => match self.theses.lookup(&record.topic) {
                Some(entry) if prompt == PromptId::P2 => Ok(entry.long_thesis.clone()),
                Some(entry) => Ok(entry.short_thesis.clone()),
                None => record.thesis.clone().ok_or_else(|| PromptError::UnknownTopic(record.topic.clone())),
            },
        }
    }

    pub fn render(&self, record: &Record, mode: Mode, prompt: PromptId) -> Result<PromptInstance, PromptError> {
        if prompt == PromptId::CertaintyFollowup {
            return Err(PromptError::NotCertaintyEligible(prompt));
        }
        let template = self.templates.get(mode, prompt)?;
        let thesis = if template.uses_thesis() { self.resolve_thesis(record, mode, prompt)? } else { String::new() };
        Ok(PromptInstance {
            record_id: record.id.clone(),
            prompt_id: prompt,
            messages: vec![ChatMessage::user(template.render(&record.text, &thesis))],
            format: prompt.answer_format(),
        })
    }

    pub fn render_cot(&self, record: &Record, mode: Mode) -> Result<PromptInstance, PromptError> {
        self.render(record, mode, PromptId::P5Cot)
    }

    /// Appends the model's own answer and the certainty question to a
    /// P1–P4 conversation.
    pub fn render_certainty_followup(
        &self,
        prior: &PromptInstance,
        assistant_answer: Option<&str>,
    ) -> Result<PromptInstance, PromptError> {
        if !prior.prompt_id.supports_certainty() {
            return Err(PromptError::NotCertaintyEligible(prior.prompt_id));
        }
        let answer = assistant_answer.ok_or(PromptError::MissingAnswer)?;
        let mut messages = prior.messages.clone();
        messages.push(ChatMessage::assistant(answer));
        messages.push(ChatMessage::user(self.templates.certainty_followup.clone()));
        Ok(PromptInstance {
            record_id: prior.record_id.clone(),
            prompt_id: prior.prompt_id,
            messages,
            format: AnswerFormat::Number,
        })
    }
}
