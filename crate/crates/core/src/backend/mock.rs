//! Deterministic stand-ins for a model endpoint.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, ChatBackend, ChatError, ChatRequest, Turn};
use crate::corpus::Label;
use crate::parsing::{parse_answer, AnswerFormat};
use crate::promptgen::{ChatMessage, PromptId};

/// Hex SHA-256 of the JSON encoding of a message list.
pub fn message_digest(messages: &[ChatMessage]) -> String {
    let encoded = serde_json::to_vec(messages).expect("messages serialize");
    Sha256::digest(&encoded).iter().map(|b| format!("{b:02x}")).collect()
}

/// A scripted reply: literal text, or a simulated failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptEntry {
    Text(String),
    Failure { error: ScriptedFailure },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedFailure {
    Transient,
    RateLimited,
    Auth,
    Malformed,
    Fatal,
}

/// Fixture file layout for [`ScriptedBackend`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    /// Keyed by [`message_digest`] of the request messages.
    #[serde(default)]
    pub by_digest: BTreeMap<String, ScriptEntry>,
    /// Keyed by `dataset/record/prompt/turn` or `record/prompt/turn`.
    #[serde(default)]
    pub by_key: BTreeMap<String, ScriptEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<ScriptEntry>,
}

/// Replies from a fixed lookup table.
///
/// Lookup order: message digest, `dataset/record/prompt/turn`,
/// `record/prompt/turn`, then the default entry. No entry is a fatal error.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    by_digest: HashMap<String, ScriptEntry>,
    by_key: HashMap<String, ScriptEntry>,
    default: Option<ScriptEntry>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        ScriptedBackend {
            by_digest: script.by_digest.into_iter().collect(),
            by_key: script.by_key.into_iter().collect(),
            default: script.default,
        }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Io { path: path.to_path_buf(), message: e.to_string() })?;
        let script: Script = serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("script {}: {e}", path.display())))?;
        Ok(Self::new(script))
    }

    fn lookup(&self, request: &ChatRequest<'_>) -> Option<&ScriptEntry> {
        let k = request.key;
        self.by_digest
            .get(&message_digest(request.messages))
            .or_else(|| self.by_key.get(&format!("{}/{}/{}/{}", k.dataset, k.record_id, k.prompt_id, k.turn)))
            .or_else(|| self.by_key.get(&format!("{}/{}/{}", k.record_id, k.prompt_id, k.turn)))
            .or(self.default.as_ref())
    }
}

impl ChatBackend for ScriptedBackend {
    fn send(&self, request: &ChatRequest<'_>) -> Result<String, ChatError> {
        match self.lookup(request) {
            Some(ScriptEntry::Text(text)) => Ok(text.clone()),
            Some(ScriptEntry::Failure { error }) => {
                let msg = format!("scripted failure for {}", request.key);
                Err(match error {
                    ScriptedFailure::Transient => ChatError::Transient(msg),
                    ScriptedFailure::RateLimited => ChatError::RateLimited(msg),
                    ScriptedFailure::Auth => ChatError::Auth(msg),
                    ScriptedFailure::Malformed => ChatError::Malformed(msg),
                    ScriptedFailure::Fatal => ChatError::Fatal(msg),
                })
            }
            None => Err(ChatError::Fatal(format!("no scripted reply for {}", request.key))),
        }
    }
}

/// Integer percentage ranges the stochastic mock draws certainties from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertaintyModel {
    pub correct: (u32, u32),
    pub incorrect: (u32, u32),
}

impl Default for CertaintyModel {
    fn default() -> Self {
        CertaintyModel { correct: (60, 100), incorrect: (40, 90) }
    }
}

fn default_accuracy() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticSettings {
    /// Probability of answering with the gold label.
    #[serde(default = "default_accuracy")]
    pub accuracy: f64,
    /// Overrides `accuracy` for records of a given gold label.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_class: BTreeMap<Label, f64>,
    /// Overrides both of the above for a given prompt.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_prompt: BTreeMap<PromptId, f64>,
    #[serde(default)]
    pub certainty: CertaintyModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for StochasticSettings {
    fn default() -> Self {
        StochasticSettings {
            accuracy: default_accuracy(),
            per_class: BTreeMap::new(),
            per_prompt: BTreeMap::new(),
            certainty: CertaintyModel::default(),
            seed: None,
        }
    }
}

impl StochasticSettings {
    pub(crate) fn validate(&self) -> Result<(), String> {
        let probabilities = std::iter::once(self.accuracy)
            .chain(self.per_class.values().copied())
            .chain(self.per_prompt.values().copied());
        for p in probabilities {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("accuracy {p} outside [0, 1]"));
            }
        }
        for (lo, hi) in [self.certainty.correct, self.certainty.incorrect] {
            if lo > hi || hi > 100 {
                return Err(format!("certainty range ({lo}, {hi}) must satisfy lo <= hi <= 100"));
            }
        }
        Ok(())
    }

    fn accuracy_for(&self, prompt: PromptId, gold: Label) -> f64 {
        self.per_prompt
            .get(&prompt)
            .or_else(|| self.per_class.get(&gold))
            .copied()
            .unwrap_or(self.accuracy)
    }
}

/// Answers correctly with a configured probability, otherwise picks a wrong
/// label uniformly. Every reply is a pure function of (seed, exchange key),
/// so worker scheduling cannot change outputs.
#[derive(Debug, Clone)]
pub struct StochasticBackend {
    settings: StochasticSettings,
    seed: u64,
}

impl StochasticBackend {
    pub fn new(settings: StochasticSettings, seed: u64) -> Self {
        StochasticBackend { settings, seed }
    }

    fn surface(label: Label, format: AnswerFormat) -> String {
        match (format, label) {
            (AnswerFormat::Letters, l) => l.letter().to_string(),
            (AnswerFormat::CotFinalLine, Label::NoArgument) => "Considering the text step by step.\nFINAL: No Argument".into(),
            (AnswerFormat::CotFinalLine, l) => format!("Considering the text step by step.\nFINAL: {l}"),
            (_, Label::NoArgument) => "No argument".into(),
            (_, l) => l.to_string(),
        }
    }
}

impl ChatBackend for StochasticBackend {
    fn send(&self, request: &ChatRequest<'_>) -> Result<String, ChatError> {
        let gold = request.gold.ok_or_else(|| ChatError::Fatal("stochastic mock needs the gold label".into()))?;
        let mut rng = crate::seed::rng_for(self.seed, &["mock", &request.key.to_string()]);
        let answer_format = request.key.prompt_id.answer_format();
        match request.key.turn {
            Turn::Answer => {
                let p = self.settings.accuracy_for(request.key.prompt_id, gold);
                let label = if rng.random_bool(p) {
                    gold
                } else {
                    let wrong: Vec<Label> = request.mode.labels().iter().copied().filter(|&l| l != gold).collect();
                    *wrong.choose(&mut rng).expect("at least two labels per mode")
                };
                Ok(Self::surface(label, answer_format))
            }
            Turn::Certainty => {
                let prior = request
                    .messages
                    .iter()
                    .rev()
                    .find(|m| m.role == crate::promptgen::Role::Assistant)
                    .map(|m| m.content.as_str())
                    .unwrap_or("");
                let correct = parse_answer(prior, answer_format, request.mode).label == Some(gold);
                let (lo, hi) = if correct { self.settings.certainty.correct } else { self.settings.certainty.incorrect };
                Ok(rng.random_range(lo..=hi).to_string())
            }
        }
    }
}
