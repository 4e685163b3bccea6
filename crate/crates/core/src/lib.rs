//! Stance classification of argumentative text with chat-completion models.
//!
//! The pipeline runs every record through a set of rephrased prompts, asks the
//! model to rate its own certainty, and combines the per-prompt answers with
//! one of three voting rules. Evaluation covers accuracy, macro F1,
//! inter-run agreement (Fleiss' kappa), an error taxonomy and leave-one-out
//! prompt ablation.
//!
//! Modules follow the data flow:
//!
//! * [`corpus`]: ingest, crop and stratified sampling of datasets
//! * [`promptgen`]: prompt templates and thesis injection
//! * [`backend`]: chat endpoint client, mocks, and the resumable run ledger
//! * [`parsing`]: extraction of labels and certainties from raw replies
//! * [`ensemble`]: simple, certainty-tiebreak and certainty-weighted voting
//! * [`metrics`]: scores, aggregation, agreement, error taxonomy, ablation
//! * [`runner`]: experiment configuration and the end-to-end commands

pub mod backend;
pub mod corpus;
pub mod ensemble;
pub mod metrics;
pub mod parsing;
pub mod promptgen;
pub mod runner;
pub mod seed;

pub use corpus::{Label, Mode, Record};
pub use ensemble::{Algorithm, Ballot, Vote, VoteOutcome};
pub use parsing::{AnswerFormat, Prediction};
pub use promptgen::{ChatMessage, PromptId, PromptInstance, Role};
