//! Two-stage document reasoning engine.
//!
//! A document is first skimmed at low resolution to localize the relevant
//! pages ("fast reading"), then the localized pages are re-read at high
//! resolution to produce a boxed answer ("focused thinking"). Around that
//! pipeline this crate provides query synthesis from layout anchors,
//! SFT thinking-trace synthesis, a hybrid rule/judge reward, GRPO kernels
//! with a desk-scale toy trainer, and the evaluation metrics (ANLS, token
//! F1, self-certainty, perplexity).
//!
//! Everything runs against either a chat-completion HTTP endpoint or a
//! deterministic offline mock backend.

pub mod backend;
pub mod config;
pub mod corpus;
pub mod grpo;
pub mod metrics;
pub mod orchestrator;
pub mod patterns;
pub mod reward;
pub mod synthesis;
pub mod util;

pub use config::Config;
pub use corpus::{Anchor, AnchorKind, Corpus, Document, Page, PageSet};
pub use orchestrator::{RunRecord, Trajectory};
pub use synthesis::QueryRecord;
