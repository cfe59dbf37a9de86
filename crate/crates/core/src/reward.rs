//! Hybrid terminal reward: a rule-based localization reward for fast-reading
//! trajectories and an LLM-judge score for focused-thinking answers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{complete, ChatRequest, Endpoint, RetryPolicy, Role};
use crate::corpus::PageSet;
use crate::util::{fill_template, last_boxed_span};

/// Judge prompt shipped with the crate; can be overridden by a template file
/// in the config.
pub const JUDGE_TEMPLATE: &str = include_str!("../templates/judge.txt");

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("ground-truth page set must be non-empty")]
    EmptyGroundTruth,
    #[error("judge backend error: {0}")]
    Backend(#[from] crate::backend::BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Localization,
    Judged,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardOutcome {
    pub value: f64,
    pub kind: RewardKind,
    pub components: BTreeMap<String, f64>,
    /// Raw judge text for judged rewards, kept for audit.
    pub audit: Option<String>,
    /// Set when the judge score could not be parsed and the fallback value
    /// was used instead.
    pub fallback_used: bool,
}

/// Rule-based localization reward: the mean of binary exact-match accuracy
/// and binary ground-truth coverage, so values are in {0, 0.5, 1}.
pub fn reward_localization(p_pred: &PageSet, p_gt: &PageSet) -> Result<RewardOutcome, RewardError> {
    if p_gt.is_empty() {
        return Err(RewardError::EmptyGroundTruth);
    }
    let acc = f64::from(p_pred == p_gt);
    let rec = f64::from(p_gt.is_subset(p_pred));
    let mut components = BTreeMap::new();
    components.insert("acc".to_string(), acc);
    components.insert("rec".to_string(), rec);
    Ok(RewardOutcome {
        value: (acc + rec) / 2.0,
        kind: RewardKind::Localization,
        components,
        audit: None,
        fallback_used: false,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeOptions {
    /// Re-ask the judge this many times when its reply carries no boxed
    /// numeric score.
    pub retry_unparseable: u32,
    /// Score recorded when every attempt is unparseable.
    pub fallback_value: f64,
    pub retry: RetryPolicy,
    /// Override for the built-in judge template.
    pub template: Option<String>,
}

impl Default for JudgeOptions {
    fn default() -> Self {
        Self {
            retry_unparseable: 1,
            fallback_value: 0.0,
            retry: RetryPolicy::default(),
            template: None,
        }
    }
}

pub fn assemble_judge_prompt(question: &str, a_gt: &str, a_pred: &str, template: &str) -> String {
    fill_template(
        template,
        &[
            ("question", question),
            ("ground truth", a_gt),
            ("prediction", a_pred),
        ],
    )
}

fn parse_judge_score(text: &str) -> Option<f64> {
    last_boxed_span(text).and_then(|span| span.trim().parse::<f64>().ok())
}

/// Whether the judge's analysis says it applied the no-boxed-notation
/// deduction. The parser trusts the judge's final number either way; this is
/// recorded for analysis only.
fn penalty_mentioned(text: &str) -> bool {
    let lower = text.to_lowercase();
    lower.contains("0.3") && (lower.contains("reduce") || lower.contains("penal") || lower.contains("deduct"))
}

/// Score a predicted answer against the ground truth with the LLM judge.
/// The judge's final boxed number is clamped to [0, 1]; unparseable replies
/// fall back to `fallback_value` with the raw text kept for audit.
pub fn judge_answer(
    question: &str,
    a_pred: &str,
    a_gt: &str,
    judge: &dyn Endpoint,
    opts: &JudgeOptions,
) -> Result<RewardOutcome, RewardError> {
    let template = opts.template.as_deref().unwrap_or(JUDGE_TEMPLATE);
    let prompt = assemble_judge_prompt(question, a_gt, a_pred, template);
    let mut attempt = 0;
    let mut last_text;
    loop {
        let req = ChatRequest::text(Role::Judge, "", prompt.clone());
        let resp = complete(judge, &req, &opts.retry)?;
        last_text = resp.text.clone();
        if let Some(raw) = parse_judge_score(&resp.text) {
            let value = raw.clamp(0.0, 1.0);
            let mut components = BTreeMap::new();
            components.insert("raw_judge".to_string(), raw);
            components.insert("penalty_applied".to_string(), f64::from(penalty_mentioned(&resp.text)));
            return Ok(RewardOutcome {
                value,
                kind: RewardKind::Judged,
                components,
                audit: Some(resp.text),
                fallback_used: false,
            });
        }
        if attempt >= opts.retry_unparseable {
            break;
        }
        attempt += 1;
    }
    let mut components = BTreeMap::new();
    components.insert("raw_judge".to_string(), f64::NAN);
    components.insert("penalty_applied".to_string(), 0.0);
    Ok(RewardOutcome {
        value: opts.fallback_value.clamp(0.0, 1.0),
        kind: RewardKind::Judged,
        components,
        audit: Some(last_text),
        fallback_used: true,
    })
}

/// Hybrid reward dispatch for a pipeline trajectory: localization rewards
/// for stage-1 page predictions, judge rewards for stage-2 answers.
pub fn reward_trajectory(
    traj: &crate::orchestrator::Trajectory,
    query: &crate::synthesis::QueryRecord,
    judge: &dyn Endpoint,
    opts: &JudgeOptions,
) -> Result<RewardOutcome, RewardError> {
    match traj.stage {
        crate::orchestrator::Stage::Stage1 => {
            let p_pred = crate::orchestrator::parse_page_list(&traj.text)
                .map(PageSet::from_pages)
                .unwrap_or_default();
            reward_localization(&p_pred, &query.gt_pages)
        }
        crate::orchestrator::Stage::Stage2 => {
            let predicted = last_boxed_span(&traj.text).unwrap_or_else(|| traj.text.clone());
            judge_answer(&query.question, &predicted, &query.answer, judge, opts)
        }
    }
}
