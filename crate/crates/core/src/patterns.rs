//! Thinking-trace synthesis for SFT.
//!
//! Stage-1 localization traces come from a chunked rationalization pass
//! (the backend justifies, per chunk, which ground-truth pages sit in it)
//! followed by a consolidation step whose terminal must equal the
//! ground-truth page set. Stage-2 grounding traces are generated per
//! difficulty level: a direct answer (L1), the successful chain-of-thought
//! run (L2), or an iterative generate/critique/refine loop (L3).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{complete, ChatRequest, ContentPart, Endpoint, RetryPolicy, Role};
use crate::corpus::{retrieve, Document, PageSet, Tier};
use crate::orchestrator::{parse_page_list, Stage};
use crate::reward::{judge_answer, JudgeOptions};
use crate::synthesis::{Difficulty, QueryRecord};
use crate::util::last_boxed_span;

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("backend error: {0}")]
    Backend(#[from] crate::backend::BackendError),
    #[error("reward error: {0}")]
    Reward(#[from] crate::reward::RewardError),
    #[error("corpus error: {0}")]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("consolidated terminal {got} does not equal ground truth {expected}")]
    ConsolidationMismatch { expected: String, got: String },
    #[error("refinement loop exhausted after {rounds} rounds")]
    RefinementExhausted { rounds: u32 },
}

/// Contiguous page window of a document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    pub index: usize,
    pub pages: PageSet,
}

/// Default chunk width for stage-1 rationalization.
pub const DEFAULT_CHUNK_SIZE: u32 = 5;

/// Partition `page_count` pages into ceil(page_count / chunk_size) chunks;
/// all but possibly the last have exactly `chunk_size` pages.
pub fn chunk_page_range(doc_id: &str, page_count: u32, chunk_size: u32) -> Vec<Chunk> {
    assert!(chunk_size >= 1, "chunk_size must be >= 1");
    let mut chunks = Vec::new();
    let mut start = 1u32;
    let mut index = 0usize;
    while start <= page_count {
        let end = (start + chunk_size - 1).min(page_count);
        chunks.push(Chunk {
            doc_id: doc_id.to_string(),
            index,
            pages: PageSet::from_pages(start..=end),
        });
        start = end + 1;
        index += 1;
    }
    chunks
}

pub fn chunk_document(doc: &Document, chunk_size: u32) -> Vec<Chunk> {
    chunk_page_range(&doc.doc_id, doc.page_count(), chunk_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentTag {
    Ground,
    Extract,
    Reason,
    Consolidate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceSegment {
    pub tag: SegmentTag,
    pub text: String,
}

/// A synthesized SFT reasoning trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThinkingTrace {
    pub query_id: String,
    pub stage: Stage,
    pub segments: Vec<TraceSegment>,
    /// Page-set literal for stage 1, boxed answer for stage 2.
    pub terminal: String,
    pub difficulty: Option<Difficulty>,
    /// Generation attempts that produced this trace (one entry per
    /// refinement round for L3).
    pub provenance: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatternOptions {
    /// Judge score at or above which an answer counts as correct during
    /// difficulty categorization.
    pub judge_threshold: f64,
    /// Refinement rounds before an L3 trace is discarded.
    pub max_rounds: u32,
    pub retry: RetryPolicy,
    pub judge: JudgeOptions,
}

impl Default for PatternOptions {
    fn default() -> Self {
        Self {
            judge_threshold: 0.7,
            max_rounds: 3,
            retry: RetryPolicy::default(),
            judge: JudgeOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartialRationale {
    pub chunk_index: usize,
    pub relevant: PageSet,
    pub text: String,
}

const RATIONALIZE_PROMPT: &str = "You are shown pages {pages} of a document and a question.\n\
Question: {question}\n\
Within this page window, the relevant pages are exactly: {relevant}.\n\
Explain, from the logical flow and the interplay of textual, visual and structural evidence in these pages, why exactly those pages are the relevant ones. If the relevant set is empty, explain why no page in this window is needed.";

const CONSOLIDATE_PROMPT: &str = "Below are per-window rationales covering an entire document, in order.\n\
{partials}\n\
Question: {question}\n\
Merge them into one coherent reasoning narrative that articulates the cross-window relationships, and finish with a single line of the form 'Relevant pages: [p1, p2, ...]' naming the final set of relevant pages.";

/// Ask the backend to justify the ground-truth membership of one chunk.
/// Chunks holding none of the ground-truth pages get an explicit negative
/// rationale.
pub fn rationalize_chunk(
    chunk: &Chunk,
    query: &QueryRecord,
    doc: &Document,
    backend: &dyn Endpoint,
    opts: &PatternOptions,
) -> Result<PartialRationale, PatternError> {
    let relevant = PageSet::from_pages(query.gt_pages.iter().filter(|p| chunk.pages.contains(*p)));
    let prompt = RATIONALIZE_PROMPT
        .replace("{pages}", &chunk.pages.to_string())
        .replace("{question}", &query.question)
        .replace("{relevant}", &relevant.to_string());
    let mut parts = vec![ContentPart::Text(prompt)];
    for view in retrieve(doc, &chunk.pages, Tier::Low)? {
        parts.push(ContentPart::Image(view.image.clone()));
    }
    let req = ChatRequest {
        role: Role::Generator,
        system_prompt: String::new(),
        parts,
        temperature: 0.0,
        max_tokens: 1024,
        want_logits: false,
    };
    let resp = complete(backend, &req, &opts.retry)?;
    let text = if relevant.is_empty() {
        format!("No relevant pages in {}. {}", chunk.pages, resp.text)
    } else {
        format!("Relevant pages {} in window {}. {}", relevant, chunk.pages, resp.text)
    };
    Ok(PartialRationale {
        chunk_index: chunk.index,
        relevant,
        text,
    })
}

/// Merge per-chunk rationales into a stage-1 trace. The consolidated
/// terminal must equal the query's ground-truth pages exactly; anything else
/// rejects the trace. Single-chunk documents skip the backend call.
pub fn consolidate_trace(
    partials: &[PartialRationale],
    query: &QueryRecord,
    backend: &dyn Endpoint,
    opts: &PatternOptions,
) -> Result<ThinkingTrace, PatternError> {
    let mut segments: Vec<TraceSegment> = partials
        .iter()
        .map(|p| TraceSegment {
            tag: if p.relevant.is_empty() {
                SegmentTag::Reason
            } else {
                SegmentTag::Ground
            },
            text: p.text.clone(),
        })
        .collect();

    let terminal_set = if partials.len() == 1 {
        segments.push(TraceSegment {
            tag: SegmentTag::Consolidate,
            text: partials[0].text.clone(),
        });
        query.gt_pages.clone()
    } else {
        let joined = partials
            .iter()
            .map(|p| p.text.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let prompt = CONSOLIDATE_PROMPT
            .replace("{partials}", &joined)
            .replace("{question}", &query.question);
        let req = ChatRequest::text(Role::Generator, "", prompt);
        let resp = complete(backend, &req, &opts.retry)?;
        let parsed = parse_page_list(&resp.text)
            .map(|order| PageSet::from_pages(order))
            .unwrap_or_default();
        segments.push(TraceSegment {
            tag: SegmentTag::Consolidate,
            text: resp.text,
        });
        parsed
    };

    if terminal_set != query.gt_pages {
        return Err(PatternError::ConsolidationMismatch {
            expected: query.gt_pages.to_string(),
            got: terminal_set.to_string(),
        });
    }
    Ok(ThinkingTrace {
        query_id: query.query_id.clone(),
        stage: Stage::Stage1,
        segments,
        terminal: terminal_set.to_string(),
        difficulty: None,
        provenance: vec!["chunked-rationalization".to_string()],
    })
}

/// Full stage-1 synthesis for one query: chunk, rationalize, consolidate.
pub fn synthesize_stage1_trace(
    query: &QueryRecord,
    doc: &Document,
    backend: &dyn Endpoint,
    opts: &PatternOptions,
    chunk_size: u32,
) -> Result<ThinkingTrace, PatternError> {
    let chunks = chunk_document(doc, chunk_size);
    let mut partials = Vec::with_capacity(chunks.len());
    for chunk in &chunks {
        partials.push(rationalize_chunk(chunk, query, doc, backend, opts)?);
    }
    consolidate_trace(&partials, query, backend, opts)
}

const DIRECT_PROMPT: &str = "Answer the question from the given pages. Put the final answer in boxed{}.\nQuestion: {question}";
const COT_PROMPT: &str = "Answer the question from the given pages. Think step by step: decide where to look, extract the evidence, then reason to the answer. Put the final answer in boxed{}.\nQuestion: {question}";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DifficultyOutcome {
    pub level: Difficulty,
    pub direct_response: String,
    pub cot_response: Option<String>,
}

fn ask_policy(
    query: &QueryRecord,
    doc: &Document,
    backend: &dyn Endpoint,
    prompt: &str,
    opts: &PatternOptions,
) -> Result<String, PatternError> {
    let mut parts = vec![ContentPart::Text(prompt.replace("{question}", &query.question))];
    for view in retrieve(doc, &query.gt_pages, Tier::High)? {
        parts.push(ContentPart::Image(view.image.clone()));
    }
    let req = ChatRequest {
        role: Role::Policy,
        system_prompt: String::new(),
        parts,
        temperature: 0.0,
        max_tokens: 2048,
        want_logits: false,
    };
    Ok(complete(backend, &req, &opts.retry)?.text)
}

fn answer_correct(
    query: &QueryRecord,
    response: &str,
    judge: &dyn Endpoint,
    opts: &PatternOptions,
) -> Result<bool, PatternError> {
    let predicted = last_boxed_span(response).unwrap_or_else(|| response.to_string());
    let outcome = judge_answer(&query.question, &predicted, &query.answer, judge, &opts.judge)?;
    Ok(outcome.value >= opts.judge_threshold)
}

/// Progressive-prompting difficulty categorization: correct under a direct
/// prompt is L1, correct only under a chain-of-thought prompt is L2,
/// anything else is L3.
pub fn categorize_difficulty(
    query: &QueryRecord,
    doc: &Document,
    policy: &dyn Endpoint,
    judge: &dyn Endpoint,
    opts: &PatternOptions,
) -> Result<DifficultyOutcome, PatternError> {
    let direct = ask_policy(query, doc, policy, DIRECT_PROMPT, opts)?;
    if answer_correct(query, &direct, judge, opts)? {
        return Ok(DifficultyOutcome {
            level: Difficulty::L1,
            direct_response: direct,
            cot_response: None,
        });
    }
    let cot = ask_policy(query, doc, policy, COT_PROMPT, opts)?;
    let level = if answer_correct(query, &cot, judge, opts)? {
        Difficulty::L2
    } else {
        Difficulty::L3
    };
    Ok(DifficultyOutcome {
        level,
        direct_response: direct,
        cot_response: Some(cot),
    })
}

/// Keyword-based tagging of a chain-of-thought paragraph.
fn tag_segment(text: &str) -> SegmentTag {
    let lower = text.to_lowercase();
    if lower.contains("look") || lower.contains("locate") || lower.contains("page") {
        SegmentTag::Ground
    } else if lower.contains("extract") || lower.contains("value") || lower.contains("read") {
        SegmentTag::Extract
    } else {
        SegmentTag::Reason
    }
}

fn segments_from_text(text: &str) -> Vec<TraceSegment> {
    let mut segments: Vec<TraceSegment> = text
        .split("\n\n")
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| TraceSegment {
            tag: tag_segment(p),
            text: p.to_string(),
        })
        .collect();
    if segments.is_empty() {
        segments.push(TraceSegment {
            tag: SegmentTag::Reason,
            text: text.to_string(),
        });
    }
    segments
}

const CRITIQUE_PROMPT: &str = "Critique the following reasoning trace for the question. Identify logical flaws or missing grounding steps. If the trace is sound and its boxed answer is correct, reply with the single word ACCEPT. Otherwise reply REJECT followed by your critique.\nQuestion: {question}\nGround truth answer: {answer}\nTrace:\n{trace}";
const REFINE_PROMPT: &str = "Your previous reasoning trace was critiqued. Produce an improved trace that fixes the issues, with explicit grounding and extraction steps, ending in the final answer in boxed{}.\nQuestion: {question}\nPrevious trace:\n{trace}\nCritique:\n{critique}";

/// Build the stage-2 SFT trace for a categorized query. L1 reuses the
/// direct response, L2 the successful chain-of-thought run, and L3 runs the
/// generate/critique/refine loop until the verifier accepts and the judge
/// confirms the boxed answer, or the round budget runs out.
pub fn synthesize_stage2_trace(
    query: &QueryRecord,
    doc: &Document,
    outcome: &DifficultyOutcome,
    backend: &dyn Endpoint,
    verifier: &dyn Endpoint,
    judge: &dyn Endpoint,
    opts: &PatternOptions,
) -> Result<ThinkingTrace, PatternError> {
    let make_terminal = |text: &str| {
        let answer = last_boxed_span(text).unwrap_or_else(|| query.answer.clone());
        format!("boxed{{{answer}}}")
    };
    match outcome.level {
        Difficulty::L1 => Ok(ThinkingTrace {
            query_id: query.query_id.clone(),
            stage: Stage::Stage2,
            segments: vec![TraceSegment {
                tag: SegmentTag::Extract,
                text: outcome.direct_response.clone(),
            }],
            terminal: make_terminal(&outcome.direct_response),
            difficulty: Some(Difficulty::L1),
            provenance: vec!["direct".to_string()],
        }),
        Difficulty::L2 => {
            let cot = outcome
                .cot_response
                .clone()
                .unwrap_or_else(|| outcome.direct_response.clone());
            Ok(ThinkingTrace {
                query_id: query.query_id.clone(),
                stage: Stage::Stage2,
                segments: segments_from_text(&cot),
                terminal: make_terminal(&cot),
                difficulty: Some(Difficulty::L2),
                provenance: vec!["cot".to_string()],
            })
        }
        Difficulty::L3 => {
            let mut trace_text = ask_policy(query, doc, backend, COT_PROMPT, opts)?;
            let mut provenance = vec![trace_text.clone()];
            for round in 0..opts.max_rounds {
                let critique_req = ChatRequest::text(
                    Role::Verifier,
                    "",
                    CRITIQUE_PROMPT
                        .replace("{question}", &query.question)
                        .replace("{answer}", &query.answer)
                        .replace("{trace}", &trace_text),
                );
                let verdict = complete(verifier, &critique_req, &opts.retry)?.text;
                let accepted = verdict.trim_start().to_lowercase().starts_with("accept");
                if accepted && answer_correct(query, &trace_text, judge, opts)? {
                    return Ok(ThinkingTrace {
                        query_id: query.query_id.clone(),
                        stage: Stage::Stage2,
                        segments: segments_from_text(&trace_text),
                        terminal: make_terminal(&trace_text),
                        difficulty: Some(Difficulty::L3),
                        provenance,
                    });
                }
                if round + 1 == opts.max_rounds {
                    break;
                }
                let critique = verdict;
                let refine_req = ChatRequest::text(
                    Role::Policy,
                    "",
                    REFINE_PROMPT
                        .replace("{question}", &query.question)
                        .replace("{trace}", &trace_text)
                        .replace("{critique}", &critique),
                );
                trace_text = complete(backend, &refine_req, &opts.retry)?.text;
                provenance.push(trace_text.clone());
            }
            Err(PatternError::RefinementExhausted {
                rounds: opts.max_rounds,
            })
        }
    }
}

/// Serialize traces as JSONL with stable field order.
pub fn traces_to_jsonl(traces: &[ThinkingTrace]) -> String {
    let mut out = String::new();
    for t in traces {
        out.push_str(&serde_json::to_string(t).expect("ThinkingTrace serializes"));
        out.push('\n');
    }
    out
}
