//! Two-stage inference pipeline: localize relevant pages over the whole
//! document at the low-resolution tier, then answer over the retrieved
//! pages at the high-resolution tier.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{complete, ChatRequest, ContentPart, Endpoint, RetryPolicy, Role};
use crate::corpus::{retrieve, Corpus, Document, PageSet, Tier};
use crate::metrics::{anls, token_f1, ANLS_THRESHOLD};
use crate::reward::reward_localization;
use crate::synthesis::QueryRecord;
use crate::util::last_boxed_span;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("backend error: {0}")]
    Backend(#[from] crate::backend::BackendError),
    #[error("corpus error: {0}")]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("stage 1 predicted no pages and fallback is disabled")]
    EmptyPageSet,
    #[error("run directory {0} already holds a completed run; pass force to overwrite")]
    RunDirOccupied(PathBuf),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

/// One model interaction with everything needed to rescore it later.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub query_id: String,
    pub stage: Stage,
    /// Hash of the request content this trajectory answered.
    pub prompt_fingerprint: String,
    /// Raw model output.
    pub text: String,
    /// Parsed actions: page numbers for stage 1 (listing order, duplicates
    /// kept), the extracted answer for stage 2.
    pub actions: Vec<String>,
    /// Normalized terminal state: page-set literal or final answer.
    pub terminal: String,
    pub token_logprobs: Option<Vec<f64>>,
    pub reward: Option<f64>,
    pub advantage: Option<f64>,
    /// Output did not match the expected grammar; parsing fell back to the
    /// empty set / raw text.
    pub malformed: bool,
}

/// Lenient stage-1 output parser. Tries, in priority order: a bracketed
/// integer list, a bare comma-separated integer list, then "page N"
/// phrases. Returns pages in the order the model listed them (duplicates
/// kept); `None` when no grammar matches.
pub fn parse_page_list(text: &str) -> Option<Vec<u32>> {
    // Bracketed list: last [...] whose interior is integers and separators.
    let bytes = text.as_bytes();
    let mut best: Option<Vec<u32>> = None;
    let mut open = None;
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            b'[' => open = Some(i),
            b']' => {
                if let Some(s) = open.take() {
                    if let Some(list) = parse_int_list(&text[s + 1..i]) {
                        best = Some(list);
                    }
                }
            }
            _ => {}
        }
    }
    if best.is_some() {
        return best;
    }
    // Bare comma list somewhere in the text: take the last line that parses.
    for line in text.lines().rev() {
        let line = line.trim();
        if line.contains(',') {
            if let Some(list) = parse_int_list(line) {
                return Some(list);
            }
        }
    }
    // Single bare integer line.
    for line in text.lines().rev() {
        if let Ok(n) = line.trim().trim_end_matches('.').parse::<u32>() {
            return Some(vec![n]);
        }
    }
    // "page N" phrases, in order of appearance.
    let lower = text.to_lowercase();
    let mut pages = Vec::new();
    let mut rest = lower.as_str();
    while let Some(pos) = rest.find("page") {
        let after = &rest[pos + 4..];
        let after = after.trim_start_matches(|c: char| c.is_whitespace() || c == 's' || c == ':');
        let digits: String = after.chars().take_while(char::is_ascii_digit).collect();
        if !digits.is_empty() {
            if let Ok(n) = digits.parse::<u32>() {
                pages.push(n);
            }
        }
        rest = &rest[pos + 4..];
    }
    if pages.is_empty() {
        None
    } else {
        Some(pages)
    }
}

fn parse_int_list(s: &str) -> Option<Vec<u32>> {
    let mut out = Vec::new();
    for piece in s.split(&[',', ';'][..]) {
        let piece = piece.trim();
        if piece.is_empty() {
            continue;
        }
        out.push(piece.parse::<u32>().ok()?);
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}

/// Final-answer extraction policy for stage-2 outputs.
#[derive(Debug, Clone, Default)]
pub enum ExtractMode {
    /// Take the last boxed{...} span; empty string when absent.
    #[default]
    Rule,
    /// Ask a dedicated extractor model.
    Backend,
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    /// Maximum pages forwarded to stage 2, in stage-1 listing order.
    pub k: usize,
    /// Answer over the full document at the low tier when stage 1 predicts
    /// nothing, instead of failing.
    pub fallback_on_empty: bool,
    /// Prefix each page image with a "Page N:" text label.
    pub overlay_page_numbers: bool,
    pub temperature: f64,
    pub extract: ExtractMode,
    pub retry: RetryPolicy,
    /// Request token log-probs from backends that support them.
    pub want_logits: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            k: 10,
            fallback_on_empty: false,
            overlay_page_numbers: true,
            temperature: 1.0,
            extract: ExtractMode::Rule,
            retry: RetryPolicy::default(),
            want_logits: false,
        }
    }
}

const STAGE1_SYSTEM: &str = "You quickly skim a document at low resolution to find the pages needed to answer a question. Reply with the relevant page numbers as a bracketed list, e.g. [3, 8, 20].";
const STAGE2_SYSTEM: &str = "You answer a question from the given document pages. Reason carefully over the text, figures and tables, then put the final answer in boxed{}.";
const EXTRACTOR_PROMPT: &str = "Extract the final short answer from the following model response. Reply with the answer only.\nResponse:\n{response}";

fn page_parts(doc: &Document, pages: &PageSet, tier: Tier, overlay: bool) -> Result<Vec<ContentPart>, PipelineError> {
    let mut parts = Vec::new();
    for view in retrieve(doc, pages, tier)? {
        if overlay {
            parts.push(ContentPart::Text(format!("Page {}:", view.page_no)));
        }
        parts.push(ContentPart::Image(view.image.clone()));
    }
    Ok(parts)
}

fn fingerprint(req: &ChatRequest) -> String {
    let mut hasher = Sha256::new();
    hasher.update(req.content_hash().as_bytes());
    crate::corpus::hex_digest(hasher)
}

/// Stage 1: skim every page at the low tier and predict the relevant page
/// set. Unparseable outputs yield an empty set with the trajectory marked
/// malformed. Returns (normalized set, listing order, trajectory, latency).
pub fn run_stage1(
    query: &QueryRecord,
    doc: &Document,
    policy: &dyn Endpoint,
    opts: &PipelineOptions,
) -> Result<(PageSet, Vec<u32>, Trajectory, u64), PipelineError> {
    let all = PageSet::from_pages(1..=doc.page_count());
    let mut parts = vec![ContentPart::Text(format!("Question: {}", query.question))];
    parts.extend(page_parts(doc, &all, Tier::Low, opts.overlay_page_numbers)?);
    let req = ChatRequest {
        role: Role::Policy,
        system_prompt: STAGE1_SYSTEM.to_string(),
        parts,
        temperature: opts.temperature,
        max_tokens: 512,
        want_logits: opts.want_logits,
    };
    let resp = complete(policy, &req, &opts.retry)?;
    let listing = parse_page_list(&resp.text);
    let malformed = listing.is_none();
    let listing = listing.unwrap_or_default();
    // Pages outside the document are listing noise, not retrievable.
    let listing: Vec<u32> = listing
        .into_iter()
        .filter(|p| *p >= 1 && *p <= doc.page_count())
        .collect();
    let set = PageSet::from_pages(listing.iter().copied());
    let traj = Trajectory {
        query_id: query.query_id.clone(),
        stage: Stage::Stage1,
        prompt_fingerprint: fingerprint(&req),
        text: resp.text,
        actions: listing.iter().map(u32::to_string).collect(),
        terminal: set.to_string(),
        token_logprobs: resp.token_logprobs,
        reward: None,
        advantage: None,
        malformed,
    };
    Ok((set, listing, traj, resp.latency_ms))
}

/// Extract the final answer from a raw stage-2 response.
pub fn extract_answer(
    raw: &str,
    mode: &ExtractMode,
    extractor: Option<&dyn Endpoint>,
    retry: &RetryPolicy,
) -> Result<String, PipelineError> {
    match mode {
        ExtractMode::Rule => Ok(last_boxed_span(raw).unwrap_or_default()),
        ExtractMode::Backend => {
            let ep = extractor.expect("backend extract mode requires an extractor endpoint");
            let req = ChatRequest::text(
                Role::Extractor,
                "",
                EXTRACTOR_PROMPT.replace("{response}", raw),
            );
            Ok(complete(ep, &req, retry)?.text.trim().to_string())
        }
    }
}

/// Stage 2: answer over the stage-1 pages at the high tier. At most `k`
/// pages are kept, in the order stage 1 listed them (before sorting or
/// deduplication). An empty prediction either fails or, with fallback
/// enabled, answers over the whole document at the low tier.
pub fn run_stage2(
    query: &QueryRecord,
    doc: &Document,
    listing: &[u32],
    policy: &dyn Endpoint,
    extractor: Option<&dyn Endpoint>,
    opts: &PipelineOptions,
) -> Result<(String, String, Trajectory, u64), PipelineError> {
    let mut capped: Vec<u32> = Vec::new();
    for &p in listing {
        if capped.len() == opts.k {
            break;
        }
        if !capped.contains(&p) {
            capped.push(p);
        }
    }
    let (pages, tier) = if capped.is_empty() {
        if !opts.fallback_on_empty {
            return Err(PipelineError::EmptyPageSet);
        }
        (PageSet::from_pages(1..=doc.page_count()), Tier::Low)
    } else {
        (PageSet::from_pages(capped.iter().copied()), Tier::High)
    };
    let mut parts = vec![ContentPart::Text(format!("Question: {}", query.question))];
    parts.extend(page_parts(doc, &pages, tier, opts.overlay_page_numbers)?);
    let req = ChatRequest {
        role: Role::Policy,
        system_prompt: STAGE2_SYSTEM.to_string(),
        parts,
        temperature: opts.temperature,
        max_tokens: 2048,
        want_logits: opts.want_logits,
    };
    let resp = complete(policy, &req, &opts.retry)?;
    let extracted = extract_answer(&resp.text, &opts.extract, extractor, &opts.retry)?;
    let malformed = matches!(opts.extract, ExtractMode::Rule) && last_boxed_span(&resp.text).is_none();
    let traj = Trajectory {
        query_id: query.query_id.clone(),
        stage: Stage::Stage2,
        prompt_fingerprint: fingerprint(&req),
        text: resp.text.clone(),
        actions: vec![extracted.clone()],
        terminal: extracted.clone(),
        token_logprobs: resp.token_logprobs,
        reward: None,
        advantage: None,
        malformed,
    };
    Ok((resp.text, extracted, traj, resp.latency_ms))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageOutcome {
    /// Normalized page-set literal (stage 1) or extracted answer (stage 2).
    pub output: String,
    pub trace_ref: String,
    pub latency_ms: u64,
    pub malformed: bool,
}

/// Per-query result of one pipeline run, sufficient to reproduce and score
/// it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub query_id: String,
    pub doc_id: String,
    pub doc_pages: u32,
    pub stage1: StageOutcome,
    pub stage2: StageOutcome,
    pub raw_answer: String,
    pub scores: BTreeMap<String, f64>,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Copy)]
pub struct PipelineBackends<'a> {
    pub policy: &'a dyn Endpoint,
    pub extractor: Option<&'a dyn Endpoint>,
}

fn normalized_exact(a: &str, b: &str) -> f64 {
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    f64::from(norm(a) == norm(b))
}

/// Run both stages for one query and score the outcome with rule metrics.
pub fn run_query(
    query: &QueryRecord,
    corpus: &Corpus,
    backends: &PipelineBackends,
    opts: &PipelineOptions,
    run_id: &str,
    config_hash: &str,
    seed: u64,
) -> Result<(RunRecord, Trajectory, Trajectory), PipelineError> {
    let doc = corpus.get(&query.doc_id)?;
    let (p_pred, listing, traj1, lat1) = run_stage1(query, doc, backends.policy, opts)?;
    let (raw, extracted, traj2, lat2) =
        run_stage2(query, doc, &listing, backends.policy, backends.extractor, opts)?;

    let mut scores = BTreeMap::new();
    if let Ok(loc) = reward_localization(&p_pred, &query.gt_pages) {
        scores.insert("stage1_acc".to_string(), loc.components["acc"]);
        scores.insert("stage1_rec".to_string(), loc.components["rec"]);
    }
    let variants = [query.answer.clone()];
    scores.insert(
        "anls".to_string(),
        anls(&extracted, &variants, ANLS_THRESHOLD).unwrap_or(0.0),
    );
    scores.insert("token_f1".to_string(), token_f1(&extracted, &query.answer));
    scores.insert("acc".to_string(), normalized_exact(&extracted, &query.answer));

    let record = RunRecord {
        run_id: run_id.to_string(),
        query_id: query.query_id.clone(),
        doc_id: query.doc_id.clone(),
        doc_pages: doc.page_count(),
        stage1: StageOutcome {
            output: traj1.terminal.clone(),
            trace_ref: format!("trajectories/{}-stage1.json", query.query_id),
            latency_ms: lat1,
            malformed: traj1.malformed,
        },
        stage2: StageOutcome {
            output: extracted,
            trace_ref: format!("trajectories/{}-stage2.json", query.query_id),
            latency_ms: lat2,
            malformed: traj2.malformed,
        },
        raw_answer: raw,
        scores,
        seed,
        config_hash: config_hash.to_string(),
    };
    Ok((record, traj1, traj2))
}

/// Batch pipeline run. Queries are processed in parallel on a dedicated
/// pool of `workers` threads; outputs are collected in input order so the
/// result (and anything persisted from it) is identical for any worker
/// count. Failures are isolated per query.
pub fn run_pipeline(
    queries: &[QueryRecord],
    corpus: &Corpus,
    backends: &PipelineBackends,
    opts: &PipelineOptions,
    run_id: &str,
    config_hash: &str,
    seed: u64,
    workers: usize,
) -> Vec<Result<(RunRecord, Trajectory, Trajectory), PipelineError>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("pipeline thread pool");
    pool.install(|| {
        queries
            .par_iter()
            .map(|q| run_query(q, corpus, backends, opts, run_id, config_hash, seed))
            .collect()
    })
}

/// Marker file written once a run directory is complete.
pub const DONE_MARKER: &str = "DONE";

/// Persist a completed run: `records.jsonl`, one trajectory JSON per query
/// and stage, and a DONE marker. Refuses to touch a directory holding a
/// finished run unless `force` is set.
pub fn persist_run(
    dir: &Path,
    results: &[(RunRecord, Trajectory, Trajectory)],
    force: bool,
) -> Result<(), PipelineError> {
    if dir.join(DONE_MARKER).exists() {
        if !force {
            return Err(PipelineError::RunDirOccupied(dir.to_path_buf()));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir.join("trajectories"))?;
    let mut jsonl = fs::File::create(dir.join("records.jsonl"))?;
    for (rec, t1, t2) in results {
        writeln!(jsonl, "{}", serde_json::to_string(rec).expect("RunRecord serializes"))?;
        fs::write(
            dir.join(&rec.stage1.trace_ref),
            serde_json::to_string_pretty(t1).expect("Trajectory serializes"),
        )?;
        fs::write(
            dir.join(&rec.stage2.trace_ref),
            serde_json::to_string_pretty(t2).expect("Trajectory serializes"),
        )?;
    }
    fs::write(dir.join(DONE_MARKER), b"")?;
    Ok(())
}
