//! Anchor-based query synthesis: for every layout anchor, assemble a
//! kind-specific generator input, ask the generator backend for a candidate
//! question/answer pair, filter for answerability, and emit query records.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{complete, ChatRequest, ContentPart, Endpoint, RetryPolicy, Role};
use crate::corpus::{
    crop_anchor, retrieve_related_text, Anchor, AnchorKind, Corpus, Document, PageSet, Tier,
};
use crate::util::fill_template;

pub const GENERATOR_TEMPLATE: &str = include_str!("../templates/generator.txt");
pub const FILTERER_TEMPLATE: &str = include_str!("../templates/filterer.txt");

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("backend error: {0}")]
    Backend(#[from] crate::backend::BackendError),
    #[error("corpus error: {0}")]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("unparseable generation: {reason} (raw: {raw:?})")]
    UnparseableGeneration { reason: String, raw: String },
    #[error("unparseable filter verdict (raw: {raw:?})")]
    UnparseableVerdict { raw: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningType {
    Extractive,
    Deductive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Difficulty {
    L1,
    L2,
    L3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthesized,
    External,
}

/// A synthesized (or externally adapted) question with its ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub doc_id: String,
    pub question: String,
    pub answer: String,
    pub gt_pages: PageSet,
    pub anchor_id: String,
    pub reasoning_type: ReasoningType,
    pub difficulty: Option<Difficulty>,
    pub provenance: Provenance,
}

/// One content part of an assembled generator input.
#[derive(Debug, Clone)]
pub enum GeneratorPart {
    Subtitle(String),
    RelatedText(String),
    KeyPoints(String),
    TableParse(String),
    AnchorCrop(crate::corpus::ImageHandle),
    FullPage(crate::corpus::ImageHandle),
}

#[derive(Debug, Clone)]
pub struct GeneratorInput {
    pub anchor_kind: AnchorKind,
    pub parts: Vec<GeneratorPart>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Solvable,
    Unsolvable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub status: VerdictStatus,
    pub corrected_answer: Option<String>,
    pub explanation: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub retry: RetryPolicy,
    /// Sentences of related text used as rule-based key points.
    pub keypoint_sentences: usize,
    pub generator_template: Option<String>,
    pub filterer_template: Option<String>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            keypoint_sentences: 3,
            generator_template: None,
            filterer_template: None,
        }
    }
}

/// Kind-specific generator input assembly: pure-text anchors ship the full
/// page image plus its OCR text; figures and charts ship the crop plus the
/// text that references them; tables additionally ship the OCR table parse.
pub fn assemble_generator_input(
    doc: &Document,
    anchor: &Anchor,
) -> Result<GeneratorInput, SynthesisError> {
    let related: Vec<(u32, String)> = anchor
        .name
        .as_deref()
        .map(|name| retrieve_related_text(doc, name))
        .unwrap_or_default();
    let related_text = if related.is_empty() {
        anchor.caption.clone()
    } else {
        related
            .iter()
            .map(|(_, t)| t.clone())
            .collect::<Vec<_>>()
            .join("\n\n")
    };

    let mut parts = vec![GeneratorPart::Subtitle(anchor.caption.clone())];
    match anchor.kind {
        AnchorKind::PureText => {
            let page = doc.page(anchor.page_no)?;
            parts.push(GeneratorPart::FullPage(page.image_high.clone()));
            let block_text = if page.ocr_text.is_empty() {
                anchor.caption.clone()
            } else {
                page.ocr_text.clone()
            };
            parts.push(GeneratorPart::RelatedText(block_text));
        }
        AnchorKind::Figure | AnchorKind::Chart => {
            parts.push(GeneratorPart::AnchorCrop(crop_anchor(doc, anchor)?));
            parts.push(GeneratorPart::RelatedText(related_text.clone()));
        }
        AnchorKind::Table => {
            parts.push(GeneratorPart::AnchorCrop(crop_anchor(doc, anchor)?));
            parts.push(GeneratorPart::RelatedText(related_text.clone()));
            if let Some(parse) = &anchor.ocr_parse {
                parts.push(GeneratorPart::TableParse(parse.clone()));
            }
        }
    }
    parts.push(GeneratorPart::KeyPoints(rule_keypoints(&related_text, 3)));
    Ok(GeneratorInput {
        anchor_kind: anchor.kind,
        parts,
    })
}

/// Rule-based key points: the first few sentences of the related text.
pub fn rule_keypoints(related_text: &str, max_sentences: usize) -> String {
    let mut sentences = Vec::new();
    let mut current = String::new();
    for ch in related_text.chars() {
        current.push(ch);
        if matches!(ch, '.' | '?' | '!') {
            let s = current.trim().to_string();
            if !s.is_empty() {
                sentences.push(format!("- {s}"));
            }
            current.clear();
            if sentences.len() >= max_sentences {
                break;
            }
        }
    }
    if sentences.len() < max_sentences {
        let s = current.trim().to_string();
        if !s.is_empty() {
            sentences.push(format!("- {s}"));
        }
    }
    sentences.join("\n")
}

const INTERROGATIVES: [&str; 6] = ["what", "how", "why", "which", "when", "where"];

/// Heuristic one-question rule: the question must end in a single "?" and
/// carry at most one interrogative keyword.
pub fn is_single_question(question: &str) -> bool {
    let lower = question.to_lowercase();
    if lower.matches('?').count() != 1 || !lower.trim_end().ends_with('?') {
        return false;
    }
    let count: usize = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| INTERROGATIVES.contains(t))
        .count();
    count <= 1
}

fn chat_parts(input: &GeneratorInput, template: &str) -> Vec<ContentPart> {
    let mut subtitle = String::new();
    let mut related = String::new();
    let mut keypoints = String::new();
    let mut images = Vec::new();
    let mut table_parse = None;
    for part in &input.parts {
        match part {
            GeneratorPart::Subtitle(s) => subtitle = s.clone(),
            GeneratorPart::RelatedText(t) => related = t.clone(),
            GeneratorPart::KeyPoints(k) => keypoints = k.clone(),
            GeneratorPart::TableParse(p) => table_parse = Some(p.clone()),
            GeneratorPart::AnchorCrop(img) | GeneratorPart::FullPage(img) => {
                images.push(img.clone())
            }
        }
    }
    let mut text = fill_template(
        template,
        &[
            ("subtitle", subtitle.as_str()),
            ("related text", related.as_str()),
            ("key points", keypoints.as_str()),
        ],
    );
    if let Some(parse) = table_parse {
        text.push_str("\n\nOCR parsing result of the table:\n");
        text.push_str(&parse);
    }
    let mut parts = vec![ContentPart::Text(text)];
    parts.extend(images.into_iter().map(ContentPart::Image));
    parts
}

/// Call the generator backend with the assembled input and parse the
/// candidate (question, answer) pair from its reply.
pub fn generate_candidate(
    input: &GeneratorInput,
    generator: &dyn Endpoint,
    config: &SynthesisConfig,
) -> Result<(String, String), SynthesisError> {
    let template = config
        .generator_template
        .as_deref()
        .unwrap_or(GENERATOR_TEMPLATE);
    let req = ChatRequest {
        role: Role::Generator,
        system_prompt: String::new(),
        parts: chat_parts(input, template),
        temperature: 0.0,
        max_tokens: 1024,
        want_logits: false,
    };
    let resp = complete(generator, &req, &config.retry)?;
    let mut question = None;
    let mut answer = None;
    for line in resp.text.lines() {
        if let Some(q) = line.strip_prefix("Question:") {
            question = Some(q.trim().to_string());
        } else if let Some(a) = line.strip_prefix("Answer:") {
            answer = Some(a.trim().to_string());
        }
    }
    let (question, answer) = match (question, answer) {
        (Some(q), Some(a)) if !q.is_empty() && !a.is_empty() => (q, a),
        _ => {
            return Err(SynthesisError::UnparseableGeneration {
                reason: "missing Question:/Answer: lines".into(),
                raw: resp.text,
            })
        }
    };
    if !is_single_question(&question) {
        return Err(SynthesisError::UnparseableGeneration {
            reason: "violates the one-question rule".into(),
            raw: resp.text,
        });
    }
    Ok((question, answer))
}

/// Ask the filterer backend whether the candidate is answerable from the
/// given pages, parsing its JSON verdict.
pub fn filter_candidate(
    question: &str,
    answer: &str,
    pages: &[crate::corpus::PageView<'_>],
    filterer: &dyn Endpoint,
    config: &SynthesisConfig,
) -> Result<FilterVerdict, SynthesisError> {
    let template = config
        .filterer_template
        .as_deref()
        .unwrap_or(FILTERER_TEMPLATE);
    let text = fill_template(
        template,
        &[("question", question), ("reference answer", answer)],
    );
    let mut parts = vec![ContentPart::Text(text)];
    parts.extend(
        pages
            .iter()
            .map(|view| ContentPart::Image(view.image.clone())),
    );
    let req = ChatRequest {
        role: Role::Filterer,
        system_prompt: String::new(),
        parts,
        temperature: 0.0,
        max_tokens: 1024,
        want_logits: false,
    };
    let resp = complete(filterer, &req, &config.retry)?;
    parse_verdict(&resp.text).ok_or(SynthesisError::UnparseableVerdict { raw: resp.text })
}

fn parse_verdict(text: &str) -> Option<FilterVerdict> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    let value: serde_json::Value = serde_json::from_str(&text[start..=end]).ok()?;
    let status = match value["status"].as_str()? {
        "solvable" => VerdictStatus::Solvable,
        "unsolvable" => VerdictStatus::Unsolvable,
        _ => return None,
    };
    let corrected_answer = value["corrected_answer"]
        .as_str()
        .map(str::to_string)
        .filter(|s| !s.is_empty());
    if status == VerdictStatus::Unsolvable && corrected_answer.is_some() {
        return None;
    }
    Some(FilterVerdict {
        status,
        corrected_answer,
        explanation: value["explanation"].as_str().unwrap_or("").to_string(),
    })
}

/// Deductive when the answer carries a number that appears nowhere in the
/// source text (an arithmetic result rather than an extraction); otherwise
/// extractive.
pub fn classify_reasoning(answer: &str, source_text: &str) -> ReasoningType {
    let numbers: Vec<String> = answer
        .split(|c: char| !(c.is_ascii_digit() || c == '.' || c == ','))
        .map(|t| t.trim_matches(|c| c == '.' || c == ',').to_string())
        .filter(|t| !t.is_empty() && t.chars().any(|c| c.is_ascii_digit()))
        .collect();
    for num in numbers {
        if !source_text.contains(&num) {
            return ReasoningType::Deductive;
        }
    }
    ReasoningType::Extractive
}

/// Per-anchor failure detail from a synthesis sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorFailure {
    pub doc_id: String,
    pub anchor_id: String,
    pub reason: String,
}

/// Counters partitioning the sweep's output.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SynthesisStats {
    pub anchors_seen: usize,
    pub emitted: usize,
    pub rejected_unsolvable: usize,
    pub failed: usize,
    pub by_kind: BTreeMap<String, usize>,
    pub by_reasoning: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisOutput {
    pub records: Vec<QueryRecord>,
    pub stats: SynthesisStats,
    pub failures: Vec<AnchorFailure>,
}

pub struct SynthesisBackends<'a> {
    pub generator: &'a dyn Endpoint,
    pub filterer: &'a dyn Endpoint,
}

fn synthesize_anchor(
    doc: &Document,
    anchor: &Anchor,
    backends: &SynthesisBackends<'_>,
    config: &SynthesisConfig,
) -> Result<Option<QueryRecord>, SynthesisError> {
    let input = assemble_generator_input(doc, anchor)?;
    let (question, answer) = generate_candidate(&input, backends.generator, config)?;

    // ground truth: the anchor's own page plus every page whose text cites it
    let mut gt_pages = PageSet::from_pages([anchor.page_no]);
    let related = anchor
        .name
        .as_deref()
        .map(|name| retrieve_related_text(doc, name))
        .unwrap_or_default();
    for (page_no, _) in &related {
        gt_pages.insert(*page_no);
    }

    let views = crate::corpus::retrieve(doc, &gt_pages, Tier::High)?;
    let verdict = filter_candidate(&question, &answer, &views, backends.filterer, config)?;
    if verdict.status == VerdictStatus::Unsolvable {
        return Ok(None);
    }
    let answer = verdict.corrected_answer.unwrap_or(answer);

    let mut source_text = String::new();
    source_text.push_str(&anchor.caption);
    for (_, t) in &related {
        source_text.push('\n');
        source_text.push_str(t);
    }
    if let Some(parse) = &anchor.ocr_parse {
        source_text.push('\n');
        source_text.push_str(parse);
    }
    if let Ok(page) = doc.page(anchor.page_no) {
        source_text.push('\n');
        source_text.push_str(&page.ocr_text);
    }

    let reasoning_type = classify_reasoning(&answer, &source_text);
    Ok(Some(QueryRecord {
        query_id: format!("{}:{}", doc.doc_id, anchor.anchor_id),
        doc_id: doc.doc_id.clone(),
        question,
        answer,
        gt_pages,
        anchor_id: anchor.anchor_id.clone(),
        reasoning_type,
        difficulty: None,
        provenance: Provenance::Synthesized,
    }))
}

/// Full corpus sweep: one generator + filterer pass per anchor, solvable
/// candidates emitted, per-anchor failures isolated into the report. Output
/// ordering is canonical by (doc_id, anchor_id) regardless of worker
/// scheduling.
pub fn synthesize_corpus_queries(
    corpus: &Corpus,
    backends: &SynthesisBackends<'_>,
    config: &SynthesisConfig,
) -> SynthesisOutput {
    let anchors: Vec<(&Document, &Anchor)> = corpus
        .documents()
        .flat_map(|doc| doc.anchors.iter().map(move |a| (doc, a)))
        .collect();

    let results: Vec<Result<Option<QueryRecord>, (String, String, String)>> = anchors
        .par_iter()
        .map(|(doc, anchor)| {
            synthesize_anchor(doc, anchor, backends, config).map_err(|e| {
                (
                    doc.doc_id.clone(),
                    anchor.anchor_id.clone(),
                    e.to_string(),
                )
            })
        })
        .collect();

    let mut stats = SynthesisStats {
        anchors_seen: anchors.len(),
        ..SynthesisStats::default()
    };
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for ((_, anchor), result) in anchors.iter().zip(results) {
        match result {
            Ok(Some(record)) => {
                *stats
                    .by_kind
                    .entry(format!("{:?}", anchor.kind).to_lowercase())
                    .or_default() += 1;
                *stats
                    .by_reasoning
                    .entry(format!("{:?}", record.reasoning_type).to_lowercase())
                    .or_default() += 1;
                stats.emitted += 1;
                records.push(record);
            }
            Ok(None) => stats.rejected_unsolvable += 1,
            Err((doc_id, anchor_id, reason)) => {
                stats.failed += 1;
                failures.push(AnchorFailure {
                    doc_id,
                    anchor_id,
                    reason,
                });
            }
        }
    }
    records.sort_by(|a, b| (&a.doc_id, &a.anchor_id).cmp(&(&b.doc_id, &b.anchor_id)));
    failures.sort_by(|a, b| (&a.doc_id, &a.anchor_id).cmp(&(&b.doc_id, &b.anchor_id)));
    SynthesisOutput {
        records,
        stats,
        failures,
    }
}

/// Serialize records as JSONL with stable field order.
pub fn records_to_jsonl(records: &[QueryRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("QueryRecord serializes"));
        out.push('\n');
    }
    out
}
