//! Scoring and analysis kernels: ANLS, page-retrieval accuracy/recall,
//! token-level F1, self-certainty, perplexity and report aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PageSet;
use crate::orchestrator::RunRecord;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("ground truth must be non-empty")]
    EmptyGroundTruth,
    #[error("empty sequence")]
    EmptySequence,
    #[error("non-finite logits at token {0}")]
    NonFiniteLogits(usize),
    #[error("log-probabilities must be <= 0, found {0}")]
    PositiveLogProb(f64),
    #[error("records span multiple run ids: {0} vs {1}")]
    MixedRunIds(String, String),
    #[error("no records to aggregate")]
    EmptyRun,
}

/// Standard ANLS threshold used in document QA.
pub const ANLS_THRESHOLD: f64 = 0.5;

fn normalize_answer(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Levenshtein edit distance over unicode scalars.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Normalized Levenshtein similarity with a threshold cutoff, maximized over
/// the accepted ground-truth variants. Strings are lowercased and
/// whitespace-normalized before comparison.
pub fn anls(pred: &str, gt_variants: &[String], threshold: f64) -> Result<f64, MetricError> {
    if gt_variants.is_empty() {
        return Err(MetricError::EmptyGroundTruth);
    }
    let pred = normalize_answer(pred);
    let mut best: f64 = 0.0;
    for gt in gt_variants {
        let gt = normalize_answer(gt);
        let max_len = pred.chars().count().max(gt.chars().count());
        let sim = if max_len == 0 {
            1.0
        } else {
            1.0 - levenshtein(&pred, &gt) as f64 / max_len as f64
        };
        best = best.max(sim);
    }
    Ok(if best >= threshold { best } else { 0.0 })
}

/// Binary page-retrieval accuracy (exact set match) and recall (ground truth
/// fully covered by the prediction).
pub fn page_retrieval_scores(
    p_pred: &PageSet,
    p_gt: &PageSet,
) -> Result<(f64, f64), MetricError> {
    if p_gt.is_empty() {
        return Err(MetricError::EmptyGroundTruth);
    }
    let acc = f64::from(p_pred == p_gt);
    let rec = f64::from(p_gt.is_subset(p_pred));
    Ok((acc, rec))
}

fn tokenize(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token-multiset F1 on normalized answers. Both empty counts as perfect
/// agreement; exactly one empty side is zero.
pub fn token_f1(pred: &str, gt: &str) -> f64 {
    let pred_tokens = tokenize(pred);
    let gt_tokens = tokenize(gt);
    if pred_tokens.is_empty() && gt_tokens.is_empty() {
        return 1.0;
    }
    if pred_tokens.is_empty() || gt_tokens.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &gt_tokens {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pred_tokens {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred_tokens.len() as f64;
    let recall = overlap as f64 / gt_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Sequence-level self-certainty: per-token logsumexp minus mean of the
/// logit vector, averaged over the sequence. Higher means a more peaked
/// predictive distribution.
pub fn self_certainty(logits: &[Vec<f64>]) -> Result<f64, MetricError> {
    if logits.is_empty() {
        return Err(MetricError::EmptySequence);
    }
    let mut total = 0.0;
    for (t, vec) in logits.iter().enumerate() {
        if vec.len() < 2 || vec.iter().any(|l| !l.is_finite()) {
            return Err(MetricError::NonFiniteLogits(t));
        }
        let max = vec.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + vec.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let mean = vec.iter().sum::<f64>() / vec.len() as f64;
        total += lse - mean;
    }
    Ok(total / logits.len() as f64)
}

/// exp of the negative mean token log-probability.
pub fn perplexity(token_logprobs: &[f64]) -> Result<f64, MetricError> {
    if token_logprobs.is_empty() {
        return Err(MetricError::EmptySequence);
    }
    for &lp in token_logprobs {
        if lp > 0.0 || !lp.is_finite() {
            return Err(MetricError::PositiveLogProb(lp));
        }
    }
    let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
    Ok((-mean).exp())
}

// ---------------------------------------------------------------------------
// Report aggregation
// ---------------------------------------------------------------------------

/// Which metric family a benchmark reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkStyle {
    /// ANLS (DUDE / MP-DocVQA style).
    Anls,
    /// Exact-match accuracy + token F1.
    AccF1,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkAdapter {
    pub name: String,
    pub style: BenchmarkStyle,
    /// Page-count bucket boundary for the long-document slice.
    pub long_doc_pages: u32,
}

impl BenchmarkAdapter {
    pub fn new(name: &str, style: BenchmarkStyle) -> Self {
        Self {
            name: name.to_string(),
            style,
            long_doc_pages: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub run_id: String,
    pub benchmark: String,
    pub per_query: BTreeMap<String, BTreeMap<String, f64>>,
    pub aggregates: BTreeMap<String, Aggregate>,
    /// Aggregates recomputed per slice key (e.g. "pages>20").
    pub slices: BTreeMap<String, BTreeMap<String, Aggregate>>,
}

fn aggregate_rows(
    rows: &BTreeMap<String, BTreeMap<String, f64>>,
) -> BTreeMap<String, Aggregate> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for metrics in rows.values() {
        for (name, value) in metrics {
            let entry = sums.entry(name.clone()).or_insert((0.0, 0));
            entry.0 += value;
            entry.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(name, (sum, count))| {
            (
                name,
                Aggregate {
                    mean: sum / count as f64,
                    count,
                },
            )
        })
        .collect()
}

/// Aggregate per-query scores from a run into a report with benchmark-style
/// metric selection and page-count slices. Per-query metric rows are taken
/// from the RunRecords' `scores` maps, filtered to the adapter's family.
pub fn aggregate(
    records: &[RunRecord],
    adapter: &BenchmarkAdapter,
) -> Result<MetricReport, MetricError> {
    if records.is_empty() {
        return Err(MetricError::EmptyRun);
    }
    let run_id = records[0].run_id.clone();
    for r in records {
        if r.run_id != run_id {
            return Err(MetricError::MixedRunIds(run_id, r.run_id.clone()));
        }
    }
    let wanted: &[&str] = match adapter.style {
        BenchmarkStyle::Anls => &["anls", "stage1_acc", "stage1_rec", "judge"],
        BenchmarkStyle::AccF1 => &["acc", "token_f1", "stage1_acc", "stage1_rec", "judge"],
    };
    let mut per_query = BTreeMap::new();
    let mut long_rows = BTreeMap::new();
    let mut short_rows = BTreeMap::new();
    for r in records {
        let row: BTreeMap<String, f64> = r
            .scores
            .iter()
            .filter(|(k, _)| wanted.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        per_query.insert(r.query_id.clone(), row.clone());
        if r.doc_pages > adapter.long_doc_pages {
            long_rows.insert(r.query_id.clone(), row);
        } else {
            short_rows.insert(r.query_id.clone(), row);
        }
    }
    let mut slices = BTreeMap::new();
    if !long_rows.is_empty() {
        slices.insert(
            format!("pages>{}", adapter.long_doc_pages),
            aggregate_rows(&long_rows),
        );
    }
    if !short_rows.is_empty() {
        slices.insert(
            format!("pages<={}", adapter.long_doc_pages),
            aggregate_rows(&short_rows),
        );
    }
    Ok(MetricReport {
        run_id,
        benchmark: adapter.name.clone(),
        aggregates: aggregate_rows(&per_query),
        per_query,
        slices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anls_identity() {
        assert_eq!(anls("The Answer", &["the  answer".into()], ANLS_THRESHOLD).unwrap(), 1.0);
    }

    #[test]
    fn anls_kitten_sitting() {
        // edit distance 3 over max length 7
        let score = anls("kitten", &["sitting".into()], ANLS_THRESHOLD).unwrap();
        assert!((score - (1.0 - 3.0 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn anls_below_threshold_is_zero() {
        assert_eq!(anls("abc", &["xyz".into()], ANLS_THRESHOLD).unwrap(), 0.0);
    }

    #[test]
    fn anls_empty_gt_errors() {
        assert!(matches!(
            anls("x", &[], ANLS_THRESHOLD),
            Err(MetricError::EmptyGroundTruth)
        ));
    }

    #[test]
    fn token_f1_cases() {
        assert_eq!(token_f1("same words", "same words"), 1.0);
        assert!((token_f1("a b c", "b c d") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_f1("", "x"), 0.0);
        assert_eq!(token_f1("", ""), 1.0);
    }

    #[test]
    fn self_certainty_two_way_uniform() {
        let value = self_certainty(&[vec![0.0, 0.0]]).unwrap();
        assert!((value - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn self_certainty_grows_with_peakedness() {
        let flat = self_certainty(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let peaked = self_certainty(&[vec![10.0, 0.0, 0.0, 0.0]]).unwrap();
        assert!(peaked > flat);
    }

    #[test]
    fn perplexity_cases() {
        let lp = (1.0 / 32.0f64).ln();
        assert!((perplexity(&[lp; 5]).unwrap() - 32.0).abs() < 1e-6);
        assert_eq!(perplexity(&[0.0, 0.0]).unwrap(), 1.0);
        assert!((perplexity(&[-(10.0f64.ln())]).unwrap() - 10.0).abs() < 1e-9);
        assert!(matches!(
            perplexity(&[0.5]),
            Err(MetricError::PositiveLogProb(_))
        ));
        assert!(matches!(perplexity(&[]), Err(MetricError::EmptySequence)));
    }

    #[test]
    fn page_scores_match_definitions() {
        let gt = PageSet::from_pages([8, 20]);
        assert_eq!(
            page_retrieval_scores(&PageSet::from_pages([8, 20]), &gt).unwrap(),
            (1.0, 1.0)
        );
        assert_eq!(
            page_retrieval_scores(&PageSet::from_pages([8, 20, 21]), &gt).unwrap(),
            (0.0, 1.0)
        );
        assert_eq!(
            page_retrieval_scores(&PageSet::from_pages([8]), &gt).unwrap(),
            (0.0, 0.0)
        );
    }
}
