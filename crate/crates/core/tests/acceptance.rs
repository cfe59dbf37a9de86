//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line
//! (run with `--nocapture` to see them) and fails the build on regression.

mod common;

use std::collections::BTreeSet;
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use cogdoc_core::backend::{
    ChatRequest, ChatResponse, ContentPart, Endpoint, MockBackend, MockRule, MockScript, Role,
};
use cogdoc_core::corpus::{load_corpus, PageSet};
use cogdoc_core::grpo::{
    clipped_objective, gradient_check, kl_penalty, make_sim_env, standardize_advantages,
    train_toy, uniform_baseline, GrpoConfig,
};
use cogdoc_core::metrics::{anls, perplexity, self_certainty, ANLS_THRESHOLD};
use cogdoc_core::orchestrator::{run_pipeline, PipelineBackends, PipelineOptions};
use cogdoc_core::patterns::{
    categorize_difficulty, chunk_page_range, synthesize_stage1_trace, PatternError, PatternOptions,
};
use cogdoc_core::reward::{judge_answer, reward_localization, JudgeOptions};
use cogdoc_core::synthesis::{
    synthesize_corpus_queries, Difficulty, Provenance, QueryRecord, ReasoningType,
    SynthesisBackends, SynthesisConfig,
};

fn report<F: FnOnce() + std::panic::UnwindSafe>(number: u32, name: &str, f: F) {
    match std::panic::catch_unwind(f) {
        Ok(()) => println!("acceptance {number} ({name}): PASS"),
        Err(cause) => {
            println!("acceptance {number} ({name}): FAIL");
            std::panic::resume_unwind(cause);
        }
    }
}

fn query(query_id: &str, doc_id: &str, question: &str, answer: &str, gt: &[u32]) -> QueryRecord {
    QueryRecord {
        query_id: query_id.to_string(),
        doc_id: doc_id.to_string(),
        question: question.to_string(),
        answer: answer.to_string(),
        gt_pages: PageSet::from_pages(gt.iter().copied()),
        anchor_id: "fixture".to_string(),
        reasoning_type: ReasoningType::Extractive,
        difficulty: None,
        provenance: Provenance::Synthesized,
    }
}

#[test]
fn criterion_1_reward_oracle_equivalence() {
    report(1, "reward oracle equivalence", || {
        let start = Instant::now();
        for pred_bits in 0u32..32 {
            for gt_bits in 0u32..32 {
                let pred = PageSet::from_pages((1..=5).filter(|p| pred_bits & (1 << (p - 1)) != 0));
                let gt = PageSet::from_pages((1..=5).filter(|p| gt_bits & (1 << (p - 1)) != 0));
                // Brute-force set-algebra oracle over explicit BTreeSets.
                let pred_set: BTreeSet<u32> = pred.iter().collect();
                let gt_set: BTreeSet<u32> = gt.iter().collect();
                let outcome = reward_localization(&pred, &gt);
                if gt_set.is_empty() {
                    assert!(outcome.is_err());
                    continue;
                }
                let acc = f64::from(pred_set == gt_set);
                let rec = f64::from(gt_set.iter().all(|p| pred_set.contains(p)));
                let expected = 0.5 * (acc + rec);
                assert_eq!(outcome.unwrap().value, expected);
            }
        }
        assert!(start.elapsed().as_secs() < 1);
    });
}

#[test]
fn criterion_2_advantage_properties() {
    report(2, "advantage properties", || {
        let mut rng = ChaCha20Rng::seed_from_u64(2024);
        for _ in 0..10_000 {
            let g = rng.gen_range(2..=16);
            let degenerate = rng.gen_bool(0.1);
            let base: f64 = rng.gen_range(0.0..1.0);
            let rewards: Vec<f64> = (0..g)
                .map(|_| if degenerate { base } else { rng.gen_range(0.0..1.0) })
                .collect();
            let adv = standardize_advantages(&rewards).unwrap();
            let n = adv.len() as f64;
            let mean = adv.iter().sum::<f64>() / n;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            let in_std = {
                let rm = rewards.iter().sum::<f64>() / n;
                (rewards.iter().map(|r| (r - rm) * (r - rm)).sum::<f64>() / n).sqrt()
            };
            if in_std > 1e-12 {
                assert!((var.sqrt() - 1.0).abs() < 1e-9, "std {}", var.sqrt());
            } else {
                assert!(adv.iter().all(|a| *a == 0.0));
            }
        }
        let worked = standardize_advantages(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let expected = [1.7321, -0.5774, -0.5774, -0.5774];
        for (a, e) in worked.iter().zip(expected) {
            assert!((a - e).abs() < 1e-4, "worked advantage {a} vs {e}");
        }
    });
}

#[test]
fn criterion_3_objective_kernel() {
    report(3, "objective kernel", || {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let ratio: f64 = rng.gen_range(0.0..3.0);
            let adv: f64 = rng.gen_range(-2.0..2.0);
            let eps: f64 = rng.gen_range(0.01..0.5);
            let obj = clipped_objective(ratio, adv, eps);
            assert!(obj <= ratio * adv + 1e-15);
            if (1.0 - eps..=1.0 + eps).contains(&ratio) {
                assert_eq!(obj, ratio * adv);
            }
        }
        for _ in 0..1_000 {
            let k = rng.gen_range(2..16);
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / z).collect();
            let raw2: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
            let z2: f64 = raw2.iter().sum();
            let q: Vec<f64> = raw2.iter().map(|x| x / z2).collect();
            assert!(kl_penalty(&p, &q).unwrap() >= 0.0);
            assert!(kl_penalty(&p, &p).unwrap().abs() < 1e-12);
        }
    });
}

#[test]
fn criterion_4_toy_grpo_run() {
    report(4, "toy GRPO run", || {
        let start = Instant::now();
        let env = make_sim_env(41, 20, 10);
        let config = GrpoConfig::default();
        assert_eq!(config.group_size, 8);
        assert_eq!(config.eps_clip, 0.2);
        assert_eq!(config.beta_kl, 0.001);
        assert!(config.iterations <= 500);

        let baseline = uniform_baseline(&env, 2048, 7);
        assert!(baseline < 0.2, "uniform baseline {baseline}");

        let log = train_toy(&config, &env, 41).expect("training converges");
        let best = log
            .rows
            .iter()
            .map(|r| r.mean_reward)
            .fold(f64::NEG_INFINITY, f64::max);
        let last = log.rows.last().unwrap().mean_reward;
        assert!(
            best > 0.8 && last > 0.8,
            "mean localization reward best {best}, final {last}"
        );

        let grad_err = gradient_check(&config, &env, 41);
        assert!(grad_err < 1e-4, "gradient check max rel err {grad_err}");
        assert!(start.elapsed().as_secs() < 60, "took {:?}", start.elapsed());
    });
}

/// Independent full-matrix edit-distance oracle (the library uses a
/// two-row formulation).
fn oracle_levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        dp[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = usize::from(a[i - 1] != b[j - 1]);
            dp[i][j] = (dp[i - 1][j] + 1)
                .min(dp[i][j - 1] + 1)
                .min(dp[i - 1][j - 1] + sub);
        }
    }
    dp[a.len()][b.len()]
}

fn oracle_anls(pred: &str, gts: &[String], threshold: f64) -> f64 {
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let p = norm(pred);
    gts.iter()
        .map(|gt| {
            let g = norm(gt);
            let max_len = p.chars().count().max(g.chars().count());
            if max_len == 0 {
                return 1.0;
            }
            let sim = 1.0 - oracle_levenshtein(&p, &g) as f64 / max_len as f64;
            if sim >= threshold {
                sim
            } else {
                0.0
            }
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn random_phrase(rng: &mut ChaCha20Rng) -> String {
    let alphabet = ['a', 'b', 'c', 'A', 'B', ' ', '1', '9', '.'];
    let len = rng.gen_range(0..24);
    (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
}

#[test]
fn criterion_5_metrics_oracles() {
    report(5, "metrics oracles", || {
        let mut rng = ChaCha20Rng::seed_from_u64(55);
        for _ in 0..1_000 {
            let pred = random_phrase(&mut rng);
            let n_variants = rng.gen_range(1..4);
            let gts: Vec<String> = (0..n_variants).map(|_| random_phrase(&mut rng)).collect();
            let got = anls(&pred, &gts, ANLS_THRESHOLD).unwrap();
            let want = oracle_anls(&pred, &gts, ANLS_THRESHOLD);
            assert_eq!(got, want, "anls({pred:?}, {gts:?})");
        }

        for k in 2..=64usize {
            let uniform = vec![vec![0.25f64; k]; 7];
            let sc = self_certainty(&uniform).unwrap();
            assert!((sc - (k as f64).ln()).abs() < 1e-9, "K={k}: {sc}");
        }
        let logits: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..32).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let shifted: Vec<Vec<f64>> = logits
            .iter()
            .map(|row| row.iter().map(|l| l + 123.456).collect())
            .collect();
        let diff = (self_certainty(&logits).unwrap() - self_certainty(&shifted).unwrap()).abs();
        assert!(diff < 1e-9, "shift invariance violated by {diff}");

        let uniform_lp = vec![(1.0f64 / 32.0).ln(); 9];
        assert!((perplexity(&uniform_lp).unwrap() - 32.0).abs() < 1e-6);
    });
}

#[test]
fn criterion_6_pattern_math() {
    report(6, "pattern math", || {
        for n in 1..=50u32 {
            assert_eq!(chunk_page_range("d", n, 5).len() as u32, n.div_ceil(5));
        }

        let fixture = common::build_fixture();
        let corpus = load_corpus(&fixture.manifest).unwrap();
        let doc = corpus.get("doc-a").unwrap();
        let opts = PatternOptions::default();

        // Accepted stage-1 traces end in exactly gt_pages; a consolidation
        // naming anything else is rejected.
        let good = query("qc-good", "doc-a", "Where is revenue discussed?", "pages", &[2, 5]);
        let bad = query("qc-bad", "doc-a", "Where is headcount discussed?", "pages", &[2, 5]);
        let script = MockScript::default()
            .rule(MockRule::new(
                Role::Generator,
                "Question: Where is revenue discussed?\nMerge",
                "Joining both windows, the evidence sits together. Relevant pages: [2, 5]",
            ))
            .rule(MockRule::new(
                Role::Generator,
                "Question: Where is headcount discussed?\nMerge",
                "Relevant pages: [2, 6]",
            ));
        let backend = MockBackend::new(6, script);
        let trace = synthesize_stage1_trace(&good, doc, &backend, &opts, 5).unwrap();
        assert_eq!(trace.terminal, good.gt_pages.to_string());
        assert!(matches!(
            synthesize_stage1_trace(&bad, doc, &backend, &opts, 5),
            Err(PatternError::ConsolidationMismatch { .. })
        ));

        // Difficulty levels partition a 50-query scripted fixture.
        let mut script = MockScript::default();
        let mut queries = Vec::new();
        for i in 0..50 {
            let q = query(&format!("qd-{i}"), "doc-a", &format!("Q{i}?"), &format!("A{i}"), &[1]);
            let direct_key = format!(
                "given pages. Put the final answer in boxed{{}}.\nQuestion: Q{i}?"
            );
            let cot_key = format!(
                "reason to the answer. Put the final answer in boxed{{}}.\nQuestion: Q{i}?"
            );
            match i % 3 {
                0 => {
                    script = script.rule(MockRule::new(
                        Role::Policy,
                        &direct_key,
                        &format!("boxed{{A{i}}}"),
                    ));
                }
                1 => {
                    script = script
                        .rule(MockRule::new(Role::Policy, &cot_key, &format!("boxed{{A{i}}}")))
                        .rule(MockRule::new(
                            Role::Policy,
                            &direct_key,
                            &format!("boxed{{WRONG-{i}}}"),
                        ));
                }
                _ => {
                    script = script
                        .rule(MockRule::new(Role::Policy, &direct_key, "boxed{WRONG}"))
                        .rule(MockRule::new(Role::Policy, &cot_key, "boxed{WRONG}"));
                }
            }
            queries.push(q);
        }
        script = script
            .rule(MockRule::new(Role::Judge, "WRONG", "No match.\nboxed{0.0}"))
            .rule(MockRule::any(Role::Judge, "Exact match.\nboxed{1.0}"));
        let backend = MockBackend::new(6, script);
        let mut counts = [0usize; 3];
        for q in &queries {
            let outcome = categorize_difficulty(q, doc, &backend, &backend, &opts).unwrap();
            counts[match outcome.level {
                Difficulty::L1 => 0,
                Difficulty::L2 => 1,
                Difficulty::L3 => 2,
            }] += 1;
        }
        assert_eq!(counts, [17, 17, 16], "difficulty partition {counts:?}");
        assert_eq!(counts.iter().sum::<usize>(), 50);
    });
}

/// Endpoint wrapper that records the largest image count seen on focused
/// (stage-2) requests.
struct ImageCounting<'a> {
    inner: &'a MockBackend,
    max_stage2_images: Mutex<usize>,
}

impl Endpoint for ImageCounting<'_> {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, cogdoc_core::backend::BackendError> {
        if req.system_prompt.contains("answer a question from the given document pages") {
            let images = req
                .parts
                .iter()
                .filter(|p| matches!(p, ContentPart::Image(_)))
                .count();
            let mut max = self.max_stage2_images.lock().unwrap();
            *max = (*max).max(images);
        }
        self.inner.send(req)
    }

    fn supports_logits(&self) -> bool {
        self.inner.supports_logits()
    }
}

#[test]
fn criterion_7_pipeline_determinism() {
    report(7, "pipeline determinism", || {
        let fixture = common::build_fixture();
        let corpus = load_corpus(&fixture.manifest).unwrap();
        let queries: Vec<QueryRecord> = (0..10)
            .map(|i| {
                query(
                    &format!("qp-{i}"),
                    "doc-b",
                    &format!("What does page {} say?", i + 1),
                    &format!("Body text of page {}.", i + 1),
                    &[i + 1],
                )
            })
            .collect();
        let script = MockScript::default()
            .rule(MockRule::new(
                Role::Policy,
                "skim a document at low resolution",
                "[6, 2, 3, 1, 5, 4]",
            ))
            .rule(MockRule::new(
                Role::Policy,
                "answer a question from the given document pages",
                "The page body is plain prose, so boxed{Body text.}",
            ));
        let opts = PipelineOptions {
            k: 4,
            ..PipelineOptions::default()
        };

        let mut serialized: Vec<String> = Vec::new();
        let mut max_images = 0usize;
        for (repeat, workers) in [(0, 1), (1, 4), (2, 16), (3, 1), (4, 4), (5, 16)] {
            let _ = repeat;
            let mock = MockBackend::new(99, script.clone());
            let counting = ImageCounting {
                inner: &mock,
                max_stage2_images: Mutex::new(0),
            };
            let backends = PipelineBackends {
                policy: &counting,
                extractor: None,
            };
            let results = run_pipeline(
                &queries, &corpus, &backends, &opts, "run-fixed", "cfg-fixed", 99, workers,
            );
            let ok: Vec<_> = results.into_iter().map(|r| r.unwrap()).collect();
            assert_eq!(ok.len(), queries.len());
            serialized.push(serde_json::to_string(&ok.iter().map(|(r, t1, t2)| (r, t1, t2)).collect::<Vec<_>>()).unwrap());
            max_images = max_images.max(*counting.max_stage2_images.lock().unwrap());
        }
        for s in &serialized[1..] {
            assert_eq!(s.as_bytes(), serialized[0].as_bytes(), "run records differ");
        }
        assert!(max_images <= opts.k, "stage-2 prompt held {max_images} pages");
        assert!(max_images > 0);
    });
}

#[test]
fn criterion_8_synthesis_behavior() {
    report(8, "planted-unanswerable synthesis", || {
        let fixture = common::build_fixture();
        let corpus = load_corpus(&fixture.manifest).unwrap();
        let script = MockScript::default()
            .rule(MockRule::new(
                Role::Generator,
                "Figure 2: Quarterly revenue by region",
                "Question: What does Figure 2 report across regions?\nAnswer: Quarterly revenue",
            ))
            .rule(MockRule::new(
                Role::Generator,
                "Table 1: Headcount by office",
                "Question: How many staff are in Oslo?\nAnswer: 12",
            ))
            .rule(MockRule::new(
                Role::Generator,
                "Introduction",
                "Question: What does the introduction summarize?\nAnswer: The fiscal year",
            ))
            .rule(MockRule::new(
                Role::Generator,
                "Figure 9: Corrupted scan",
                "Question: What value does Figure 9 show?\nAnswer: Unknown",
            ))
            .rule(MockRule::new(
                Role::Filterer,
                "What value does Figure 9 show?",
                r#"{"status": "unsolvable", "explanation": "the scan is illegible"}"#,
            ))
            .rule(MockRule::any(Role::Filterer, r#"{"status": "solvable"}"#));
        let backend = MockBackend::new(8, script);
        let backends = SynthesisBackends {
            generator: &backend,
            filterer: &backend,
        };
        let output = synthesize_corpus_queries(&corpus, &backends, &SynthesisConfig::default());
        assert_eq!(output.stats.anchors_seen, 4);
        assert_eq!(output.stats.rejected_unsolvable, 1);
        assert_eq!(output.records.len(), 3, "failures: {:?}", output.failures);
        assert!(output.records.iter().all(|r| r.anchor_id != "a-planted"));
        let fig2 = output
            .records
            .iter()
            .find(|r| r.anchor_id == "a-fig2")
            .expect("figure query emitted");
        assert!(
            fig2.gt_pages.len() >= 2,
            "cross-page anchor gt_pages {}",
            fig2.gt_pages
        );
    });
}

#[test]
fn criterion_9_judge_plumbing() {
    report(9, "judge rubric plumbing", || {
        let opts = JudgeOptions::default();

        let script = MockScript::default().rule(MockRule::any(
            Role::Judge,
            "9.5 million equals 9,500,000, an exact numerical match.\nboxed{1.0}",
        ));
        let judge = MockBackend::new(9, script);
        let outcome =
            judge_answer("Total revenue?", "9.5 million", "9,500,000", &judge, &opts).unwrap();
        assert_eq!(outcome.value, 1.0);
        assert!(!outcome.fallback_used);

        let script = MockScript::default().rule(MockRule::any(
            Role::Judge,
            "The answer is correct but uses no boxed notation, so the score is reduced by 0.3.\nboxed{0.7}",
        ));
        let judge = MockBackend::new(9, script);
        let outcome = judge_answer(
            "Total revenue?",
            "The total revenue was 9.5 million",
            "9.5 million",
            &judge,
            &opts,
        )
        .unwrap();
        assert!((outcome.value - 0.7).abs() < 1e-12);
        assert_eq!(outcome.components["penalty_applied"], 1.0);

        let script = MockScript::default()
            .rule(MockRule::any(Role::Judge, "I cannot determine a numeric score."));
        let judge = MockBackend::new(9, script);
        let outcome = judge_answer("Total?", "??", "42", &judge, &opts).unwrap();
        assert_eq!(outcome.value, 0.0);
        assert!(outcome.fallback_used);
        assert!(outcome.audit.is_some());
    });
}
