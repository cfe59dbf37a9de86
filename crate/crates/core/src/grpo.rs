//! GRPO numerical core and a desk-scale toy trainer.
//!
//! The kernels (group advantage standardization, trajectory importance
//! ratio, clipped surrogate, categorical KL) are pure functions. The toy
//! trainer optimizes a linear softmax localization policy from scratch on a
//! simulated symbol-grid corpus, scoring rollouts with the rule-based
//! localization reward, so the objective's behavior is observable without
//! any model backend.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PageSet;
use crate::reward::reward_localization;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("reward group must have at least 2 members, got {0}")]
    GroupTooSmall(usize),
    #[error("log-prob sequences differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite log-probability")]
    NonFiniteLogProb,
    #[error("distributions have mismatched support")]
    SupportMismatch,
    #[error("training diverged at iteration {iteration} (non-finite loss)")]
    DivergenceDetected {
        iteration: usize,
        log: Box<TrainingLog>,
    },
}

/// G trajectories for one query with rewards and standardized advantages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardedGroup {
    pub query_id: String,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RewardedGroup {
    pub fn new(query_id: String, rewards: Vec<f64>) -> Result<Self, GrpoError> {
        let advantages = standardize_advantages(&rewards)?;
        Ok(Self {
            query_id,
            rewards,
            advantages,
        })
    }

    pub fn group_size(&self) -> usize {
        self.rewards.len()
    }
}

/// Group-relative advantages: (R_i - mean) / population std. Degenerate
/// groups (std below 1e-12) yield all zeros so they carry no gradient.
pub fn standardize_advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Ratio bound applied before the ratio feeds the surrogate.
pub const RATIO_CLAMP: (f64, f64) = (1e-6, 1e6);

/// Trajectory-level importance ratio: exp of the summed per-token log-prob
/// difference, i.e. the ratio of sequence probabilities under the new and
/// rollout policies.
pub fn importance_ratio(logp_new: &[f64], logp_old: &[f64]) -> Result<f64, GrpoError> {
    if logp_new.len() != logp_old.len() || logp_new.is_empty() {
        return Err(GrpoError::LengthMismatch(logp_new.len(), logp_old.len()));
    }
    let mut diff = 0.0;
    for (n, o) in logp_new.iter().zip(logp_old) {
        if !n.is_finite() || !o.is_finite() {
            return Err(GrpoError::NonFiniteLogProb);
        }
        diff += n - o;
    }
    Ok(diff.exp().clamp(RATIO_CLAMP.0, RATIO_CLAMP.1))
}

/// Clipped surrogate: min(clip(ratio, 1-eps, 1+eps) * A, ratio * A).
pub fn clipped_objective(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    let unclipped = ratio * advantage;
    clipped.min(unclipped)
}

/// Exact categorical KL(p || q). Support mismatch (p has mass where q has
/// none, or lengths differ) is an error rather than +inf.
pub fn kl_penalty(p: &[f64], q: &[f64]) -> Result<f64, GrpoError> {
    if p.len() != q.len() || p.is_empty() {
        return Err(GrpoError::SupportMismatch);
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi <= 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(GrpoError::SupportMismatch);
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}

// ---------------------------------------------------------------------------
// Simulated corpus
// ---------------------------------------------------------------------------

/// Number of distinct symbols pages are built from.
pub const SIM_ALPHABET: usize = 12;
/// Symbols per simulated page.
pub const SIM_SYMBOLS_PER_PAGE: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimDoc {
    pub doc_idx: usize,
    /// Per page (1-based order), the set of symbols printed on it.
    pub pages: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimQuery {
    pub query_id: String,
    pub doc_idx: usize,
    /// Symbols the query asks about.
    pub targets: Vec<usize>,
    pub gt_pages: PageSet,
}

/// Symbol-grid corpus: documents are pages of random symbols; a query names
/// a target symbol and its ground truth is every page carrying it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimEnv {
    pub seed: u64,
    pub docs: Vec<SimDoc>,
}

impl SimEnv {
    pub fn pages_per_doc(&self) -> usize {
        self.docs.first().map_or(0, |d| d.pages.len())
    }

    /// Draw a query: a document and one symbol that occurs somewhere in it.
    pub fn sample_query(&self, rng: &mut ChaCha20Rng, query_id: String) -> SimQuery {
        let doc_idx = rng.gen_range(0..self.docs.len());
        let doc = &self.docs[doc_idx];
        let page = rng.gen_range(0..doc.pages.len());
        let symbol = doc.pages[page][rng.gen_range(0..doc.pages[page].len())];
        let gt_pages = PageSet::from_pages(
            doc.pages
                .iter()
                .enumerate()
                .filter(|(_, syms)| syms.contains(&symbol))
                .map(|(i, _)| i as u32 + 1),
        );
        SimQuery {
            query_id,
            doc_idx,
            targets: vec![symbol],
            gt_pages,
        }
    }
}

pub fn make_sim_env(seed: u64, n_docs: usize, pages_per_doc: usize) -> SimEnv {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let docs = (0..n_docs)
        .map(|doc_idx| {
            let pages = (0..pages_per_doc)
                .map(|_| {
                    let mut syms = Vec::with_capacity(SIM_SYMBOLS_PER_PAGE);
                    while syms.len() < SIM_SYMBOLS_PER_PAGE {
                        let s = rng.gen_range(0..SIM_ALPHABET);
                        if !syms.contains(&s) {
                            syms.push(s);
                        }
                    }
                    syms.sort_unstable();
                    syms
                })
                .collect();
            SimDoc { doc_idx, pages }
        })
        .collect();
    SimEnv { seed, docs }
}

// ---------------------------------------------------------------------------
// Toy policy
// ---------------------------------------------------------------------------

/// Feature vector width: [stop bias, contains-target, target-overlap
/// fraction, page bias].
pub const FEATURE_DIM: usize = 4;

fn stop_features() -> [f64; FEATURE_DIM] {
    [1.0, 0.0, 0.0, 0.0]
}

fn page_features(doc: &SimDoc, page_idx: usize, targets: &[usize]) -> [f64; FEATURE_DIM] {
    let syms = &doc.pages[page_idx];
    let overlap = syms.iter().filter(|s| targets.contains(s)).count();
    [
        0.0,
        f64::from(overlap > 0),
        overlap as f64 / syms.len() as f64,
        1.0,
    ]
}

/// Linear softmax set-selection policy: pages (plus a stop action) are
/// scored by a dot product with query/page overlap features; pages are
/// drawn without replacement from the softmax until stop is drawn or the
/// selection cap is hit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub theta: [f64; FEATURE_DIM],
}

impl ToyPolicy {
    pub fn zeros() -> Self {
        Self {
            theta: [0.0; FEATURE_DIM],
        }
    }

    fn score(&self, features: &[f64; FEATURE_DIM]) -> f64 {
        self.theta.iter().zip(features).map(|(t, f)| t * f).sum()
    }
}

/// One sampled localization trajectory on the sim env. `picks` holds the
/// chosen 0-based page indices in order; the trajectory always ends with an
/// implicit stop unless the cap cut it off.
#[derive(Debug, Clone)]
pub struct ToyTrajectory {
    pub picks: Vec<usize>,
    pub stopped: bool,
    /// Per-step log-probabilities under the rollout policy.
    pub step_logps: Vec<f64>,
    /// Per-step score vectors (logits over the remaining actions), kept for
    /// self-certainty tracking.
    pub step_scores: Vec<Vec<f64>>,
}

/// The per-step state is the set of still-selectable pages. Enumerate the
/// actions as: remaining pages in ascending index order, then stop.
fn step_distribution(
    policy: &ToyPolicy,
    doc: &SimDoc,
    targets: &[usize],
    remaining: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let mut scores: Vec<f64> = remaining
        .iter()
        .map(|&p| policy.score(&page_features(doc, p, targets)))
        .collect();
    scores.push(policy.score(&stop_features()));
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / total).collect();
    (scores, probs)
}

pub fn sample_trajectory(
    policy: &ToyPolicy,
    doc: &SimDoc,
    targets: &[usize],
    max_select: usize,
    rng: &mut ChaCha20Rng,
) -> ToyTrajectory {
    let mut remaining: Vec<usize> = (0..doc.pages.len()).collect();
    let mut picks = Vec::new();
    let mut step_logps = Vec::new();
    let mut step_scores = Vec::new();
    let mut stopped = false;
    while picks.len() < max_select && !remaining.is_empty() {
        let (scores, probs) = step_distribution(policy, doc, targets, &remaining);
        let draw: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if draw < acc {
                chosen = i;
                break;
            }
        }
        step_logps.push(probs[chosen].ln());
        step_scores.push(scores);
        if chosen == remaining.len() {
            stopped = true;
            break;
        }
        picks.push(remaining.remove(chosen));
    }
    ToyTrajectory {
        picks,
        stopped,
        step_logps,
        step_scores,
    }
}

/// Recompute per-step log-probs of a frozen trajectory under `policy`, and
/// accumulate the analytic gradient of the total log-prob into `grad_logp`
/// (score-function form: chosen features minus the distribution mean).
fn replay_logp(
    policy: &ToyPolicy,
    doc: &SimDoc,
    targets: &[usize],
    traj: &ToyTrajectory,
    mut grad_logp: Option<&mut [f64; FEATURE_DIM]>,
) -> Vec<f64> {
    let mut remaining: Vec<usize> = (0..doc.pages.len()).collect();
    let mut logps = Vec::with_capacity(traj.step_logps.len());
    let n_steps = traj.step_logps.len();
    for step in 0..n_steps {
        let (_, probs) = step_distribution(policy, doc, targets, &remaining);
        let features: Vec<[f64; FEATURE_DIM]> = remaining
            .iter()
            .map(|&p| page_features(doc, p, targets))
            .chain(std::iter::once(stop_features()))
            .collect();
        let chosen = if step < traj.picks.len() {
            remaining.iter().position(|&p| p == traj.picks[step]).unwrap()
        } else {
            remaining.len() // stop
        };
        logps.push(probs[chosen].ln());
        if let Some(grad) = grad_logp.as_deref_mut() {
            let mut mean = [0.0; FEATURE_DIM];
            for (p, f) in probs.iter().zip(&features) {
                for d in 0..FEATURE_DIM {
                    mean[d] += p * f[d];
                }
            }
            for d in 0..FEATURE_DIM {
                grad[d] += features[chosen][d] - mean[d];
            }
        }
        if chosen < remaining.len() {
            remaining.remove(chosen);
        }
    }
    logps
}

/// Mean per-state KL(policy || reference) over the decision states a frozen
/// trajectory visited, with its analytic gradient when requested.
fn replay_kl(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    doc: &SimDoc,
    targets: &[usize],
    traj: &ToyTrajectory,
    mut grad: Option<&mut [f64; FEATURE_DIM]>,
) -> f64 {
    let mut remaining: Vec<usize> = (0..doc.pages.len()).collect();
    let n_steps = traj.step_logps.len();
    let mut total = 0.0;
    for step in 0..n_steps {
        let (_, p_new) = step_distribution(policy, doc, targets, &remaining);
        let (_, p_ref) = step_distribution(reference, doc, targets, &remaining);
        let features: Vec<[f64; FEATURE_DIM]> = remaining
            .iter()
            .map(|&p| page_features(doc, p, targets))
            .chain(std::iter::once(stop_features()))
            .collect();
        let mut kl = 0.0;
        for (pi, qi) in p_new.iter().zip(&p_ref) {
            kl += pi * (pi / qi).ln();
        }
        total += kl;
        if let Some(g) = grad.as_deref_mut() {
            let mut mean = [0.0; FEATURE_DIM];
            for (p, f) in p_new.iter().zip(&features) {
                for d in 0..FEATURE_DIM {
                    mean[d] += p * f[d];
                }
            }
            // d/dtheta sum_i p_i log(p_i/q_i); the +1 term cancels because
            // the gradient of the probabilities sums to zero.
            for (i, f) in features.iter().enumerate() {
                let w = p_new[i] * (p_new[i] / p_ref[i]).ln();
                for d in 0..FEATURE_DIM {
                    g[d] += w * (f[d] - mean[d]) / n_steps as f64;
                }
            }
        }
        let chosen = if step < traj.picks.len() {
            remaining.iter().position(|&p| p == traj.picks[step]).unwrap()
        } else {
            remaining.len()
        };
        if chosen < remaining.len() {
            remaining.remove(chosen);
        }
    }
    total / n_steps as f64
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    /// Trajectories sampled per query.
    pub group_size: usize,
    /// Surrogate clip width.
    pub eps_clip: f64,
    /// KL regularization coefficient.
    pub beta_kl: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Reference-policy snapshot period (iterations).
    pub ref_sync_every: usize,
    /// Queries drawn per iteration.
    pub queries_per_iter: usize,
    /// Gradient steps on each sampled batch; >1 lets the clip engage.
    pub inner_epochs: usize,
    /// Page-selection cap per trajectory.
    pub max_select: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            eps_clip: 0.2,
            beta_kl: 0.001,
            learning_rate: 0.6,
            iterations: 500,
            ref_sync_every: 50,
            queries_per_iter: 8,
            inner_epochs: 2,
            max_select: 8,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.group_size < 2 {
            return Err("group_size must be >= 2".into());
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return Err("eps_clip must be in (0, 1)".into());
        }
        if self.beta_kl < 0.0 {
            return Err("beta_kl must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub kl: f64,
    pub objective: f64,
    pub ppl: f64,
    pub self_certainty: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingLog {
    pub config: GrpoConfig,
    pub seed: u64,
    pub rows: Vec<TrainLogRow>,
    pub final_policy: ToyPolicy,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,mean_reward,kl,objective,ppl,self_certainty\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.iteration, row.mean_reward, row.kl, row.objective, row.ppl, row.self_certainty
            ));
        }
        out
    }
}

struct Rollout {
    traj: ToyTrajectory,
    query: SimQuery,
    reward: f64,
    advantage: f64,
    logp_old: f64,
}

fn rollout_seed(seed: u64, iteration: usize, query_idx: usize, sample_idx: usize) -> u64 {
    seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (query_idx as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (sample_idx as u64).wrapping_mul(0x1656_67B1_9E37_79F9)
        ^ 0xD6E8_FEB8_6659_FD93
}

/// Deterministic surrogate-plus-KL objective of `policy` over a frozen
/// rollout batch, with its analytic gradient when requested.
fn batch_objective(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    env: &SimEnv,
    rollouts: &[Rollout],
    config: &GrpoConfig,
    mut grad_out: Option<&mut [f64; FEATURE_DIM]>,
) -> f64 {
    let n = rollouts.len() as f64;
    let mut objective = 0.0;
    for r in rollouts {
        let doc = &env.docs[r.query.doc_idx];
        let mut grad_logp = [0.0; FEATURE_DIM];
        let logps = replay_logp(policy, doc, &r.query.targets, &r.traj, Some(&mut grad_logp));
        let logp_new: f64 = logps.iter().sum();
        let ratio = (logp_new - r.logp_old).exp().clamp(RATIO_CLAMP.0, RATIO_CLAMP.1);
        objective += clipped_objective(ratio, r.advantage, config.eps_clip);

        let mut grad_kl = [0.0; FEATURE_DIM];
        let kl = replay_kl(
            policy,
            reference,
            doc,
            &r.query.targets,
            &r.traj,
            grad_out.is_some().then_some(&mut grad_kl),
        );
        objective -= config.beta_kl * kl;

        if let Some(grad) = grad_out.as_deref_mut() {
            // surrogate subgradient: active only where min picks the
            // unclipped branch or the ratio sits inside the clip band
            let unclipped = ratio * r.advantage;
            let clipped = ratio.clamp(1.0 - config.eps_clip, 1.0 + config.eps_clip) * r.advantage;
            let surrogate_active = unclipped <= clipped
                || (ratio > 1.0 - config.eps_clip && ratio < 1.0 + config.eps_clip);
            if surrogate_active {
                for d in 0..FEATURE_DIM {
                    grad[d] += r.advantage * ratio * grad_logp[d] / n;
                }
            }
            for d in 0..FEATURE_DIM {
                grad[d] -= config.beta_kl * grad_kl[d] / n;
            }
        }
    }
    objective / n
}

/// Train the toy localization policy from scratch with the clipped, KL
/// regularized group-relative objective. Bitwise reproducible for a fixed
/// seed regardless of rollout worker count: every trajectory derives its RNG
/// from (seed, iteration, query, sample) and gradients are reduced in a
/// fixed order.
pub fn train_toy(config: &GrpoConfig, env: &SimEnv, seed: u64) -> Result<TrainingLog, GrpoError> {
    let mut policy = ToyPolicy::zeros();
    let mut reference = policy.clone();
    let mut rows = Vec::with_capacity(config.iterations);

    for iteration in 0..config.iterations {
        if config.ref_sync_every > 0 && iteration % config.ref_sync_every == 0 {
            reference = policy.clone();
        }
        // sample queries for this iteration (deterministic per iteration)
        let mut qrng = ChaCha20Rng::seed_from_u64(rollout_seed(seed, iteration, usize::MAX, 0));
        let queries: Vec<SimQuery> = (0..config.queries_per_iter)
            .map(|qi| env.sample_query(&mut qrng, format!("sim-{iteration}-{qi}")))
            .collect();

        // rollouts: indexed, order-independent, reduced in fixed order
        let policy_ref = &policy;
        let rollout_results: Vec<(usize, ToyTrajectory, f64)> = (0..queries.len()
            * config.group_size)
            .into_par_iter()
            .map(|flat| {
                let qi = flat / config.group_size;
                let si = flat % config.group_size;
                let query = &queries[qi];
                let doc = &env.docs[query.doc_idx];
                let mut rng =
                    ChaCha20Rng::seed_from_u64(rollout_seed(seed, iteration, qi, si));
                let traj =
                    sample_trajectory(policy_ref, doc, &query.targets, config.max_select, &mut rng);
                let pred = PageSet::from_pages(traj.picks.iter().map(|&p| p as u32 + 1));
                let reward = reward_localization(&pred, &query.gt_pages)
                    .map(|o| o.value)
                    .unwrap_or(0.0);
                (qi, traj, reward)
            })
            .collect();

        // group by query, standardize advantages
        let mut rollouts: Vec<Rollout> = Vec::with_capacity(rollout_results.len());
        for qi in 0..queries.len() {
            let group: Vec<&(usize, ToyTrajectory, f64)> = rollout_results
                .iter()
                .filter(|(i, _, _)| *i == qi)
                .collect();
            let rewards: Vec<f64> = group.iter().map(|(_, _, r)| *r).collect();
            let advantages = standardize_advantages(&rewards)?;
            for ((_, traj, reward), adv) in group.into_iter().zip(advantages) {
                rollouts.push(Rollout {
                    logp_old: traj.step_logps.iter().sum(),
                    traj: traj.clone(),
                    query: queries[qi].clone(),
                    reward: *reward,
                    advantage: adv,
                });
            }
        }

        let mean_reward =
            rollouts.iter().map(|r| r.reward).sum::<f64>() / rollouts.len() as f64;

        // tracking metrics from the rollout batch
        let all_logps: Vec<f64> = rollouts
            .iter()
            .flat_map(|r| r.traj.step_logps.iter().copied())
            .map(|lp| lp.min(0.0))
            .collect();
        let ppl = crate::metrics::perplexity(&all_logps).unwrap_or(f64::NAN);
        let all_scores: Vec<Vec<f64>> = rollouts
            .iter()
            .flat_map(|r| r.traj.step_scores.iter().cloned())
            .filter(|s| s.len() >= 2)
            .collect();
        let self_certainty = crate::metrics::self_certainty(&all_scores).unwrap_or(f64::NAN);

        // gradient ascent on the frozen batch
        let mut last_objective = 0.0;
        for _ in 0..config.inner_epochs.max(1) {
            let mut grad = [0.0; FEATURE_DIM];
            last_objective =
                batch_objective(&policy, &reference, env, &rollouts, config, Some(&mut grad));
            if !last_objective.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                let log = TrainingLog {
                    config: config.clone(),
                    seed,
                    rows,
                    final_policy: policy,
                };
                return Err(GrpoError::DivergenceDetected {
                    iteration,
                    log: Box::new(log),
                });
            }
            for d in 0..FEATURE_DIM {
                policy.theta[d] += config.learning_rate * grad[d];
            }
        }

        // mean per-state KL of the updated policy against the reference
        let kl = rollouts
            .iter()
            .map(|r| {
                replay_kl(
                    &policy,
                    &reference,
                    &env.docs[r.query.doc_idx],
                    &r.query.targets,
                    &r.traj,
                    None,
                )
            })
            .sum::<f64>()
            / rollouts.len() as f64;

        rows.push(TrainLogRow {
            iteration,
            mean_reward,
            kl,
            objective: last_objective,
            ppl,
            self_certainty,
        });
    }

    Ok(TrainingLog {
        config: config.clone(),
        seed,
        rows,
        final_policy: policy,
    })
}

/// Monte-Carlo mean localization reward of the uniform (theta = 0) policy.
pub fn uniform_baseline(env: &SimEnv, samples: usize, seed: u64) -> f64 {
    let policy = ToyPolicy::zeros();
    let mut total = 0.0;
    for i in 0..samples {
        let mut rng = ChaCha20Rng::seed_from_u64(rollout_seed(seed, i, 0, 0));
        let query = env.sample_query(&mut rng, format!("baseline-{i}"));
        let doc = &env.docs[query.doc_idx];
        let traj = sample_trajectory(&policy, doc, &query.targets, 8, &mut rng);
        let pred = PageSet::from_pages(traj.picks.iter().map(|&p| p as u32 + 1));
        total += reward_localization(&pred, &query.gt_pages)
            .map(|o| o.value)
            .unwrap_or(0.0);
    }
    total / samples as f64
}

/// Central finite-difference check of the analytic batch gradient at the
/// current policy. Returns the max relative error across dimensions.
pub fn gradient_check(config: &GrpoConfig, env: &SimEnv, seed: u64) -> f64 {
    let policy = ToyPolicy {
        theta: [0.3, 0.8, -0.2, 0.1],
    };
    let reference = ToyPolicy {
        theta: [0.1, 0.4, 0.0, 0.0],
    };
    let mut qrng = ChaCha20Rng::seed_from_u64(seed);
    let queries: Vec<SimQuery> = (0..config.queries_per_iter)
        .map(|qi| env.sample_query(&mut qrng, format!("gc-{qi}")))
        .collect();
    let mut rollouts = Vec::new();
    for (qi, query) in queries.iter().enumerate() {
        let doc = &env.docs[query.doc_idx];
        let mut rewards = Vec::new();
        let mut trajs = Vec::new();
        for si in 0..config.group_size {
            let mut rng = ChaCha20Rng::seed_from_u64(rollout_seed(seed, 0, qi, si));
            let traj = sample_trajectory(&policy, doc, &query.targets, config.max_select, &mut rng);
            let pred = PageSet::from_pages(traj.picks.iter().map(|&p| p as u32 + 1));
            rewards.push(
                reward_localization(&pred, &query.gt_pages)
                    .map(|o| o.value)
                    .unwrap_or(0.0),
            );
            trajs.push(traj);
        }
        let advantages = standardize_advantages(&rewards).unwrap();
        for ((traj, reward), adv) in trajs.into_iter().zip(rewards).zip(advantages) {
            rollouts.push(Rollout {
                logp_old: traj.step_logps.iter().sum(),
                traj,
                query: query.clone(),
                reward,
                advantage: adv,
            });
        }
    }
    // the sampled logp_old came from the same policy, so ratios sit at 1 and
    // the objective is smooth in a neighborhood
    let mut grad = [0.0; FEATURE_DIM];
    batch_objective(&policy, &reference, env, &rollouts, config, Some(&mut grad));
    let h = 1e-5;
    let mut max_rel_err: f64 = 0.0;
    for d in 0..FEATURE_DIM {
        let mut plus = policy.clone();
        plus.theta[d] += h;
        let mut minus = policy.clone();
        minus.theta[d] -= h;
        let fd = (batch_objective(&plus, &reference, env, &rollouts, config, None)
            - batch_objective(&minus, &reference, env, &rollouts, config, None))
            / (2.0 * h);
        let denom = grad[d].abs().max(fd.abs()).max(1e-8);
        max_rel_err = max_rel_err.max((grad[d] - fd).abs() / denom);
    }
    max_rel_err
}

/// Render one or more named series as an SVG line chart. Plot output only,
/// no interactivity.
pub fn render_curves_svg(series: &[(&str, Vec<f64>)], title: &str) -> String {
    let width = 720.0;
    let height = 360.0;
    let margin = 50.0;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    let mut max_len = 1usize;
    for (_, values) in series {
        for v in values {
            if v.is_finite() {
                min_y = min_y.min(*v);
                max_y = max_y.max(*v);
            }
        }
        max_len = max_len.max(values.len());
    }
    if !min_y.is_finite() {
        min_y = 0.0;
        max_y = 1.0;
    }
    if (max_y - min_y).abs() < 1e-12 {
        max_y = min_y + 1.0;
    }
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{title}</text>\n",
        width / 2.0
    );
    svg.push_str(&format!(
        "<line x1=\"{margin}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n\
         <line x1=\"{margin}\" y1=\"{margin}\" x2=\"{margin}\" y2=\"{}\" stroke=\"#333\"/>\n",
        height - margin,
        width - margin,
        height - margin,
        height - margin
    ));
    for (si, (name, values)) in series.iter().enumerate() {
        if values.is_empty() {
            continue;
        }
        let color = colors[si % colors.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| {
                let x = margin + (width - 2.0 * margin) * i as f64 / (max_len.max(2) - 1) as f64;
                let y = height - margin - (height - 2.0 * margin) * (v - min_y) / (max_y - min_y);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            width - margin + 4.0 - 60.0,
            margin + 16.0 * si as f64
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{margin}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">min {min_y:.4}  max {max_y:.4}</text>\n",
        height - margin + 24.0
    ));
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardize_worked_example() {
        let adv = standardize_advantages(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let expected = [1.7321, -0.5774, -0.5774, -0.5774];
        for (a, e) in adv.iter().zip(expected) {
            assert!((a - e).abs() < 1e-4, "{a} vs {e}");
        }
    }

    #[test]
    fn standardize_degenerate_group() {
        assert_eq!(
            standardize_advantages(&[0.5, 0.5, 0.5, 0.5]).unwrap(),
            vec![0.0; 4]
        );
    }

    #[test]
    fn standardize_rejects_small_groups() {
        assert!(matches!(
            standardize_advantages(&[1.0]),
            Err(GrpoError::GroupTooSmall(1))
        ));
    }

    #[test]
    fn importance_ratio_cases() {
        assert_eq!(importance_ratio(&[-1.0, -2.0], &[-1.0, -2.0]).unwrap(), 1.0);
        let ln2 = 2.0f64.ln();
        let r = importance_ratio(&[-1.0 + ln2, -2.0 + ln2, -0.5 + ln2], &[-1.0, -2.0, -0.5]).unwrap();
        assert!((r - 8.0).abs() < 1e-9);
        assert!(matches!(
            importance_ratio(&[0.0], &[0.0, 0.0]),
            Err(GrpoError::LengthMismatch(1, 2))
        ));
        assert!(matches!(
            importance_ratio(&[f64::NAN], &[0.0]),
            Err(GrpoError::NonFiniteLogProb)
        ));
    }

    #[test]
    fn clipped_objective_cases() {
        assert_eq!(clipped_objective(1.0, 2.0, 0.2), 2.0);
        assert!((clipped_objective(1.5, 1.0, 0.2) - 1.2).abs() < 1e-12);
        assert!((clipped_objective(0.5, -1.0, 0.2) - (-0.8)).abs() < 1e-12);
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_penalty(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let kl = kl_penalty(&[0.9, 0.1], &[0.5, 0.5]).unwrap();
        let expected = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.3681).abs() < 1e-4);
        assert!(matches!(
            kl_penalty(&[0.5, 0.5], &[1.0, 0.0]),
            Err(GrpoError::SupportMismatch)
        ));
    }

    #[test]
    fn sim_env_deterministic() {
        let a = make_sim_env(7, 20, 10);
        let b = make_sim_env(7, 20, 10);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn sim_query_gt_is_construction() {
        let env = make_sim_env(7, 5, 10);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let q = env.sample_query(&mut rng, "q".into());
        let doc = &env.docs[q.doc_idx];
        for page_no in q.gt_pages.iter() {
            assert!(doc.pages[(page_no - 1) as usize].contains(&q.targets[0]));
        }
        assert!(!q.gt_pages.is_empty());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let env = make_sim_env(11, 6, 8);
        let config = GrpoConfig {
            queries_per_iter: 4,
            group_size: 4,
            ..GrpoConfig::default()
        };
        let err = gradient_check(&config, &env, 42);
        assert!(err < 1e-4, "max relative gradient error {err}");
    }

    #[test]
    fn short_training_run_is_reproducible() {
        let env = make_sim_env(7, 5, 6);
        let config = GrpoConfig {
            iterations: 5,
            queries_per_iter: 4,
            group_size: 4,
            ..GrpoConfig::default()
        };
        let a = train_toy(&config, &env, 1).unwrap();
        let b = train_toy(&config, &env, 1).unwrap();
        assert_eq!(
            serde_json::to_string(&a.rows).unwrap(),
            serde_json::to_string(&b.rows).unwrap()
        );
        assert_eq!(a.final_policy.theta, b.final_policy.theta);
    }

    #[test]
    fn huge_beta_pins_policy_to_reference() {
        let env = make_sim_env(7, 5, 6);
        let config = GrpoConfig {
            iterations: 30,
            queries_per_iter: 4,
            group_size: 4,
            beta_kl: 1e6,
            learning_rate: 1e-7,
            ref_sync_every: 0, // never resync: reference stays at the initial policy
            ..GrpoConfig::default()
        };
        // ref_sync_every = 0 means the reference is the initial snapshot
        let log = train_toy(&config, &env, 1).unwrap();
        let final_kl = log.rows.last().unwrap().kl;
        assert!(final_kl < 1e-3, "kl {final_kl}");
    }
}
