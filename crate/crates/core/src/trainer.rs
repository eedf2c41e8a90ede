//! GRPO training of the factored policy, the staged curriculum, and the
//! diagnostics used to study it (entropy traces, variance decomposition,
//! collapse detection).
//!
//! One step: for every prompt draw a group of rollouts, score them with the
//! active stage's reward, normalize rewards within the group, and take one
//! plain gradient-ascent step on the clipped-ratio surrogate minus a k3 KL
//! penalty toward the reference policy. Only the stages active in the phase
//! (need; need + category; the full path) contribute log-probabilities.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{HierarchicalDecision, Interaction, SpatioTemporalContext, Taxonomy};
use crate::envsim::World;
use crate::numeric::{argmax, compensated_sum, derived_rng, mean, variance};
use crate::policy::{
    Checkpoint, FeatureLayout, HierarchicalPolicy, Params, PolicyError, PolicyMode, SamplingConfig, StateFeatures,
};
use crate::reward::{
    behavior_match_reward, category_reward, combine, need_match_reward, token_count, CachedEmbedder, Embedder,
    HashEmbedder, MatchScores, RewardBreakdown, RewardError, RewardParams, Stage,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid curriculum plan: {0}")]
    InvalidPlan(String),
    #[error("checkpoint does not match the world: {0}")]
    Incompatible(String),
    #[error("non-finite gradient at step {step} (prompt {prompt})")]
    NonFiniteGradient { step: u64, prompt: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    /// Rollouts per prompt.
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub prompts_per_step: usize,
    pub seed: u64,
    pub eps_std: f64,
    /// Inclusive range of history lengths for training prompts.
    pub history_min: usize,
    pub history_max: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 16,
            clip_eps: 0.2,
            kl_beta: 0.01,
            learning_rate: 0.05,
            steps: 200,
            prompts_per_step: 8,
            seed: 0,
            eps_std: 1e-6,
            history_min: 1,
            history_max: 10,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return bad("kl_beta must be >= 0");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.prompts_per_step == 0 {
            return bad("prompts_per_step must be at least 1");
        }
        if self.eps_std.is_nan() || self.eps_std <= 0.0 {
            return bad("eps_std must be > 0");
        }
        if self.history_min > self.history_max {
            return bad("history_min exceeds history_max");
        }
        Ok(())
    }
}

/// A_i = (r_i − mean) / max(std, eps_std), population std.
pub fn group_advantages(rewards: &[f64], eps_std: f64) -> Vec<f64> {
    let m = mean(rewards);
    let sd = variance(rewards).sqrt().max(eps_std);
    rewards.iter().map(|r| (r - m) / sd).collect()
}

/// One prompt: a user's history, the context of their next interaction, and
/// that interaction as ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub archetype: usize,
    pub history: Vec<Interaction>,
    pub context: SpatioTemporalContext,
    pub truth: Interaction,
    pub state: StateFeatures,
}

/// Draws `n` episodes; episode `k` uses its own generator derived from
/// `(seed, k)`.
pub fn sample_episodes(world: &World, n: usize, history: (usize, usize), seed: u64) -> Vec<Episode> {
    let layout = FeatureLayout::for_world(world);
    let (lo, hi) = (history.0.min(history.1), history.0.max(history.1));
    (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = derived_rng(seed, &[k as u64]);
            let archetype = rng.gen_range(0..world.archetypes.len());
            let len = rng.gen_range(lo..=hi);
            let mut rec = world.generate_user_with_archetype(String::new(), archetype, len + 1, &mut rng);
            let truth = rec.history.pop().expect("len + 1 >= 1");
            let state = layout.encode(archetype, &truth.context, &rec.history);
            Episode { archetype, history: rec.history, context: truth.context, truth, state }
        })
        .collect()
}

/// Scores one rollout for a stage.
pub trait StageReward: Sync {
    fn score(&self, stage: Stage, episode: &Episode, decision: &HierarchicalDecision, step: u64)
        -> Result<RewardBreakdown, TrainError>;
}

/// Plain closures returning a scalar total also work as rewards.
impl<F> StageReward for F
where
    F: Fn(Stage, &Episode, &HierarchicalDecision, u64) -> f64 + Sync,
{
    fn score(&self, stage: Stage, episode: &Episode, decision: &HierarchicalDecision, step: u64)
        -> Result<RewardBreakdown, TrainError> {
        let total = self(stage, episode, decision, step);
        Ok(RewardBreakdown { r_match: total, r_fmt: 1.0, r_len: 0.0, total, correct: total > 0.0 })
    }
}

/// The verifiable reward applied to policy decisions: ids are turned into
/// taxonomy labels and rendered as the protocol's JSON outputs, so the match,
/// format and length terms are computed exactly as for text outputs. The
/// category term is precomputed for every (prediction, truth) pair.
pub struct TaxonomyReward {
    taxonomy: Taxonomy,
    params: RewardParams,
    category_table: Vec<Vec<f64>>,
}

impl TaxonomyReward {
    pub fn new<E: Embedder + ?Sized>(taxonomy: Taxonomy, params: RewardParams, embedder: &E) -> Result<Self, TrainError> {
        params.validate().map_err(TrainError::InvalidConfig)?;
        let cats = taxonomy.categories();
        let category_table = cats
            .iter()
            .map(|pred| {
                cats.iter()
                    .map(|truth| category_reward(&pred.label, &truth.label, &taxonomy, embedder))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TaxonomyReward { taxonomy, params, category_table })
    }

    /// Hash-embedder instance with the given dimension and seed.
    pub fn with_hash_embedder(taxonomy: Taxonomy, params: RewardParams, dim: usize, seed: u64) -> Result<Self, TrainError> {
        let embedder = CachedEmbedder::new(HashEmbedder::new(dim, seed));
        Self::new(taxonomy, params, &embedder)
    }

    pub fn params(&self) -> &RewardParams {
        &self.params
    }

    /// The JSON outputs a decision corresponds to, for the stages active in
    /// `stage`.
    pub fn render(&self, stage: Stage, d: &HierarchicalDecision) -> Vec<String> {
        let mut out = Vec::new();
        let obj = |key: &str, value: &str| serde_json::json!({ key: value, "reasoning_summary": "" }).to_string();
        if let Some(i) = d.need_id {
            out.push(obj("predicted_intent", &self.taxonomy.needs()[i].label));
        }
        if stage.depth() >= 2 {
            out.push(obj("predicted_category", &self.taxonomy.categories()[d.category_id].label));
        }
        if stage.depth() >= 3 {
            out.push(obj("predicted_behavior", &self.taxonomy.behaviors()[d.behavior_id].label));
        }
        out
    }
}

impl StageReward for TaxonomyReward {
    fn score(&self, stage: Stage, episode: &Episode, d: &HierarchicalDecision, step: u64)
        -> Result<RewardBreakdown, TrainError> {
        let t = &self.taxonomy;
        let truth = &episode.truth;
        let need = d.need_id.map_or(0.0, |i| need_match_reward(&t.needs()[i].label, &t.needs()[truth.need_id].label));
        let category = if stage.depth() >= 2 { self.category_table[d.category_id][truth.category_id] } else { 0.0 };
        let behavior = if stage.depth() >= 3 {
            behavior_match_reward(&t.behaviors()[d.behavior_id].label, &t.behaviors()[truth.behavior_id].label)
        } else {
            0.0
        };
        let scores = MatchScores { need, category, behavior };
        let tokens: usize = self.render(stage, d).iter().map(|s| token_count(s)).sum();
        Ok(combine(stage, scores.for_stage(stage), true, tokens as f64, step as f64, &self.params))
    }
}

/// One row per optimizer step. Probe columns are filled only at the probe
/// marks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub step: u64,
    pub phase: Stage,
    pub mean_reward: f64,
    pub max_reward: f64,
    pub mean_abs_advantage: f64,
    pub entropy_need: f64,
    pub entropy_cat: f64,
    pub entropy_beh: f64,
    pub entropy_total: f64,
    pub kl: f64,
    pub need_acc: Option<f64>,
    pub cat_hr1: Option<f64>,
}

/// What a single update produced, before entropies and probes are attached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub mean_reward: f64,
    pub max_reward: f64,
    pub mean_abs_advantage: f64,
    pub kl: f64,
}

struct PromptResult {
    grad: Params,
    rewards: Vec<f64>,
    abs_adv: Vec<f64>,
    kl: Vec<f64>,
}

/// One GRPO update of `policy` on `prompts`. `step` is the global step
/// counter; it seeds the rollouts and feeds the length reward.
pub fn grpo_step(
    policy: &mut HierarchicalPolicy,
    reference: &HierarchicalPolicy,
    prompts: &[Episode],
    stage: Stage,
    cfg: &GrpoConfig,
    reward: &dyn StageReward,
    step: u64,
) -> Result<StepOutcome, TrainError> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(TrainError::InvalidConfig("no prompts".into()));
    }
    let depth = if policy.mode == PolicyMode::Flat { 1 } else { stage.depth() };
    let sampling = SamplingConfig { n: cfg.group_size, ..policy.sampling };
    let total_rollouts = (prompts.len() * cfg.group_size) as f64;
    let current: &HierarchicalPolicy = policy;

    let results: Vec<Result<PromptResult, TrainError>> = prompts
        .par_iter()
        .enumerate()
        .map(|(p, ep)| {
            let mut rng = derived_rng(cfg.seed, &[step, p as u64]);
            let rollouts = current.sample(&ep.state, &sampling, &mut rng)?;
            let rewards = rollouts
                .iter()
                .map(|r| reward.score(stage, ep, &r.decision, step).map(|b| b.total))
                .collect::<Result<Vec<_>, _>>()?;
            let adv = group_advantages(&rewards, cfg.eps_std);
            let mut grad = Params::zeros_like(&current.params);
            let mut kl = Vec::with_capacity(rollouts.len());
            for (r, a) in rollouts.iter().zip(&adv) {
                let lp = current.stage_logprobs(&ep.state, &r.decision)?;
                let lp_ref = reference.stage_logprobs(&ep.state, &r.decision)?;
                let mut coefs = Vec::with_capacity(depth);
                let mut kl_r = 0.0;
                for k in 0..depth {
                    let ratio = (lp[k] - r.stage_logprobs[k]).exp();
                    let clipped = (a >= &0.0 && ratio > 1.0 + cfg.clip_eps) || (a < &0.0 && ratio < 1.0 - cfg.clip_eps);
                    let surrogate = if clipped { 0.0 } else { a * ratio };
                    // k3 estimator: rho − ln rho − 1 with rho = π_ref/π.
                    let rho = (lp_ref[k] - lp[k]).exp();
                    kl_r += rho - (lp_ref[k] - lp[k]) - 1.0;
                    coefs.push((surrogate - cfg.kl_beta * (1.0 - rho)) / total_rollouts);
                }
                kl.push(kl_r);
                current.accumulate_grad(&ep.state, &r.decision, &coefs, &mut grad)?;
            }
            if !grad.is_finite() {
                return Err(TrainError::NonFiniteGradient { step, prompt: p });
            }
            Ok(PromptResult { grad, abs_adv: adv.iter().map(|a| a.abs()).collect(), rewards, kl })
        })
        .collect();

    // Serialized reduction in prompt order.
    let mut grad = Params::zeros_like(&policy.params);
    let (mut rewards, mut abs_adv, mut kl) = (Vec::new(), Vec::new(), Vec::new());
    for r in results {
        let r = r?;
        grad.axpy(1.0, &r.grad);
        rewards.extend(r.rewards);
        abs_adv.extend(r.abs_adv);
        kl.extend(r.kl);
    }
    if !grad.is_finite() {
        return Err(TrainError::NonFiniteGradient { step, prompt: prompts.len() });
    }
    policy.params.axpy(cfg.learning_rate, &grad);
    Ok(StepOutcome {
        mean_reward: mean(&rewards),
        max_reward: rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_abs_advantage: mean(&abs_adv),
        kl: mean(&kl).max(0.0),
    })
}

/// Held-out episodes probed during training.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub episodes: Vec<Episode>,
}

/// Episodes used for the per-step entropy trace.
const ENTROPY_PROBE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// `None` for the flat policy, which makes no need decision.
    pub need_acc: Option<f64>,
    pub cat_hr1: f64,
}

impl ProbeSet {
    pub fn new(world: &World, size: usize, history: (usize, usize), seed: u64) -> Self {
        // Offset the seed so probes never coincide with training prompts.
        ProbeSet { episodes: sample_episodes(world, size, history, splitmix_tag(seed, 0x70726f6265)) }
    }

    /// Greedy need accuracy and top-1 hit rate of the category marginal.
    pub fn probe(&self, policy: &HierarchicalPolicy) -> ProbeResult {
        let rows: Vec<(bool, bool)> = self
            .episodes
            .par_iter()
            .map(|ep| {
                let need_hit = policy.mode == PolicyMode::Hierarchical
                    && policy.greedy(&ep.state).need_id == Some(ep.truth.need_id);
                let cat_hit = argmax(&policy.category_marginal(&ep.state)) == ep.truth.category_id;
                (need_hit, cat_hit)
            })
            .collect();
        let n = rows.len().max(1) as f64;
        let need = rows.iter().filter(|r| r.0).count() as f64 / n;
        let cat = rows.iter().filter(|r| r.1).count() as f64 / n;
        ProbeResult { need_acc: (policy.mode == PolicyMode::Hierarchical).then_some(need), cat_hr1: cat }
    }

    /// Mean per-stage entropies over the first episodes of the set.
    pub fn entropy(&self, policy: &HierarchicalPolicy) -> [f64; 4] {
        let eps = &self.episodes[..self.episodes.len().min(ENTROPY_PROBE)];
        let reports: Vec<_> = eps.par_iter().map(|ep| policy.entropy(&ep.state)).collect();
        let avg = |f: fn(&crate::policy::EntropyReport) -> f64| {
            (compensated_sum(reports.iter().map(f)) / reports.len().max(1) as f64).max(0.0)
        };
        [avg(|r| r.need), avg(|r| r.category), avg(|r| r.behavior), avg(|r| r.total)]
    }
}

fn splitmix_tag(seed: u64, tag: u64) -> u64 {
    crate::numeric::splitmix64(seed ^ tag)
}

/// Steps (1-based within the phase) at which the probe runs: 20/40/60/80/100%.
pub fn probe_marks(steps: usize) -> Vec<usize> {
    let mut marks: Vec<usize> = (1..=5).map(|k| (steps * k).div_ceil(5)).filter(|m| *m > 0).collect();
    marks.dedup();
    marks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub stage: Stage,
    pub config: GrpoConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOutcome {
    pub stage: Stage,
    pub checkpoint: Checkpoint,
    pub trajectory: Vec<TrainStats>,
    /// Probe of the checkpoint the phase started from.
    pub initial_probe: ProbeResult,
    pub final_probe: ProbeResult,
}

fn check_compatible(ck: &Checkpoint, world: &World) -> Result<(), TrainError> {
    if ck.policy.compatible_with(world) {
        Ok(())
    } else {
        Err(TrainError::Incompatible(format!(
            "policy has {} needs / {} categories / {} behaviors / φ dim {}",
            ck.policy.n_needs, ck.policy.n_categories, ck.policy.n_behaviors, ck.policy.feature_dim
        )))
    }
}

/// Runs one phase from `initial`. The KL reference is `reference` when
/// given, else the phase's initial policy. Prompts for global step `t` are
/// drawn from `(config.seed, t)`.
pub fn run_phase(
    phase: &PhaseSpec,
    initial: &Checkpoint,
    world: &World,
    probe: &ProbeSet,
    reward: &dyn StageReward,
    reference: Option<&HierarchicalPolicy>,
) -> Result<PhaseOutcome, TrainError> {
    check_compatible(initial, world)?;
    phase.config.validate()?;
    let initial_probe = probe.probe(&initial.policy);
    if phase.config.steps == 0 {
        return Ok(PhaseOutcome {
            stage: phase.stage,
            checkpoint: initial.clone(),
            trajectory: Vec::new(),
            initial_probe,
            final_probe: initial_probe,
        });
    }
    let reference = reference.cloned().unwrap_or_else(|| initial.policy.clone());
    let cfg = &phase.config;
    let marks = probe_marks(cfg.steps);
    let mut policy = initial.policy.clone();
    let mut step = initial.global_step;
    let mut trajectory = Vec::with_capacity(cfg.steps);
    let mut final_probe = initial_probe;
    for k in 1..=cfg.steps {
        let prompts = sample_episodes(
            world,
            cfg.prompts_per_step,
            (cfg.history_min, cfg.history_max),
            derived_rng(cfg.seed, &[0x7072_6f6d, step]).gen(),
        );
        let out = grpo_step(&mut policy, &reference, &prompts, phase.stage, cfg, reward, step)?;
        step += 1;
        let [entropy_need, entropy_cat, entropy_beh, entropy_total] = probe.entropy(&policy);
        let probed = marks.contains(&k).then(|| probe.probe(&policy));
        if let Some(p) = probed {
            final_probe = p;
        }
        trajectory.push(TrainStats {
            step,
            phase: phase.stage,
            mean_reward: out.mean_reward,
            max_reward: out.max_reward,
            mean_abs_advantage: out.mean_abs_advantage,
            entropy_need,
            entropy_cat,
            entropy_beh,
            entropy_total,
            kl: out.kl,
            need_acc: probed.and_then(|p| p.need_acc),
            cat_hr1: probed.map(|p| p.cat_hr1),
        });
        log::debug!("phase={} step={} reward={:.4} H={:.4}", phase.stage.as_str(), step, out.mean_reward, entropy_total);
    }
    let mut checkpoint = initial.clone();
    checkpoint.policy = policy;
    checkpoint.global_step = step;
    checkpoint.stage = Some(phase.stage.as_str().to_string());
    Ok(PhaseOutcome { stage: phase.stage, checkpoint, trajectory, initial_probe, final_probe })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlReference {
    PhaseInitial,
    GlobalInitial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    pub phases: Vec<PhaseSpec>,
    pub mode: PolicyMode,
    pub kl_reference: KlReference,
    /// Permits phase orders other than need → category → full_path.
    pub allow_reorder: bool,
    pub sampling: SamplingConfig,
    pub reward: RewardParams,
    pub embed_dim: usize,
    pub embed_seed: u64,
    pub probe_size: usize,
    pub probe_seed: u64,
}

impl CurriculumPlan {
    /// need → category → full_path, `steps` each.
    pub fn standard(steps: usize, seed: u64) -> Self {
        let phases = Stage::ALL
            .iter()
            .enumerate()
            .map(|(k, s)| PhaseSpec { stage: *s, config: GrpoConfig { steps, seed: seed.wrapping_add(k as u64), ..Default::default() } })
            .collect();
        CurriculumPlan {
            phases,
            mode: PolicyMode::Hierarchical,
            kl_reference: KlReference::PhaseInitial,
            allow_reorder: false,
            sampling: SamplingConfig::default(),
            reward: RewardParams::default(),
            embed_dim: 256,
            embed_seed: 0,
            probe_size: 512,
            probe_seed: seed,
        }
    }

    /// Ablation: straight to the full-path phase.
    pub fn full_path_only(steps: usize, seed: u64) -> Self {
        let mut plan = Self::standard(steps, seed);
        plan.phases.drain(..2);
        plan.phases[0].config.seed = seed;
        plan.allow_reorder = true;
        plan
    }

    pub fn is_ablation(&self) -> bool {
        self.phases.iter().map(|p| p.stage).ne(Stage::ALL.iter().copied())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.phases.is_empty() {
            return Err(TrainError::InvalidPlan("no phases".into()));
        }
        if !self.allow_reorder {
            for w in self.phases.windows(2) {
                if w[1].stage.depth() <= w[0].stage.depth() {
                    return Err(TrainError::InvalidPlan(format!(
                        "phase {} may not follow {} (set allow_reorder for ablations)",
                        w[1].stage.as_str(),
                        w[0].stage.as_str()
                    )));
                }
            }
        }
        for p in &self.phases {
            p.config.validate()?;
        }
        self.sampling.validate()?;
        self.reward.validate().map_err(TrainError::InvalidConfig)?;
        if self.probe_size == 0 {
            return Err(TrainError::InvalidPlan("probe_size must be at least 1".into()));
        }
        Ok(())
    }

    fn history_range(&self) -> (usize, usize) {
        let c = &self.phases[0].config;
        (c.history_min, c.history_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumOutcome {
    pub checkpoint: Checkpoint,
    pub trajectory: Vec<TrainStats>,
    pub phases: Vec<PhaseOutcome>,
}

/// Chains the plan's phases; each phase starts from the previous phase's
/// checkpoint. Starts from a uniform policy when `initial` is `None`.
pub fn run_curriculum(plan: &CurriculumPlan, world: &World, initial: Option<Checkpoint>) -> Result<CurriculumOutcome, TrainError> {
    plan.validate()?;
    let reward = TaxonomyReward::with_hash_embedder(world.taxonomy.clone(), plan.reward.clone(), plan.embed_dim, plan.embed_seed)?;
    let probe = ProbeSet::new(world, plan.probe_size, plan.history_range(), plan.probe_seed);
    let start = initial.unwrap_or_else(|| Checkpoint::new(HierarchicalPolicy::for_world(world, plan.mode, plan.sampling)));
    check_compatible(&start, world)?;
    let global_ref = start.policy.clone();
    let mut current = start.clone();
    let mut trajectory = Vec::new();
    let mut phases = Vec::with_capacity(plan.phases.len());
    for phase in &plan.phases {
        let reference = match plan.kl_reference {
            KlReference::PhaseInitial => None,
            KlReference::GlobalInitial => Some(&global_ref),
        };
        let outcome = run_phase(phase, &current, world, &probe, &reward, reference)?;
        log::info!(
            "phase {} done at step {}: cat_hr1={:.4}",
            phase.stage.as_str(),
            outcome.checkpoint.global_step,
            outcome.final_probe.cat_hr1
        );
        current = outcome.checkpoint.clone();
        trajectory.extend(outcome.trajectory.iter().cloned());
        phases.push(outcome);
    }
    if plan.phases.iter().all(|p| p.config.steps == 0) {
        return Ok(CurriculumOutcome { checkpoint: start, trajectory, phases });
    }
    let mut checkpoint = current;
    checkpoint.metadata = curriculum_metadata(plan);
    Ok(CurriculumOutcome { checkpoint, trajectory, phases })
}

fn curriculum_metadata(plan: &CurriculumPlan) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let names: Vec<&str> = plan.phases.iter().map(|p| p.stage.as_str()).collect();
    m.insert("phases".into(), names.join(","));
    m.insert("ablation".into(), plan.is_ablation().to_string());
    m.insert(
        "kl_reference".into(),
        match plan.kl_reference {
            KlReference::PhaseInitial => "phase_initial",
            KlReference::GlobalInitial => "global_initial",
        }
        .into(),
    );
    m
}

/// Writes the stats trajectory as CSV. Probe columns are empty off the marks.
pub fn write_stats_csv<W: Write>(w: W, stats: &[TrainStats]) -> Result<(), TrainError> {
    #[derive(Serialize)]
    struct Row<'a> {
        step: u64,
        phase: &'a str,
        mean_reward: f64,
        entropy_need: f64,
        entropy_cat: f64,
        entropy_beh: f64,
        kl: f64,
        need_acc: Option<f64>,
        cat_hr1: Option<f64>,
    }
    let mut wr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| TrainError::Io(e.to_string());
    if stats.is_empty() {
        wr.write_record(["step", "phase", "mean_reward", "entropy_need", "entropy_cat", "entropy_beh", "kl", "need_acc", "cat_hr1"])
            .map_err(io)?;
    }
    for s in stats {
        wr.serialize(Row {
            step: s.step,
            phase: s.phase.as_str(),
            mean_reward: s.mean_reward,
            entropy_need: s.entropy_need,
            entropy_cat: s.entropy_cat,
            entropy_beh: s.entropy_beh,
            kl: s.kl,
            need_acc: s.need_acc,
            cat_hr1: s.cat_hr1,
        })
        .map_err(io)?;
    }
    wr.flush().map_err(|e| TrainError::Io(e.to_string()))
}

/// One observation for the variance decomposition: a behavior-level value
/// together with the (category, need, state) it was produced under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSample {
    pub value: f64,
    pub category: usize,
    pub need: usize,
    pub state: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceDecomposition {
    /// E[Var(B | C, I, S)]
    pub intra: f64,
    /// Var(E[B | C, I, S])
    pub inter: f64,
    pub total: f64,
}

/// Splits the population variance of the values into within-group and
/// between-group parts, grouping by (category, need, state). Groups are
/// weighted by their share of the sample.
pub fn variance_decomposition(samples: &[PathSample]) -> Result<VarianceDecomposition, TrainError> {
    if samples.len() < 2 {
        return Err(TrainError::TooFewSamples { needed: 2, got: samples.len() });
    }
    let mut groups: BTreeMap<(usize, usize, usize), Vec<f64>> = BTreeMap::new();
    for s in samples {
        groups.entry((s.category, s.need, s.state)).or_default().push(s.value);
    }
    let n = samples.len() as f64;
    let all: Vec<f64> = samples.iter().map(|s| s.value).collect();
    let grand = mean(&all);
    let intra = compensated_sum(groups.values().map(|g| g.len() as f64 / n * variance(g)));
    let inter = compensated_sum(groups.values().map(|g| {
        let d = mean(g) - grand;
        g.len() as f64 / n * d * d
    }));
    Ok(VarianceDecomposition { intra, inter, total: variance(&all) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub collapsed: bool,
    /// Index of the last entry of the first window whose mean fell below
    /// the floor.
    pub first_crossing: Option<usize>,
}

/// Flags collapse when the mean over some window of `window` consecutive
/// entropies is below `floor`. Trajectories shorter than the window are
/// averaged whole.
pub fn collapse_monitor(entropies: &[f64], floor: f64, window: usize) -> CollapseReport {
    let window = window.max(1);
    if entropies.is_empty() {
        return CollapseReport { collapsed: false, first_crossing: None };
    }
    let w = window.min(entropies.len());
    let mut sum = compensated_sum(entropies[..w].iter().copied());
    let mut idx = None;
    if sum / (w as f64) < floor {
        idx = Some(w - 1);
    } else {
        for end in w..entropies.len() {
            sum += entropies[end] - entropies[end - w];
            // Re-sum periodically to keep the running total exact enough.
            if end % 256 == 0 {
                sum = compensated_sum(entropies[end + 1 - w..=end].iter().copied());
            }
            if sum / (w as f64) < floor {
                idx = Some(end);
                break;
            }
        }
    }
    CollapseReport { collapsed: idx.is_some(), first_crossing: idx }
}

/// [`collapse_monitor`] on the total-entropy column; the crossing is
/// reported as that row's global step.
pub fn collapse_in_trajectory(stats: &[TrainStats], floor: f64, window: usize) -> (CollapseReport, Option<u64>) {
    let h: Vec<f64> = stats.iter().map(|s| s.entropy_total).collect();
    let r = collapse_monitor(&h, floor, window);
    (r, r.first_crossing.map(|i| stats[i].step))
}
