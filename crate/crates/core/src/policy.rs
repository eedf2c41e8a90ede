//! Factored log-linear policy over the decision path.
//!
//! The hierarchical mode scores P(need | s), P(category | need, s) and
//! P(behavior | category, need, s) with one weight matrix per stage. The
//! category head keeps a separate φ block per need (the need selects which
//! block scores the state); the behavior head takes the chosen need and
//! category as extra one-hot columns. The behavior stage is
//! always restricted to the chosen category's behaviors so sampled paths are
//! consistent with the taxonomy. The flat mode is the single-stage ablation
//! P(behavior | s) over every behavior.
//!
//! All probabilities are taken at the sampling temperature, so log-probs,
//! gradients and entropies describe the distribution rollouts are drawn from
//! (before nucleus truncation).

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{HierarchicalDecision, Interaction, LocationType, SpatioTemporalContext};
use crate::envsim::World;
use crate::numeric::{argmax, entropy, masked_softmax};

/// Below this temperature sampling is greedy.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("{what} id {id} out of range (size {size})")]
    OutOfRange { what: &'static str, id: usize, size: usize },
    #[error("decision has no need but the policy is hierarchical")]
    MissingNeed,
    #[error("behavior {behavior} does not belong to category {category}")]
    InconsistentPath { category: usize, behavior: usize },
    #[error("category {category} is outside the support of need {need}")]
    Unsupported { need: usize, category: usize },
    #[error("state has dimension {found}, expected {expected}")]
    StateDimension { expected: usize, found: usize },
    #[error("invalid sampling config: {0}")]
    InvalidSampling(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub n: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { temperature: 0.6, top_p: 0.95, n: 16 }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PolicyError::InvalidSampling("temperature must be > 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(PolicyError::InvalidSampling("top_p must lie in (0, 1]".into()));
        }
        if self.n == 0 {
            return Err(PolicyError::InvalidSampling("n must be at least 1".into()));
        }
        Ok(())
    }
}

/// Layout of φ(s): hour one-hot (24) ++ zone one-hot (5) ++ archetype
/// one-hot ++ (archetype, 6-hour day part, zone) cross one-hot ++ history
/// category histogram ++ bias. The cross block lets a log-linear head
/// express preferences that depend jointly on who, when and where.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub n_archetypes: usize,
    pub n_categories: usize,
}

impl FeatureLayout {
    pub fn for_world(world: &World) -> Self {
        FeatureLayout { n_archetypes: world.archetypes.len(), n_categories: world.taxonomy.n_categories() }
    }

    pub fn dim(&self) -> usize {
        24 + LocationType::ALL.len() + self.n_archetypes + self.n_cross() + self.n_categories + 1
    }

    fn n_cross(&self) -> usize {
        self.n_archetypes * 4 * LocationType::ALL.len()
    }

    pub fn encode(&self, archetype: usize, context: &SpatioTemporalContext, history: &[Interaction]) -> StateFeatures {
        let mut v = vec![0.0; self.dim()];
        v[context.time_bucket as usize] = 1.0;
        v[24 + context.location_type.index()] = 1.0;
        let arch_off = 24 + LocationType::ALL.len();
        if archetype < self.n_archetypes {
            v[arch_off + archetype] = 1.0;
        }
        let cross_off = arch_off + self.n_archetypes;
        if archetype < self.n_archetypes {
            let part = context.time_bucket as usize / 6;
            v[cross_off + (archetype * 4 + part) * LocationType::ALL.len() + context.location_type.index()] = 1.0;
        }
        let hist_off = cross_off + self.n_cross();
        if !history.is_empty() {
            let w = 1.0 / history.len() as f64;
            for it in history {
                if it.category_id < self.n_categories {
                    v[hist_off + it.category_id] += w;
                }
            }
        }
        let last = v.len() - 1;
        v[last] = 1.0;
        StateFeatures(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateFeatures(pub Vec<f64>);

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Parameters (or a gradient) as a list of matrices, one per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Params(pub Vec<Matrix>);

impl Params {
    pub fn zeros_like(other: &Params) -> Self {
        Params(other.0.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect())
    }

    pub fn axpy(&mut self, a: f64, x: &Params) {
        for (m, xm) in self.0.iter_mut().zip(&x.0) {
            for (v, xv) in m.data.iter_mut().zip(&xm.data) {
                *v += a * xv;
            }
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.0.iter_mut().flat_map(|m| m.data.iter_mut()).for_each(|v| *v *= a);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flat_map(|m| m.data.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flat_map(|m| m.data.iter()).all(|v| v.is_finite())
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(|m| m.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|m| m.data.iter().copied()).collect()
    }

    pub fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.0.iter_mut().flat_map(|m| m.data.iter_mut())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    Hierarchical,
    Flat,
}

/// The three decision stages of a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionStage {
    Need,
    Category,
    Behavior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalPolicy {
    pub mode: PolicyMode,
    pub n_needs: usize,
    pub n_categories: usize,
    pub n_behaviors: usize,
    pub feature_dim: usize,
    /// Hierarchical: [need, category, behavior]; flat: [behavior].
    pub params: Params,
    pub behavior_category: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_support: Option<Vec<Vec<bool>>>,
    pub sampling: SamplingConfig,
    #[serde(skip)]
    behavior_masks: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledDecision {
    pub decision: HierarchicalDecision,
    /// Log-probability of each stage's choice (one entry in flat mode).
    pub stage_logprobs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EntropyReport {
    pub need: f64,
    pub category: f64,
    pub behavior: f64,
    pub total: f64,
}

impl HierarchicalPolicy {
    /// Zero-weight (uniform) policy sized for `world`.
    pub fn for_world(world: &World, mode: PolicyMode, sampling: SamplingConfig) -> Self {
        let layout = FeatureLayout::for_world(world);
        HierarchicalPolicy::new(
            mode,
            world.taxonomy.n_needs(),
            world.taxonomy.behavior_categories(),
            world.taxonomy.n_categories(),
            layout.dim(),
            world.category_support.clone(),
            sampling,
        )
    }

    pub fn new(
        mode: PolicyMode,
        n_needs: usize,
        behavior_category: Vec<usize>,
        n_categories: usize,
        feature_dim: usize,
        category_support: Option<Vec<Vec<bool>>>,
        sampling: SamplingConfig,
    ) -> Self {
        let n_behaviors = behavior_category.len();
        let params = match mode {
            PolicyMode::Hierarchical => Params(vec![
                Matrix::zeros(n_needs, feature_dim),
                // One φ block per need: P(category | need, s) has its own
                // context weights for every need.
                Matrix::zeros(n_categories, feature_dim * n_needs),
                Matrix::zeros(n_behaviors, feature_dim + n_needs + n_categories),
            ]),
            PolicyMode::Flat => Params(vec![Matrix::zeros(n_behaviors, feature_dim)]),
        };
        let mut p = HierarchicalPolicy {
            mode,
            n_needs,
            n_categories,
            n_behaviors,
            feature_dim,
            params,
            behavior_category,
            category_support,
            sampling,
            behavior_masks: Vec::new(),
        };
        p.rebuild_masks();
        p
    }

    fn rebuild_masks(&mut self) {
        self.behavior_masks = (0..self.n_categories)
            .map(|c| self.behavior_category.iter().map(|bc| *bc == c).collect())
            .collect();
    }

    /// Number of decision stages the policy scores.
    pub fn n_stages(&self) -> usize {
        match self.mode {
            PolicyMode::Hierarchical => 3,
            PolicyMode::Flat => 1,
        }
    }

    fn effective_temperature(&self) -> f64 {
        self.sampling.temperature.max(GREEDY_TEMPERATURE)
    }

    fn check_state(&self, s: &StateFeatures) -> Result<(), PolicyError> {
        if s.0.len() != self.feature_dim {
            return Err(PolicyError::StateDimension { expected: self.feature_dim, found: s.0.len() });
        }
        Ok(())
    }

    /// Raw scores for one row-block: W[:, :dφ]·φ plus the one-hot columns.
    /// Rows outside `mask` are left at 0; they are masked out downstream.
    /// Row r scores `w[r][offset..offset+dφ]·φ(s)` plus the listed one-hot
    /// columns.
    fn scores(&self, matrix: usize, s: &StateFeatures, offset: usize, onehots: &[usize], mask: Option<&[bool]>) -> Vec<f64> {
        let w = &self.params.0[matrix];
        (0..w.rows)
            .map(|r| {
                if mask.is_some_and(|m| !m[r]) {
                    return 0.0;
                }
                let row = w.row(r);
                let mut acc: f64 = row[offset..offset + self.feature_dim].iter().zip(&s.0).map(|(a, b)| a * b).sum();
                for &col in onehots {
                    acc += row[col];
                }
                acc
            })
            .collect()
    }

    fn scaled(&self, mut scores: Vec<f64>) -> Vec<f64> {
        let t = self.effective_temperature();
        scores.iter_mut().for_each(|x| *x /= t);
        scores
    }

    fn category_mask(&self, need: usize) -> Option<&[bool]> {
        self.category_support.as_ref().map(|m| m[need].as_slice())
    }

    /// Scaled scores and mask for a stage given the upstream choices.
    fn stage_logits(&self, stage: DecisionStage, s: &StateFeatures, need: usize, category: usize) -> (Vec<f64>, Option<&[bool]>) {
        let d = self.feature_dim;
        match (self.mode, stage) {
            (PolicyMode::Hierarchical, DecisionStage::Need) => (self.scaled(self.scores(0, s, 0, &[], None)), None),
            (PolicyMode::Hierarchical, DecisionStage::Category) => {
                let mask = self.category_mask(need);
                (self.scaled(self.scores(1, s, need * d, &[], mask)), mask)
            }
            (PolicyMode::Hierarchical, DecisionStage::Behavior) => {
                let mask = Some(self.behavior_masks[category].as_slice());
                (self.scaled(self.scores(2, s, 0, &[d + need, d + self.n_needs + category], mask)), mask)
            }
            (PolicyMode::Flat, _) => (self.scaled(self.scores(0, s, 0, &[], None)), None),
        }
    }

    /// Probabilities of one stage given upstream choices (ignored where not
    /// applicable).
    pub fn stage_probs(&self, stage: DecisionStage, s: &StateFeatures, need: usize, category: usize) -> Vec<f64> {
        let (logits, mask) = self.stage_logits(stage, s, need, category);
        masked_softmax(&logits, mask)
    }

    fn validate_decision(&self, d: &HierarchicalDecision) -> Result<(), PolicyError> {
        if d.behavior_id >= self.n_behaviors {
            return Err(PolicyError::OutOfRange { what: "behavior", id: d.behavior_id, size: self.n_behaviors });
        }
        if d.category_id >= self.n_categories {
            return Err(PolicyError::OutOfRange { what: "category", id: d.category_id, size: self.n_categories });
        }
        if self.behavior_category[d.behavior_id] != d.category_id {
            return Err(PolicyError::InconsistentPath { category: d.category_id, behavior: d.behavior_id });
        }
        if self.mode == PolicyMode::Hierarchical {
            let need = d.need_id.ok_or(PolicyError::MissingNeed)?;
            if need >= self.n_needs {
                return Err(PolicyError::OutOfRange { what: "need", id: need, size: self.n_needs });
            }
            if let Some(mask) = self.category_mask(need) {
                if !mask[d.category_id] {
                    return Err(PolicyError::Unsupported { need, category: d.category_id });
                }
            }
        }
        Ok(())
    }

    /// (stage, chosen token, need, category) for each scored stage.
    fn stage_choices(&self, d: &HierarchicalDecision) -> Vec<(DecisionStage, usize, usize, usize)> {
        match self.mode {
            PolicyMode::Hierarchical => {
                let need = d.need_id.expect("validated");
                vec![
                    (DecisionStage::Need, need, need, d.category_id),
                    (DecisionStage::Category, d.category_id, need, d.category_id),
                    (DecisionStage::Behavior, d.behavior_id, need, d.category_id),
                ]
            }
            PolicyMode::Flat => vec![(DecisionStage::Behavior, d.behavior_id, 0, d.category_id)],
        }
    }

    /// Per-stage log-probabilities of the decision's choices.
    pub fn stage_logprobs(&self, s: &StateFeatures, d: &HierarchicalDecision) -> Result<Vec<f64>, PolicyError> {
        self.check_state(s)?;
        self.validate_decision(d)?;
        Ok(self
            .stage_choices(d)
            .into_iter()
            .map(|(stage, tok, need, cat)| {
                let (logits, mask) = self.stage_logits(stage, s, need, cat);
                crate::numeric::masked_log_softmax_at(&logits, mask, tok)
            })
            .collect())
    }

    /// Log-probability of the whole path.
    pub fn logprob(&self, s: &StateFeatures, d: &HierarchicalDecision) -> Result<f64, PolicyError> {
        Ok(self.stage_logprobs(s, d)?.iter().sum())
    }

    /// Adds Σ_k coefs[k] · ∇ log π(stage k choice) into `grad`. Stages beyond
    /// `coefs.len()` are skipped.
    pub fn accumulate_grad(
        &self,
        s: &StateFeatures,
        d: &HierarchicalDecision,
        coefs: &[f64],
        grad: &mut Params,
    ) -> Result<(), PolicyError> {
        self.check_state(s)?;
        self.validate_decision(d)?;
        let t = self.effective_temperature();
        let dim = self.feature_dim;
        for (k, (stage, tok, need, cat)) in self.stage_choices(d).into_iter().enumerate() {
            let Some(&coef) = coefs.get(k) else { break };
            if coef == 0.0 {
                continue;
            }
            let matrix = if self.mode == PolicyMode::Flat { 0 } else { k };
            let (offset, onehots): (usize, Vec<usize>) = match (self.mode, stage) {
                (PolicyMode::Hierarchical, DecisionStage::Category) => (need * dim, vec![]),
                (PolicyMode::Hierarchical, DecisionStage::Behavior) => (0, vec![dim + need, dim + self.n_needs + cat]),
                _ => (0, vec![]),
            };
            let probs = self.stage_probs(stage, s, need, cat);
            let g = &mut grad.0[matrix];
            for (r, p) in probs.iter().enumerate() {
                let indicator = if r == tok { 1.0 } else { 0.0 };
                let factor = coef * (indicator - p) / t;
                if factor == 0.0 {
                    continue;
                }
                let row = g.row_mut(r);
                for (gv, x) in row[offset..offset + dim].iter_mut().zip(&s.0) {
                    *gv += factor * x;
                }
                for &col in &onehots {
                    row[col] += factor;
                }
            }
        }
        Ok(())
    }

    /// ∇ log π(decision | s) over all parameters.
    pub fn grad_logprob(&self, s: &StateFeatures, d: &HierarchicalDecision) -> Result<Params, PolicyError> {
        let mut g = Params::zeros_like(&self.params);
        self.accumulate_grad(s, d, &vec![1.0; self.n_stages()], &mut g)?;
        Ok(g)
    }

    /// Draws `cfg.n` decisions: per stage, temperature-scaled softmax, nucleus
    /// truncation at `top_p`, renormalize, draw.
    pub fn sample<R: Rng>(&self, s: &StateFeatures, cfg: &SamplingConfig, rng: &mut R) -> Result<Vec<SampledDecision>, PolicyError> {
        cfg.validate()?;
        self.check_state(s)?;
        let greedy = cfg.temperature < GREEDY_TEMPERATURE;
        let draw = |probs: &[f64], rng: &mut R| if greedy { argmax(probs) } else { nucleus_draw(probs, cfg.top_p, rng) };
        let mut out = Vec::with_capacity(cfg.n);
        for _ in 0..cfg.n {
            let sampled = match self.mode {
                PolicyMode::Hierarchical => {
                    let pn = self.stage_probs(DecisionStage::Need, s, 0, 0);
                    let need = draw(&pn, rng);
                    let pc = self.stage_probs(DecisionStage::Category, s, need, 0);
                    let category = draw(&pc, rng);
                    let pb = self.stage_probs(DecisionStage::Behavior, s, need, category);
                    let behavior = draw(&pb, rng);
                    SampledDecision {
                        decision: HierarchicalDecision::new(need, category, behavior),
                        stage_logprobs: vec![pn[need].ln(), pc[category].ln(), pb[behavior].ln()],
                    }
                }
                PolicyMode::Flat => {
                    let pb = self.stage_probs(DecisionStage::Behavior, s, 0, 0);
                    let behavior = draw(&pb, rng);
                    SampledDecision {
                        decision: HierarchicalDecision {
                            need_id: None,
                            category_id: self.behavior_category[behavior],
                            behavior_id: behavior,
                            reasoning: Vec::new(),
                        },
                        stage_logprobs: vec![pb[behavior].ln()],
                    }
                }
            };
            out.push(sampled);
        }
        Ok(out)
    }

    /// Argmax choice at every stage.
    pub fn greedy(&self, s: &StateFeatures) -> HierarchicalDecision {
        match self.mode {
            PolicyMode::Hierarchical => {
                let need = argmax(&self.stage_probs(DecisionStage::Need, s, 0, 0));
                let category = argmax(&self.stage_probs(DecisionStage::Category, s, need, 0));
                let behavior = argmax(&self.stage_probs(DecisionStage::Behavior, s, need, category));
                HierarchicalDecision::new(need, category, behavior)
            }
            PolicyMode::Flat => {
                let behavior = argmax(&self.stage_probs(DecisionStage::Behavior, s, 0, 0));
                HierarchicalDecision {
                    need_id: None,
                    category_id: self.behavior_category[behavior],
                    behavior_id: behavior,
                    reasoning: Vec::new(),
                }
            }
        }
    }

    /// Exact per-stage entropies. The category and behavior terms are
    /// expectations over upstream choices, so `total` is the entropy of the
    /// whole path distribution.
    pub fn entropy(&self, s: &StateFeatures) -> EntropyReport {
        match self.mode {
            PolicyMode::Flat => {
                let h = entropy(&self.stage_probs(DecisionStage::Behavior, s, 0, 0));
                EntropyReport { need: 0.0, category: 0.0, behavior: h, total: h }
            }
            PolicyMode::Hierarchical => {
                let pn = self.stage_probs(DecisionStage::Need, s, 0, 0);
                let mut r = EntropyReport { need: entropy(&pn), ..Default::default() };
                for (i, pi) in pn.iter().enumerate() {
                    if *pi == 0.0 {
                        continue;
                    }
                    let pc = self.stage_probs(DecisionStage::Category, s, i, 0);
                    r.category += pi * entropy(&pc);
                    for (c, q) in pc.iter().enumerate() {
                        let w = pi * q;
                        if w == 0.0 {
                            continue;
                        }
                        r.behavior += w * entropy(&self.stage_probs(DecisionStage::Behavior, s, i, c));
                    }
                }
                r.total = r.need + r.category + r.behavior;
                r
            }
        }
    }

    /// Marginal distributions at each level. The need marginal is `None` in
    /// flat mode.
    pub fn marginals(&self, s: &StateFeatures) -> Marginals {
        match self.mode {
            PolicyMode::Flat => {
                let behavior = self.stage_probs(DecisionStage::Behavior, s, 0, 0);
                let mut category = vec![0.0; self.n_categories];
                for (b, p) in behavior.iter().enumerate() {
                    category[self.behavior_category[b]] += p;
                }
                Marginals { need: None, category, behavior }
            }
            PolicyMode::Hierarchical => {
                let pn = self.stage_probs(DecisionStage::Need, s, 0, 0);
                let mut category = vec![0.0; self.n_categories];
                let mut behavior = vec![0.0; self.n_behaviors];
                for (i, pi) in pn.iter().enumerate() {
                    if *pi == 0.0 {
                        continue;
                    }
                    let pc = self.stage_probs(DecisionStage::Category, s, i, 0);
                    for (c, q) in pc.iter().enumerate() {
                        let w = pi * q;
                        if w == 0.0 {
                            continue;
                        }
                        category[c] += w;
                        for (b, pb) in self.stage_probs(DecisionStage::Behavior, s, i, c).iter().enumerate() {
                            behavior[b] += w * pb;
                        }
                    }
                }
                Marginals { need: Some(pn), category, behavior }
            }
        }
    }

    /// P(category | s), marginalized over needs in hierarchical mode.
    pub fn category_marginal(&self, s: &StateFeatures) -> Vec<f64> {
        match self.mode {
            PolicyMode::Flat => self.marginals(s).category,
            PolicyMode::Hierarchical => {
                let pn = self.stage_probs(DecisionStage::Need, s, 0, 0);
                let mut category = vec![0.0; self.n_categories];
                for (i, pi) in pn.iter().enumerate() {
                    if *pi == 0.0 {
                        continue;
                    }
                    for (c, q) in self.stage_probs(DecisionStage::Category, s, i, 0).iter().enumerate() {
                        category[c] += pi * q;
                    }
                }
                category
            }
        }
    }

    /// Whether this policy's shapes fit `world`.
    pub fn compatible_with(&self, world: &World) -> bool {
        self.n_needs == world.taxonomy.n_needs()
            && self.n_categories == world.taxonomy.n_categories()
            && self.behavior_category == world.taxonomy.behavior_categories()
            && self.feature_dim == FeatureLayout::for_world(world).dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub need: Option<Vec<f64>>,
    pub category: Vec<f64>,
    pub behavior: Vec<f64>,
}

/// Nucleus draw: keep the smallest prefix of the descending-probability list
/// whose mass reaches `top_p` (plus any tokens tied with the last kept one),
/// renormalize and sample.
pub fn nucleus_draw<R: Rng>(probs: &[f64], top_p: f64, rng: &mut R) -> usize {
    let kept = nucleus_support(probs, top_p);
    let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
    let mut u = rng.gen::<f64>() * mass;
    for &i in &kept {
        if u < probs[i] {
            return i;
        }
        u -= probs[i];
    }
    *kept.last().expect("nucleus is never empty")
}

/// Token ids kept by nucleus truncation, most probable first.
pub fn nucleus_support(probs: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    if top_p >= 1.0 {
        return order;
    }
    let mut cum = 0.0;
    let mut cut = order.len();
    for (k, &i) in order.iter().enumerate() {
        cum += probs[i];
        if cum >= top_p - 1e-12 {
            cut = k + 1;
            break;
        }
    }
    let boundary = probs[order[cut - 1]];
    while cut < order.len() && probs[order[cut]] == boundary {
        cut += 1;
    }
    order.truncate(cut);
    order
}

/// Versioned policy snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Curriculum stage that produced this checkpoint, if any.
    pub stage: Option<String>,
    pub global_step: u64,
    pub policy: HierarchicalPolicy,
    #[serde(default)]
    pub metadata: std::collections::BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(policy: HierarchicalPolicy) -> Self {
        Checkpoint { version: CHECKPOINT_VERSION, stage: None, global_step: 0, policy, metadata: Default::default() }
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<(), PolicyError> {
        serde_json::to_writer(w, self).map_err(|e| PolicyError::Checkpoint(e.to_string()))
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self, PolicyError> {
        let mut ck: Checkpoint = serde_json::from_reader(r).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!("unsupported checkpoint version {}", ck.version)));
        }
        let expected = match ck.policy.mode {
            PolicyMode::Hierarchical => 3,
            PolicyMode::Flat => 1,
        };
        if ck.policy.params.0.len() != expected || ck.policy.behavior_category.len() != ck.policy.n_behaviors {
            return Err(PolicyError::Checkpoint("parameter shapes do not match the policy mode".into()));
        }
        ck.policy.rebuild_masks();
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(mode: PolicyMode, t: f64) -> HierarchicalPolicy {
        // 4 needs, 3 categories, 6 behaviors (two per category), φ dim 3.
        HierarchicalPolicy::new(
            mode,
            4,
            vec![0, 0, 1, 1, 2, 2],
            3,
            3,
            None,
            SamplingConfig { temperature: t, top_p: 1.0, n: 1 },
        )
    }

    fn state() -> StateFeatures {
        StateFeatures(vec![1.0, 0.5, -0.25])
    }

    #[test]
    fn zero_weights_give_uniform_need_stage() {
        let p = small(PolicyMode::Hierarchical, 1.0);
        for i in 0..4 {
            let lp = p.stage_logprobs(&state(), &HierarchicalDecision::new(i, 0, 0)).unwrap();
            assert!((lp[0] - (0.25f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_stage_has_zero_logprob() {
        let mut p = small(PolicyMode::Hierarchical, 1.0);
        p.params.0[0].row_mut(2)[0] = 1000.0;
        let lp = p.stage_logprobs(&state(), &HierarchicalDecision::new(2, 0, 0)).unwrap();
        assert!(lp[0].abs() < 1e-12);
    }

    #[test]
    fn two_candidate_closed_form() {
        // Flat policy over 2 behaviors with scores (1, 0).
        let mut p = HierarchicalPolicy::new(PolicyMode::Flat, 1, vec![0, 0], 1, 1, None, SamplingConfig { temperature: 1.0, top_p: 1.0, n: 1 });
        p.params.0[0].row_mut(0)[0] = 1.0;
        let d = HierarchicalDecision { need_id: None, category_id: 0, behavior_id: 0, reasoning: vec![] };
        let lp = p.logprob(&StateFeatures(vec![1.0]), &d).unwrap();
        let e = std::f64::consts::E;
        assert!((lp - (e / (e + 1.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_and_inconsistent_paths_error() {
        let p = small(PolicyMode::Hierarchical, 1.0);
        assert!(matches!(
            p.logprob(&state(), &HierarchicalDecision::new(9, 0, 0)),
            Err(PolicyError::OutOfRange { what: "need", .. })
        ));
        assert!(matches!(
            p.logprob(&state(), &HierarchicalDecision::new(0, 0, 4)),
            Err(PolicyError::InconsistentPath { .. })
        ));
        let mut d = HierarchicalDecision::new(0, 0, 0);
        d.need_id = None;
        assert_eq!(p.logprob(&state(), &d), Err(PolicyError::MissingNeed));
    }

    #[test]
    fn entropy_cases() {
        let p = small(PolicyMode::Hierarchical, 1.0);
        let h = p.entropy(&state());
        assert!((h.need - 4f64.ln()).abs() < 1e-12);
        assert!((h.category - 3f64.ln()).abs() < 1e-12);
        assert!((h.behavior - 2f64.ln()).abs() < 1e-12);
        let mut q = small(PolicyMode::Hierarchical, 1.0);
        q.params.0[0].row_mut(1)[0] = 1000.0;
        assert!(q.entropy(&state()).need < 1e-6);
        assert!((entropy(&[0.75, 0.25]) - (-0.75 * 0.75f64.ln() - 0.25 * 0.25f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn greedy_sampling_at_tiny_temperature() {
        let mut p = small(PolicyMode::Hierarchical, 1e-9);
        p.params.0[0].row_mut(3)[0] = 0.1;
        p.params.0[1].row_mut(2)[3 * p.feature_dim] = 0.1;
        p.params.0[2].row_mut(5)[0] = 0.1;
        let cfg = SamplingConfig { temperature: 1e-9, top_p: 0.95, n: 5 };
        let out = p.sample(&state(), &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for s in out {
            assert_eq!(s.decision, HierarchicalDecision::new(3, 2, 5));
        }
        assert_eq!(p.greedy(&state()), HierarchicalDecision::new(3, 2, 5));
    }

    #[test]
    fn nucleus_keeps_boundary_ties() {
        assert_eq!(nucleus_support(&[0.5, 0.25, 0.25], 0.6), vec![0, 1, 2]);
        assert_eq!(nucleus_support(&[0.6, 0.3, 0.1], 0.6), vec![0]);
        assert_eq!(nucleus_support(&[0.1, 0.6, 0.3], 0.8), vec![1, 2]);
        assert_eq!(nucleus_support(&[0.0, 1.0], 1.0), vec![1]);
    }

    #[test]
    fn sampling_config_validation() {
        assert!(SamplingConfig::default().validate().is_ok());
        assert_eq!(SamplingConfig::default(), SamplingConfig { temperature: 0.6, top_p: 0.95, n: 16 });
        assert!(SamplingConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(SamplingConfig { top_p: 0.0, ..Default::default() }.validate().is_err());
        assert!(SamplingConfig { n: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn flat_sampling_leaves_need_empty() {
        let p = small(PolicyMode::Flat, 1.0);
        let cfg = SamplingConfig { temperature: 1.0, top_p: 1.0, n: 10 };
        for s in p.sample(&state(), &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap() {
            assert!(s.decision.need_id.is_none());
            assert_eq!(p.behavior_category[s.decision.behavior_id], s.decision.category_id);
            assert_eq!(s.stage_logprobs.len(), 1);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut p = small(PolicyMode::Hierarchical, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        p.params.flat_mut().for_each(|v| *v = rng.gen::<f64>() * 2.0 - 1.0);
        let mut ck = Checkpoint::new(p);
        ck.stage = Some("category".into());
        ck.global_step = 42;
        let mut buf = Vec::new();
        ck.write_json(&mut buf).unwrap();
        let back = Checkpoint::read_json(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
    }
}
