//! Verifiable rewards.
//!
//! Every reward is a deterministic check against ground truth: exact match
//! for needs and behaviors, embedding nearest-candidate match with cosine
//! partial credit for categories, JSON validity, and a decaying length bonus
//! that only pays out for correct answers.

use std::collections::HashMap;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Taxonomy;
use crate::numeric::{dot, l2_norm, splitmix64};

/// Two cosines closer than this count as tied.
const COSINE_TIE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("taxonomy has no categories")]
    EmptyTaxonomy,
    #[error("truth label {0:?} is not a taxonomy category")]
    UnknownTruth(String),
    #[error("embedding: {0}")]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("embedding backend: {0}")]
    Backend(String),
    #[error("embedding has dimension {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("embedding has zero norm")]
    ZeroNorm,
}

/// Maps text to a unit vector. Implementations must be deterministic per text.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

impl<E: Embedder + ?Sized> Embedder for &E {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        (**self).embed(text)
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        (**self).embed_batch(texts)
    }
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        (**self).embed(text)
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        (**self).embed_batch(texts)
    }
}

pub fn l2_normalize(mut v: Vec<f64>) -> Result<Vec<f64>, EmbedError> {
    let n = l2_norm(&v);
    if !(n.is_finite() && n > 0.0) {
        return Err(EmbedError::ZeroNorm);
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Offline embedder: character trigrams of the normalized text, hashed with
/// a seeded FNV-1a into `dim` count buckets, then L2-normalized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    /// `dim` is raised to at least 8.
    pub fn new(dim: usize, seed: u64) -> Self {
        HashEmbedder { dim: dim.max(8), seed }
    }

    fn bucket(&self, gram: &[char]) -> usize {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ splitmix64(self.seed);
        for c in gram {
            let mut buf = [0u8; 4];
            for b in c.encode_utf8(&mut buf).bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        (splitmix64(h) % self.dim as u64) as usize
    }

    /// Padded character trigrams of the normalized text.
    pub fn trigrams(text: &str) -> Vec<[char; 3]> {
        let padded: Vec<char> = format!(" {} ", normalize_text(text)).chars().collect();
        padded.windows(3).map(|w| [w[0], w[1], w[2]]).collect()
    }

    pub fn bucket_counts(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for g in Self::trigrams(text) {
            v[self.bucket(&g)] += 1.0;
        }
        v
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let mut v = self.bucket_counts(text);
        if v.iter().all(|x| *x == 0.0) {
            // Text without any trigram (empty after normalization).
            v[self.bucket(&[])] = 1.0;
        }
        l2_normalize(v)
    }
}

/// Memoizes another embedder's vectors by text.
pub struct CachedEmbedder<E> {
    inner: E,
    memo: RwLock<HashMap<String, Vec<f64>>>,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E) -> Self {
        CachedEmbedder { inner, memo: RwLock::new(HashMap::new()) }
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        if let Some(v) = self.memo.read().expect("embedding memo poisoned").get(text) {
            return Ok(v.clone());
        }
        let v = self.inner.embed(text)?;
        self.memo.write().expect("embedding memo poisoned").insert(text.to_string(), v.clone());
        Ok(v)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Case-folds, trims and collapses internal whitespace.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Whitespace-separated token count.
pub fn token_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// 1 iff `raw_output` is a JSON object carrying every key in
/// `required_keys` with a string value.
pub fn format_reward(raw_output: &str, required_keys: &[&str]) -> f64 {
    let Ok(serde_json::Value::Object(map)) = serde_json::from_str::<serde_json::Value>(raw_output.trim()) else {
        return 0.0;
    };
    let ok = required_keys.iter().all(|k| matches!(map.get(*k), Some(serde_json::Value::String(_))));
    if ok {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w_match: f64,
    pub w_fmt: f64,
    pub w_len: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { w_match: 1.0, w_fmt: 0.2, w_len: 0.1 }
    }
}

impl RewardWeights {
    pub fn scaled(self, k: f64) -> Self {
        RewardWeights { w_match: self.w_match * k, w_fmt: self.w_fmt * k, w_len: self.w_len * k }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Need,
    Category,
    FullPath,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Need, Stage::Category, Stage::FullPath];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Need => "need",
            Stage::Category => "category",
            Stage::FullPath => "full_path",
        }
    }

    /// Number of decision stages (need, category, behavior) the stage covers.
    pub fn depth(self) -> usize {
        match self {
            Stage::Need => 1,
            Stage::Category => 2,
            Stage::FullPath => 3,
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s.trim())
            .ok_or_else(|| format!("unknown stage {s:?} (expected need, category or full_path)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardParams {
    pub need: RewardWeights,
    pub category: RewardWeights,
    pub full_path: RewardWeights,
    /// Length-bonus amplitude α.
    pub alpha: f64,
    /// Decay time constant T, in training steps.
    pub decay_steps: f64,
    pub len_min: f64,
    pub len_max: f64,
    pub eps_std: f64,
    /// Score length per reasoning step (mean step length) instead of once
    /// over the whole output.
    pub per_step: bool,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            need: RewardWeights::default(),
            category: RewardWeights::default(),
            full_path: RewardWeights::default(),
            alpha: 0.5,
            decay_steps: 500.0,
            len_min: 16.0,
            len_max: 256.0,
            eps_std: 1e-6,
            per_step: false,
        }
    }
}

impl RewardParams {
    pub fn weights(&self, stage: Stage) -> RewardWeights {
        match stage {
            Stage::Need => self.need,
            Stage::Category => self.category,
            Stage::FullPath => self.full_path,
        }
    }

    pub fn set_weights(&mut self, w: RewardWeights) {
        self.need = w;
        self.category = w;
        self.full_path = w;
    }

    pub fn validate(&self) -> Result<(), String> {
        for s in Stage::ALL {
            let w = self.weights(s);
            if w.w_match < 0.0 || w.w_fmt < 0.0 || w.w_len < 0.0 {
                return Err(format!("{} weights must be non-negative", s.as_str()));
            }
        }
        if self.len_min.is_nan() || self.len_max.is_nan() || self.len_min >= self.len_max {
            return Err("len_min must be below len_max".into());
        }
        if !(self.alpha >= 0.0 && self.decay_steps > 0.0) {
            return Err("alpha must be >= 0 and decay_steps > 0".into());
        }
        Ok(())
    }
}

/// Decaying length bonus: α·e^(−step/T) on correct answers, scaled down
/// linearly from 1 at `len_min` tokens to 0 at `len_max`.
pub fn length_reward(correct: bool, tokens: f64, step: f64, p: &RewardParams) -> f64 {
    if !correct {
        return 0.0;
    }
    let ramp = (1.0 - (tokens - p.len_min) / (p.len_max - p.len_min)).clamp(0.0, 1.0);
    p.alpha * (-step / p.decay_steps).exp() * ramp
}

pub fn need_match_reward(pred: &str, truth: &str) -> f64 {
    if normalize_text(pred) == normalize_text(truth) {
        1.0
    } else {
        0.0
    }
}

pub fn behavior_match_reward(pred: &str, truth: &str) -> f64 {
    need_match_reward(pred, truth)
}

/// Result of matching free text against a list of candidate labels.
#[derive(Debug, Clone, PartialEq)]
pub struct NearestCandidate {
    pub index: usize,
    pub cosine: f64,
    /// Every candidate within [`COSINE_TIE`] of the best cosine.
    pub tied: Vec<usize>,
    pub cosines: Vec<f64>,
}

pub fn nearest_candidate<E: Embedder + ?Sized>(
    embedder: &E,
    text: &str,
    candidates: &[&str],
) -> Result<Option<NearestCandidate>, EmbedError> {
    if candidates.is_empty() {
        return Ok(None);
    }
    let q = embedder.embed(text)?;
    let vecs = embedder.embed_batch(candidates)?;
    let cosines: Vec<f64> = vecs.iter().map(|v| cosine(&q, v)).collect();
    let mut index = 0;
    for (i, c) in cosines.iter().enumerate() {
        if *c > cosines[index] {
            index = i;
        }
    }
    let best = cosines[index];
    let tied = (0..cosines.len()).filter(|i| best - cosines[*i] <= COSINE_TIE).collect();
    Ok(Some(NearestCandidate { index, cosine: best, tied, cosines }))
}

/// 1.0 when the truth is the taxonomy category closest to `pred`, otherwise
/// the clamped cosine between `pred` and the truth label.
pub fn category_reward<E: Embedder + ?Sized>(
    pred: &str,
    truth_label: &str,
    taxonomy: &Taxonomy,
    embedder: &E,
) -> Result<f64, RewardError> {
    if taxonomy.n_categories() == 0 {
        return Err(RewardError::EmptyTaxonomy);
    }
    let truth = taxonomy
        .category_id(truth_label)
        .ok_or_else(|| RewardError::UnknownTruth(truth_label.to_string()))?;
    let labels: Vec<&str> = taxonomy.categories().iter().map(|c| c.label.as_str()).collect();
    let nearest = nearest_candidate(embedder, pred, &labels)?.expect("non-empty taxonomy");
    if nearest.tied.contains(&truth) {
        return Ok(1.0);
    }
    Ok(nearest.cosines[truth].max(0.0))
}

/// Predicted texts for one scored output; `None` where the output had no
/// prediction for that level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParsedOutputs {
    pub need: Option<String>,
    pub category: Option<String>,
    pub behavior: Option<String>,
    pub format_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truths {
    pub need: String,
    pub category: String,
    pub behavior: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_match: f64,
    pub r_fmt: f64,
    pub r_len: f64,
    pub total: f64,
    pub correct: bool,
}

/// Per-level match scores feeding `r_match`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MatchScores {
    pub need: f64,
    pub category: f64,
    pub behavior: f64,
}

impl MatchScores {
    pub fn for_stage(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Need => self.need,
            Stage::Category => self.category,
            Stage::FullPath => (self.need + self.category + self.behavior) / 3.0,
        }
    }
}

pub fn match_scores<E: Embedder + ?Sized>(
    stage: Stage,
    outputs: &ParsedOutputs,
    truths: &Truths,
    taxonomy: &Taxonomy,
    embedder: &E,
) -> Result<MatchScores, RewardError> {
    let need = outputs.need.as_deref().map_or(0.0, |p| need_match_reward(p, &truths.need));
    let category = match (&outputs.category, stage) {
        (_, Stage::Need) => 0.0,
        (Some(p), _) => category_reward(p, &truths.category, taxonomy, embedder)?,
        (None, _) => 0.0,
    };
    let behavior = match (&outputs.behavior, stage) {
        (Some(p), Stage::FullPath) => behavior_match_reward(p, &truths.behavior),
        _ => 0.0,
    };
    Ok(MatchScores { need, category, behavior })
}

/// Combines precomputed components into a breakdown. `correct` is
/// `r_match > 0`, which gates the length bonus.
pub fn combine(stage: Stage, r_match: f64, format_ok: bool, tokens: f64, step: f64, p: &RewardParams) -> RewardBreakdown {
    let w = p.weights(stage);
    let correct = r_match > 0.0;
    let r_fmt = if format_ok { 1.0 } else { 0.0 };
    let r_len = length_reward(correct, tokens, step, p);
    RewardBreakdown {
        r_match,
        r_fmt,
        r_len,
        total: w.w_match * r_match + w.w_fmt * r_fmt + w.w_len * r_len,
        correct,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn total_reward<E: Embedder + ?Sized>(
    stage: Stage,
    outputs: &ParsedOutputs,
    truths: &Truths,
    tokens: f64,
    step: f64,
    p: &RewardParams,
    taxonomy: &Taxonomy,
    embedder: &E,
) -> Result<RewardBreakdown, RewardError> {
    let scores = match_scores(stage, outputs, truths, taxonomy, embedder)?;
    Ok(combine(stage, scores.for_stage(stage), outputs.format_ok, tokens, step, p))
}
