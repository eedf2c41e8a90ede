//! Ranking metrics (HR@k, NDCG@k with one relevant item), need accuracy and
//! cohort slices.
//!
//! Aggregation works on rank histograms and integer counts, so reports do not
//! depend on example order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::UserRecord;
use crate::envsim::World;
use crate::policy::{FeatureLayout, HierarchicalPolicy, PolicyMode, StateFeatures};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("candidate {0} listed twice")]
    DuplicateCandidate(usize),
    #[error("bad slice definition '{0}'")]
    BadSlice(String),
    #[error("k must be at least 1")]
    ZeroK,
}

/// Candidates ordered most-likely first, plus the single relevant id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedPrediction {
    candidates: Vec<usize>,
    truth: usize,
}

impl RankedPrediction {
    pub fn new(candidates: Vec<usize>, truth: usize) -> Result<Self, EvalError> {
        let mut seen = std::collections::HashSet::with_capacity(candidates.len());
        for c in &candidates {
            if !seen.insert(*c) {
                return Err(EvalError::DuplicateCandidate(*c));
            }
        }
        Ok(RankedPrediction { candidates, truth })
    }

    /// Orders ids by descending probability; ties go to the lower id.
    pub fn from_probabilities(probs: &[f64], truth: usize) -> Self {
        let mut ids: Vec<usize> = (0..probs.len()).collect();
        ids.sort_by(|a, b| probs[*b].total_cmp(&probs[*a]).then(a.cmp(b)));
        RankedPrediction { candidates: ids, truth }
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    pub fn truth(&self) -> usize {
        self.truth
    }

    /// 1-based rank of the truth, if listed.
    pub fn rank(&self) -> Option<usize> {
        self.candidates.iter().position(|c| *c == self.truth).map(|p| p + 1)
    }
}

pub fn hr_at_k(pred: &RankedPrediction, k: usize) -> f64 {
    match pred.rank() {
        Some(r) if k >= 1 && r <= k => 1.0,
        _ => 0.0,
    }
}

/// 1/log2(rank + 1) when the truth is in the top k; the ideal DCG is 1.
pub fn ndcg_at_k(pred: &RankedPrediction, k: usize) -> f64 {
    match pred.rank() {
        Some(r) if k >= 1 && r <= k => gain(r),
        _ => 0.0,
    }
}

fn gain(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Category,
    Behavior,
}

/// Ranks categories or behaviors by the policy's marginal probability at
/// that level.
pub fn rank_candidates(policy: &HierarchicalPolicy, s: &StateFeatures, level: Level, truth: usize) -> RankedPrediction {
    let probs = match level {
        Level::Category => policy.category_marginal(s),
        Level::Behavior => policy.marginals(s).behavior,
    };
    RankedPrediction::from_probabilities(&probs, truth)
}

/// One evaluated next-interaction prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalExample {
    pub user_id: String,
    /// Length of the user's full sequence, target included.
    pub sequence_len: usize,
    /// Predicted and true need; `None` when the model predicts no need.
    pub need: Option<(usize, usize)>,
    pub category: RankedPrediction,
    pub behavior: Option<RankedPrediction>,
}

/// Examples whose sequence length lies in `[min_len, max_len]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceDef {
    pub name: String,
    pub min_len: usize,
    pub max_len: usize,
}

impl SliceDef {
    /// Users with exactly two interactions.
    pub fn cold_start() -> Self {
        SliceDef { name: "cold_start".into(), min_len: 2, max_len: 2 }
    }

    fn contains(&self, ex: &EvalExample) -> bool {
        (self.min_len..=self.max_len).contains(&ex.sequence_len)
    }
}

impl FromStr for SliceDef {
    type Err = EvalError;

    /// `cold_start`, `len=N` or `len=A..B` (inclusive).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "cold_start" {
            return Ok(SliceDef::cold_start());
        }
        let bad = || EvalError::BadSlice(s.to_string());
        let spec = s.strip_prefix("len=").ok_or_else(bad)?;
        let (lo, hi) = match spec.split_once("..") {
            Some((a, b)) => (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?),
            None => {
                let n = spec.parse().map_err(|_| bad())?;
                (n, n)
            }
        };
        if lo > hi {
            return Err(bad());
        }
        Ok(SliceDef { name: s.to_string(), min_len: lo, max_len: hi })
    }
}

impl fmt::Display for SliceDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    #[serde(rename = "hr@1")]
    pub hr_at_1: f64,
    #[serde(rename = "hr@3")]
    pub hr_at_3: f64,
    #[serde(rename = "hr@5")]
    pub hr_at_5: f64,
    #[serde(rename = "ndcg@3")]
    pub ndcg_at_3: f64,
    #[serde(rename = "ndcg@5")]
    pub ndcg_at_5: f64,
}

/// Counts of truth ranks 1..=5 (index 0..5); anything lower or absent
/// contributes nothing to the reported metrics.
#[derive(Debug, Clone, Copy, Default)]
struct RankHistogram {
    top: [u64; 5],
    n: u64,
}

impl RankHistogram {
    fn add(&mut self, p: &RankedPrediction) {
        self.n += 1;
        if let Some(r) = p.rank().filter(|r| *r <= 5) {
            self.top[r - 1] += 1;
        }
    }

    fn metrics(&self) -> Option<RankMetrics> {
        if self.n == 0 {
            return None;
        }
        let n = self.n as f64;
        let hr = |k: usize| self.top[..k].iter().sum::<u64>() as f64 / n;
        let ndcg = |k: usize| (0..k).map(|i| self.top[i] as f64 * gain(i + 1)).sum::<f64>() / n;
        Some(RankMetrics { hr_at_1: hr(1), hr_at_3: hr(3), hr_at_5: hr(5), ndcg_at_3: ndcg(3), ndcg_at_5: ndcg(5) })
    }
}

/// Metrics over one set of examples. Metric fields are `null` when the set
/// (or the level) is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub n_examples: usize,
    pub category: Option<RankMetrics>,
    pub behavior: Option<RankMetrics>,
    pub need_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: SliceReport,
    pub slices: BTreeMap<String, SliceReport>,
}

fn summarize<'a>(examples: impl Iterator<Item = &'a EvalExample>) -> SliceReport {
    let (mut cat, mut beh) = (RankHistogram::default(), RankHistogram::default());
    let (mut n, mut need_n, mut need_hits) = (0usize, 0u64, 0u64);
    for ex in examples {
        n += 1;
        cat.add(&ex.category);
        if let Some(b) = &ex.behavior {
            beh.add(b);
        }
        if let Some((pred, truth)) = ex.need {
            need_n += 1;
            need_hits += (pred == truth) as u64;
        }
    }
    SliceReport {
        n_examples: n,
        category: cat.metrics(),
        behavior: beh.metrics(),
        need_accuracy: (need_n > 0).then(|| need_hits as f64 / need_n as f64),
    }
}

/// Averages metrics over all examples and over each slice.
pub fn evaluate(examples: &[EvalExample], slices: &[SliceDef]) -> Result<EvalReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let overall = summarize(examples.iter());
    let slices = slices
        .iter()
        .map(|s| (s.name.clone(), summarize(examples.iter().filter(|e| s.contains(e)))))
        .collect();
    Ok(EvalReport { overall, slices })
}

/// Turns each record into one example: everything but the last interaction
/// is history, the last one is the target. Records with no interactions are
/// skipped; unknown archetypes leave the archetype features empty.
pub fn policy_examples(policy: &HierarchicalPolicy, world: &World, records: &[UserRecord]) -> Vec<EvalExample> {
    let layout = FeatureLayout::for_world(world);
    records
        .par_iter()
        .filter(|r| !r.history.is_empty())
        .map(|r| {
            let archetype = world.archetype_of(&r.profile).unwrap_or(usize::MAX);
            let (target, history) = r.history.split_last().expect("non-empty");
            let s = layout.encode(archetype, &target.context, history);
            let need = match policy.mode {
                PolicyMode::Hierarchical => policy.greedy(&s).need_id.map(|p| (p, target.need_id)),
                PolicyMode::Flat => None,
            };
            EvalExample {
                user_id: r.user_id.clone(),
                sequence_len: r.history.len(),
                need,
                category: rank_candidates(policy, &s, Level::Category, target.category_id),
                behavior: Some(rank_candidates(policy, &s, Level::Behavior, target.behavior_id)),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(len: usize, cands: Vec<usize>, truth: usize) -> EvalExample {
        EvalExample {
            user_id: String::new(),
            sequence_len: len,
            need: Some((0, 0)),
            category: RankedPrediction::new(cands, truth).unwrap(),
            behavior: None,
        }
    }

    #[test]
    fn hr_and_ndcg_examples() {
        let p = RankedPrediction::new(vec![3, 1, 2, 0], 3).unwrap();
        assert_eq!(hr_at_k(&p, 1), 1.0);
        assert_eq!(ndcg_at_k(&p, 1), 1.0);
        let p = RankedPrediction::new(vec![1, 3, 2, 0], 0).unwrap();
        assert_eq!(hr_at_k(&p, 3), 0.0);
        assert_eq!(ndcg_at_k(&p, 3), 0.0);
        let p = RankedPrediction::new(vec![1, 3], 9).unwrap();
        assert_eq!(hr_at_k(&p, 5), 0.0);
        let p = RankedPrediction::new(vec![1, 3, 2], 3).unwrap();
        assert!((ndcg_at_k(&p, 3) - 0.6309297535714574).abs() < 1e-12);
        assert_eq!(RankedPrediction::new(vec![1, 1], 1), Err(EvalError::DuplicateCandidate(1)));
    }

    #[test]
    fn probability_ranking_and_ties() {
        assert_eq!(RankedPrediction::from_probabilities(&[0.5, 0.3, 0.2], 0).candidates(), &[0, 1, 2]);
        assert_eq!(RankedPrediction::from_probabilities(&[0.25; 4], 0).candidates(), &[0, 1, 2, 3]);
        assert_eq!(RankedPrediction::from_probabilities(&[0.0, 1.0, 0.0], 1).candidates()[0], 1);
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let exs: Vec<_> = (0..10).map(|t| ex(3, vec![t, (t + 1) % 10], t)).collect();
        let r = evaluate(&exs, &[SliceDef::cold_start()]).unwrap();
        let m = r.overall.category.unwrap();
        assert_eq!((m.hr_at_1, m.hr_at_5, m.ndcg_at_3, m.ndcg_at_5), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.overall.need_accuracy, Some(1.0));
        let cold = &r.slices["cold_start"];
        assert_eq!(cold.n_examples, 0);
        assert!(cold.category.is_none() && cold.need_accuracy.is_none());
    }

    #[test]
    fn empty_dataset_is_error() {
        assert_eq!(evaluate(&[], &[]), Err(EvalError::EmptyDataset));
    }

    #[test]
    fn slice_parsing() {
        assert_eq!("cold_start".parse::<SliceDef>().unwrap(), SliceDef::cold_start());
        let s: SliceDef = "len=3..7".parse().unwrap();
        assert_eq!((s.min_len, s.max_len), (3, 7));
        assert!("len=7..3".parse::<SliceDef>().is_err());
        assert!("warm".parse::<SliceDef>().is_err());
    }

    #[test]
    fn null_metrics_serialize_as_null() {
        let r = evaluate(&[ex(2, vec![0], 0)], &["len=9".parse().unwrap()]).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["n_examples"], 1);
        assert_eq!(v["category"]["hr@1"], 1.0);
        assert!(v["slices"]["len=9"]["category"].is_null());
    }
}
