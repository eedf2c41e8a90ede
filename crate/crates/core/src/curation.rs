//! Noise-robust data curation.
//!
//! Users are featurized, partitioned with seeded mini-batch k-means, and
//! scored by their distance to the assigned centroid normalized by the
//! cluster's spread. Far-out users are dropped as point outliers; clusters
//! are then judged by size and cohesion and sampled at a per-cluster rate.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{LocationType, Taxonomy, UserRecord};
use crate::numeric::{compensated_sum, derived_rng, squared_distance};

/// σ below this is treated as zero spread.
pub const SIGMA_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum CurationError {
    #[error("no features to cluster")]
    NoFeatures,
    #[error("over-partitioned: k = {k} exceeds {distinct} distinct points")]
    OverPartitioned { k: usize, distinct: usize },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("length mismatch: {what} has {found} entries, expected {expected}")]
    LengthMismatch { what: &'static str, expected: usize, found: usize },
    #[error("non-finite feature value")]
    NonFinite,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    pub k: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub z_threshold: f64,
    pub tau_min: usize,
    pub tau_size: usize,
    pub tau_quality: f64,
    pub r_base: f64,
    pub r_high: f64,
    /// Clusters whose majority-need dominance falls below this are
    /// discarded. 0 disables the rule.
    pub min_dominance: f64,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            k: 8,
            batch_size: 256,
            max_epochs: 30,
            z_threshold: 3.0,
            tau_min: 5,
            tau_size: 20,
            tau_quality: 0.9,
            r_base: 0.3,
            r_high: 1.0,
            min_dominance: 0.0,
            seed: 0,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<(), CurationError> {
        let bad = |m: &str| Err(CurationError::InvalidConfig(m.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.r_base > 0.0 && self.r_base <= self.r_high && self.r_high <= 1.0) {
            return bad("rates must satisfy 0 < r_base <= r_high <= 1");
        }
        if !(self.z_threshold > 0.0 && self.tau_quality > 0.0) || self.tau_min == 0 || self.tau_size == 0 {
            return bad("thresholds must be positive");
        }
        if !(0.0..=1.0).contains(&self.min_dominance) {
            return bad("min_dominance must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Category histogram ++ hour-of-day histogram ++ location-type histogram,
/// each normalized by history length. Empty histories give the zero vector.
pub fn featurize(record: &UserRecord, taxonomy: &Taxonomy) -> FeatureVector {
    let n_cat = taxonomy.n_categories();
    let zones = LocationType::ALL.len();
    let mut v = vec![0.0; feature_dim(taxonomy)];
    let n = record.history.len();
    if n == 0 {
        return FeatureVector(v);
    }
    let w = 1.0 / n as f64;
    for it in &record.history {
        v[it.category_id] += w;
        v[n_cat + it.context.time_bucket as usize] += w;
        v[n_cat + 24 + it.context.location_type.index()] += w;
    }
    debug_assert_eq!(v.len(), n_cat + 24 + zones);
    FeatureVector(v)
}

pub fn feature_dim(taxonomy: &Taxonomy) -> usize {
    taxonomy.n_categories() + 24 + LocationType::ALL.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Root-mean-square member distance to the centroid.
    pub sigmas: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Full-data inertia after each epoch (and after the final refinement).
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Builds a model from given centroids and assignments, computing σ from
    /// the members.
    pub fn from_assignments(
        centroids: Vec<Vec<f64>>,
        features: &[FeatureVector],
        assignments: Vec<usize>,
    ) -> Result<Self, CurationError> {
        if features.len() != assignments.len() {
            return Err(CurationError::LengthMismatch {
                what: "assignments",
                expected: features.len(),
                found: assignments.len(),
            });
        }
        let sigmas = cluster_sigmas(&centroids, features, &assignments);
        let inertia = inertia_of(&centroids, features, &assignments);
        Ok(ClusterModel { k: centroids.len(), centroids, sigmas, assignments, inertia_history: vec![inertia] })
    }

    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = squared_distance(mu, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign_all(centroids: &[Vec<f64>], features: &[FeatureVector]) -> Vec<(usize, f64)> {
    features.par_iter().map(|f| nearest(centroids, &f.0)).collect()
}

fn inertia_of(centroids: &[Vec<f64>], features: &[FeatureVector], assignments: &[usize]) -> f64 {
    compensated_sum(
        features
            .iter()
            .zip(assignments)
            .map(|(f, &a)| squared_distance(&centroids[a], &f.0)),
    )
}

fn cluster_sigmas(centroids: &[Vec<f64>], features: &[FeatureVector], assignments: &[usize]) -> Vec<f64> {
    let k = centroids.len();
    let mut sq = vec![Vec::new(); k];
    for (f, &a) in features.iter().zip(assignments) {
        sq[a].push(squared_distance(&centroids[a], &f.0));
    }
    sq.into_iter()
        .map(|d| if d.is_empty() { 0.0 } else { (compensated_sum(d.iter().copied()) / d.len() as f64).sqrt() })
        .collect()
}

fn distinct_points(features: &[FeatureVector]) -> usize {
    features
        .iter()
        .map(|f| f.0.iter().map(|x| (x + 0.0).to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

fn kmeans_plus_plus(features: &[FeatureVector], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = features.len();
    let mut centroids = vec![features[rng.gen_range(0..n)].0.clone()];
    let mut d2: Vec<f64> = features.iter().map(|f| squared_distance(&centroids[0], &f.0)).collect();
    while centroids.len() < k {
        let total = compensated_sum(d2.iter().copied());
        let mut target = rng.gen::<f64>() * total;
        let mut pick = None;
        for (i, w) in d2.iter().enumerate() {
            if *w <= 0.0 {
                continue;
            }
            if target < *w {
                pick = Some(i);
                break;
            }
            target -= w;
        }
        // Rounding can run off the end; fall back to the last candidate with mass.
        let pick = pick.unwrap_or_else(|| d2.iter().rposition(|w| *w > 0.0).expect("k <= distinct points"));
        let c = features[pick].0.clone();
        for (i, f) in features.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(&c, &f.0));
        }
        centroids.push(c);
    }
    centroids
}

/// Seeded mini-batch k-means with k-means++ initialization.
///
/// Each epoch visits every point once in shuffled mini-batches with the
/// per-center learning rate 1/count. An epoch whose full-data inertia is
/// worse than the best seen so far is rolled back, so `inertia_history` is
/// non-increasing. A final Lloyd refinement sets each centroid to its
/// members' mean.
pub fn fit_clusters(features: &[FeatureVector], cfg: &CurationConfig) -> Result<ClusterModel, CurationError> {
    cfg.validate()?;
    let dim = features.first().ok_or(CurationError::NoFeatures)?.dim();
    for f in features {
        if f.dim() != dim {
            return Err(CurationError::DimensionMismatch { expected: dim, found: f.dim() });
        }
        if f.0.iter().any(|x| !x.is_finite()) {
            return Err(CurationError::NonFinite);
        }
    }
    let distinct = distinct_points(features);
    if cfg.k > distinct {
        return Err(CurationError::OverPartitioned { k: cfg.k, distinct });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = kmeans_plus_plus(features, cfg.k, &mut rng);
    let mut counts = vec![0u64; cfg.k];
    let mut order: Vec<usize> = (0..features.len()).collect();

    let initial = assign_all(&centroids, features);
    let mut best_inertia = compensated_sum(initial.iter().map(|(_, d)| *d));
    let mut history = Vec::with_capacity(cfg.max_epochs + 1);

    for _ in 0..cfg.max_epochs {
        let saved = (centroids.clone(), counts.clone());
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let nearest_ids: Vec<usize> = batch.par_iter().map(|&i| nearest(&centroids, &features[i].0).0).collect();
            for (&i, &c) in batch.iter().zip(&nearest_ids) {
                counts[c] += 1;
                let eta = 1.0 / counts[c] as f64;
                for (m, x) in centroids[c].iter_mut().zip(&features[i].0) {
                    *m += eta * (x - *m);
                }
            }
        }
        let epoch_inertia = compensated_sum(assign_all(&centroids, features).iter().map(|(_, d)| *d));
        if epoch_inertia <= best_inertia {
            best_inertia = epoch_inertia;
        } else {
            (centroids, counts) = saved;
        }
        history.push(best_inertia);
    }

    // Lloyd refinement: member means under the current assignment, then reassign.
    let assigned: Vec<usize> = assign_all(&centroids, features).into_iter().map(|(c, _)| c).collect();
    let mut sums = vec![vec![0.0; dim]; cfg.k];
    let mut members = vec![0usize; cfg.k];
    for (f, &c) in features.iter().zip(&assigned) {
        members[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(&f.0) {
            *s += x;
        }
    }
    for c in 0..cfg.k {
        if members[c] > 0 {
            centroids[c] = sums[c].iter().map(|s| s / members[c] as f64).collect();
        }
    }
    let final_assign = assign_all(&centroids, features);
    let assignments: Vec<usize> = final_assign.iter().map(|(c, _)| *c).collect();
    let final_inertia = compensated_sum(final_assign.iter().map(|(_, d)| *d));
    history.push(final_inertia.min(best_inertia));

    let sigmas = cluster_sigmas(&centroids, features, &assignments);
    Ok(ClusterModel { k: cfg.k, centroids, sigmas, assignments, inertia_history: history })
}

/// Normalized typicality z_u = ‖x_u − μ_k(u)‖ / σ_k(u), with z = 0 whenever
/// σ is below [`SIGMA_EPS`]. `features` must align with `model.assignments`.
pub fn typicality_scores(model: &ClusterModel, features: &[FeatureVector]) -> Result<Vec<f64>, CurationError> {
    if features.len() != model.assignments.len() {
        return Err(CurationError::LengthMismatch {
            what: "features",
            expected: model.assignments.len(),
            found: features.len(),
        });
    }
    let dim = model.dim();
    features
        .iter()
        .zip(&model.assignments)
        .map(|(f, &c)| {
            if f.dim() != dim {
                return Err(CurationError::DimensionMismatch { expected: dim, found: f.dim() });
            }
            let sigma = model.sigmas[c];
            if sigma < SIGMA_EPS {
                return Ok(0.0);
            }
            Ok(squared_distance(&f.0, &model.centroids[c]).sqrt() / sigma)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointFlag {
    Inlier,
    Outlier,
}

impl PointFlag {
    pub fn is_outlier(self) -> bool {
        self == PointFlag::Outlier
    }
}

pub fn flag_outliers(scores: &[f64], z_threshold: f64) -> Vec<PointFlag> {
    scores
        .iter()
        .map(|&z| if z > z_threshold { PointFlag::Outlier } else { PointFlag::Inlier })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Discard,
    Keep,
    Boost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub size: usize,
    pub inliers: usize,
    pub cohesion: f64,
    pub dominance: f64,
    pub verdict: Verdict,
    /// `None` for discarded clusters.
    pub sample_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub clusters: Vec<ClusterSummary>,
}

/// Most frequent need in a user's history; ties go to the lower id.
pub fn majority_need(record: &UserRecord) -> Option<usize> {
    let max_id = record.history.iter().map(|i| i.need_id).max()?;
    let mut counts = vec![0usize; max_id + 1];
    for it in &record.history {
        counts[it.need_id] += 1;
    }
    let mut best = 0;
    for (i, c) in counts.iter().enumerate() {
        if *c > counts[best] {
            best = i;
        }
    }
    Some(best)
}

/// Per-cluster scale, cohesion, dominance and verdict.
///
/// Discard when the cluster is below `tau_min`, or small with low cohesion.
/// Small clusters with high cohesion are boosted to `r_high`; everything else
/// is kept at `r_base`.
pub fn score_clusters(
    model: &ClusterModel,
    flags: &[PointFlag],
    majority_needs: &[Option<usize>],
    cfg: &CurationConfig,
) -> Result<ClusterReport, CurationError> {
    let n = model.assignments.len();
    for (what, found) in [("flags", flags.len()), ("majority_needs", majority_needs.len())] {
        if found != n {
            return Err(CurationError::LengthMismatch { what, expected: n, found });
        }
    }
    let mut size = vec![0usize; model.k];
    let mut inliers = vec![0usize; model.k];
    let mut need_counts: Vec<std::collections::BTreeMap<usize, usize>> = vec![Default::default(); model.k];
    for u in 0..n {
        let c = model.assignments[u];
        size[c] += 1;
        if !flags[u].is_outlier() {
            inliers[c] += 1;
        }
        if let Some(need) = majority_needs[u] {
            *need_counts[c].entry(need).or_default() += 1;
        }
    }
    let clusters = (0..model.k)
        .map(|c| {
            let s = size[c];
            let cohesion = if s == 0 { 0.0 } else { inliers[c] as f64 / s as f64 };
            let dominance = if s == 0 {
                0.0
            } else {
                need_counts[c].values().copied().max().unwrap_or(0) as f64 / s as f64
            };
            let small = s < cfg.tau_size;
            let verdict = if s < cfg.tau_min
                || (small && cohesion < cfg.tau_quality)
                || dominance < cfg.min_dominance
            {
                Verdict::Discard
            } else if small {
                Verdict::Boost
            } else {
                Verdict::Keep
            };
            let sample_rate = match verdict {
                Verdict::Discard => None,
                Verdict::Keep => Some(cfg.r_base),
                Verdict::Boost => Some(cfg.r_high),
            };
            ClusterSummary { cluster: c, size: s, inliers: inliers[c], cohesion, dominance, verdict, sample_rate }
        })
        .collect();
    Ok(ClusterReport { clusters })
}

/// ⌈rate · count⌉ with a small tolerance so that e.g. 0.3 · 10 yields 3.
pub fn sample_quota(rate: f64, count: usize) -> usize {
    let raw = rate * count as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(count)
}

/// Indices of the curated users: per surviving cluster, a seeded uniform
/// draw of ⌈rate · inliers⌉ inliers. Returned grouped by cluster, ascending
/// within each cluster.
pub fn adaptive_sample_indices(
    model: &ClusterModel,
    flags: &[PointFlag],
    report: &ClusterReport,
    seed: u64,
) -> Result<Vec<usize>, CurationError> {
    if flags.len() != model.assignments.len() {
        return Err(CurationError::LengthMismatch {
            what: "flags",
            expected: model.assignments.len(),
            found: flags.len(),
        });
    }
    let mut pools = vec![Vec::new(); model.k];
    for (u, (&c, f)) in model.assignments.iter().zip(flags).enumerate() {
        if !f.is_outlier() {
            pools[c].push(u);
        }
    }
    let mut out = Vec::new();
    for summary in &report.clusters {
        let Some(rate) = summary.sample_rate else { continue };
        let pool = pools.get(summary.cluster).ok_or(CurationError::LengthMismatch {
            what: "report clusters",
            expected: model.k,
            found: summary.cluster + 1,
        })?;
        let quota = sample_quota(rate, pool.len());
        let mut rng = derived_rng(seed, &[summary.cluster as u64]);
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), quota)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    Ok(out)
}

pub fn adaptive_sample(
    records: &[UserRecord],
    model: &ClusterModel,
    flags: &[PointFlag],
    report: &ClusterReport,
    seed: u64,
) -> Result<Vec<UserRecord>, CurationError> {
    if records.len() != model.assignments.len() {
        return Err(CurationError::LengthMismatch {
            what: "records",
            expected: model.assignments.len(),
            found: records.len(),
        });
    }
    Ok(adaptive_sample_indices(model, flags, report, seed)?
        .into_iter()
        .map(|i| records[i].clone())
        .collect())
}

#[derive(Debug, Clone)]
pub struct CurationOutcome {
    pub model: ClusterModel,
    pub scores: Vec<f64>,
    pub flags: Vec<PointFlag>,
    pub report: ClusterReport,
    pub selected: Vec<usize>,
    pub curated: Vec<UserRecord>,
}

/// Runs the whole pipeline: featurize, cluster, score, flag, judge, sample.
pub fn curate(records: &[UserRecord], taxonomy: &Taxonomy, cfg: &CurationConfig) -> Result<CurationOutcome, CurationError> {
    let features: Vec<FeatureVector> = records.par_iter().map(|r| featurize(r, taxonomy)).collect();
    let model = fit_clusters(&features, cfg)?;
    let scores = typicality_scores(&model, &features)?;
    let flags = flag_outliers(&scores, cfg.z_threshold);
    let needs: Vec<Option<usize>> = records.iter().map(majority_need).collect();
    let report = score_clusters(&model, &flags, &needs, cfg)?;
    let selected = adaptive_sample_indices(&model, &flags, &report, cfg.seed)?;
    let curated = selected.iter().map(|&i| records[i].clone()).collect();
    Ok(CurationOutcome { model, scores, flags, report, selected, curated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Interaction, SemanticDomain, SpatioTemporalContext, UserProfile};

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector(v.to_vec())
    }

    fn cfg(k: usize) -> CurationConfig {
        CurationConfig { k, batch_size: 2, max_epochs: 10, ..Default::default() }
    }

    fn taxonomy() -> Taxonomy {
        Taxonomy::new(
            vec!["n".into()],
            vec![("a".into(), SemanticDomain::FoodBeverage), ("b".into(), SemanticDomain::FoodBeverage)],
            vec![("a1".into(), 0), ("b1".into(), 1)],
        )
        .unwrap()
    }

    fn user(cats: &[usize]) -> UserRecord {
        let ctx = SpatioTemporalContext::new(3600 * 7, 0.0, 0.0, crate::domain::LocationType::Workplace).unwrap();
        UserRecord {
            user_id: "u".into(),
            profile: UserProfile::default(),
            history: cats
                .iter()
                .map(|&c| Interaction { need_id: 0, category_id: c, behavior_id: c, context: ctx })
                .collect(),
        }
    }

    #[test]
    fn featurize_histograms() {
        let tax = taxonomy();
        let f = featurize(&user(&[0, 0, 0]), &tax);
        assert_eq!(f.dim(), 2 + 24 + 5);
        assert_eq!(&f.0[..2], &[1.0, 0.0]);
        assert_eq!(f.0[2 + 7], 1.0);
        assert_eq!(f.0[2 + 24 + 1], 1.0);

        let f = featurize(&user(&[0, 1]), &tax);
        assert_eq!(&f.0[..2], &[0.5, 0.5]);

        let f = featurize(&user(&[]), &tax);
        assert!(f.0.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn single_cluster_centroid_is_global_mean() {
        let feats = vec![fv(&[0.0, 1.0]), fv(&[2.0, 3.0]), fv(&[4.0, -1.0])];
        let m = fit_clusters(&feats, &cfg(1)).unwrap();
        assert!((m.centroids[0][0] - 2.0).abs() < 1e-12);
        assert!((m.centroids[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_cluster_per_point_has_zero_inertia() {
        let feats = vec![fv(&[0.0]), fv(&[1.0]), fv(&[5.0]), fv(&[9.0])];
        let m = fit_clusters(&feats, &cfg(4)).unwrap();
        assert_eq!(m.inertia(), 0.0);
        let mut sorted: Vec<f64> = m.centroids.iter().map(|c| c[0]).collect();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, vec![0.0, 1.0, 5.0, 9.0]);
    }

    #[test]
    fn too_many_clusters_is_rejected() {
        let feats = vec![fv(&[1.0]), fv(&[1.0]), fv(&[2.0])];
        assert_eq!(
            fit_clusters(&feats, &cfg(3)),
            Err(CurationError::OverPartitioned { k: 3, distinct: 2 })
        );
    }

    #[test]
    fn z_is_zero_at_centroid_and_under_sigma_guard() {
        let feats = vec![fv(&[1.0]), fv(&[0.0]), fv(&[2.0])];
        let m = ClusterModel::from_assignments(vec![vec![1.0]], &feats, vec![0, 0, 0]).unwrap();
        let z = typicality_scores(&m, &feats).unwrap();
        assert_eq!(z[0], 0.0);

        let same = vec![fv(&[3.0]), fv(&[3.0])];
        let m = ClusterModel::from_assignments(vec![vec![3.0]], &same, vec![0, 0]).unwrap();
        assert_eq!(m.sigmas[0], 0.0);
        assert_eq!(typicality_scores(&m, &same).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn typicality_hand_case() {
        let feats = vec![fv(&[0.0]), fv(&[2.0])];
        let m = fit_clusters(&feats, &cfg(1)).unwrap();
        assert_eq!(m.centroids[0], vec![1.0]);
        assert_eq!(m.sigmas[0], 1.0);
        assert_eq!(typicality_scores(&m, &feats).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn typicality_dimension_mismatch() {
        let feats = vec![fv(&[0.0]), fv(&[2.0])];
        let m = fit_clusters(&feats, &cfg(1)).unwrap();
        let wrong = vec![fv(&[0.0, 1.0]), fv(&[2.0, 1.0])];
        assert!(matches!(typicality_scores(&m, &wrong), Err(CurationError::DimensionMismatch { .. })));
    }

    #[test]
    fn outlier_flags() {
        assert_eq!(flag_outliers(&[0.1, 5.0], 3.0), vec![PointFlag::Inlier, PointFlag::Outlier]);
        assert!(flag_outliers(&[0.1, 2.9], 3.0).iter().all(|f| !f.is_outlier()));
        assert!(flag_outliers(&[], 3.0).is_empty());
    }

    fn model_with_sizes(sizes: &[usize]) -> ClusterModel {
        let assignments: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &s)| std::iter::repeat_n(c, s)).collect();
        ClusterModel {
            k: sizes.len(),
            centroids: vec![vec![0.0]; sizes.len()],
            sigmas: vec![1.0; sizes.len()],
            assignments,
            inertia_history: vec![],
        }
    }

    #[test]
    fn verdict_rules() {
        let c = CurationConfig::default();
        // cluster 0: 10 members, 2 outliers; cluster 1: 3 members; cluster 2: 8 members all inliers;
        // cluster 3: 30 members.
        let m = model_with_sizes(&[10, 3, 8, 30]);
        let mut flags = vec![PointFlag::Inlier; m.assignments.len()];
        flags[0] = PointFlag::Outlier;
        flags[1] = PointFlag::Outlier;
        let needs = vec![Some(0); m.assignments.len()];
        let r = score_clusters(&m, &flags, &needs, &c).unwrap();
        assert_eq!(r.clusters[0].cohesion, 0.8);
        assert_eq!(r.clusters[0].verdict, Verdict::Discard);
        assert_eq!(r.clusters[1].verdict, Verdict::Discard);
        assert_eq!(r.clusters[2].verdict, Verdict::Boost);
        assert_eq!(r.clusters[2].sample_rate, Some(c.r_high));
        assert_eq!(r.clusters[3].verdict, Verdict::Keep);
        assert_eq!(r.clusters[3].sample_rate, Some(c.r_base));
        assert_eq!(r.clusters[3].dominance, 1.0);
    }

    #[test]
    fn tiny_cluster_discarded_even_when_cohesive() {
        let m = model_with_sizes(&[3]);
        let flags = vec![PointFlag::Inlier; 3];
        let r = score_clusters(&m, &flags, &[None, None, None], &CurationConfig::default()).unwrap();
        assert_eq!(r.clusters[0].cohesion, 1.0);
        assert_eq!(r.clusters[0].verdict, Verdict::Discard);
        assert_eq!(r.clusters[0].sample_rate, None);
    }

    #[test]
    fn dominance_is_majority_need_share() {
        let m = model_with_sizes(&[4]);
        let flags = vec![PointFlag::Inlier; 4];
        let needs = vec![Some(2), Some(2), Some(1), None];
        let r = score_clusters(&m, &flags, &needs, &CurationConfig::default()).unwrap();
        assert_eq!(r.clusters[0].dominance, 0.5);
    }

    #[test]
    fn sampling_quota_and_determinism() {
        let m = model_with_sizes(&[100]);
        let flags = vec![PointFlag::Inlier; 100];
        let report = ClusterReport {
            clusters: vec![ClusterSummary {
                cluster: 0,
                size: 100,
                inliers: 100,
                cohesion: 1.0,
                dominance: 1.0,
                verdict: Verdict::Keep,
                sample_rate: Some(0.5),
            }],
        };
        let a = adaptive_sample_indices(&m, &flags, &report, 7).unwrap();
        let b = adaptive_sample_indices(&m, &flags, &report, 7).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a, b);
        assert_eq!(sample_quota(0.3, 10), 3);
        assert_eq!(sample_quota(0.3, 11), 4);
    }

    #[test]
    fn all_discarded_gives_empty_output() {
        let m = model_with_sizes(&[2, 2]);
        let flags = vec![PointFlag::Inlier; 4];
        let needs = vec![None; 4];
        let report = score_clusters(&m, &flags, &needs, &CurationConfig::default()).unwrap();
        assert!(adaptive_sample_indices(&m, &flags, &report, 1).unwrap().is_empty());
    }
}
