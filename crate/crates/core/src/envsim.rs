//! Synthetic need-driven consumption world.
//!
//! A world is a taxonomy plus three conditional tables:
//! P(need | archetype, hour, zone), P(category | need) and
//! P(behavior | category). Users are generated by drawing a context, then a
//! path down the tables; a `noise_rate` fraction of interactions is replaced
//! by a uniformly random path. Because the tables are known exactly, every
//! prediction can be checked against an oracle.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    Interaction, LocationType, SemanticDomain, SpatioTemporalContext, Taxonomy, UserProfile, UserRecord,
};
use crate::numeric::{argmax, derived_rng, masked_softmax};

const ROW_TOLERANCE: f64 = 1e-9;
const N_BUCKETS: usize = 24;
const N_ZONES: usize = 5;
/// 2025-01-01T00:00:00Z
const EPOCH_START: i64 = 1_735_689_600;

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("table shape: {0}")]
    Shape(String),
    #[error("table {table} row {row} sums to {sum}, not 1")]
    RowSum { table: &'static str, row: usize, sum: f64 },
    #[error("unknown archetype {0}")]
    UnknownArchetype(String),
}

/// Explicit conditional tables. Rows of `need_given_context` are indexed by
/// [`context_row`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalTables {
    pub need_given_context: Vec<Vec<f64>>,
    pub category_given_need: Vec<Vec<f64>>,
    pub behavior_given_category: Vec<Vec<f64>>,
    pub behavior_category: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub n_needs: usize,
    pub n_categories: usize,
    pub n_behaviors: usize,
    pub n_archetypes: usize,
    pub noise_rate: f64,
    /// Logit boost of the preferred entry in synthesized rows. Large values
    /// (≳ 800) give exact point masses.
    pub sharpness: f64,
    /// Amplitude of the uniform logit jitter in synthesized rows.
    pub jitter: f64,
    /// Restrict P(category | need) to each need's home categories and expose
    /// the support as a mask.
    pub support_masks: bool,
    pub seed: u64,
    /// Explicit tables; synthesized from the seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tables: Option<ConditionalTables>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_needs: 8,
            n_categories: 20,
            n_behaviors: 100,
            n_archetypes: 6,
            noise_rate: 0.1,
            sharpness: 3.0,
            jitter: 0.5,
            support_masks: false,
            seed: 0,
            tables: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub label: String,
    pub profile: UserProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub taxonomy: Taxonomy,
    pub spec: WorldSpec,
    pub archetypes: Vec<Archetype>,
    pub tables: ConditionalTables,
    /// need × category reachability, present when the spec declares masks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_support: Option<Vec<Vec<bool>>>,
}

/// Row of `need_given_context` for an (archetype, hour, zone) triple.
pub fn context_row(archetype: usize, time_bucket: u8, zone: LocationType) -> usize {
    (archetype * N_BUCKETS + time_bucket as usize) * N_ZONES + zone.index()
}

const NEED_LABELS: [&str; 8] = [
    "Family Care",
    "Business Travel",
    "Late-Night Hunger",
    "Social Dining",
    "Leisure Outing",
    "Self Care",
    "Daily Grocery",
    "Home Services",
];

const CATEGORY_LABELS: [(&str, SemanticDomain); 20] = [
    ("Fruit", SemanticDomain::GroceryFreshProduce),
    ("Economy Hotel", SemanticDomain::Accommodation),
    ("Bread & Cakes", SemanticDomain::FoodBeverage),
    ("Hot Pot", SemanticDomain::FoodBeverage),
    ("Cinema", SemanticDomain::EntertainmentLeisure),
    ("Spa & Massage", SemanticDomain::LifestyleServices),
    ("Supermarket", SemanticDomain::GroceryFreshProduce),
    ("Laundry", SemanticDomain::LifestyleServices),
    ("Fresh Vegetables", SemanticDomain::GroceryFreshProduce),
    ("Luxury Hotel", SemanticDomain::Accommodation),
    ("Fast Food", SemanticDomain::FoodBeverage),
    ("Sichuan Cuisine", SemanticDomain::FoodBeverage),
    ("KTV", SemanticDomain::EntertainmentLeisure),
    ("Hair Salon", SemanticDomain::LifestyleServices),
    ("Coffee & Tea", SemanticDomain::FoodBeverage),
    ("Housekeeping", SemanticDomain::LifestyleServices),
    ("Japanese Food", SemanticDomain::FoodBeverage),
    ("Scenic Tickets", SemanticDomain::EntertainmentLeisure),
    ("Fitness", SemanticDomain::EntertainmentLeisure),
    ("Bar", SemanticDomain::EntertainmentLeisure),
];

const ARCHETYPES: [(&str, &[(&str, &str)]); 6] = [
    ("family", &[("marital_status", "married"), ("has_kids", "yes"), ("age_band", "30-44")]),
    ("business_traveler", &[("marital_status", "single"), ("has_kids", "no"), ("age_band", "30-44"), ("occupation", "sales")]),
    ("student", &[("marital_status", "single"), ("has_kids", "no"), ("age_band", "18-24"), ("occupation", "student")]),
    ("retiree", &[("marital_status", "married"), ("has_kids", "grown"), ("age_band", "65+")]),
    ("young_professional", &[("marital_status", "single"), ("has_kids", "no"), ("age_band", "25-29"), ("occupation", "engineer")]),
    ("night_owl", &[("marital_status", "single"), ("has_kids", "no"), ("age_band", "25-34"), ("occupation", "freelancer")]),
];

fn need_label(i: usize) -> String {
    NEED_LABELS.get(i).map_or_else(|| format!("Need {}", i + 1), |s| s.to_string())
}

fn category_entry(c: usize) -> (String, SemanticDomain) {
    CATEGORY_LABELS
        .get(c)
        .map(|(l, d)| (l.to_string(), *d))
        .unwrap_or_else(|| (format!("Category {}", c + 1), SemanticDomain::ALL[c % 5]))
}

fn archetype(a: usize) -> Archetype {
    let (label, attrs) = ARCHETYPES
        .get(a)
        .map(|(l, attrs)| (l.to_string(), attrs.to_vec()))
        .unwrap_or_else(|| (format!("archetype_{}", a + 1), Vec::new()));
    let mut profile: UserProfile = attrs.into_iter().collect();
    profile.attributes.insert("archetype".into(), label.clone());
    Archetype { label, profile }
}

fn check_rows(table: &'static str, rows: &[Vec<f64>], width: usize) -> Result<(), WorldError> {
    for (row, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(WorldError::Shape(format!("{table} row {row} has {} entries, expected {width}", r.len())));
        }
        if r.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(WorldError::Shape(format!("{table} row {row} has a negative or non-finite entry")));
        }
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > ROW_TOLERANCE {
            return Err(WorldError::RowSum { table, row, sum });
        }
    }
    Ok(())
}

impl WorldSpec {
    fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::InvalidSpec(m));
        if self.n_needs == 0 || self.n_archetypes == 0 {
            return bad("need and archetype counts must be at least 1".into());
        }
        if !(self.n_behaviors >= self.n_categories && self.n_categories >= self.n_needs) {
            return bad(format!(
                "counts must satisfy |B| >= |C| >= |I| (got {}, {}, {})",
                self.n_behaviors, self.n_categories, self.n_needs
            ));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} outside [0, 1)", self.noise_rate));
        }
        if !(self.sharpness.is_finite() && self.sharpness >= 0.0 && self.jitter.is_finite() && self.jitter >= 0.0) {
            return bad("sharpness and jitter must be finite and non-negative".into());
        }
        Ok(())
    }
}

fn synthesize(spec: &WorldSpec) -> ConditionalTables {
    let mut rng = derived_rng(spec.seed, &[0xfeed]);
    let (ni, nc, nb) = (spec.n_needs, spec.n_categories, spec.n_behaviors);

    let behavior_category: Vec<usize> =
        (0..nb).map(|b| if b < nc { b } else { rng.gen_range(0..nc) }).collect();

    let row = |preferred: &[bool], allowed: Option<&[bool]>, rng: &mut rand_chacha::ChaCha8Rng| {
        let logits: Vec<f64> = preferred
            .iter()
            .map(|&p| if p { spec.sharpness } else { 0.0 } + spec.jitter * rng.gen::<f64>())
            .collect();
        masked_softmax(&logits, allowed)
    };

    // Categories c with c % |I| == i are need i's home categories.
    let home: Vec<Vec<bool>> = (0..ni).map(|i| (0..nc).map(|c| c % ni == i).collect()).collect();
    let category_given_need: Vec<Vec<f64>> = (0..ni)
        .map(|i| {
            // Within the home set, favor one category so the argmax is sharp.
            let mut pref = vec![false; nc];
            let homes: Vec<usize> = (0..nc).filter(|c| home[i][*c]).collect();
            pref[homes[rng.gen_range(0..homes.len())]] = true;
            let allowed = spec.support_masks.then_some(home[i].as_slice());
            let logits: Vec<f64> = (0..nc)
                .map(|c| {
                    (if pref[c] { spec.sharpness } else if home[i][c] { spec.sharpness * 0.5 } else { 0.0 })
                        + spec.jitter * rng.gen::<f64>()
                })
                .collect();
            masked_softmax(&logits, allowed)
        })
        .collect();

    let behavior_given_category: Vec<Vec<f64>> = (0..nc)
        .map(|c| {
            let members: Vec<usize> = (0..nb).filter(|b| behavior_category[*b] == c).collect();
            let mut pref = vec![false; nb];
            pref[members[rng.gen_range(0..members.len())]] = true;
            let allowed: Vec<bool> = (0..nb).map(|b| behavior_category[b] == c).collect();
            row(&pref, Some(&allowed), &mut rng)
        })
        .collect();

    let n_rows = spec.n_archetypes * N_BUCKETS * N_ZONES;
    let mut need_given_context = vec![Vec::new(); n_rows];
    for a in 0..spec.n_archetypes {
        // Preferred need per (archetype, 6-hour day part, zone).
        let prefs: Vec<usize> = (0..4 * N_ZONES).map(|_| rng.gen_range(0..ni)).collect();
        for t in 0..N_BUCKETS {
            for zone in LocationType::ALL {
                let p = prefs[(t / 6) * N_ZONES + zone.index()];
                let pref: Vec<bool> = (0..ni).map(|i| i == p).collect();
                need_given_context[context_row(a, t as u8, zone)] = row(&pref, None, &mut rng);
            }
        }
    }

    ConditionalTables { need_given_context, category_given_need, behavior_given_category, behavior_category }
}

/// Builds a world from its spec: explicit tables are validated, missing ones
/// are synthesized from the seed.
pub fn generate_world(spec: &WorldSpec) -> Result<World, WorldError> {
    spec.validate()?;
    let tables = match &spec.tables {
        Some(t) => t.clone(),
        None => synthesize(spec),
    };
    let (ni, nc, nb) = (spec.n_needs, spec.n_categories, spec.n_behaviors);
    if tables.behavior_category.len() != nb {
        return Err(WorldError::Shape(format!(
            "behavior_category has {} entries, expected {nb}",
            tables.behavior_category.len()
        )));
    }
    if tables.behavior_category.iter().any(|c| *c >= nc) {
        return Err(WorldError::Shape("behavior_category references a missing category".into()));
    }
    let n_rows = spec.n_archetypes * N_BUCKETS * N_ZONES;
    if tables.need_given_context.len() != n_rows {
        return Err(WorldError::Shape(format!(
            "need_given_context has {} rows, expected {n_rows}",
            tables.need_given_context.len()
        )));
    }
    if tables.category_given_need.len() != ni || tables.behavior_given_category.len() != nc {
        return Err(WorldError::Shape("category or behavior table has the wrong row count".into()));
    }
    check_rows("need_given_context", &tables.need_given_context, ni)?;
    check_rows("category_given_need", &tables.category_given_need, nc)?;
    check_rows("behavior_given_category", &tables.behavior_given_category, nb)?;
    for (c, r) in tables.behavior_given_category.iter().enumerate() {
        if let Some(b) = (0..nb).find(|b| r[*b] > 0.0 && tables.behavior_category[*b] != c) {
            return Err(WorldError::Shape(format!("category {c} puts mass on behavior {b} of another category")));
        }
    }

    let taxonomy = Taxonomy::new(
        (0..ni).map(need_label).collect(),
        (0..nc).map(category_entry).collect(),
        (0..nb)
            .map(|b| {
                let c = tables.behavior_category[b];
                let rank = tables.behavior_category[..b].iter().filter(|x| **x == c).count() + 1;
                (format!("{} item {}", category_entry(c).0, rank), c)
            })
            .collect(),
    )
    .map_err(|e| WorldError::Shape(e.to_string()))?;

    let category_support = spec.support_masks.then(|| {
        tables
            .category_given_need
            .iter()
            .map(|r| r.iter().map(|p| *p > 0.0).collect())
            .collect()
    });

    Ok(World {
        taxonomy,
        spec: spec.clone(),
        archetypes: (0..spec.n_archetypes).map(archetype).collect(),
        tables,
        category_support,
    })
}

/// Exact conditionals for one (archetype, context) and the greedy argmax path.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleView<'w> {
    pub need_probs: &'w [f64],
    pub category_given_need: &'w [Vec<f64>],
    pub behavior_given_category: &'w [Vec<f64>],
    pub need: usize,
    pub category: usize,
    pub behavior: usize,
}

impl OracleView<'_> {
    /// P(category | context), marginalized over needs.
    pub fn category_marginal(&self) -> Vec<f64> {
        let nc = self.category_given_need.first().map_or(0, Vec::len);
        let mut out = vec![0.0; nc];
        for (i, pi) in self.need_probs.iter().enumerate() {
            for (c, pc) in self.category_given_need[i].iter().enumerate() {
                out[c] += pi * pc;
            }
        }
        out
    }
}

impl World {
    pub fn archetype_index(&self, label: &str) -> Result<usize, WorldError> {
        self.archetypes
            .iter()
            .position(|a| a.label == label)
            .ok_or_else(|| WorldError::UnknownArchetype(label.to_string()))
    }

    /// Archetype of a generated user, read from its profile.
    pub fn archetype_of(&self, profile: &UserProfile) -> Result<usize, WorldError> {
        let label = profile
            .get("archetype")
            .ok_or_else(|| WorldError::UnknownArchetype("<missing>".into()))?;
        self.archetype_index(label)
    }

    pub fn oracle(&self, archetype: usize, context: &SpatioTemporalContext) -> Result<OracleView<'_>, WorldError> {
        if archetype >= self.archetypes.len() {
            return Err(WorldError::UnknownArchetype(archetype.to_string()));
        }
        let need_probs = &self.tables.need_given_context[context_row(archetype, context.time_bucket, context.location_type)];
        let need = argmax(need_probs);
        let category = argmax(&self.tables.category_given_need[need]);
        let behavior = argmax(&self.tables.behavior_given_category[category]);
        Ok(OracleView {
            need_probs,
            category_given_need: &self.tables.category_given_need,
            behavior_given_category: &self.tables.behavior_given_category,
            need,
            category,
            behavior,
        })
    }

    /// Draws one (need, category, behavior) path for the context, replacing
    /// it with a uniform random path with probability `noise_rate`.
    pub fn draw_path<R: Rng>(&self, archetype: usize, context: &SpatioTemporalContext, rng: &mut R) -> (usize, usize, usize) {
        let t = &self.tables;
        if rng.gen::<f64>() < self.spec.noise_rate {
            let need = rng.gen_range(0..self.spec.n_needs);
            let behavior = rng.gen_range(0..self.spec.n_behaviors);
            return (need, t.behavior_category[behavior], behavior);
        }
        let need = draw(&t.need_given_context[context_row(archetype, context.time_bucket, context.location_type)], rng);
        let category = draw(&t.category_given_need[need], rng);
        let behavior = draw(&t.behavior_given_category[category], rng);
        (need, category, behavior)
    }

    /// A uniformly random context on day `day` after the world's epoch.
    pub fn random_context<R: Rng>(&self, day: i64, rng: &mut R) -> SpatioTemporalContext {
        let hour = rng.gen_range(0..24i64);
        let minute = rng.gen_range(0..60i64);
        let zone = LocationType::ALL[rng.gen_range(0..N_ZONES)];
        let (lat0, lon0) = zone_anchor(zone);
        let ts = EPOCH_START + day * 86_400 + hour * 3600 + minute * 60;
        SpatioTemporalContext::new(
            ts,
            lat0 + rng.gen_range(-0.02..0.02),
            lon0 + rng.gen_range(-0.02..0.02),
            zone,
        )
        .expect("anchors are valid coordinates")
    }

    /// One synthetic user with `len` interactions on consecutive days.
    pub fn generate_user<R: Rng>(&self, user_id: String, len: usize, rng: &mut R) -> UserRecord {
        let a = rng.gen_range(0..self.archetypes.len());
        self.generate_user_with_archetype(user_id, a, len, rng)
    }

    pub fn generate_user_with_archetype<R: Rng>(
        &self,
        user_id: String,
        archetype: usize,
        len: usize,
        rng: &mut R,
    ) -> UserRecord {
        let start_day = rng.gen_range(0..30i64);
        let history = (0..len)
            .map(|k| {
                let context = self.random_context(start_day + k as i64, rng);
                let (need_id, category_id, behavior_id) = self.draw_path(archetype, &context, rng);
                Interaction { need_id, category_id, behavior_id, context }
            })
            .collect();
        UserRecord { user_id, profile: self.archetypes[archetype].profile.clone(), history }
    }
}

fn zone_anchor(zone: LocationType) -> (f64, f64) {
    match zone {
        LocationType::Home => (31.20, 121.44),
        LocationType::Workplace => (31.23, 121.50),
        LocationType::Commercial => (31.24, 121.47),
        LocationType::Scenic => (31.24, 121.49),
        LocationType::Transit => (31.20, 121.32),
    }
}

fn draw<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let mut u = rng.gen::<f64>();
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        if u < *p {
            return i;
        }
        u -= p;
        last = i;
    }
    last
}

/// Generates `n_users` users with history lengths drawn uniformly from
/// `seq_len_range` (inclusive). Each user has its own derived generator, so
/// output does not depend on the worker count.
pub fn generate_users(world: &World, n_users: usize, seq_len_range: (usize, usize), seed: u64) -> Vec<UserRecord> {
    let (lo, hi) = (seq_len_range.0.min(seq_len_range.1), seq_len_range.0.max(seq_len_range.1));
    (0..n_users)
        .into_par_iter()
        .map(|u| {
            let mut rng = derived_rng(seed, &[u as u64]);
            let len = rng.gen_range(lo..=hi);
            world.generate_user(format!("u{u:06}"), len, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::validate_record;

    fn spec(ni: usize, nc: usize, nb: usize) -> WorldSpec {
        WorldSpec { n_needs: ni, n_categories: nc, n_behaviors: nb, ..Default::default() }
    }

    #[test]
    fn singleton_world_is_point_mass() {
        let w = generate_world(&spec(1, 1, 1)).unwrap();
        assert!(w.tables.need_given_context.iter().all(|r| r == &vec![1.0]));
        assert_eq!(w.tables.category_given_need, vec![vec![1.0]]);
        assert_eq!(w.tables.behavior_given_category, vec![vec![1.0]]);
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate_world(&WorldSpec::default()).unwrap();
        let b = generate_world(&WorldSpec::default()).unwrap();
        assert_eq!(a, b);
        let c = generate_world(&WorldSpec { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(a.tables, c.tables);
    }

    #[test]
    fn rows_must_sum_to_one() {
        let mut s = spec(1, 1, 1);
        let mut t = synthesize(&s);
        t.category_given_need[0][0] = 0.9;
        s.tables = Some(t);
        assert!(matches!(generate_world(&s), Err(WorldError::RowSum { table: "category_given_need", .. })));
    }

    #[test]
    fn bad_counts_rejected() {
        assert!(generate_world(&spec(3, 2, 5)).is_err());
        assert!(generate_world(&WorldSpec { noise_rate: 1.0, ..Default::default() }).is_err());
    }

    #[test]
    fn behavior_mapping_is_surjective() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        for c in 0..w.taxonomy.n_categories() {
            assert!(!w.taxonomy.behaviors_of(c).is_empty());
        }
    }

    #[test]
    fn cold_start_shape() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        let users = generate_users(&w, 50, (2, 2), 3);
        assert!(users.iter().all(|u| u.history.len() == 2));
    }

    #[test]
    fn generated_users_validate() {
        let w = generate_world(&WorldSpec { noise_rate: 0.3, ..Default::default() }).unwrap();
        for u in generate_users(&w, 200, (1, 12), 9) {
            assert!(validate_record(&u, &w.taxonomy).is_empty());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        assert_eq!(generate_users(&w, 20, (1, 5), 4), generate_users(&w, 20, (1, 5), 4));
    }

    #[test]
    fn point_mass_world_matches_oracle() {
        let w = generate_world(&WorldSpec { sharpness: 1000.0, noise_rate: 0.0, ..Default::default() }).unwrap();
        for u in generate_users(&w, 30, (3, 6), 11) {
            let a = w.archetype_of(&u.profile).unwrap();
            for it in &u.history {
                let o = w.oracle(a, &it.context).unwrap();
                assert_eq!((it.need_id, it.category_id, it.behavior_id), (o.need, o.category, o.behavior));
            }
        }
    }

    #[test]
    fn uniform_world_oracle_tie_breaks_low() {
        let w = generate_world(&WorldSpec { sharpness: 0.0, jitter: 0.0, ..Default::default() }).unwrap();
        let ctx = w.random_context(0, &mut derived_rng(0, &[]));
        let o = w.oracle(0, &ctx).unwrap();
        assert_eq!(o.need, 0);
        assert_eq!(o.category, 0);
        assert_eq!(o.behavior, w.taxonomy.behaviors_of(0)[0]);
    }

    #[test]
    fn oracle_rejects_unknown_archetype() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        let ctx = w.random_context(0, &mut derived_rng(0, &[]));
        assert!(w.oracle(99, &ctx).is_err());
        assert!(w.archetype_index("astronaut").is_err());
    }

    #[test]
    fn oracle_rows_normalize() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        let mut rng = derived_rng(5, &[]);
        for a in 0..w.archetypes.len() {
            let ctx = w.random_context(0, &mut rng);
            let o = w.oracle(a, &ctx).unwrap();
            assert!((o.need_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((o.category_marginal().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
