//! Core data model: the need → category → behavior taxonomy, users,
//! interactions with their spatio-temporal context, and dataset statistics.
//!
//! All math downstream works on dense integer ids. The wire formats (taxonomy
//! JSON and the JSONL dataset) carry labels and are resolved against a
//! [`Taxonomy`] on ingestion, which is also where path consistency is enforced.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use chrono::{DateTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error("invalid context: {0}")]
    InvalidContext(String),
    #[error("unknown {kind} label {label:?}")]
    UnknownLabel { kind: &'static str, label: String },
    #[error("path inconsistency: behavior {behavior:?} belongs to category {expected:?}, not {found:?}")]
    PathInconsistency {
        behavior: String,
        expected: String,
        found: String,
    },
    #[error("record {user_id}: history timestamps decrease at position {index}")]
    TimeDisorder { user_id: String, index: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for DomainError {
    fn from(e: std::io::Error) -> Self {
        DomainError::Io(e.to_string())
    }
}

/// The five semantic domains a category can belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SemanticDomain {
    #[serde(rename = "Food & Beverage")]
    FoodBeverage,
    #[serde(rename = "Accommodation")]
    Accommodation,
    #[serde(rename = "Entertainment & Leisure")]
    EntertainmentLeisure,
    #[serde(rename = "Lifestyle Services")]
    LifestyleServices,
    #[serde(rename = "Grocery & Fresh Produce")]
    GroceryFreshProduce,
}

impl SemanticDomain {
    pub const ALL: [SemanticDomain; 5] = [
        SemanticDomain::FoodBeverage,
        SemanticDomain::Accommodation,
        SemanticDomain::EntertainmentLeisure,
        SemanticDomain::LifestyleServices,
        SemanticDomain::GroceryFreshProduce,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SemanticDomain::FoodBeverage => "Food & Beverage",
            SemanticDomain::Accommodation => "Accommodation",
            SemanticDomain::EntertainmentLeisure => "Entertainment & Leisure",
            SemanticDomain::LifestyleServices => "Lifestyle Services",
            SemanticDomain::GroceryFreshProduce => "Grocery & Fresh Produce",
        }
    }
}

impl fmt::Display for SemanticDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LivingNeed {
    pub id: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticCategory {
    pub id: usize,
    pub label: String,
    pub domain: SemanticDomain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Behavior {
    pub id: usize,
    pub label: String,
    pub category_id: usize,
}

/// Wire form of a taxonomy: labels only, ids implied by position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyFile {
    pub needs: Vec<String>,
    pub categories: Vec<CategoryEntry>,
    pub behaviors: Vec<BehaviorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub label: String,
    pub domain: SemanticDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorEntry {
    pub label: String,
    pub category: String,
}

/// The hierarchical decision space. Id spaces are dense, every behavior maps
/// to an existing category and every category owns at least one behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyFile", into = "TaxonomyFile")]
pub struct Taxonomy {
    needs: Vec<LivingNeed>,
    categories: Vec<SemanticCategory>,
    behaviors: Vec<Behavior>,
    behaviors_by_category: Vec<Vec<usize>>,
    need_index: HashMap<String, usize>,
    category_index: HashMap<String, usize>,
    behavior_index: HashMap<String, usize>,
}

impl Taxonomy {
    /// Builds a taxonomy from labels. `behaviors` pairs each behavior label
    /// with its category id.
    pub fn new(
        needs: Vec<String>,
        categories: Vec<(String, SemanticDomain)>,
        behaviors: Vec<(String, usize)>,
    ) -> Result<Self, DomainError> {
        let bad = |m: String| DomainError::InvalidTaxonomy(m);
        let need_index = label_index("need", &needs).map_err(bad)?;
        let cat_labels: Vec<String> = categories.iter().map(|(l, _)| l.clone()).collect();
        let category_index = label_index("category", &cat_labels).map_err(bad)?;
        let beh_labels: Vec<String> = behaviors.iter().map(|(l, _)| l.clone()).collect();
        let behavior_index = label_index("behavior", &beh_labels).map_err(bad)?;

        let mut behaviors_by_category = vec![Vec::new(); categories.len()];
        for (id, (label, cat)) in behaviors.iter().enumerate() {
            if *cat >= categories.len() {
                return Err(bad(format!("behavior {label:?} maps to missing category {cat}")));
            }
            behaviors_by_category[*cat].push(id);
        }
        if let Some(c) = behaviors_by_category.iter().position(|b| b.is_empty()) {
            return Err(bad(format!("category {:?} has no behaviors", categories[c].0)));
        }

        Ok(Taxonomy {
            needs: needs
                .into_iter()
                .enumerate()
                .map(|(id, label)| LivingNeed { id, label })
                .collect(),
            categories: categories
                .into_iter()
                .enumerate()
                .map(|(id, (label, domain))| SemanticCategory { id, label, domain })
                .collect(),
            behaviors: behaviors
                .into_iter()
                .enumerate()
                .map(|(id, (label, category_id))| Behavior { id, label, category_id })
                .collect(),
            behaviors_by_category,
            need_index,
            category_index,
            behavior_index,
        })
    }

    pub fn needs(&self) -> &[LivingNeed] {
        &self.needs
    }

    pub fn categories(&self) -> &[SemanticCategory] {
        &self.categories
    }

    pub fn behaviors(&self) -> &[Behavior] {
        &self.behaviors
    }

    pub fn n_needs(&self) -> usize {
        self.needs.len()
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn n_behaviors(&self) -> usize {
        self.behaviors.len()
    }

    /// Behavior ids belonging to `category_id`, ascending.
    pub fn behaviors_of(&self, category_id: usize) -> &[usize] {
        &self.behaviors_by_category[category_id]
    }

    /// Category of every behavior, indexed by behavior id.
    pub fn behavior_categories(&self) -> Vec<usize> {
        self.behaviors.iter().map(|b| b.category_id).collect()
    }

    pub fn need_id(&self, label: &str) -> Option<usize> {
        self.need_index.get(label).copied()
    }

    pub fn category_id(&self, label: &str) -> Option<usize> {
        self.category_index.get(label).copied()
    }

    pub fn behavior_id(&self, label: &str) -> Option<usize> {
        self.behavior_index.get(label).copied()
    }

    pub fn to_file(&self) -> TaxonomyFile {
        self.clone().into()
    }
}

fn label_index(kind: &str, labels: &[String]) -> Result<HashMap<String, usize>, String> {
    let mut index = HashMap::with_capacity(labels.len());
    for (id, label) in labels.iter().enumerate() {
        if label.trim().is_empty() {
            return Err(format!("{kind} {id} has an empty label"));
        }
        if index.insert(label.clone(), id).is_some() {
            return Err(format!("duplicate {kind} label {label:?}"));
        }
    }
    Ok(index)
}

impl TryFrom<TaxonomyFile> for Taxonomy {
    type Error = DomainError;

    fn try_from(file: TaxonomyFile) -> Result<Self, Self::Error> {
        let categories: Vec<(String, SemanticDomain)> =
            file.categories.into_iter().map(|c| (c.label, c.domain)).collect();
        let by_label: HashMap<&str, usize> = categories
            .iter()
            .enumerate()
            .map(|(i, (l, _))| (l.as_str(), i))
            .collect();
        let mut behaviors = Vec::with_capacity(file.behaviors.len());
        for b in file.behaviors {
            let cat = *by_label.get(b.category.as_str()).ok_or_else(|| {
                DomainError::InvalidTaxonomy(format!(
                    "behavior {:?} references unknown category {:?}",
                    b.label, b.category
                ))
            })?;
            behaviors.push((b.label, cat));
        }
        Taxonomy::new(file.needs, categories, behaviors)
    }
}

impl From<Taxonomy> for TaxonomyFile {
    fn from(t: Taxonomy) -> Self {
        TaxonomyFile {
            needs: t.needs.iter().map(|n| n.label.clone()).collect(),
            categories: t
                .categories
                .iter()
                .map(|c| CategoryEntry { label: c.label.clone(), domain: c.domain })
                .collect(),
            behaviors: t
                .behaviors
                .iter()
                .map(|b| BehaviorEntry {
                    label: b.label.clone(),
                    category: t.categories[b.category_id].label.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocationType {
    Home,
    Workplace,
    Commercial,
    Scenic,
    Transit,
}

impl LocationType {
    pub const ALL: [LocationType; 5] = [
        LocationType::Home,
        LocationType::Workplace,
        LocationType::Commercial,
        LocationType::Scenic,
        LocationType::Transit,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LocationType::Home => "home",
            LocationType::Workplace => "workplace",
            LocationType::Commercial => "commercial",
            LocationType::Scenic => "scenic",
            LocationType::Transit => "transit",
        }
    }
}

impl std::str::FromStr for LocationType {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LocationType::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| DomainError::UnknownLabel { kind: "location type", label: s.to_string() })
    }
}

/// When and where a decision happens. `time_bucket` is the hour of day of
/// `timestamp`, UTC unless a zone offset was supplied at construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatioTemporalContext {
    pub timestamp: i64,
    pub time_bucket: u8,
    pub latitude: f64,
    pub longitude: f64,
    pub location_type: LocationType,
}

impl SpatioTemporalContext {
    pub fn new(
        timestamp: i64,
        latitude: f64,
        longitude: f64,
        location_type: LocationType,
    ) -> Result<Self, DomainError> {
        Self::with_offset(timestamp, 0, latitude, longitude, location_type)
    }

    /// Like [`SpatioTemporalContext::new`] but derives the hour bucket in a
    /// zone `offset_secs` east of UTC.
    pub fn with_offset(
        timestamp: i64,
        offset_secs: i32,
        latitude: f64,
        longitude: f64,
        location_type: LocationType,
    ) -> Result<Self, DomainError> {
        if !(-90.0..=90.0).contains(&latitude) {
            return Err(DomainError::InvalidContext(format!("latitude {latitude} out of range")));
        }
        if !(-180.0..=180.0).contains(&longitude) {
            return Err(DomainError::InvalidContext(format!("longitude {longitude} out of range")));
        }
        Ok(SpatioTemporalContext {
            timestamp,
            time_bucket: hour_of(timestamp, offset_secs)?,
            latitude,
            longitude,
            location_type,
        })
    }
}

fn hour_of(timestamp: i64, offset_secs: i32) -> Result<u8, DomainError> {
    let local = timestamp
        .checked_add(offset_secs as i64)
        .ok_or_else(|| DomainError::InvalidContext("timestamp overflow".into()))?;
    let dt = DateTime::from_timestamp(local, 0)
        .ok_or_else(|| DomainError::InvalidContext(format!("timestamp {timestamp} out of range")))?;
    Ok(dt.hour() as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub need_id: usize,
    pub category_id: usize,
    pub behavior_id: usize,
    pub context: SpatioTemporalContext,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserProfile {
    pub attributes: BTreeMap<String, String>,
}

impl UserProfile {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.attributes.get(key).map(String::as_str)
    }
}

impl<K: Into<String>, V: Into<String>> FromIterator<(K, V)> for UserProfile {
    fn from_iter<T: IntoIterator<Item = (K, V)>>(iter: T) -> Self {
        UserProfile {
            attributes: iter.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub profile: UserProfile,
    pub history: Vec<Interaction>,
}

/// One predicted path. `need_id` is `None` for policies that skip the need
/// stage (the flat ablation). `reasoning` holds per-step summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalDecision {
    pub need_id: Option<usize>,
    pub category_id: usize,
    pub behavior_id: usize,
    #[serde(default)]
    pub reasoning: Vec<String>,
}

impl HierarchicalDecision {
    pub fn new(need_id: usize, category_id: usize, behavior_id: usize) -> Self {
        HierarchicalDecision { need_id: Some(need_id), category_id, behavior_id, reasoning: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DanglingNeed { index: usize, need_id: usize },
    DanglingCategory { index: usize, category_id: usize },
    DanglingBehavior { index: usize, behavior_id: usize },
    PathInconsistency { index: usize, category_id: usize, behavior_category: usize },
    TimeDisorder { index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DanglingNeed { index, need_id } => {
                write!(f, "dangling need {need_id} at {index}")
            }
            Violation::DanglingCategory { index, category_id } => {
                write!(f, "dangling category {category_id} at {index}")
            }
            Violation::DanglingBehavior { index, behavior_id } => {
                write!(f, "dangling behavior {behavior_id} at {index}")
            }
            Violation::PathInconsistency { index, category_id, behavior_category } => write!(
                f,
                "path inconsistency at {index}: category {category_id} but behavior belongs to {behavior_category}"
            ),
            Violation::TimeDisorder { index } => write!(f, "time disorder at {index}"),
        }
    }
}

/// Checks ids, path consistency and chronological order. An empty result
/// means the record is valid.
pub fn validate_record(record: &UserRecord, taxonomy: &Taxonomy) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut prev_ts = i64::MIN;
    for (index, it) in record.history.iter().enumerate() {
        if it.need_id >= taxonomy.n_needs() {
            out.push(Violation::DanglingNeed { index, need_id: it.need_id });
        }
        if it.category_id >= taxonomy.n_categories() {
            out.push(Violation::DanglingCategory { index, category_id: it.category_id });
        }
        match taxonomy.behaviors().get(it.behavior_id) {
            None => out.push(Violation::DanglingBehavior { index, behavior_id: it.behavior_id }),
            Some(b) if b.category_id != it.category_id => out.push(Violation::PathInconsistency {
                index,
                category_id: it.category_id,
                behavior_category: b.category_id,
            }),
            Some(_) => {}
        }
        if it.context.timestamp < prev_ts {
            out.push(Violation::TimeDisorder { index });
        }
        prev_ts = it.context.timestamp;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_categories: usize,
    pub n_interactions: usize,
    pub avg_seq_len: f64,
    pub sparsity: f64,
}

impl DatasetStats {
    pub fn from_counts(
        n_users: usize,
        n_categories: usize,
        n_interactions: usize,
    ) -> Result<Self, DomainError> {
        if n_users == 0 || n_categories == 0 {
            return Err(DomainError::EmptyDataset);
        }
        let avg_seq_len = n_interactions as f64 / n_users as f64;
        let density = n_interactions as f64 / (n_users as f64 * n_categories as f64);
        Ok(DatasetStats {
            n_users,
            n_categories,
            n_interactions,
            avg_seq_len,
            sparsity: (1.0 - density).clamp(0.0, 1.0),
        })
    }
}

pub fn dataset_stats(records: &[UserRecord], taxonomy: &Taxonomy) -> Result<DatasetStats, DomainError> {
    let n_interactions = records.iter().map(|r| r.history.len()).sum();
    DatasetStats::from_counts(records.len(), taxonomy.n_categories(), n_interactions)
}

// --- JSONL dataset wire format ---

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordLine {
    pub user_id: String,
    #[serde(default)]
    pub profile: BTreeMap<String, String>,
    /// Seconds east of UTC used to derive hour buckets; UTC when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tz_offset: Option<i32>,
    #[serde(default)]
    pub history: Vec<InteractionLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionLine {
    pub need: String,
    pub category: String,
    pub behavior: String,
    pub ts: i64,
    pub lat: f64,
    pub lon: f64,
    pub loc_type: LocationType,
}

impl RecordLine {
    /// Resolves labels against `taxonomy`, rejecting path-inconsistent or
    /// out-of-order histories.
    pub fn resolve(&self, taxonomy: &Taxonomy) -> Result<UserRecord, DomainError> {
        let mut history = Vec::with_capacity(self.history.len());
        let mut prev_ts = i64::MIN;
        for (index, h) in self.history.iter().enumerate() {
            let unknown = |kind, label: &str| DomainError::UnknownLabel { kind, label: label.to_string() };
            let need_id = taxonomy.need_id(&h.need).ok_or_else(|| unknown("need", &h.need))?;
            let category_id =
                taxonomy.category_id(&h.category).ok_or_else(|| unknown("category", &h.category))?;
            let behavior_id =
                taxonomy.behavior_id(&h.behavior).ok_or_else(|| unknown("behavior", &h.behavior))?;
            let owner = taxonomy.behaviors()[behavior_id].category_id;
            if owner != category_id {
                return Err(DomainError::PathInconsistency {
                    behavior: h.behavior.clone(),
                    expected: taxonomy.categories()[owner].label.clone(),
                    found: h.category.clone(),
                });
            }
            if h.ts < prev_ts {
                return Err(DomainError::TimeDisorder { user_id: self.user_id.clone(), index });
            }
            prev_ts = h.ts;
            let context = SpatioTemporalContext::with_offset(
                h.ts,
                self.tz_offset.unwrap_or(0),
                h.lat,
                h.lon,
                h.loc_type,
            )?;
            history.push(Interaction { need_id, category_id, behavior_id, context });
        }
        Ok(UserRecord {
            user_id: self.user_id.clone(),
            profile: UserProfile { attributes: self.profile.clone() },
            history,
        })
    }

    pub fn from_record(record: &UserRecord, taxonomy: &Taxonomy) -> Self {
        RecordLine {
            user_id: record.user_id.clone(),
            profile: record.profile.attributes.clone(),
            tz_offset: None,
            history: record
                .history
                .iter()
                .map(|it| InteractionLine {
                    need: taxonomy.needs()[it.need_id].label.clone(),
                    category: taxonomy.categories()[it.category_id].label.clone(),
                    behavior: taxonomy.behaviors()[it.behavior_id].label.clone(),
                    ts: it.context.timestamp,
                    lat: it.context.latitude,
                    lon: it.context.longitude,
                    loc_type: it.context.location_type,
                })
                .collect(),
        }
    }
}

pub fn read_records<R: BufRead>(reader: R, taxonomy: &Taxonomy) -> Result<Vec<UserRecord>, DomainError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line)
            .map_err(|e| DomainError::Parse { line: i + 1, message: e.to_string() })?;
        let record = parsed.resolve(taxonomy).map_err(|e| DomainError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_records<W: Write>(
    mut writer: W,
    records: &[UserRecord],
    taxonomy: &Taxonomy,
) -> Result<(), DomainError> {
    for r in records {
        let line = serde_json::to_string(&RecordLine::from_record(r, taxonomy))
            .map_err(|e| DomainError::Io(e.to_string()))?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_taxonomy() -> Taxonomy {
        Taxonomy::new(
            vec!["Family Care".into(), "Business Travel".into()],
            vec![
                ("Fruit".into(), SemanticDomain::GroceryFreshProduce),
                ("Economy Hotel".into(), SemanticDomain::Accommodation),
            ],
            vec![("Buy fruit".into(), 0), ("Book budget hotel".into(), 1)],
        )
        .unwrap()
    }

    fn ctx(ts: i64) -> SpatioTemporalContext {
        SpatioTemporalContext::new(ts, 31.2, 121.5, LocationType::Home).unwrap()
    }

    fn record(history: Vec<Interaction>) -> UserRecord {
        UserRecord { user_id: "u1".into(), profile: UserProfile::default(), history }
    }

    #[test]
    fn valid_record_has_no_violations() {
        let tax = tiny_taxonomy();
        let r = record(vec![
            Interaction { need_id: 0, category_id: 0, behavior_id: 0, context: ctx(10) },
            Interaction { need_id: 1, category_id: 1, behavior_id: 1, context: ctx(20) },
        ]);
        assert!(validate_record(&r, &tax).is_empty());
    }

    #[test]
    fn dangling_behavior_is_reported() {
        let tax = tiny_taxonomy();
        let r = record(vec![Interaction { need_id: 0, category_id: 0, behavior_id: 7, context: ctx(0) }]);
        let v = validate_record(&r, &tax);
        assert_eq!(v, vec![Violation::DanglingBehavior { index: 0, behavior_id: 7 }]);
        assert!(v[0].to_string().starts_with("dangling behavior"));
    }

    #[test]
    fn path_inconsistency_is_reported() {
        let tax = tiny_taxonomy();
        let r = record(vec![Interaction { need_id: 0, category_id: 1, behavior_id: 0, context: ctx(0) }]);
        let v = validate_record(&r, &tax);
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().starts_with("path inconsistency"));
    }

    #[test]
    fn time_disorder_is_reported() {
        let tax = tiny_taxonomy();
        let r = record(vec![
            Interaction { need_id: 0, category_id: 0, behavior_id: 0, context: ctx(50) },
            Interaction { need_id: 0, category_id: 0, behavior_id: 0, context: ctx(40) },
        ]);
        assert_eq!(validate_record(&r, &tax), vec![Violation::TimeDisorder { index: 1 }]);
    }

    #[test]
    fn stats_edge_cases() {
        let s = DatasetStats::from_counts(3, 5, 0).unwrap();
        assert_eq!(s.avg_seq_len, 0.0);
        assert_eq!(s.sparsity, 1.0);
        let s = DatasetStats::from_counts(2, 2, 4).unwrap();
        assert_eq!(s.avg_seq_len, 2.0);
        assert_eq!(s.sparsity, 0.0);
        assert_eq!(dataset_stats(&[], &tiny_taxonomy()), Err(DomainError::EmptyDataset));
    }

    #[test]
    fn hour_bucket_uses_utc_unless_offset() {
        // 2024-01-01T19:30:00Z
        let ts = 1_704_137_400;
        let utc = SpatioTemporalContext::new(ts, 0.0, 0.0, LocationType::Home).unwrap();
        assert_eq!(utc.time_bucket, 19);
        let shanghai = SpatioTemporalContext::with_offset(ts, 8 * 3600, 0.0, 0.0, LocationType::Home).unwrap();
        assert_eq!(shanghai.time_bucket, 3);
    }

    #[test]
    fn context_rejects_bad_coordinates() {
        assert!(SpatioTemporalContext::new(0, 91.0, 0.0, LocationType::Home).is_err());
        assert!(SpatioTemporalContext::new(0, 0.0, -180.5, LocationType::Home).is_err());
    }

    #[test]
    fn taxonomy_rejects_empty_category_and_duplicates() {
        let err = Taxonomy::new(
            vec!["a".into()],
            vec![("c0".into(), SemanticDomain::Accommodation), ("c1".into(), SemanticDomain::Accommodation)],
            vec![("b0".into(), 0)],
        );
        assert!(matches!(err, Err(DomainError::InvalidTaxonomy(_))));
        let err = Taxonomy::new(
            vec!["a".into(), "a".into()],
            vec![("c0".into(), SemanticDomain::Accommodation)],
            vec![("b0".into(), 0)],
        );
        assert!(matches!(err, Err(DomainError::InvalidTaxonomy(_))));
    }

    #[test]
    fn taxonomy_wire_format_round_trips() {
        let tax = tiny_taxonomy();
        let json = serde_json::to_string(&tax).unwrap();
        assert!(json.contains("\"Grocery & Fresh Produce\""));
        let back: Taxonomy = serde_json::from_str(&json).unwrap();
        assert_eq!(back, tax);
    }

    #[test]
    fn ingestion_rejects_path_inconsistency() {
        let tax = tiny_taxonomy();
        let line = r#"{"user_id":"u","profile":{},"history":[{"need":"Family Care","category":"Economy Hotel","behavior":"Buy fruit","ts":0,"lat":0,"lon":0,"loc_type":"home"}]}"#;
        let err = read_records(line.as_bytes(), &tax).unwrap_err();
        assert!(err.to_string().contains("path inconsistency"), "{err}");
    }

    #[test]
    fn jsonl_round_trip() {
        let tax = tiny_taxonomy();
        let r = UserRecord {
            user_id: "u9".into(),
            profile: [("has_kids", "yes"), ("marital", "married")].into_iter().collect(),
            history: vec![Interaction { need_id: 1, category_id: 1, behavior_id: 1, context: ctx(1_700_000_000) }],
        };
        let mut buf = Vec::new();
        write_records(&mut buf, std::slice::from_ref(&r), &tax).unwrap();
        let back = read_records(buf.as_slice(), &tax).unwrap();
        assert_eq!(back, vec![r]);
    }
}
