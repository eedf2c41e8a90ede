//! Need-driven hierarchical recommendation at desk scale.
//!
//! The crate models a user's next consumption as a path
//! need → category → behavior and provides:
//!
//! - [`domain`]: taxonomy, users, interactions and dataset statistics
//! - [`curation`]: clustering-based outlier pruning and adaptive sampling
//! - [`envsim`]: a synthetic world with an exact ground-truth oracle
//! - [`reward`]: verifiable match, format and length rewards
//! - [`policy`]: a factored log-linear policy over the decision path
//! - [`trainer`]: group-relative policy optimization with a staged curriculum
//! - [`agent`]: the three-step prompt protocol and chat/embedding backends
//! - [`eval`]: HR@k, NDCG@k, need accuracy and cohort slices

pub mod agent;
pub mod curation;
pub mod domain;
pub mod envsim;
pub mod eval;
pub mod numeric;
pub mod policy;
pub mod reward;
pub mod trainer;
