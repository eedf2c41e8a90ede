//! INI run configuration. Every section is a flat `key = value` map; keys
//! map onto the fields of the corresponding library config, and anything
//! unrecognized is rejected by name.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use needforge::curation::CurationConfig;
use needforge::envsim::WorldSpec;
use needforge::policy::{PolicyMode, SamplingConfig};
use needforge::reward::{RewardParams, RewardWeights, Stage};
use needforge::trainer::{CurriculumPlan, GrpoConfig, KlReference, PhaseSpec};

pub const SECTIONS: [&str; 8] = ["curation", "world", "reward", "policy", "grpo", "curriculum", "agent", "eval"];

/// Raw sections as read from disk.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::read_text(path)?;
        Self::parse(&text).with_context(|| format!("{}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ini = ini::Ini::load_from_str(text).map_err(|e| anyhow!("config: {e}"))?;
        let mut sections = BTreeMap::new();
        for (name, props) in ini.iter() {
            let Some(name) = name else {
                if let Some((k, _)) = props.iter().next() {
                    bail!("config: key `{k}` appears outside any section");
                }
                continue;
            };
            if !SECTIONS.contains(&name) {
                bail!("config: unknown section [{name}]");
            }
            let map: &mut BTreeMap<String, String> = sections.entry(name.to_string()).or_default();
            for (k, v) in props.iter() {
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(RunConfig { sections })
    }

    fn section(&self, name: &str) -> BTreeMap<String, String> {
        self.sections.get(name).cloned().unwrap_or_default()
    }

    pub fn curation(&self) -> Result<CurationConfig> {
        let mut s = self.section("curation");
        overlay(CurationConfig::default(), &mut s, "curation", &[]).and_then(|c| finish(c, &s, "curation"))
    }

    /// World spec plus the user-generation knobs of the same section.
    pub fn world(&self) -> Result<(WorldSpec, UserGen)> {
        let mut s = self.section("world");
        let mut gen = UserGen::default();
        take(&mut s, "n_users", &mut gen.n_users)?;
        take(&mut s, "seq_min", &mut gen.seq_min)?;
        take(&mut s, "seq_max", &mut gen.seq_max)?;
        let spec = overlay(WorldSpec::default(), &mut s, "world", &["tables"])?;
        finish((spec, gen), &s, "world")
    }

    pub fn reward(&self) -> Result<(RewardParams, usize, u64)> {
        let mut s = self.section("reward");
        let mut w = RewardWeights::default();
        take(&mut s, "w_match", &mut w.w_match)?;
        take(&mut s, "w_fmt", &mut w.w_fmt)?;
        take(&mut s, "w_len", &mut w.w_len)?;
        let (mut dim, mut seed) = (256usize, 0u64);
        take(&mut s, "embed_dim", &mut dim)?;
        take(&mut s, "embed_seed", &mut seed)?;
        let mut p = overlay(RewardParams::default(), &mut s, "reward", &["need", "category", "full_path"])?;
        p.set_weights(w);
        p.validate().map_err(|e| anyhow!("config [reward]: {e}"))?;
        finish((p, dim, seed), &s, "reward")
    }

    pub fn policy(&self) -> Result<(PolicyMode, SamplingConfig)> {
        let mut s = self.section("policy");
        let mut mode = String::from("hierarchical");
        take(&mut s, "mode", &mut mode)?;
        let mode = match mode.as_str() {
            "hierarchical" => PolicyMode::Hierarchical,
            "flat" => PolicyMode::Flat,
            other => bail!("config [policy]: mode must be hierarchical or flat, got {other:?}"),
        };
        let sampling = overlay(SamplingConfig::default(), &mut s, "policy", &[])?;
        finish((mode, sampling), &s, "policy")
    }

    pub fn grpo(&self) -> Result<GrpoConfig> {
        let mut s = self.section("grpo");
        overlay(GrpoConfig::default(), &mut s, "grpo", &[]).and_then(|c| finish(c, &s, "grpo"))
    }

    /// Assembles the full training plan from [grpo], [curriculum],
    /// [policy] and [reward]. Phase `k` is seeded with `seed + k`.
    pub fn plan(&self, seed: u64) -> Result<CurriculumPlan> {
        let mut s = self.section("curriculum");
        let mut phases = String::from("need,category,full_path");
        let mut kl = String::from("phase_initial");
        let mut allow_reorder = false;
        let (mut probe_size, mut probe_seed) = (512usize, seed);
        take(&mut s, "phases", &mut phases)?;
        take(&mut s, "kl_reference", &mut kl)?;
        take(&mut s, "allow_reorder", &mut allow_reorder)?;
        take(&mut s, "probe_size", &mut probe_size)?;
        take(&mut s, "probe_seed", &mut probe_seed)?;
        finish((), &s, "curriculum")?;

        let grpo = self.grpo()?;
        let (mode, sampling) = self.policy()?;
        let (reward, embed_dim, embed_seed) = self.reward()?;
        let stages: Vec<Stage> = phases
            .split(',')
            .map(|p| p.parse::<Stage>().map_err(|e| anyhow!("config [curriculum]: {e}")))
            .collect::<Result<_>>()?;
        let kl_reference = match kl.as_str() {
            "phase_initial" => KlReference::PhaseInitial,
            "global_initial" => KlReference::GlobalInitial,
            other => bail!("config [curriculum]: kl_reference must be phase_initial or global_initial, got {other:?}"),
        };
        let phases = stages
            .iter()
            .enumerate()
            .map(|(k, stage)| PhaseSpec {
                stage: *stage,
                config: GrpoConfig { seed: seed.wrapping_add(k as u64), ..grpo.clone() },
            })
            .collect();
        let plan = CurriculumPlan {
            phases,
            mode,
            kl_reference,
            allow_reorder,
            sampling,
            reward,
            embed_dim,
            embed_seed,
            probe_size,
            probe_seed,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn agent(&self) -> Result<AgentSettings> {
        let mut s = self.section("agent");
        let mut a = AgentSettings::default();
        take(&mut s, "base_url", &mut a.base_url)?;
        take(&mut s, "model", &mut a.model)?;
        take(&mut s, "embed_base_url", &mut a.embed_base_url)?;
        take(&mut s, "embed_model", &mut a.embed_model)?;
        take(&mut s, "embed_dim", &mut a.embed_dim)?;
        take(&mut s, "max_in_flight", &mut a.max_in_flight)?;
        finish(a, &s, "agent")
    }

    pub fn eval_slices(&self) -> Result<Option<String>> {
        let mut s = self.section("eval");
        let mut slices: Option<String> = None;
        if let Some(v) = s.remove("slices") {
            slices = Some(v);
        }
        finish(slices, &s, "eval")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserGen {
    pub n_users: usize,
    pub seq_min: usize,
    pub seq_max: usize,
}

impl Default for UserGen {
    fn default() -> Self {
        UserGen { n_users: 200, seq_min: 2, seq_max: 30 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSettings {
    pub base_url: String,
    pub model: String,
    /// Falls back to the local hash embedder when empty.
    pub embed_base_url: String,
    pub embed_model: String,
    pub embed_dim: usize,
    pub max_in_flight: usize,
}

impl Default for AgentSettings {
    fn default() -> Self {
        AgentSettings {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            embed_base_url: String::new(),
            embed_model: "default".into(),
            embed_dim: 256,
            max_in_flight: 4,
        }
    }
}

fn take<T: std::str::FromStr>(s: &mut BTreeMap<String, String>, key: &str, slot: &mut T) -> Result<()>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = s.remove(key) {
        *slot = v.parse().map_err(|e| anyhow!("config: bad value {v:?} for `{key}`: {e}"))?;
    }
    Ok(())
}

fn finish<T>(value: T, rest: &BTreeMap<String, String>, section: &str) -> Result<T> {
    match rest.keys().next() {
        Some(k) => bail!("config [{section}]: unknown key `{k}`"),
        None => Ok(value),
    }
}

/// Overwrites the scalar fields of `base` named in `s`, removing the keys it
/// consumes. Values are typed after the field they replace.
fn overlay<T: Serialize + DeserializeOwned>(
    base: T,
    s: &mut BTreeMap<String, String>,
    section: &str,
    reserved: &[&str],
) -> Result<T> {
    let mut v = serde_json::to_value(&base).expect("configs serialize");
    let obj = v.as_object_mut().expect("configs are structs");
    let keys: Vec<String> = s.keys().cloned().collect();
    for k in keys {
        if reserved.contains(&k.as_str()) {
            continue;
        }
        let Some(slot) = obj.get_mut(&k) else { continue };
        let raw = s.remove(&k).expect("key listed");
        let bad = || anyhow!("config [{section}]: bad value {raw:?} for `{k}`");
        *slot = match slot {
            Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
            Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
            Value::Number(_) => Value::from(raw.parse::<f64>().map_err(|_| bad())?),
            Value::String(_) => Value::String(raw.clone()),
            _ => return Err(bad()),
        };
    }
    serde_json::from_value(v).map_err(|e| anyhow!("config [{section}]: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let cfg = RunConfig::parse("[grpo]\nlearning_rate = 0.5\nfrobs = 3\n").unwrap();
        let err = cfg.grpo().unwrap_err().to_string();
        assert!(err.contains("`frobs`"), "{err}");
    }

    #[test]
    fn unknown_section_rejected() {
        assert!(RunConfig::parse("[bogus]\na=1\n").is_err());
    }

    #[test]
    fn values_overlay_defaults() {
        let cfg = RunConfig::parse("[grpo]\nlearning_rate = 0.5\nsteps = 7\n[policy]\nmode = flat\ntemperature = 1.0\n")
            .unwrap();
        let g = cfg.grpo().unwrap();
        assert_eq!(g.learning_rate, 0.5);
        assert_eq!(g.steps, 7);
        assert_eq!(g.group_size, GrpoConfig::default().group_size);
        let (mode, s) = cfg.policy().unwrap();
        assert_eq!(mode, PolicyMode::Flat);
        assert_eq!(s.temperature, 1.0);
    }

    #[test]
    fn plan_seeds_phases() {
        let cfg = RunConfig::parse("[curriculum]\nphases = need,full_path\n").unwrap();
        let plan = cfg.plan(9).unwrap();
        assert_eq!(plan.phases.len(), 2);
        assert_eq!(plan.phases[1].config.seed, 10);
        assert_eq!(plan.probe_seed, 9);
    }

    #[test]
    fn bad_value_rejected() {
        let cfg = RunConfig::parse("[curation]\nk = many\n").unwrap();
        assert!(cfg.curation().unwrap_err().to_string().contains("`k`"));
    }
}
