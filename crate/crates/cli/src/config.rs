//! The single JSON run configuration and its layered overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use stackdrive::datagen::DatagenConfig;
use stackdrive::learning::LearnConfig;
use stackdrive::planner::PlannerConfig;
use stackdrive::{Scenario, SolverConfig, TypeDistribution};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    /// Driver types and their weights during meta-training.
    pub population: TypeDistribution,
    pub learning: LearnConfig,
    pub datagen: DatagenConfig,
    pub planner: PlannerConfig,
    pub solver: SolverConfig,
}

impl RunConfig {
    /// Defaults, then the file, then `key.path=value` assignments in order.
    pub fn load(file: Option<&Path>, assignments: &[String]) -> CliResult<Self> {
        let mut doc = serde_json::to_value(Self::default()).expect("config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
            let layer: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            check_keys(&doc, &layer, "")?;
            merge(&mut doc, layer);
        }
        for a in assignments {
            set_path(&mut doc, a)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let wrap = |e: stackdrive::Error| CliError::Config(e.to_string());
        self.scenario.validate().map_err(wrap)?;
        self.population.validate().map_err(wrap)?;
        self.learning.validate().map_err(wrap)?;
        self.datagen.policies.validate().map_err(wrap)?;
        Ok(())
    }
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `section.key=value`; the value is parsed as JSON, falling back to a string.
pub fn set_path(doc: &mut Value, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("expected key.path=value, got `{assignment}`")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = doc;
    for key in path.split('.') {
        let Value::Object(map) = slot else {
            return Err(CliError::Config(format!("`{path}` does not name a config key")));
        };
        slot = map.get_mut(key).ok_or_else(|| CliError::Config(format!("unknown config key `{path}`")))?;
    }
    *slot = value;
    Ok(())
}

/// Rejects keys of `layer` that the defaults document does not have.
fn check_keys(base: &Value, layer: &Value, prefix: &str) -> CliResult<()> {
    if let (Value::Object(b), Value::Object(l)) = (base, layer) {
        for (k, v) in l {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            let slot = b.get(k).ok_or_else(|| CliError::Config(format!("unknown config key `{path}`")))?;
            check_keys(slot, v, &path)?;
        }
    }
    Ok(())
}
