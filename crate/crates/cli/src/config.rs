//! Sweep configuration: a JSON document with a schema version.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "model_id": "toy",
//!   "model": { "toy": { "vocab_size": 258, "d_model": 32, "n_layers": 4,
//!                       "n_heads": 4, "d_ffn": 64, "init_seed": 0 } },
//!   "components": "all",
//!   "layers": "all",
//!   "severities": [0.0, 0.25, 0.5, 0.75, 1.0],
//!   "scorer": { "kind": "heuristic" }
//! }
//! ```
//!
//! `model` may instead be `{ "bundle": "<dir>" }`. Relative paths resolve
//! against the config file's directory.

use std::path::{Path, PathBuf};

use lesionkit::battery::Battery;
use lesionkit::generation::DecodeConfig;
use lesionkit::lesion::{Severity, Strategy};
use lesionkit::model::{load_bundle, ComponentKind, ModelConfig, ToyModel};
use lesionkit::scoring::SymptomSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllKeyword {
    All,
}

/// `"all"` or an explicit list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Selection<T> {
    All(AllKeyword),
    List(Vec<T>),
}

impl<T> Default for Selection<T> {
    fn default() -> Self {
        Selection::All(AllKeyword::All)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    Toy(ModelConfig),
    Bundle(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatterySource {
    #[default]
    Builtin,
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerConfig {
    #[default]
    Heuristic,
    External {
        scorer_id: String,
        endpoint: String,
        /// Environment variable holding the bearer credential.
        #[serde(default)]
        credential_env: Option<String>,
        #[serde(default)]
        cache_dir: Option<PathBuf>,
        #[serde(default)]
        workers: Option<usize>,
        #[serde(default)]
        timeout_secs: Option<u64>,
    },
}

fn default_severities() -> Vec<f64> {
    Severity::GRID.iter().map(|s| s.value()).collect()
}

fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::Zero]
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub schema_version: u32,
    pub model_id: String,
    /// Model family for leave-family analyses; defaults to the model id up
    /// to its first `-`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    pub model: ModelSource,
    /// `"builtin"` or a path to a battery JSON file.
    #[serde(default, with = "battery_source")]
    pub battery: BatterySource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symptom_schema: Option<PathBuf>,
    #[serde(default)]
    pub components: Selection<ComponentKind>,
    #[serde(default)]
    pub layers: Selection<usize>,
    #[serde(default = "default_severities")]
    pub severities: Vec<f64>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub scorer: ScorerConfig,
    /// Record next-token KL and residual change per lesion condition.
    #[serde(default = "default_true")]
    pub proxies: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
}

mod battery_source {
    use super::BatterySource;
    use serde::{Deserialize, Deserializer, Serializer};
    use std::path::PathBuf;

    pub fn serialize<S: Serializer>(b: &BatterySource, s: S) -> Result<S::Ok, S::Error> {
        match b {
            BatterySource::Builtin => s.serialize_str("builtin"),
            BatterySource::Path(p) => s.serialize_str(&p.to_string_lossy()),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BatterySource, D::Error> {
        let v = String::deserialize(d)?;
        Ok(if v == "builtin" { BatterySource::Builtin } else { BatterySource::Path(PathBuf::from(v)) })
    }
}

pub fn family_of(model_id: &str) -> String {
    model_id.split('-').next().unwrap_or(model_id).to_string()
}

impl SweepConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: SweepConfig = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let ModelSource::Bundle(p) = &mut cfg.model {
            resolve(p);
        }
        if let BatterySource::Path(p) = &mut cfg.battery {
            resolve(p);
        }
        if let Some(p) = cfg.symptom_schema.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.store.as_mut() {
            resolve(p);
        }
        if let ScorerConfig::External { cache_dir: Some(p), .. } = &mut cfg.scorer {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return usage(format!("unsupported config schema_version {} (expected {CONFIG_SCHEMA_VERSION})", self.schema_version));
        }
        if self.model_id.is_empty() {
            return usage("model_id is empty".into());
        }
        if matches!(&self.components, Selection::List(v) if v.is_empty()) {
            return usage("components is empty".into());
        }
        if matches!(&self.layers, Selection::List(v) if v.is_empty()) {
            return usage("layers is empty".into());
        }
        if self.severities.is_empty() {
            return usage("severities is empty".into());
        }
        for &s in &self.severities {
            Severity::new(s).map_err(|e| CliError::Usage(format!("severity {s}: {e}")))?;
        }
        if self.strategies.is_empty() {
            return usage("strategies is empty".into());
        }
        if self.jobs == Some(0) {
            return usage("jobs must be at least 1".into());
        }
        self.decode.validate().map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn family(&self) -> String {
        self.family.clone().unwrap_or_else(|| family_of(&self.model_id))
    }

    pub fn components(&self) -> Vec<ComponentKind> {
        match &self.components {
            Selection::All(_) => ComponentKind::ALL.to_vec(),
            Selection::List(v) => {
                let mut v = v.clone();
                v.sort();
                v.dedup();
                v
            }
        }
    }

    pub fn layers(&self, n_layers: usize) -> CliResult<Vec<usize>> {
        match &self.layers {
            Selection::All(_) => Ok((0..n_layers).collect()),
            Selection::List(v) => {
                if let Some(l) = v.iter().find(|&&l| l >= n_layers) {
                    return Err(CliError::Usage(format!("layer {l} out of range for a {n_layers}-layer model")));
                }
                let mut v = v.clone();
                v.sort();
                v.dedup();
                Ok(v)
            }
        }
    }

    /// Distinct severities in increasing order.
    pub fn severities(&self) -> Vec<Severity> {
        let mut v: Vec<Severity> = self.severities.iter().map(|&s| Severity::new(s).unwrap()).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn strategies(&self) -> Vec<Strategy> {
        let mut v = self.strategies.clone();
        v.sort();
        v.dedup();
        v
    }

    /// Environment failures (exit 2) for unreadable or corrupt models.
    pub fn load_model(&self) -> CliResult<ToyModel> {
        match &self.model {
            ModelSource::Toy(c) => ToyModel::build(c.clone()).map_err(|e| CliError::Usage(format!("model config: {e}"))),
            ModelSource::Bundle(p) => load_bundle(p).map_err(|e| CliError::Environment(format!("cannot load bundle {}: {e}", p.display()))),
        }
    }

    pub fn load_battery(&self) -> CliResult<Battery> {
        match &self.battery {
            BatterySource::Builtin => Ok(Battery::builtin()),
            BatterySource::Path(p) => Ok(Battery::load(p)?),
        }
    }

    pub fn load_schema(&self) -> CliResult<SymptomSchema> {
        load_schema(self.symptom_schema.as_deref())
    }

    /// Canonical JSON with the store location and job count removed, so
    /// that runs differing only in where they write hash identically.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.store = None;
        c.jobs = None;
        serde_json::to_string(&c).expect("config serializes")
    }

    pub fn canonical_sha256(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

pub fn load_schema(path: Option<&Path>) -> CliResult<SymptomSchema> {
    match path {
        None => Ok(SymptomSchema::default_schema()),
        Some(p) => Ok(SymptomSchema::load(p)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"schema_version": 1, "model_id": "toy-a", "model": {"toy": {"vocab_size": 258, "d_model": 8, "n_layers": 2, "n_heads": 2, "d_ffn": 16, "init_seed": 1}}}"#;

    #[test]
    fn defaults_fill_the_grid() {
        let c = SweepConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.components().len(), 7);
        assert_eq!(c.layers(2).unwrap(), vec![0, 1]);
        assert_eq!(c.severities().len(), 5);
        assert_eq!(c.strategies(), vec![Strategy::Zero]);
        assert_eq!(c.family(), "toy");
        assert_eq!(c.scorer, ScorerConfig::Heuristic);
        assert_eq!(c.battery, BatterySource::Builtin);
        assert!(c.proxies);
    }

    #[test]
    fn rejects_invalid_configs() {
        let bad = [
            MINIMAL.replace("\"schema_version\": 1", "\"schema_version\": 2"),
            MINIMAL.replace("}}}", "}}, \"severities\": [1.5]}"),
            MINIMAL.replace("}}}", "}}, \"components\": []}"),
            MINIMAL.replace("}}}", "}}, \"bogus\": 1}"),
            MINIMAL.replace("}}}", "}}, \"decode\": {\"top_p\": 0}}"),
        ];
        for b in &bad {
            assert!(matches!(SweepConfig::from_json(b), Err(CliError::Usage(_))), "{b}");
        }
        let c = SweepConfig::from_json(&MINIMAL.replace("}}}", "}}, \"layers\": [5]}")).unwrap();
        assert!(c.layers(2).is_err());
    }

    #[test]
    fn canonical_form_ignores_store() {
        let a = SweepConfig::from_json(&MINIMAL.replace("}}}", "}}, \"store\": \"x\"}")).unwrap();
        let b = SweepConfig::from_json(MINIMAL).unwrap();
        assert_eq!(a.canonical_sha256(), b.canonical_sha256());
        let parsed: SweepConfig = serde_json::from_str(&a.canonical_json()).unwrap();
        assert_eq!(parsed.battery, BatterySource::Builtin);
    }
}
