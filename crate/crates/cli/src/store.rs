//! Side files next to a record store and multi-store loading.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use lesionkit::lesion::{Severity, Strategy};
use lesionkit::model::ComponentKind;
use lesionkit::records::{read_records, sha256_file, ConditionKey, ScoredRecord, MANIFEST_FILE, RECORDS_FILE};
use lesionkit::scoring::SymptomSchema;
use serde::{Deserialize, Serialize};

use crate::config::family_of;
use crate::error::{CliError, CliResult};

pub const RUN_FILE: &str = "run.json";
pub const PROXIES_FILE: &str = "proxies.jsonl";
pub const SCHEMA_FILE: &str = "schema.json";

/// Deterministic run description: no paths, no wall-clock times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunInfo {
    pub schema_version: u32,
    pub model_id: String,
    pub family: String,
    pub n_layers: usize,
    pub model_checksum: String,
    pub config_sha256: String,
    pub base_seed: u64,
    pub decode_fingerprint: String,
    pub symptom_schema_version: String,
    pub battery_size: usize,
    pub n_conditions: usize,
    pub n_records: usize,
}

/// Dose proxies of one lesion condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyRow {
    pub model_id: String,
    pub layer: usize,
    pub component: ComponentKind,
    pub severity: f64,
    pub strategy: Strategy,
    pub next_token_kl: f64,
    pub residual_change: f64,
}

impl ProxyRow {
    pub fn key(&self) -> ConditionKey {
        ConditionKey {
            model_id: self.model_id.clone(),
            layer: Some(self.layer),
            component: Some(self.component),
            severity: Severity::new(self.severity).unwrap_or(Severity::FULL),
            strategy: self.strategy,
        }
    }
}

/// Missing file reads as empty.
pub fn read_proxies(path: &Path) -> CliResult<Vec<ProxyRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CliError::Environment(format!("{} line {i}: {e}", path.display())))?,
        );
    }
    Ok(out)
}

/// Digest of one input store, embedded in analysis outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub records_sha256: String,
    pub n_records: usize,
}

/// One or more stores merged for analysis.
#[derive(Debug, Clone)]
pub struct LoadedStores {
    pub records: Vec<ScoredRecord>,
    pub schema: SymptomSchema,
    pub runs: Vec<RunInfo>,
    pub proxies: Vec<ProxyRow>,
    pub inputs: Vec<InputDigest>,
    pub dirs: Vec<PathBuf>,
}

impl LoadedStores {
    pub fn load(dirs: &[PathBuf]) -> CliResult<Self> {
        if dirs.is_empty() {
            return Err(CliError::Usage("at least one --store is required".into()));
        }
        let mut records = Vec::new();
        let mut runs = Vec::new();
        let mut proxies = Vec::new();
        let mut inputs = Vec::new();
        let mut schema: Option<SymptomSchema> = None;
        for dir in dirs {
            let path = dir.join(RECORDS_FILE);
            if !path.exists() {
                return Err(CliError::Environment(format!("no {RECORDS_FILE} in {}", dir.display())));
            }
            let rows = read_records(&path)?;
            inputs.push(InputDigest {
                records_sha256: sha256_file(&path)?,
                n_records: rows.len(),
            });
            records.extend(rows);
            let schema_path = dir.join(SCHEMA_FILE);
            let s = if schema_path.exists() {
                SymptomSchema::load(&schema_path)?
            } else {
                SymptomSchema::default_schema()
            };
            match &schema {
                Some(prev) if prev != &s => {
                    return Err(CliError::Usage(format!("store {} uses a different symptom schema", dir.display())))
                }
                Some(_) => {}
                None => schema = Some(s),
            }
            let run_path = dir.join(RUN_FILE);
            if run_path.exists() {
                runs.push(serde_json::from_str(&fs::read_to_string(&run_path)?)?);
            }
            proxies.extend(read_proxies(&dir.join(PROXIES_FILE))?);
        }
        let schema = schema.expect("at least one store");
        for (i, r) in records.iter().enumerate() {
            r.validate(Some(schema.len()))
                .map_err(|m| CliError::Usage(format!("record {i}: {m}")))?;
        }
        Ok(Self {
            records,
            schema,
            runs,
            proxies,
            inputs,
            dirs: dirs.to_vec(),
        })
    }

    /// Layer count per model: from run.json when known, else max layer + 1.
    pub fn n_layers(&self) -> BTreeMap<String, usize> {
        let mut out: BTreeMap<String, usize> = BTreeMap::new();
        for r in &self.records {
            if let Some(l) = r.layer {
                let e = out.entry(r.model_id.clone()).or_insert(0);
                *e = (*e).max(l + 1);
            }
        }
        for run in &self.runs {
            out.insert(run.model_id.clone(), run.n_layers);
        }
        out
    }

    pub fn family(&self, model_id: &str) -> String {
        self.runs
            .iter()
            .find(|r| r.model_id == model_id)
            .map_or_else(|| family_of(model_id), |r| r.family.clone())
    }

    /// SHA-256 of each store's manifest, when present.
    pub fn manifest_digests(&self) -> Vec<Option<String>> {
        self.dirs
            .iter()
            .map(|d| sha256_file(&d.join(MANIFEST_FILE)).ok())
            .collect()
    }
}
