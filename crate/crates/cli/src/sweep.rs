//! Grid enumeration and resumable execution of a lesion sweep.

use std::collections::{BTreeSet, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use lesionkit::battery::{Battery, PromptItem};
use lesionkit::generation::{dose_proxies, generate, DecodeConfig, GenerationStatus, Intervention};
use lesionkit::lesion::{LesionSpec, Severity, Strategy};
use lesionkit::model::{component_checksum, Backend};
use lesionkit::records::{write_manifest, ConditionKey, RecordStatus, RecordStore, ScoredRecord, RECORDS_FILE};
use lesionkit::scoring::{
    surface_features, ExternalScorer, HeuristicScorer, HttpAdapter, ResponseCache, SymptomSchema, SymptomVector,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ScorerConfig, SweepConfig};
use crate::error::{CliError, CliResult};
use crate::store::{read_proxies, ProxyRow, RunInfo, PROXIES_FILE, RUN_FILE, SCHEMA_FILE};

/// One lesion condition of the grid; `None` is the intact baseline.
pub type Condition = Option<LesionSpec>;

/// Intact baseline first, then strategy, layer, component and severity in
/// increasing order. Severity 0 stays in the grid as a per-component
/// identity lesion.
pub fn condition_grid(cfg: &SweepConfig, n_layers: usize) -> CliResult<Vec<Condition>> {
    let mut grid = vec![None];
    for strategy in cfg.strategies() {
        for layer in cfg.layers(n_layers)? {
            for component in cfg.components() {
                for severity in cfg.severities() {
                    grid.push(Some(LesionSpec::new(
                        cfg.model_id.clone(),
                        layer,
                        component,
                        severity,
                        strategy,
                        cfg.base_seed,
                    )));
                }
            }
        }
    }
    Ok(grid)
}

pub enum Scorer {
    Heuristic(HeuristicScorer),
    External(ExternalScorer<HttpAdapter>),
}

impl Scorer {
    pub fn from_config(cfg: &ScorerConfig) -> CliResult<Self> {
        Ok(match cfg {
            ScorerConfig::Heuristic => Scorer::Heuristic(HeuristicScorer::default()),
            ScorerConfig::External {
                scorer_id,
                endpoint,
                credential_env,
                cache_dir,
                workers,
                timeout_secs,
            } => {
                let mut adapter = HttpAdapter::new(scorer_id.clone(), endpoint.clone());
                if let Some(var) = credential_env {
                    adapter = adapter.with_credential_env(var.clone());
                }
                if let Some(t) = timeout_secs {
                    adapter.timeout = Duration::from_secs(*t);
                }
                let cache = cache_dir.as_ref().map(ResponseCache::open).transpose()?;
                let mut s = ExternalScorer::new(adapter, cache);
                if let Some(w) = workers {
                    s.workers = (*w).max(1);
                }
                Scorer::External(s)
            }
        })
    }

    /// Scores a batch; output order matches input.
    pub fn score_batch(&self, jobs: &[(&PromptItem, &str)], schema: &SymptomSchema) -> Vec<SymptomVector> {
        match self {
            Scorer::Heuristic(h) => jobs.iter().map(|(p, t)| h.score(p, t, schema)).collect(),
            Scorer::External(e) => e.score_batch(jobs, schema),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub n_conditions: usize,
    pub n_new_records: usize,
    pub n_skipped: usize,
    pub n_generation_failed: usize,
    pub n_scorer_failed: usize,
    pub n_new_proxies: usize,
    pub n_records_total: usize,
}

pub struct SweepRun<'a, B> {
    pub config: &'a SweepConfig,
    pub model: &'a B,
    pub battery: &'a Battery,
    pub schema: &'a SymptomSchema,
    pub scorer: &'a Scorer,
    pub jobs: usize,
}

fn intact_key(model_id: &str) -> ConditionKey {
    ConditionKey {
        model_id: model_id.to_string(),
        layer: None,
        component: None,
        severity: Severity::ZERO,
        strategy: Strategy::Zero,
    }
}

fn key_of(model_id: &str, cond: &Condition) -> ConditionKey {
    match cond {
        None => intact_key(model_id),
        Some(s) => ConditionKey {
            model_id: s.model_id.clone(),
            layer: Some(s.layer),
            component: Some(s.component),
            severity: s.severity,
            strategy: s.strategy,
        },
    }
}

struct Pending<'a> {
    ordinal: u64,
    prompt: &'a PromptItem,
}

impl<B: Backend + Clone + Send + Sync> SweepRun<'_, B> {
    /// Generates every missing (condition, prompt) pair and appends records in
    /// grid order, so the store's bytes do not depend on thread scheduling.
    pub fn execute(&self, store_dir: &Path) -> CliResult<SweepSummary> {
        let cfg = self.config;
        let store = RecordStore::open(store_dir)?;
        let existing = store.read_all()?;
        let done: HashSet<_> = existing.iter().map(ScoredRecord::generation_key).collect();
        let offset = existing.iter().map(|r| r.timestamp + 1).max().unwrap_or(0);
        let grid = condition_grid(cfg, self.model.n_layers())?;
        let fingerprint = cfg.decode.fingerprint();
        let n_prompts = self.battery.len() as u64;

        let mut summary = SweepSummary {
            n_conditions: grid.len(),
            ..Default::default()
        };
        let work: Vec<(usize, Vec<Pending>)> = grid
            .iter()
            .enumerate()
            .map(|(ci, cond)| {
                let key = key_of(&cfg.model_id, cond);
                let mask_seed = cond.as_ref().map_or(0, |s| s.mask_seed);
                let pending: Vec<Pending> = self
                    .battery
                    .items()
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| !done.contains(&(key.clone(), p.prompt_id.clone(), mask_seed, fingerprint.clone())))
                    .map(|(pi, p)| Pending {
                        ordinal: ci as u64 * n_prompts + pi as u64,
                        prompt: p,
                    })
                    .collect();
                (ci, pending)
            })
            .filter(|(_, p)| !p.is_empty())
            .collect();
        summary.n_skipped = grid.len() * self.battery.len() - work.iter().map(|(_, p)| p.len()).sum::<usize>();

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.max(1))
            .build()
            .map_err(|e| CliError::Environment(format!("thread pool: {e}")))?;
        // Chunks bound memory and make interrupted sweeps lose little work.
        let chunk = self.jobs.max(1) * 4;
        for batch in work.chunks(chunk) {
            let results: Vec<CliResult<Vec<ScoredRecord>>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|(ci, pending)| self.run_condition(&grid[*ci], pending, offset, &fingerprint))
                    .collect()
            });
            for rows in results {
                let rows = rows?;
                for r in &rows {
                    match r.status {
                        RecordStatus::GenerationFailed => summary.n_generation_failed += 1,
                        RecordStatus::ScorerFailed => summary.n_scorer_failed += 1,
                        RecordStatus::Ok => {}
                    }
                }
                summary.n_new_records += rows.len();
                store.append(&rows, Some(self.schema.len()))?;
            }
        }

        if cfg.proxies {
            summary.n_new_proxies = self.write_proxies(store_dir, &grid, &pool)?;
        }
        summary.n_records_total = existing.len() + summary.n_new_records;
        self.write_side_files(store_dir, grid.len(), summary.n_records_total)?;
        Ok(summary)
    }

    fn run_condition(&self, cond: &Condition, pending: &[Pending], offset: u64, fingerprint: &str) -> CliResult<Vec<ScoredRecord>> {
        let cfg = self.config;
        let mut model = self.model.clone();
        let decode: &DecodeConfig = &cfg.decode;
        let mut outs = Vec::with_capacity(pending.len());
        for p in pending {
            outs.push(generate(&mut model, cond.as_ref(), &p.prompt.rendered(), decode)?);
        }
        let ok: Vec<(&PromptItem, &str)> = pending
            .iter()
            .zip(&outs)
            .filter(|(_, g)| g.status == GenerationStatus::Ok)
            .map(|(p, g)| (p.prompt, g.text.as_str()))
            .collect();
        let mut scores = self.scorer.score_batch(&ok, self.schema).into_iter();
        let scorer_id = match self.scorer {
            Scorer::Heuristic(_) => lesionkit::scoring::HEURISTIC_SCORER_ID.to_string(),
            Scorer::External(e) => lesionkit::scoring::ScorerAdapter::scorer_id(e.adapter()).to_string(),
        };
        Ok(pending
            .iter()
            .zip(outs)
            .map(|(p, g)| {
                let (status, symptoms) = if g.status == GenerationStatus::Ok {
                    let v = scores.next().expect("one score per generation");
                    let st = if v.is_scored() { RecordStatus::Ok } else { RecordStatus::ScorerFailed };
                    (st, v)
                } else {
                    if let Some(e) = &g.error {
                        log::warn!("generation failed for {}: {e}", p.prompt.prompt_id);
                    }
                    (RecordStatus::GenerationFailed, SymptomVector::failed(scorer_id.clone()))
                };
                ScoredRecord {
                    model_id: cfg.model_id.clone(),
                    layer: cond.as_ref().map(|s| s.layer),
                    component: cond.as_ref().map(|s| s.component),
                    severity: cond.as_ref().map_or(0.0, |s| s.severity.value()),
                    strategy: cond.as_ref().map_or(Strategy::Zero, |s| s.strategy),
                    base_seed: cfg.base_seed,
                    mask_seed: cond.as_ref().map_or(0, |s| s.mask_seed),
                    prompt_id: p.prompt.prompt_id.clone(),
                    subtest: p.prompt.subtest,
                    decode_fingerprint: fingerprint.to_string(),
                    token_count: g.token_ids.len(),
                    features: surface_features(p.prompt, &g.text),
                    response_text: g.text,
                    status,
                    symptoms,
                    timestamp: offset + p.ordinal,
                }
            })
            .collect())
    }

    /// Next-token KL and residual change per lesion condition, over the
    /// rendered battery. Existing rows are kept.
    fn write_proxies(&self, store_dir: &Path, grid: &[Condition], pool: &rayon::ThreadPool) -> CliResult<usize> {
        let path = store_dir.join(PROXIES_FILE);
        let have: BTreeSet<ConditionKey> = read_proxies(&path)?.into_iter().map(|r| r.key()).collect();
        let prompts: Vec<String> = self.battery.items().iter().map(PromptItem::rendered).collect();
        let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
        let todo: Vec<&LesionSpec> = grid
            .iter()
            .flatten()
            .filter(|s| !have.contains(&key_of(&self.config.model_id, &Some((*s).clone()))))
            .collect();
        let rows: Vec<CliResult<ProxyRow>> = pool.install(|| {
            todo.par_iter()
                .map(|spec| {
                    let mut model = self.model.clone();
                    let d = dose_proxies(&mut model, Intervention::Lesion(spec), &refs)?;
                    Ok(ProxyRow {
                        model_id: spec.model_id.clone(),
                        layer: spec.layer,
                        component: spec.component,
                        severity: spec.severity.value(),
                        strategy: spec.strategy,
                        next_token_kl: d.next_token_kl,
                        residual_change: d.residual_change,
                    })
                })
                .collect()
        });
        let mut buf = Vec::new();
        for r in rows {
            serde_json::to_writer(&mut buf, &r?)?;
            buf.push(b'\n');
        }
        if !buf.is_empty() {
            OpenOptions::new().create(true).append(true).open(&path)?.write_all(&buf)?;
        }
        Ok(todo.len())
    }

    fn write_side_files(&self, store_dir: &Path, n_conditions: usize, n_records: usize) -> CliResult<()> {
        let cfg = self.config;
        let info = RunInfo {
            schema_version: crate::config::CONFIG_SCHEMA_VERSION,
            model_id: cfg.model_id.clone(),
            family: cfg.family(),
            n_layers: self.model.n_layers(),
            model_checksum: component_checksum(self.model)?,
            config_sha256: cfg.canonical_sha256(),
            base_seed: cfg.base_seed,
            decode_fingerprint: cfg.decode.fingerprint(),
            symptom_schema_version: self.schema.version().to_string(),
            battery_size: self.battery.len(),
            n_conditions,
            n_records,
        };
        fs::write(store_dir.join(RUN_FILE), serde_json::to_string_pretty(&info)? + "\n")?;
        fs::write(store_dir.join(SCHEMA_FILE), self.schema.to_json())?;
        let mut files: Vec<PathBuf> = vec![RECORDS_FILE.into(), RUN_FILE.into(), SCHEMA_FILE.into()];
        if store_dir.join(PROXIES_FILE).exists() {
            files.push(PROXIES_FILE.into());
        }
        write_manifest(store_dir, &files)?;
        Ok(())
    }
}

/// Loads everything the config names and runs the sweep.
pub fn cmd_sweep(cfg: &SweepConfig, store_dir: &Path, jobs: usize) -> CliResult<SweepSummary> {
    let model = cfg.load_model()?;
    let battery = cfg.load_battery()?;
    let schema = cfg.load_schema()?;
    let scorer = Scorer::from_config(&cfg.scorer)?;
    SweepRun {
        config: cfg,
        model: &model,
        battery: &battery,
        schema: &schema,
        scorer: &scorer,
        jobs,
    }
    .execute(store_dir)
}
