//! Synthetic record stores with a known FFN-versus-attention effect.
//!
//! Each (model, symptom) pair gets a base rate in `[0.02, 0.2]`; responses of
//! FFN-lesioned conditions have `shift_pp` added on the FFN-shift symptoms.
//! Every bit is an independent Bernoulli draw from the record's own counter
//! substream, so the store is a function of the config alone.

use std::fs;
use std::path::{Path, PathBuf};

use lesionkit::battery::Battery;
use lesionkit::lesion::{derive_mask_seed, Severity, Strategy};
use lesionkit::model::{ComponentKind, Mechanism};
use lesionkit::records::{write_manifest, RecordStatus, RecordStore, ScoredRecord, RECORDS_FILE};
use lesionkit::rng::CounterRng;
use lesionkit::scoring::{names, surface_features, SymptomSchema, SymptomVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::store::{ProxyRow, RunInfo, PROXIES_FILE, RUN_FILE, SCHEMA_FILE};

const RATE_SALT: u64 = 0x5717_0000_0000_0001;
const ROW_SALT: u64 = 0x5717_0000_0000_0002;
const PROXY_SALT: u64 = 0x5717_0000_0000_0003;

/// Model ids cycle through these families so leave-family folds exist.
const FAMILIES: [&str; 3] = ["alpha", "beta", "gamma"];

const WORDS: [&str; 16] = [
    "the", "boy", "went", "to", "store", "and", "bought", "bread", "then", "he", "walked", "home", "slowly", "with",
    "his", "dog",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_models: usize,
    pub n_layers: usize,
    pub severities: Vec<f64>,
    pub n_prompts: usize,
    pub shift_pp: f64,
    pub seed: u64,
    /// Also emit the intact baseline rows.
    pub intact: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_models: 5,
            n_layers: 6,
            severities: vec![0.25, 0.5, 0.75, 1.0],
            n_prompts: 20,
            shift_pp: 5.0,
            seed: 0,
            intact: true,
        }
    }
}

impl SynthConfig {
    pub fn model_ids(&self) -> Vec<String> {
        (0..self.n_models)
            .map(|m| format!("{}-{}", FAMILIES[m % FAMILIES.len()], m / FAMILIES.len() + 1))
            .collect()
    }

    fn validate(&self, battery: &Battery) -> CliResult<()> {
        let bad = |m: &str| Err(CliError::Usage(format!("synth: {m}")));
        if self.n_models == 0 || self.n_layers == 0 || self.severities.is_empty() {
            return bad("models, layers and severities must be nonempty");
        }
        if self.n_prompts == 0 || self.n_prompts > battery.len() {
            return bad(&format!("n_prompts must lie in 1..={}", battery.len()));
        }
        if !(self.shift_pp.is_finite() && (0.0..=80.0).contains(&self.shift_pp)) {
            return bad("shift_pp must lie in [0, 80]");
        }
        for &s in &self.severities {
            if Severity::new(s).map_or(true, |s| s.is_zero()) {
                return bad("severities must lie in (0, 1]");
            }
        }
        Ok(())
    }
}

fn response(rng: &mut CounterRng) -> String {
    let n = 3 + rng.index(14);
    (0..n).map(|_| WORDS[rng.index(WORDS.len())]).collect::<Vec<_>>().join(" ")
}

/// Every record of the synthetic design, in a fixed order.
pub fn synth_records(cfg: &SynthConfig, schema: &SymptomSchema) -> CliResult<Vec<ScoredRecord>> {
    let battery = Battery::builtin();
    cfg.validate(&battery)?;
    let shifted: Vec<bool> = schema.names().iter().map(|n| names::FFN_SHIFT.contains(n)).collect();
    let prompts = &battery.items()[..cfg.n_prompts];
    let mut out = Vec::new();
    let mut ordinal = 0u64;
    for (m, model_id) in cfg.model_ids().into_iter().enumerate() {
        let mut rate_rng = CounterRng::substream(cfg.seed ^ RATE_SALT, m as u64);
        let base: Vec<f64> = (0..schema.len()).map(|_| 0.02 + 0.18 * rate_rng.next_f64()).collect();
        let mut conditions: Vec<Option<(usize, ComponentKind, Severity)>> = Vec::new();
        if cfg.intact {
            conditions.push(None);
        }
        for layer in 0..cfg.n_layers {
            for kind in ComponentKind::ALL {
                for &s in &cfg.severities {
                    conditions.push(Some((layer, kind, Severity::new(s).unwrap())));
                }
            }
        }
        for cond in conditions {
            let ffn = cond.is_some_and(|(_, k, _)| k.mechanism() == Mechanism::Ffn);
            for p in prompts {
                let mut rng = CounterRng::substream(cfg.seed ^ ROW_SALT, ordinal);
                let bits: Vec<bool> = (0..schema.len())
                    .map(|j| {
                        let shift = if ffn && shifted[j] { cfg.shift_pp / 100.0 } else { 0.0 };
                        rng.bernoulli(base[j] + shift)
                    })
                    .collect();
                let text = response(&mut rng);
                let mask_seed = cond.map_or(0, |(l, k, s)| derive_mask_seed(&model_id, k, l, s, Strategy::Zero, cfg.seed));
                out.push(ScoredRecord {
                    model_id: model_id.clone(),
                    layer: cond.map(|c| c.0),
                    component: cond.map(|c| c.1),
                    severity: cond.map_or(0.0, |c| c.2.value()),
                    strategy: Strategy::Zero,
                    base_seed: cfg.seed,
                    mask_seed,
                    prompt_id: p.prompt_id.clone(),
                    subtest: p.subtest,
                    decode_fingerprint: "synthetic".into(),
                    token_count: text.len(),
                    features: surface_features(p, &text),
                    response_text: text,
                    status: RecordStatus::Ok,
                    symptoms: SymptomVector::scored("synthetic", bits),
                    timestamp: ordinal,
                });
                ordinal += 1;
            }
        }
    }
    Ok(out)
}

/// Dose proxies growing with severity, with log-normal jitter; attention
/// and FFN conditions share one distribution.
pub fn synth_proxies(cfg: &SynthConfig) -> Vec<ProxyRow> {
    let mut out = Vec::new();
    let mut i = 0u64;
    for model_id in cfg.model_ids() {
        for layer in 0..cfg.n_layers {
            for kind in ComponentKind::ALL {
                for &s in &cfg.severities {
                    let mut rng = CounterRng::substream(cfg.seed ^ PROXY_SALT, i);
                    i += 1;
                    out.push(ProxyRow {
                        model_id: model_id.clone(),
                        layer,
                        component: kind,
                        severity: s,
                        strategy: Strategy::Zero,
                        next_token_kl: 0.05 * s * (0.8 * rng.normal()).exp(),
                        residual_change: 0.2 * s * (0.5 * rng.normal()).exp(),
                    });
                }
            }
        }
    }
    out
}

/// Writes records, proxies, schema, run description and manifest.
pub fn cmd_synth(cfg: &SynthConfig, out_dir: &Path) -> CliResult<usize> {
    let schema = SymptomSchema::default_schema();
    let records = synth_records(cfg, &schema)?;
    if out_dir.join(RECORDS_FILE).exists() {
        return Err(CliError::Usage(format!("{} already holds a record store", out_dir.display())));
    }
    let store = RecordStore::open(out_dir)?;
    store.append(&records, Some(schema.len()))?;
    let mut buf = String::new();
    for p in synth_proxies(cfg) {
        buf.push_str(&serde_json::to_string(&p)?);
        buf.push('\n');
    }
    fs::write(out_dir.join(PROXIES_FILE), buf)?;
    fs::write(out_dir.join(SCHEMA_FILE), schema.to_json())?;
    let cfg_json = serde_json::to_string(cfg)?;
    let info = RunInfo {
        schema_version: crate::config::CONFIG_SCHEMA_VERSION,
        model_id: "synthetic".into(),
        family: "synthetic".into(),
        n_layers: cfg.n_layers,
        model_checksum: "none".into(),
        config_sha256: hex::encode(Sha256::digest(cfg_json.as_bytes())),
        base_seed: cfg.seed,
        decode_fingerprint: "synthetic".into(),
        symptom_schema_version: schema.version().to_string(),
        battery_size: cfg.n_prompts,
        n_conditions: records.len() / cfg.n_prompts,
        n_records: records.len(),
    };
    fs::write(out_dir.join(RUN_FILE), serde_json::to_string_pretty(&info)? + "\n")?;
    let files: Vec<PathBuf> = [RECORDS_FILE, PROXIES_FILE, RUN_FILE, SCHEMA_FILE].map(PathBuf::from).to_vec();
    write_manifest(out_dir, &files)?;
    Ok(records.len())
}
