//! Scored-record store, deduplication, condition profiles and manifests.
//!
//! Records live one JSON object per line in `records.jsonl`. An append
//! validates every row first, serialises the whole batch into one buffer and
//! writes it under an exclusive file lock, so concurrent appenders never
//! interleave partial lines.
//!
//! Deduplication keeps, per (model, layer, component, severity, strategy,
//! prompt), the record with the smallest `timestamp`, file order breaking
//! ties. `timestamp` is a logical sequence number assigned by the writer.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::battery::Subtest;
use crate::error::{Error, Result};
use crate::lesion::{Severity, Strategy};
use crate::model::{ComponentKind, Mechanism};
use crate::scoring::{ScoreStatus, SurfaceFeatures, SymptomVector};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "MANIFEST.sha256";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    GenerationFailed,
    ScorerFailed,
}

/// One generated response. `layer` and `component` are `None` only for
/// intact baselines, which have severity 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredRecord {
    pub model_id: String,
    pub layer: Option<usize>,
    pub component: Option<ComponentKind>,
    pub severity: f64,
    pub strategy: Strategy,
    pub base_seed: u64,
    pub mask_seed: u64,
    pub prompt_id: String,
    pub subtest: Subtest,
    pub decode_fingerprint: String,
    pub response_text: String,
    pub token_count: usize,
    pub status: RecordStatus,
    pub symptoms: SymptomVector,
    pub features: SurfaceFeatures,
    pub timestamp: u64,
}

impl ScoredRecord {
    pub fn severity_key(&self) -> Severity {
        Severity::new(self.severity).unwrap_or(Severity::FULL)
    }

    pub fn condition_key(&self) -> ConditionKey {
        ConditionKey {
            model_id: self.model_id.clone(),
            layer: self.layer,
            component: self.component,
            severity: self.severity_key(),
            strategy: self.strategy,
        }
    }

    /// Condition plus prompt: the deduplication key.
    pub fn dedup_key(&self) -> (ConditionKey, String) {
        (self.condition_key(), self.prompt_id.clone())
    }

    /// Identity of the generation itself.
    pub fn generation_key(&self) -> (ConditionKey, String, u64, String) {
        (
            self.condition_key(),
            self.prompt_id.clone(),
            self.mask_seed,
            self.decode_fingerprint.clone(),
        )
    }

    pub fn is_intact(&self) -> bool {
        self.layer.is_none()
    }

    /// Schema checks; `n_symptoms` additionally enforces bit alignment.
    pub fn validate(&self, n_symptoms: Option<usize>) -> std::result::Result<(), String> {
        if !self.severity.is_finite() || !(0.0..=1.0).contains(&self.severity) {
            return Err(format!("severity {} outside [0, 1]", self.severity));
        }
        match (self.layer, self.component) {
            (Some(_), Some(_)) => {}
            (None, None) if self.severity == 0.0 => {}
            (None, None) => return Err("intact rows must have severity 0".into()),
            _ => return Err("layer and component must both be set or both be absent".into()),
        }
        if self.model_id.is_empty() || self.prompt_id.is_empty() {
            return Err("empty model_id or prompt_id".into());
        }
        let expected = match self.status {
            RecordStatus::Ok => ScoreStatus::Scored,
            RecordStatus::GenerationFailed | RecordStatus::ScorerFailed => ScoreStatus::ScorerFailed,
        };
        if self.symptoms.status != expected {
            return Err(format!(
                "record status {:?} disagrees with symptom status {:?}",
                self.status, self.symptoms.status
            ));
        }
        match n_symptoms {
            Some(n) => self.symptoms.validate(n)?,
            None => {
                let len = self.symptoms.bits().map_or(0, <[bool]>::len);
                self.symptoms.validate(len)?
            }
        }
        if !self.features.ratios_in_unit_interval() {
            return Err("surface-feature ratio outside [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditionKey {
    pub model_id: String,
    pub layer: Option<usize>,
    pub component: Option<ComponentKind>,
    pub severity: Severity,
    pub strategy: Strategy,
}

impl ConditionKey {
    pub fn stratum(&self) -> Option<StratumKey> {
        Some(StratumKey {
            model_id: self.model_id.clone(),
            layer: self.layer?,
            severity: self.severity,
            strategy: self.strategy,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StratumKey {
    pub model_id: String,
    pub layer: usize,
    pub severity: Severity,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionProfile {
    pub key: ConditionKey,
    /// Symptom rates over scored rows; all zero when `n_responses` is 0.
    pub rates: Vec<f64>,
    /// Scored rows.
    pub n_responses: usize,
    pub n_failed: usize,
    pub n_generation_failed: usize,
    pub n_scorer_failed: usize,
    /// Mean positive symptoms per scored row.
    pub burden: f64,
    /// Means of [`SurfaceFeatures::values`] over rows that produced text.
    pub feature_means: Vec<f64>,
}

impl ConditionProfile {
    pub fn n_generated(&self) -> usize {
        self.n_responses + self.n_failed
    }
}

/// Earliest record per dedup key, in first-occurrence order.
pub fn dedup(records: &[ScoredRecord]) -> Vec<&ScoredRecord> {
    let mut best: BTreeMap<(ConditionKey, String), usize> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        best.entry(r.dedup_key())
            .and_modify(|j| {
                if r.timestamp < records[*j].timestamp {
                    *j = i;
                }
            })
            .or_insert(i);
    }
    let mut keep: Vec<usize> = best.into_values().collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| &records[i]).collect()
}

/// Deduplicate, then average symptom bits within each condition. Output is
/// sorted by condition key.
pub fn dedup_and_aggregate(records: &[ScoredRecord], n_symptoms: usize) -> Vec<ConditionProfile> {
    struct Acc {
        sums: Vec<f64>,
        features: Vec<f64>,
        n_features: usize,
        scored: usize,
        gen_failed: usize,
        scorer_failed: usize,
        positives: usize,
    }
    let mut groups: BTreeMap<ConditionKey, Acc> = BTreeMap::new();
    for r in dedup(records) {
        let acc = groups.entry(r.condition_key()).or_insert_with(|| Acc {
            sums: vec![0.0; n_symptoms],
            features: vec![0.0; SurfaceFeatures::NAMES.len()],
            n_features: 0,
            scored: 0,
            gen_failed: 0,
            scorer_failed: 0,
            positives: 0,
        });
        if r.status != RecordStatus::GenerationFailed {
            for (f, v) in acc.features.iter_mut().zip(r.features.values()) {
                *f += v;
            }
            acc.n_features += 1;
        }
        match (r.status, r.symptoms.bits()) {
            (RecordStatus::Ok, Some(bits)) => {
                acc.scored += 1;
                for (s, &b) in acc.sums.iter_mut().zip(bits) {
                    if b {
                        *s += 1.0;
                        acc.positives += 1;
                    }
                }
            }
            (RecordStatus::GenerationFailed, _) => acc.gen_failed += 1,
            _ => acc.scorer_failed += 1,
        }
    }
    groups
        .into_iter()
        .map(|(key, acc)| {
            let n = acc.scored;
            let div = |x: f64, d: usize| if d == 0 { 0.0 } else { x / d as f64 };
            ConditionProfile {
                key,
                rates: acc.sums.iter().map(|&s| div(s, n)).collect(),
                n_responses: n,
                n_failed: acc.gen_failed + acc.scorer_failed,
                n_generation_failed: acc.gen_failed,
                n_scorer_failed: acc.scorer_failed,
                burden: div(acc.positives as f64, n),
                feature_means: acc.features.iter().map(|&f| div(f, acc.n_features)).collect(),
            }
        })
        .collect()
}

/// Stratum-level FFN and attention means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumPair {
    pub key: StratumKey,
    pub ffn: Vec<f64>,
    pub attention: Vec<f64>,
    pub ffn_components: Vec<ComponentKind>,
    pub attention_components: Vec<ComponentKind>,
}

impl StratumPair {
    /// FFN minus attention, per symptom.
    pub fn difference(&self) -> Vec<f64> {
        self.ffn.iter().zip(&self.attention).map(|(f, a)| f - a).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedStrata {
    pub pairs: Vec<StratumPair>,
    /// Strata missing either mechanism.
    pub dropped: usize,
}

/// Groups lesion profiles (severity > 0, at least one scored response) by
/// stratum and averages each mechanism's component profiles.
pub fn pair_strata(profiles: &[ConditionProfile]) -> PairedStrata {
    type Side = Vec<(ComponentKind, Vec<f64>)>;
    let mut strata: BTreeMap<StratumKey, (Side, Side)> = BTreeMap::new();
    for p in profiles {
        let (Some(stratum), Some(kind)) = (p.key.stratum(), p.key.component) else { continue };
        if stratum.severity.is_zero() || p.n_responses == 0 {
            continue;
        }
        let entry = strata.entry(stratum).or_default();
        match kind.mechanism() {
            Mechanism::Ffn => entry.0.push((kind, p.rates.clone())),
            Mechanism::Attention => entry.1.push((kind, p.rates.clone())),
        }
    }
    let mut pairs = Vec::new();
    let mut dropped = 0;
    for (key, (ffn, attention)) in strata {
        if ffn.is_empty() || attention.is_empty() {
            dropped += 1;
            continue;
        }
        pairs.push(StratumPair {
            key,
            ffn: mean_rows(ffn.iter().map(|(_, r)| r.as_slice())),
            attention: mean_rows(attention.iter().map(|(_, r)| r.as_slice())),
            ffn_components: ffn.iter().map(|(k, _)| *k).collect(),
            attention_components: attention.iter().map(|(k, _)| *k).collect(),
        });
    }
    PairedStrata { pairs, dropped }
}

fn mean_rows<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut sum: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for r in rows {
        if sum.is_empty() {
            sum = vec![0.0; r.len()];
        }
        for (s, v) in sum.iter_mut().zip(r) {
            *s += v;
        }
        n += 1;
    }
    sum.iter().map(|s| s / n.max(1) as f64).collect()
}

/// Append-only JSONL store rooted at a directory.
#[derive(Debug, Clone)]
pub struct RecordStore {
    dir: PathBuf,
}

impl RecordStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn records_path(&self) -> PathBuf {
        self.dir.join(RECORDS_FILE)
    }

    /// Validates the batch, then appends it atomically with respect to other
    /// appenders. Nothing is written if any row is invalid.
    pub fn append(&self, records: &[ScoredRecord], n_symptoms: Option<usize>) -> Result<()> {
        let mut buf = Vec::new();
        for (i, r) in records.iter().enumerate() {
            r.validate(n_symptoms).map_err(|m| Error::schema(Some(i), m))?;
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        if buf.is_empty() {
            return Ok(());
        }
        let mut file = OpenOptions::new().create(true).append(true).open(self.records_path())?;
        file.lock()?;
        let written = file.write_all(&buf).and_then(|_| file.flush());
        file.unlock()?;
        written?;
        Ok(())
    }

    /// All rows in file order; a missing file reads as empty.
    pub fn read_all(&self) -> Result<Vec<ScoredRecord>> {
        read_records(&self.records_path())
    }

    pub fn generation_keys(&self) -> Result<HashSet<(ConditionKey, String, u64, String)>> {
        Ok(self.read_all()?.iter().map(ScoredRecord::generation_key).collect())
    }
}

/// Parses a JSONL record file; the error names the offending line (0-based).
pub fn read_records(path: &Path) -> Result<Vec<ScoredRecord>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoredRecord = serde_json::from_str(&line).map_err(|e| Error::schema(Some(i), e.to_string()))?;
        rec.validate(None).map_err(|m| Error::schema(Some(i), m))?;
        out.push(rec);
    }
    Ok(out)
}

/// CSV with fixed columns, then surface features, then one 0/1 column per
/// symptom (empty for unscored rows).
pub fn export_csv<W: Write>(records: &[ScoredRecord], symptom_names: &[&str], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = [
        "model_id",
        "layer",
        "component",
        "severity",
        "strategy",
        "base_seed",
        "mask_seed",
        "prompt_id",
        "subtest",
        "decode_fingerprint",
        "response_text",
        "token_count",
        "status",
        "scorer_id",
        "timestamp",
    ]
    .map(String::from)
    .to_vec();
    header.extend(SurfaceFeatures::NAMES.map(String::from));
    header.extend(symptom_names.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.model_id.clone(),
            r.layer.map(|l| l.to_string()).unwrap_or_default(),
            r.component.map(|c| c.name().to_string()).unwrap_or_default(),
            r.severity_key().canonical(),
            r.strategy.name().to_string(),
            r.base_seed.to_string(),
            r.mask_seed.to_string(),
            r.prompt_id.clone(),
            r.subtest.name().to_string(),
            r.decode_fingerprint.clone(),
            r.response_text.clone(),
            r.token_count.to_string(),
            serde_json::to_value(r.status)?.as_str().unwrap_or_default().to_string(),
            r.symptoms.scorer_id.clone(),
            r.timestamp.to_string(),
        ];
        row.extend(r.features.values().iter().map(|v| v.to_string()));
        match r.symptoms.bits() {
            Some(bits) => row.extend(bits.iter().map(|&b| if b { "1" } else { "0" }.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), symptom_names.len())),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    let mut reader = BufReader::new(File::open(path)?);
    loop {
        let chunk = reader.fill_buf()?;
        if chunk.is_empty() {
            break;
        }
        hasher.update(chunk);
        let n = chunk.len();
        reader.consume(n);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// `<hex>  <path>` lines sorted by path, relative to `base` with `/`
/// separators. Unreadable files get `UNREADABLE` in place of a digest.
pub fn manifest(base: &Path, files: &[PathBuf]) -> String {
    let mut entries: Vec<(String, String)> = files
        .iter()
        .map(|f| {
            let full = if f.is_absolute() { f.clone() } else { base.join(f) };
            let rel = full.strip_prefix(base).unwrap_or(&full);
            let shown = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            let digest = sha256_file(&full).unwrap_or_else(|_| "UNREADABLE".into());
            (shown, digest)
        })
        .collect();
    entries.sort();
    entries.dedup();
    entries
        .into_iter()
        .map(|(p, d)| format!("{d}  {p}\n"))
        .collect()
}

/// Writes `MANIFEST.sha256` in `dir` covering `files`.
pub fn write_manifest(dir: &Path, files: &[PathBuf]) -> Result<PathBuf> {
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest(dir, files))?;
    Ok(path)
}
