//! External scorer adapter with a content-addressed response cache.
//!
//! Cache entries are `<key>.json` files in one directory, where `key` is the
//! hex SHA-256 of the length-prefixed `(scorer_id, prompt_id, text,
//! schema_version)` tuple. Entries are written to a temporary file and
//! renamed into place, so readers never observe partial entries. Failures
//! are never cached.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{SymptomSchema, SymptomVector};
use crate::battery::PromptItem;
use crate::error::{Error, Result};

/// Default scoring worker count.
pub const DEFAULT_WORKERS: usize = 5;

pub trait ScorerAdapter: Send + Sync {
    fn scorer_id(&self) -> &str;

    /// Symptom bits aligned to `schema`.
    fn score(&self, prompt: &PromptItem, text: &str, schema: &SymptomSchema) -> Result<Vec<bool>>;
}

pub fn cache_key(scorer_id: &str, prompt_id: &str, text: &str, schema_version: &str) -> String {
    let mut h = Sha256::new();
    for field in [scorer_id, prompt_id, text, schema_version] {
        h.update((field.len() as u64).to_le_bytes());
        h.update(field.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    bits: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

static TMP_COUNTER: AtomicUsize = AtomicUsize::new(0);

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Cached bits; unreadable or mismatched entries count as misses.
    pub fn get(&self, key: &str) -> Option<Vec<bool>> {
        let bytes = fs::read(self.path(key)).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(e) if e.key == key => Some(e.bits),
            _ => {
                log::warn!("ignoring corrupt cache entry {key}");
                None
            }
        }
    }

    pub fn put(&self, key: &str, bits: &[bool]) -> Result<()> {
        let entry = CacheEntry {
            key: key.to_string(),
            bits: bits.to_vec(),
        };
        let tmp = self.dir.join(format!(
            ".{key}.{}.{}.tmp",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        fs::write(&tmp, serde_json::to_vec(&entry)?)?;
        fs::rename(&tmp, self.path(key))?;
        Ok(())
    }
}

pub struct ExternalScorer<A> {
    adapter: A,
    cache: Option<ResponseCache>,
    pub max_attempts: usize,
    pub retry_backoff: Duration,
    pub workers: usize,
}

impl<A: ScorerAdapter> ExternalScorer<A> {
    pub fn new(adapter: A, cache: Option<ResponseCache>) -> Self {
        Self {
            adapter,
            cache,
            max_attempts: 3,
            retry_backoff: Duration::ZERO,
            workers: DEFAULT_WORKERS,
        }
    }

    pub fn adapter(&self) -> &A {
        &self.adapter
    }

    pub fn score(&self, prompt: &PromptItem, text: &str, schema: &SymptomSchema) -> SymptomVector {
        let id = self.adapter.scorer_id();
        let key = cache_key(id, &prompt.prompt_id, text, schema.version());
        if let Some(bits) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            if bits.len() == schema.len() {
                return SymptomVector::scored(id, bits);
            }
        }
        for attempt in 1..=self.max_attempts.max(1) {
            match self.adapter.score(prompt, text, schema) {
                Ok(bits) if bits.len() == schema.len() => {
                    if let Some(cache) = &self.cache {
                        if let Err(e) = cache.put(&key, &bits) {
                            log::warn!("could not cache score {key}: {e}");
                        }
                    }
                    return SymptomVector::scored(id, bits);
                }
                Ok(bits) => log::warn!(
                    "scorer {id} attempt {attempt}: {} bits for a {}-symptom schema",
                    bits.len(),
                    schema.len()
                ),
                Err(e) => log::warn!("scorer {id} attempt {attempt}: {e}"),
            }
            if attempt < self.max_attempts && !self.retry_backoff.is_zero() {
                std::thread::sleep(self.retry_backoff * attempt as u32);
            }
        }
        SymptomVector::failed(id)
    }

    /// Scores many responses on a bounded pool; output order matches input.
    pub fn score_batch(&self, jobs: &[(&PromptItem, &str)], schema: &SymptomSchema) -> Vec<SymptomVector> {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<SymptomVector>>> = Mutex::new(vec![None; jobs.len()]);
        std::thread::scope(|s| {
            for _ in 0..self.workers.clamp(1, jobs.len().max(1)) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some((prompt, text)) = jobs.get(i) else { break };
                    let v = self.score(prompt, text, schema);
                    results.lock().expect("results lock")[i] = Some(v);
                });
            }
        });
        results
            .into_inner()
            .expect("results lock")
            .into_iter()
            .map(|v| v.expect("every job scored"))
            .collect()
    }
}

/// Reads `{"symptoms": {name: 0|1|bool, ...}}` (every schema name present)
/// or `{"symptoms": [0|1|bool, ...]}` in schema order.
pub fn parse_payload(value: &serde_json::Value, schema: &SymptomSchema) -> Result<Vec<bool>> {
    let bit = |v: &serde_json::Value| -> Result<bool> {
        match v {
            serde_json::Value::Bool(b) => Ok(*b),
            serde_json::Value::Number(n) if n.as_u64() == Some(0) => Ok(false),
            serde_json::Value::Number(n) if n.as_u64() == Some(1) => Ok(true),
            other => Err(Error::Scorer(format!("symptom value {other} is not binary"))),
        }
    };
    let symptoms = value
        .get("symptoms")
        .ok_or_else(|| Error::Scorer("payload has no `symptoms` field".into()))?;
    match symptoms {
        serde_json::Value::Array(items) => {
            if items.len() != schema.len() {
                return Err(Error::Scorer(format!(
                    "{} symptom values for a {}-symptom schema",
                    items.len(),
                    schema.len()
                )));
            }
            items.iter().map(bit).collect()
        }
        serde_json::Value::Object(map) => schema
            .names()
            .into_iter()
            .map(|name| {
                map.get(name)
                    .ok_or_else(|| Error::Scorer(format!("payload lacks symptom `{name}`")))
                    .and_then(bit)
            })
            .collect(),
        _ => Err(Error::Scorer("`symptoms` must be an array or object".into())),
    }
}

/// JSON-over-HTTP scorer. The credential is read from `credential_env` on
/// every call and sent as a bearer token; it is never persisted.
#[derive(Debug, Clone)]
pub struct HttpAdapter {
    pub scorer_id: String,
    pub endpoint: String,
    pub credential_env: Option<String>,
    pub timeout: Duration,
}

impl HttpAdapter {
    pub fn new(scorer_id: impl Into<String>, endpoint: impl Into<String>) -> Self {
        Self {
            scorer_id: scorer_id.into(),
            endpoint: endpoint.into(),
            credential_env: None,
            timeout: Duration::from_secs(60),
        }
    }

    pub fn with_credential_env(mut self, var: impl Into<String>) -> Self {
        self.credential_env = Some(var.into());
        self
    }
}

impl ScorerAdapter for HttpAdapter {
    fn scorer_id(&self) -> &str {
        &self.scorer_id
    }

    fn score(&self, prompt: &PromptItem, text: &str, schema: &SymptomSchema) -> Result<Vec<bool>> {
        let body = serde_json::json!({
            "scorer_id": self.scorer_id,
            "prompt_id": prompt.prompt_id,
            "subtest": prompt.subtest,
            "prompt": prompt.text,
            "response": text,
            "schema_version": schema.version(),
            "symptoms": schema.names(),
        });
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut request = agent.post(&self.endpoint).content_type("application/json");
        if let Some(var) = &self.credential_env {
            let token = std::env::var(var).map_err(|_| Error::Scorer(format!("credential variable {var} is not set")))?;
            request = request.header("Authorization", format!("Bearer {token}"));
        }
        let mut response = request
            .send(body.to_string().as_str())
            .map_err(|e| Error::Scorer(e.to_string()))?;
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Scorer(e.to_string()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Scorer(format!("malformed payload: {e}")))?;
        parse_payload(&value, schema)
    }
}
