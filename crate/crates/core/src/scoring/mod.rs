//! Symptom schema, symptom vectors and the two scorers.
//!
//! [`heuristic`] is a rule-based robustness scorer covering only the
//! mechanically decidable symptoms; [`external`] wraps an outside scorer
//! behind a content-addressed cache. [`features`] holds the scorer-free
//! surface features.

pub mod external;
pub mod features;
pub mod heuristic;

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use external::{cache_key, ExternalScorer, HttpAdapter, ResponseCache, ScorerAdapter};
pub use features::{surface_features, SurfaceFeatures, TextResources};
pub use heuristic::{heuristic_score, HeuristicConfig, HeuristicScorer, HEURISTIC_SCORER_ID};

const DEFAULT_SCHEMA: &str = include_str!("../../data/schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Semantic,
    Syntactic,
    Fluency,
    Phonological,
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Semantic,
        Category::Syntactic,
        Category::Fluency,
        Category::Phonological,
        Category::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Semantic => "semantic",
            Category::Syntactic => "syntactic",
            Category::Fluency => "fluency",
            Category::Phonological => "phonological",
            Category::Other => "other",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Symptom {
    pub name: String,
    pub category: Category,
    pub in_common_inventory: bool,
    /// Category or identity chosen here rather than taken from the rubric.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub provisional: bool,
}

/// Well-known symptom names used by the heuristic scorer and the analyses.
pub mod names {
    pub const MEANING_UNCLEAR: &str = "Meaning unclear";
    pub const TARGET_UNCLEAR: &str = "Target unclear";
    pub const NEOLOGISMS: &str = "Neologisms";
    pub const SHORT_SIMPLIFIED: &str = "Short and simplified utterances";
    pub const PERSEVERATIONS: &str = "Perseverations";
    pub const STEREOTYPIES: &str = "Stereotypies and automatisms";
    pub const OFF_TOPIC: &str = "Off-topic";
    pub const REPETITION_LOOP: &str = "repetition-loop";

    /// The six symptoms with the largest FFN-over-attention shift.
    pub const FFN_SHIFT: [&str; 6] = [
        MEANING_UNCLEAR,
        STEREOTYPIES,
        OFF_TOPIC,
        PERSEVERATIONS,
        SHORT_SIMPLIFIED,
        TARGET_UNCLEAR,
    ];
}

/// Ordered symptom inventory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymptomSchema {
    symptoms: Vec<Symptom>,
    version: String,
}

impl SymptomSchema {
    /// The bundled 21-symptom schema.
    pub fn default_schema() -> Self {
        Self::from_json(DEFAULT_SCHEMA).expect("bundled schema is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let symptoms: Vec<Symptom> =
            serde_json::from_str(text).map_err(|e| Error::schema(None, format!("symptom schema: {e}")))?;
        Self::new(symptoms)
    }

    pub fn new(symptoms: Vec<Symptom>) -> Result<Self> {
        if symptoms.is_empty() {
            return Err(Error::schema(None, "symptom schema is empty"));
        }
        let mut seen = HashSet::new();
        for (i, s) in symptoms.iter().enumerate() {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::schema(Some(i), format!("duplicate symptom `{}`", s.name)));
            }
        }
        let canonical = serde_json::to_string(&symptoms)?;
        let version = hex::encode(&Sha256::digest(canonical.as_bytes())[..8]);
        Ok(Self { symptoms, version })
    }

    /// Content hash of the schema (16 hex digits).
    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn symptoms(&self) -> &[Symptom] {
        &self.symptoms
    }

    pub fn len(&self) -> usize {
        self.symptoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symptoms.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.symptoms.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.symptoms.iter().position(|s| s.name == name)
    }

    /// Indices of symptoms shared with the human reference analyses.
    pub fn common_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.symptoms[i].in_common_inventory).collect()
    }

    pub fn categories(&self) -> Vec<Category> {
        self.symptoms.iter().map(|s| s.category).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.symptoms).expect("schema serialises");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreStatus {
    Scored,
    ScorerFailed,
}

/// Symptom bits aligned to schema order. Failed scores carry no bits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymptomVector {
    pub scorer_id: String,
    pub status: ScoreStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<Vec<bool>>,
}

impl SymptomVector {
    pub fn scored(scorer_id: impl Into<String>, bits: Vec<bool>) -> Self {
        Self {
            scorer_id: scorer_id.into(),
            status: ScoreStatus::Scored,
            bits: Some(bits),
        }
    }

    pub fn failed(scorer_id: impl Into<String>) -> Self {
        Self {
            scorer_id: scorer_id.into(),
            status: ScoreStatus::ScorerFailed,
            bits: None,
        }
    }

    pub fn is_scored(&self) -> bool {
        self.status == ScoreStatus::Scored
    }

    pub fn bits(&self) -> Option<&[bool]> {
        self.bits.as_deref()
    }

    /// Checks status/bits agreement and alignment with a schema of `len` symptoms.
    pub fn validate(&self, len: usize) -> std::result::Result<(), String> {
        match (self.status, &self.bits) {
            (ScoreStatus::Scored, Some(b)) if b.len() == len => Ok(()),
            (ScoreStatus::Scored, Some(b)) => Err(format!("{} symptom bits, schema has {len}", b.len())),
            (ScoreStatus::Scored, None) => Err("scored vector without bits".into()),
            (ScoreStatus::ScorerFailed, None) => Ok(()),
            (ScoreStatus::ScorerFailed, Some(_)) => Err("failed vector carries bits".into()),
        }
    }
}
