//! Model backends.
//!
//! [`Backend`] is the surface every lesion analysis needs: addressable
//! weight matrices per `(layer, ComponentKind)`, and an incremental decoding
//! session that yields next-token logits and the final-layer hidden state.
//! [`ToyModel`] is the shipped implementation; pretrained checkpoints plug in
//! by implementing the same trait.

mod bundle;
mod tokenizer;
mod toy;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use bundle::{load_bundle, write_bundle, BundleManifest, TensorEntry, BUNDLE_BLOB, BUNDLE_MANIFEST};
pub use tokenizer::{ByteTokenizer, Tokenizer};
pub use toy::ToyModel;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// The seven lesionable weight matrices of a transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Query,
    Key,
    Value,
    Output,
    Gate,
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Attention,
    Ffn,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 7] = [
        ComponentKind::Query,
        ComponentKind::Key,
        ComponentKind::Value,
        ComponentKind::Output,
        ComponentKind::Gate,
        ComponentKind::Up,
        ComponentKind::Down,
    ];

    pub fn mechanism(self) -> Mechanism {
        match self {
            ComponentKind::Query | ComponentKind::Key | ComponentKind::Value | ComponentKind::Output => {
                Mechanism::Attention
            }
            ComponentKind::Gate | ComponentKind::Up | ComponentKind::Down => Mechanism::Ffn,
        }
    }

    /// Canonical name, used in seeds, records and tie-breaking.
    pub fn name(self) -> &'static str {
        match self {
            ComponentKind::Query => "query",
            ComponentKind::Key => "key",
            ComponentKind::Value => "value",
            ComponentKind::Output => "output",
            ComponentKind::Gate => "gate",
            ComponentKind::Up => "up",
            ComponentKind::Down => "down",
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            ComponentKind::Query => "Q",
            ComponentKind::Key => "K",
            ComponentKind::Value => "V",
            ComponentKind::Output => "O",
            ComponentKind::Gate => "G",
            ComponentKind::Up => "U",
            ComponentKind::Down => "D",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ComponentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let kind = match lower.as_str() {
            "query" | "q" | "q_proj" => ComponentKind::Query,
            "key" | "k" | "k_proj" => ComponentKind::Key,
            "value" | "v" | "v_proj" => ComponentKind::Value,
            "output" | "o" | "o_proj" => ComponentKind::Output,
            "gate" | "g" | "gate_proj" => ComponentKind::Gate,
            "up" | "u" | "up_proj" => ComponentKind::Up,
            "down" | "d" | "down_proj" => ComponentKind::Down,
            _ => return Err(Error::Input(format!("unknown component `{s}`"))),
        };
        Ok(kind)
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Attention => "attention",
            Mechanism::Ffn => "ffn",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalScheme {
    /// Rotary embeddings on query/key head slices (base 10000).
    #[default]
    Rotary,
    /// No positional signal; only used for small hand-checked fixtures.
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub init_seed: u64,
    #[serde(default)]
    pub positional: PositionalScheme,
}

impl ModelConfig {
    /// Desk-scale default over the byte vocabulary.
    pub fn toy(init_seed: u64) -> Self {
        Self {
            vocab_size: ByteTokenizer::VOCAB_SIZE,
            d_model: 32,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 64,
            init_seed,
            positional: PositionalScheme::Rotary,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(rows, cols)` of a component matrix; weights act as `y = W x`.
    pub fn component_shape(&self, kind: ComponentKind) -> (usize, usize) {
        match kind {
            ComponentKind::Query | ComponentKind::Key | ComponentKind::Value | ComponentKind::Output => {
                (self.d_model, self.d_model)
            }
            ComponentKind::Gate | ComponentKind::Up => (self.d_ffn, self.d_model),
            ComponentKind::Down => (self.d_model, self.d_ffn),
        }
    }
}

/// Output of one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f32>,
    /// Final-layer residual state of the last consumed token (before the
    /// output norm).
    pub hidden: Vec<f32>,
}

/// Incremental decoding state: feed tokens one at a time.
pub trait DecodeSession {
    fn push(&mut self, token: u32) -> Result<StepOutput>;
}

pub trait Backend {
    fn vocab_size(&self) -> usize;

    fn n_layers(&self) -> usize;

    fn component(&self, layer: usize, kind: ComponentKind) -> Result<&Matrix>;

    /// Swap in `matrix` and return the previous contents. A shape mismatch
    /// is an error and leaves the model untouched.
    fn replace_component(&mut self, layer: usize, kind: ComponentKind, matrix: Matrix) -> Result<Matrix>;

    fn session(&self) -> Box<dyn DecodeSession + '_>;

    fn tokenizer(&self) -> &dyn Tokenizer;

    /// Logits and hidden state after consuming the whole sequence.
    fn forward(&self, tokens: &[u32]) -> Result<StepOutput> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        let mut session = self.session();
        let mut last = None;
        for &t in tokens {
            last = Some(session.push(t)?);
        }
        Ok(last.expect("nonempty"))
    }

    fn forward_logits(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        Ok(self.forward(tokens)?.logits)
    }

    fn snapshot_component(&self, layer: usize, kind: ComponentKind) -> Result<Matrix> {
        self.component(layer, kind).cloned()
    }

    fn restore_component(&mut self, layer: usize, kind: ComponentKind, matrix: Matrix) -> Result<()> {
        self.replace_component(layer, kind, matrix).map(drop)
    }

    fn lesionable_parameter_count(&self) -> Result<usize> {
        let mut total = 0;
        for layer in 0..self.n_layers() {
            for kind in ComponentKind::ALL {
                total += self.component(layer, kind)?.len();
            }
        }
        Ok(total)
    }
}

/// SHA-256 over every lesionable matrix, in `(layer, kind)` order.
pub fn component_checksum<B: Backend + ?Sized>(model: &B) -> Result<String> {
    let mut hasher = Sha256::new();
    for layer in 0..model.n_layers() {
        for kind in ComponentKind::ALL {
            let m = model.component(layer, kind)?;
            hasher.update((m.rows() as u64).to_le_bytes());
            hasher.update((m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Next-token probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    /// Numerically stable softmax, evaluated in `f64`.
    pub fn from_logits(logits: &[f32]) -> Self {
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self {
            probs: exps.into_iter().map(|e| e / total).collect(),
        }
    }

    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Input("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}
