//! Decoding under lesions, next-token dose proxies and per-token likelihood.
//!
//! Every lesioned computation runs inside a [`LesionGuard`], so the model is
//! restored whether the computation succeeds, fails or panics.
//!
//! Conventions:
//! - greedy ties break to the lowest token id;
//! - the repetition penalty touches only tokens already generated in the
//!   current response: positive logits are divided by it, negative logits
//!   multiplied;
//! - KL is `KL(intact || lesioned)` in nats, both distributions floored at
//!   [`PROB_FLOOR`];
//! - decoding stops at EOS, which is not included in `token_ids`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lesion::{LesionGuard, LesionSpec, Mask, Strategy};
use crate::model::{Backend, ComponentKind, StepOutput, TokenDistribution};
use crate::rng::CounterRng;

pub const PROB_FLOOR: f64 = 1e-12;

/// Recorded alongside proxy outputs.
pub const KL_DIRECTION: &str = "KL(intact || lesioned)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Nucleus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub max_new_tokens: usize,
    pub rng_seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            top_p: 1.0,
            repetition_penalty: 1.0,
            max_new_tokens: 80,
            rng_seed: 0,
        }
    }
}

impl DecodeConfig {
    /// The sampled robustness setting: T = 0.7, top-p 0.9, penalty 1.2.
    pub fn sampling_check(rng_seed: u64) -> Self {
        Self {
            mode: DecodeMode::Nucleus,
            temperature: 0.7,
            top_p: 0.9,
            repetition_penalty: 1.2,
            max_new_tokens: 80,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config("top_p must lie in (0, 1]".into()));
        }
        if !(self.repetition_penalty.is_finite() && self.repetition_penalty >= 1.0) {
            return Err(Error::Config("repetition_penalty must be at least 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Stable identifier of the decoding behaviour. Fields greedy decoding
    /// ignores are left out, so greedy configs differing only there match.
    pub fn fingerprint(&self) -> String {
        match self.mode {
            DecodeMode::Greedy => format!(
                "greedy;rp={};max={}",
                self.repetition_penalty, self.max_new_tokens
            ),
            DecodeMode::Nucleus => format!(
                "nucleus;t={};p={};rp={};max={};seed={}",
                self.temperature, self.top_p, self.repetition_penalty, self.max_new_tokens, self.rng_seed
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationStatus {
    Ok,
    GenerationFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub token_ids: Vec<u32>,
    pub status: GenerationStatus,
    pub error: Option<String>,
}

impl Generation {
    fn failed(error: Error) -> Self {
        Self {
            text: String::new(),
            token_ids: Vec::new(),
            status: GenerationStatus::GenerationFailed,
            error: Some(error.to_string()),
        }
    }
}

/// What to do to the weights around a computation.
#[derive(Debug, Clone, Copy)]
pub enum Intervention<'a> {
    Intact,
    Lesion(&'a LesionSpec),
    /// Explicit masks, e.g. a matched-random control.
    Masks {
        masks: &'a [(usize, ComponentKind, Mask)],
        strategy: Strategy,
    },
}

impl<'a> From<Option<&'a LesionSpec>> for Intervention<'a> {
    fn from(spec: Option<&'a LesionSpec>) -> Self {
        spec.map_or(Intervention::Intact, Intervention::Lesion)
    }
}

/// Runs `f` on the model with the intervention applied, then restores it.
/// Errors from applying the intervention are returned before `f` runs.
pub fn with_intervention<B, T>(model: &mut B, intervention: Intervention<'_>, f: impl FnOnce(&B) -> T) -> Result<T>
where
    B: Backend + ?Sized,
{
    match intervention {
        Intervention::Intact => Ok(f(model)),
        Intervention::Lesion(spec) => {
            let guard = LesionGuard::apply(model, spec)?;
            let out = f(guard.model());
            guard.restore()?;
            Ok(out)
        }
        Intervention::Masks { masks, strategy } => {
            let guard = LesionGuard::apply_masks(model, masks, strategy)?;
            let out = f(guard.model());
            guard.restore()?;
            Ok(out)
        }
    }
}

/// Decode a response to `prompt`.
///
/// Invalid configs and unaddressable lesions are errors. Failures while
/// decoding come back as `GenerationFailed`, with the weights restored.
pub fn generate<B: Backend + ?Sized>(
    model: &mut B,
    lesion: Option<&LesionSpec>,
    prompt: &str,
    decode: &DecodeConfig,
) -> Result<Generation> {
    generate_under(model, lesion.into(), prompt, decode)
}

pub fn generate_under<B: Backend + ?Sized>(
    model: &mut B,
    intervention: Intervention<'_>,
    prompt: &str,
    decode: &DecodeConfig,
) -> Result<Generation> {
    decode.validate()?;
    let outcome = with_intervention(model, intervention, |m| decode_text(m, prompt, decode))?;
    Ok(outcome.unwrap_or_else(Generation::failed))
}

/// Decode on the model as it currently is.
pub fn decode_text<B: Backend + ?Sized>(model: &B, prompt: &str, decode: &DecodeConfig) -> Result<Generation> {
    let tokenizer = model.tokenizer();
    let prompt_tokens = tokenizer.encode_prompt(prompt);
    let token_ids = decode_tokens(model, &prompt_tokens, decode, tokenizer.eos())?;
    Ok(Generation {
        text: tokenizer.decode(&token_ids),
        token_ids,
        status: GenerationStatus::Ok,
        error: None,
    })
}

/// Token-level decoding loop.
pub fn decode_tokens<B: Backend + ?Sized>(
    model: &B,
    prompt_tokens: &[u32],
    decode: &DecodeConfig,
    eos: Option<u32>,
) -> Result<Vec<u32>> {
    if prompt_tokens.is_empty() {
        return Err(Error::Input("prompt produced no tokens".into()));
    }
    let mut session = model.session();
    let mut step = None;
    for &t in prompt_tokens {
        step = Some(session.push(t)?);
    }
    let mut logits = step.expect("nonempty prompt").logits;
    let mut rng = CounterRng::new(decode.rng_seed);
    let mut generated: Vec<u32> = Vec::new();
    let mut seen: HashSet<u32> = HashSet::new();
    while generated.len() < decode.max_new_tokens {
        apply_repetition_penalty(&mut logits, &seen, decode.repetition_penalty);
        let next = match decode.mode {
            DecodeMode::Greedy => argmax(&logits),
            DecodeMode::Nucleus => sample_nucleus(&logits, decode.temperature, decode.top_p, &mut rng),
        };
        if Some(next) == eos {
            break;
        }
        generated.push(next);
        seen.insert(next);
        if generated.len() < decode.max_new_tokens {
            logits = session.push(next)?.logits;
        }
    }
    Ok(generated)
}

fn apply_repetition_penalty(logits: &mut [f32], seen: &HashSet<u32>, penalty: f64) {
    if penalty == 1.0 {
        return;
    }
    let p = penalty as f32;
    for &t in seen {
        if let Some(l) = logits.get_mut(t as usize) {
            *l = if *l > 0.0 { *l / p } else { *l * p };
        }
    }
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Top-p sampling over temperature-scaled logits. Candidates are ordered by
/// descending probability, ties by ascending id; the nucleus is the shortest
/// prefix whose mass reaches `top_p`.
fn sample_nucleus(logits: &[f32], temperature: f64, top_p: f64, rng: &mut CounterRng) -> u32 {
    let scaled: Vec<f32> = logits.iter().map(|&l| (l as f64 / temperature) as f32).collect();
    let dist = TokenDistribution::from_logits(&scaled);
    let probs = dist.probs();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut cut = order.len();
    for (k, &i) in order.iter().enumerate() {
        mass += probs[i];
        if mass >= top_p {
            cut = k + 1;
            break;
        }
    }
    let nucleus = &order[..cut];
    let total: f64 = nucleus.iter().map(|&i| probs[i]).sum();
    let u = rng.next_f64() * total;
    let mut acc = 0.0;
    for &i in nucleus {
        acc += probs[i];
        if u < acc {
            return i as u32;
        }
    }
    *nucleus.last().expect("nucleus nonempty") as u32
}

/// `sum_i p_i ln(p_i / q_i)` with both sides floored; terms with `p_i = 0`
/// vanish. Clamped at zero against floor-induced rounding.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Input(format!(
            "distributions have different supports ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| {
            let pi = pi.max(PROB_FLOOR);
            pi * (pi / qi.max(PROB_FLOOR)).ln()
        })
        .sum();
    Ok(kl.max(0.0))
}

/// `||lesioned - intact|| / ||intact||`.
pub fn relative_change(intact: &[f32], lesioned: &[f32]) -> Result<f64> {
    if intact.len() != lesioned.len() {
        return Err(Error::Input("hidden states differ in width".into()));
    }
    let norm: f64 = intact.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Degenerate("intact hidden state has zero norm".into()));
    }
    let diff: f64 = intact
        .iter()
        .zip(lesioned)
        .map(|(&a, &b)| (b as f64 - a as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(diff / norm)
}

fn final_states<B: Backend + ?Sized>(model: &B, prompts: &[&str]) -> Result<Vec<StepOutput>> {
    let tokenizer = model.tokenizer();
    prompts.iter().map(|p| model.forward(&tokenizer.encode_prompt(p))).collect()
}

fn require_prompts(prompts: &[&str]) -> Result<()> {
    if prompts.is_empty() {
        return Err(Error::Input("no prompts given".into()));
    }
    Ok(())
}

/// Next-token KL and residual-state change of one intervention, each
/// averaged over prompts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseProxies {
    pub next_token_kl: f64,
    pub residual_change: f64,
}

pub fn dose_proxies<B: Backend + ?Sized>(
    model: &mut B,
    intervention: Intervention<'_>,
    prompts: &[&str],
) -> Result<DoseProxies> {
    require_prompts(prompts)?;
    let intact = final_states(model, prompts)?;
    let lesioned = with_intervention(model, intervention, |m| final_states(m, prompts))??;
    let n = prompts.len() as f64;
    let (mut kl, mut residual) = (0.0, 0.0);
    for (a, b) in intact.iter().zip(&lesioned) {
        let p = TokenDistribution::from_logits(&a.logits);
        let q = TokenDistribution::from_logits(&b.logits);
        kl += kl_divergence(p.probs(), q.probs())?;
        residual += relative_change(&a.hidden, &b.hidden)?;
    }
    Ok(DoseProxies {
        next_token_kl: kl / n,
        residual_change: residual / n,
    })
}

pub fn next_token_kl<B: Backend + ?Sized>(model: &mut B, lesion: Option<&LesionSpec>, prompts: &[&str]) -> Result<f64> {
    Ok(dose_proxies(model, lesion.into(), prompts)?.next_token_kl)
}

pub fn residual_state_change<B: Backend + ?Sized>(
    model: &mut B,
    lesion: Option<&LesionSpec>,
    prompts: &[&str],
) -> Result<f64> {
    Ok(dose_proxies(model, lesion.into(), prompts)?.residual_change)
}

/// Mean log-probability (nats) of `response` given the templated prompt.
pub fn mean_per_token_logprob<B: Backend + ?Sized>(
    model: &mut B,
    lesion: Option<&LesionSpec>,
    prompt: &str,
    response: &str,
) -> Result<f64> {
    let (prefix, continuation) = {
        let tokenizer = model.tokenizer();
        (tokenizer.encode_prompt(prompt), tokenizer.encode_text(response))
    };
    with_intervention(model, lesion.into(), |m| mean_logprob_tokens(m, &prefix, &continuation))?
}

/// Mean of `ln p(continuation[i] | prefix, continuation[..i])`.
pub fn mean_logprob_tokens<B: Backend + ?Sized>(model: &B, prefix: &[u32], continuation: &[u32]) -> Result<f64> {
    if continuation.is_empty() {
        return Err(Error::Input("response is empty after tokenization".into()));
    }
    if prefix.is_empty() {
        return Err(Error::Input("likelihood needs a nonempty prefix".into()));
    }
    let mut session = model.session();
    let mut step = None;
    for &t in prefix {
        step = Some(session.push(t)?);
    }
    let mut logits = step.expect("nonempty prefix").logits;
    let mut total = 0.0;
    for (i, &t) in continuation.iter().enumerate() {
        let dist = TokenDistribution::from_logits(&logits);
        let p = *dist
            .probs()
            .get(t as usize)
            .ok_or_else(|| Error::Input(format!("token {t} outside vocabulary")))?;
        total += p.max(PROB_FLOOR).ln();
        if i + 1 < continuation.len() {
            logits = session.push(t)?.logits;
        }
    }
    Ok(total / continuation.len() as f64)
}
