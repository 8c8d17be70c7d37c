//! Rule-based robustness scorer.
//!
//! Only mechanically decidable symptoms are set; every other symptom in the
//! schema stays false. Rules, applied to normalised words:
//! - empty or punctuation-only output: short/simplified and meaning-unclear,
//!   nothing else;
//! - repetition-loop: some n-gram (`loop_min_n..=loop_max_n`) repeats at
//!   least `loop_min_repeats` times back to back;
//! - stereotypies/automatisms: the top word, or the top bigram counted as two
//!   words per occurrence, covers more than `stereotypy_share` of the words;
//! - perseverations: repeated-token mass above `perseveration_mass` when
//!   neither of the two rules above fired;
//! - short/simplified: connected-text prompt and fewer than
//!   `short_max_words` words;
//! - off-topic: connected-text prompt, the response has at least one content
//!   word, and prompt-content recall is below `off_topic_recall`;
//! - neologisms: share of alphabetic words missing from the lexicon above
//!   `neologism_share`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::features::{is_alphabetic_word, surface_features_with, words, TextResources};
use super::{names, SymptomSchema, SymptomVector};
use crate::battery::{PromptItem, Subtest};

pub const HEURISTIC_SCORER_ID: &str = "heuristic-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeuristicConfig {
    pub loop_min_n: usize,
    pub loop_max_n: usize,
    pub loop_min_repeats: usize,
    pub perseveration_mass: f64,
    pub stereotypy_share: f64,
    pub stereotypy_min_words: usize,
    pub short_max_words: usize,
    pub off_topic_recall: f64,
    pub neologism_share: f64,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        Self {
            loop_min_n: 3,
            loop_max_n: 8,
            loop_min_repeats: 4,
            perseveration_mass: 0.35,
            stereotypy_share: 0.5,
            stereotypy_min_words: 4,
            short_max_words: 8,
            off_topic_recall: 0.1,
            neologism_share: 0.2,
        }
    }
}

/// Which rules fired, independent of any schema.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HeuristicFlags {
    pub meaning_unclear: bool,
    pub short_simplified: bool,
    pub repetition_loop: bool,
    pub stereotypies: bool,
    pub perseverations: bool,
    pub off_topic: bool,
    pub neologisms: bool,
}

#[derive(Debug, Clone)]
pub struct HeuristicScorer {
    pub config: HeuristicConfig,
    resources: &'static TextResources,
}

impl Default for HeuristicScorer {
    fn default() -> Self {
        Self::new(HeuristicConfig::default())
    }
}

impl HeuristicScorer {
    pub fn new(config: HeuristicConfig) -> Self {
        Self {
            config,
            resources: TextResources::bundled(),
        }
    }

    pub fn flags(&self, prompt: &PromptItem, text: &str) -> HeuristicFlags {
        let cfg = &self.config;
        let ws = words(text);
        if ws.is_empty() || !text.chars().any(char::is_alphanumeric) {
            return HeuristicFlags {
                meaning_unclear: true,
                short_simplified: true,
                ..HeuristicFlags::default()
            };
        }
        let feats = surface_features_with(self.resources, &prompt.text, text);
        let connected = prompt.subtest == Subtest::ConnectedText;

        let repetition_loop = has_loop(&ws, cfg.loop_min_n, cfg.loop_max_n, cfg.loop_min_repeats);
        let stereotypies = ws.len() >= cfg.stereotypy_min_words && dominant_share(&ws) > cfg.stereotypy_share;
        let perseverations = feats.repeated_token_mass > cfg.perseveration_mass && !repetition_loop && !stereotypies;
        let has_content = ws
            .iter()
            .any(|w| is_alphabetic_word(w) && !self.resources.stopwords.contains(w.as_str()));
        let alpha: Vec<&String> = ws.iter().filter(|w| is_alphabetic_word(w)).collect();
        let unknown = alpha.iter().filter(|w| !self.resources.is_known(w)).count();
        let neologisms = !alpha.is_empty() && unknown as f64 / alpha.len() as f64 > cfg.neologism_share;

        HeuristicFlags {
            meaning_unclear: false,
            short_simplified: connected && ws.len() < cfg.short_max_words,
            repetition_loop,
            stereotypies,
            perseverations,
            off_topic: connected && has_content && feats.prompt_content_recall < cfg.off_topic_recall,
            neologisms,
        }
    }

    pub fn score(&self, prompt: &PromptItem, text: &str, schema: &SymptomSchema) -> SymptomVector {
        let f = self.flags(prompt, text);
        let mut bits = vec![false; schema.len()];
        let set = [
            (names::MEANING_UNCLEAR, f.meaning_unclear),
            (names::SHORT_SIMPLIFIED, f.short_simplified),
            (names::REPETITION_LOOP, f.repetition_loop),
            (names::STEREOTYPIES, f.stereotypies),
            (names::PERSEVERATIONS, f.perseverations),
            (names::OFF_TOPIC, f.off_topic),
            (names::NEOLOGISMS, f.neologisms),
        ];
        for (name, on) in set {
            if let Some(i) = schema.index_of(name) {
                bits[i] = on;
            }
        }
        SymptomVector::scored(HEURISTIC_SCORER_ID, bits)
    }
}

/// Default-configured heuristic score.
pub fn heuristic_score(prompt: &PromptItem, text: &str, schema: &SymptomSchema) -> SymptomVector {
    HeuristicScorer::default().score(prompt, text, schema)
}

/// Case-insensitive exact match after whitespace normalisation; `None` for
/// items without a repetition target.
pub fn repetition_success(prompt: &PromptItem, text: &str) -> Option<bool> {
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    prompt
        .expected_repetition_target
        .as_deref()
        .map(|target| norm(target) == norm(text))
}

pub(crate) fn has_loop(ws: &[String], min_n: usize, max_n: usize, min_repeats: usize) -> bool {
    if min_repeats == 0 {
        return true;
    }
    for n in min_n.max(1)..=max_n {
        if n * min_repeats > ws.len() {
            break;
        }
        for start in 0..=ws.len() - n * min_repeats {
            let gram = &ws[start..start + n];
            let repeats = (1..min_repeats).all(|k| &ws[start + k * n..start + (k + 1) * n] == gram);
            if repeats {
                return true;
            }
        }
    }
    false
}

fn dominant_share(ws: &[String]) -> f64 {
    let n = ws.len() as f64;
    let mut unigrams: HashMap<&str, usize> = HashMap::new();
    for w in ws {
        *unigrams.entry(w).or_default() += 1;
    }
    let mut bigrams: HashMap<(&str, &str), usize> = HashMap::new();
    for p in ws.windows(2) {
        *bigrams.entry((&p[0], &p[1])).or_default() += 1;
    }
    let top_word = unigrams.values().copied().max().unwrap_or(0) as f64 / n;
    let top_bigram = (2.0 * bigrams.values().copied().max().unwrap_or(0) as f64 / n).min(1.0);
    top_word.max(top_bigram)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::battery::Battery;

    fn on(v: &SymptomVector, schema: &SymptomSchema) -> Vec<String> {
        let bits = v.bits().unwrap();
        schema
            .names()
            .into_iter()
            .zip(bits)
            .filter(|(_, &b)| b)
            .map(|(n, _)| n.to_string())
            .collect()
    }

    #[test]
    fn stereotyped_function_word() {
        let schema = SymptomSchema::default_schema();
        let scene = Battery::builtin().get("ct_05").unwrap().clone();
        let v = heuristic_score(&scene, "the. the. the. the. the.", &schema);
        assert_eq!(on(&v, &schema), [names::SHORT_SIMPLIFIED, names::STEREOTYPIES]);
        // ten words is past the short-utterance cutoff
        let v = heuristic_score(&scene, "the. the. the. the. the. the. the. the. the. the.", &schema);
        assert_eq!(on(&v, &schema), [names::STEREOTYPIES]);
    }

    #[test]
    fn repeated_sentence_is_a_loop() {
        let schema = SymptomSchema::default_schema();
        let scene = Battery::builtin().get("ct_05").unwrap().clone();
        let text = ["The boy is pushing the girl."; 6].join(" ");
        let v = heuristic_score(&scene, &text, &schema);
        assert_eq!(on(&v, &schema), [names::REPETITION_LOOP]);
    }

    #[test]
    fn empty_and_punctuation_only() {
        let schema = SymptomSchema::default_schema();
        let item = Battery::builtin().get("sc_01").unwrap().clone();
        for text in ["", "   ", "... ?? !"] {
            let v = heuristic_score(&item, text, &schema);
            assert_eq!(on(&v, &schema), [names::MEANING_UNCLEAR, names::SHORT_SIMPLIFIED]);
        }
    }

    #[test]
    fn loop_detection_bounds() {
        let w = |s: &str| words(s);
        assert!(has_loop(&w("a b c a b c a b c a b c"), 3, 8, 4));
        assert!(!has_loop(&w("a b c a b c a b c"), 3, 8, 4));
        assert!(!has_loop(&w("a b a b a b a b a b"), 3, 8, 4));
    }

    #[test]
    fn gibberish_is_neologistic() {
        let schema = SymptomSchema::default_schema();
        let item = Battery::builtin().get("sc_02").unwrap().clone();
        let v = heuristic_score(&item, "florp zanq wibbet the trundle gax", &schema);
        assert!(on(&v, &schema).contains(&names::NEOLOGISMS.to_string()));
    }

    #[test]
    fn repetition_match_rule() {
        let item = Battery::builtin().get("rep_04").unwrap().clone();
        assert_eq!(repetition_success(&item, "the sun  rises in the east"), Some(true));
        assert_eq!(repetition_success(&item, "the sun rises"), Some(false));
        let ct = Battery::builtin().get("ct_01").unwrap().clone();
        assert_eq!(repetition_success(&ct, "x"), None);
    }
}
