//! Scorer-free surface features of a response.
//!
//! Words are whitespace tokens, lowercased, with leading and trailing
//! non-alphanumeric characters stripped; a token that is all punctuation
//! keeps its lowercased form so it still counts.

use std::collections::{HashMap, HashSet};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::battery::PromptItem;

const STOPWORDS: &str = include_str!("../../data/stopwords.txt");
const LEXICON: &str = include_str!("../../data/lexicon.txt");

/// Stop-word list and frequency lexicon.
#[derive(Debug, Clone)]
pub struct TextResources {
    pub stopwords: HashSet<String>,
    pub lexicon: HashSet<String>,
}

fn parse_list(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

impl TextResources {
    /// The bundled lists. Stop words are always part of the lexicon.
    pub fn bundled() -> &'static TextResources {
        static RES: OnceLock<TextResources> = OnceLock::new();
        RES.get_or_init(|| Self::from_lists(STOPWORDS, LEXICON))
    }

    pub fn from_lists(stopwords: &str, lexicon: &str) -> Self {
        let stopwords = parse_list(stopwords);
        let mut lexicon = parse_list(lexicon);
        lexicon.extend(stopwords.iter().cloned());
        Self { stopwords, lexicon }
    }

    /// Lexicon lookup tolerant of common inflection and clitics.
    pub fn is_known(&self, word: &str) -> bool {
        if self.lexicon.contains(word) {
            return true;
        }
        let base = word
            .strip_suffix("'s")
            .or_else(|| word.strip_suffix("n't"))
            .or_else(|| word.strip_suffix("'d"))
            .or_else(|| word.strip_suffix("'ll"))
            .or_else(|| word.strip_suffix("'re"))
            .or_else(|| word.strip_suffix("'ve"))
            .or_else(|| word.strip_suffix("'m"));
        if let Some(b) = base {
            if self.lexicon.contains(b) {
                return true;
            }
        }
        ["ing", "ed", "es", "s", "ly", "er", "est", "d"].iter().any(|suf| {
            word.strip_suffix(suf).is_some_and(|b| {
                let bs = b.as_bytes();
                let undoubled = (bs.len() >= 2 && bs[bs.len() - 1].is_ascii() && bs[bs.len() - 1] == bs[bs.len() - 2])
                    .then(|| &b[..b.len() - 1]);
                b.len() >= 2
                    && (self.lexicon.contains(b)
                        || self.lexicon.contains(&format!("{b}e"))
                        || undoubled.is_some_and(|u| self.lexicon.contains(u)))
            })
        })
    }
}

/// Normalised word tokens of `text`.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|tok| {
            let lower = tok.to_lowercase();
            let trimmed = lower.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                lower
            } else {
                trimmed.to_string()
            }
        })
        .collect()
}

pub fn is_alphabetic_word(w: &str) -> bool {
    w.chars().any(char::is_alphabetic) && w.chars().all(|c| c.is_alphabetic() || c == '\'' || c == '-')
}

/// Plural-insensitive key used for prompt-content matching.
fn stem(w: &str) -> &str {
    if w.len() > 3 {
        w.strip_suffix('s').unwrap_or(w)
    } else {
        w
    }
}

fn bigrams(ws: &[String]) -> Vec<(&str, &str)> {
    ws.windows(2).map(|p| (p[0].as_str(), p[1].as_str())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceFeatures {
    pub word_count: usize,
    pub unique_word_ratio: f64,
    pub alphabetic_share: f64,
    pub tiny_response: bool,
    pub repeated_token_mass: f64,
    pub prompt_bigram_copy_rate: f64,
    pub prompt_content_recall: f64,
}

impl SurfaceFeatures {
    pub const NAMES: [&'static str; 7] = [
        "word_count",
        "unique_word_ratio",
        "alphabetic_share",
        "tiny_response",
        "repeated_token_mass",
        "prompt_bigram_copy_rate",
        "prompt_content_recall",
    ];

    /// Numeric view in [`Self::NAMES`] order (`tiny_response` as 0/1).
    pub fn values(&self) -> [f64; 7] {
        [
            self.word_count as f64,
            self.unique_word_ratio,
            self.alphabetic_share,
            self.tiny_response as u8 as f64,
            self.repeated_token_mass,
            self.prompt_bigram_copy_rate,
            self.prompt_content_recall,
        ]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES.iter().position(|n| *n == name).map(|i| self.values()[i])
    }

    pub fn ratios_in_unit_interval(&self) -> bool {
        self.values()[1..].iter().all(|v| (0.0..=1.0).contains(v))
    }
}

pub fn surface_features(prompt: &PromptItem, text: &str) -> SurfaceFeatures {
    surface_features_with(TextResources::bundled(), &prompt.text, text)
}

pub fn surface_features_with(res: &TextResources, prompt: &str, text: &str) -> SurfaceFeatures {
    let ws = words(text);
    let n = ws.len();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };

    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &ws {
        *counts.entry(w.as_str()).or_default() += 1;
    }
    let repeated = ws.iter().filter(|w| counts[w.as_str()] > 3).count();

    let non_ws = text.chars().filter(|c| !c.is_whitespace()).count();
    let alpha = text.chars().filter(|c| c.is_alphabetic()).count();

    let prompt_words = words(prompt);
    let prompt_bigrams: HashSet<(&str, &str)> = bigrams(&prompt_words).into_iter().collect();
    let response_bigrams = bigrams(&ws);
    let copied = response_bigrams.iter().filter(|b| prompt_bigrams.contains(b)).count();

    let content: HashSet<&str> = prompt_words
        .iter()
        .filter(|w| is_alphabetic_word(w) && !res.stopwords.contains(w.as_str()))
        .map(|w| stem(w))
        .collect();
    let response_stems: HashSet<&str> = ws.iter().map(|w| stem(w)).collect();
    let recalled = content.iter().filter(|w| response_stems.contains(*w)).count();

    SurfaceFeatures {
        word_count: n,
        unique_word_ratio: ratio(counts.len(), n),
        alphabetic_share: ratio(alpha, non_ws),
        tiny_response: n < 3 || text.trim().chars().count() < 10,
        repeated_token_mass: ratio(repeated, n),
        prompt_bigram_copy_rate: ratio(copied, response_bigrams.len()),
        prompt_content_recall: ratio(recalled, content.len()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(prompt: &str, text: &str) -> SurfaceFeatures {
        surface_features_with(TextResources::bundled(), prompt, text)
    }

    #[test]
    fn empty_text() {
        let f = feats("Tell me about your first job", "");
        assert_eq!(f.word_count, 0);
        assert!(f.tiny_response);
        assert_eq!(f.values()[1..], [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn five_identical_tokens() {
        let f = feats("x", "a a a a a");
        assert_eq!(f.word_count, 5);
        assert!((f.unique_word_ratio - 0.2).abs() < 1e-12);
        assert_eq!(f.repeated_token_mass, 1.0);
    }

    #[test]
    fn three_repeats_do_not_count_as_repeated() {
        let f = feats("x", "a a a b");
        assert_eq!(f.repeated_token_mass, 0.0);
    }

    #[test]
    fn verbatim_prompt_is_fully_copied() {
        let p = "Describe what is happening in the following scene: The boy is pushing the girl.";
        let f = feats(p, p);
        assert_eq!(f.prompt_bigram_copy_rate, 1.0);
        assert_eq!(f.prompt_content_recall, 1.0);
    }

    #[test]
    fn tiny_boundary() {
        assert!(feats("x", "hello there").tiny_response);
        assert!(!feats("x", "hello there friend").tiny_response);
        assert!(feats("x", "a b c d").tiny_response);
    }

    #[test]
    fn alphabetic_share_counts_non_whitespace() {
        let f = feats("x", "ab 12");
        assert!((f.alphabetic_share - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lexicon_leniency() {
        let r = TextResources::bundled();
        for w in ["trips", "walked", "running", "beaches", "girl's", "don't", "the"] {
            assert!(r.is_known(w), "{w}");
        }
        assert!(!r.is_known("blorft"));
    }
}
