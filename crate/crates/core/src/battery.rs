//! Prompt battery.
//!
//! The builtin battery is the fixed 20-prompt subset used by every sweep
//! (five prompts per subtest). Word-comprehension choice lists are
//! placeholders flagged with `choices_provisional`.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BUILTIN: &str = include_str!("../data/battery.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtest {
    ConnectedText,
    Repetition,
    SentenceComprehension,
    WordComprehension,
}

impl Subtest {
    pub const ALL: [Subtest; 4] = [
        Subtest::ConnectedText,
        Subtest::Repetition,
        Subtest::SentenceComprehension,
        Subtest::WordComprehension,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subtest::ConnectedText => "connected_text",
            Subtest::Repetition => "repetition",
            Subtest::SentenceComprehension => "sentence_comprehension",
            Subtest::WordComprehension => "word_comprehension",
        }
    }
}

impl fmt::Display for Subtest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptItem {
    pub prompt_id: String,
    pub subtest: Subtest,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    /// True when `choices` are stand-ins rather than the published options.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub choices_provisional: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_repetition_target: Option<String>,
}

impl PromptItem {
    pub fn connected_text(prompt_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            prompt_id: prompt_id.into(),
            subtest: Subtest::ConnectedText,
            text: text.into(),
            choices: None,
            choices_provisional: false,
            expected_repetition_target: None,
        }
    }

    /// Text shown to the model: the prompt plus any answer choices.
    pub fn rendered(&self) -> String {
        match &self.choices {
            Some(c) => format!("{} Options: {}.", self.text, c.join(", ")),
            None => self.text.clone(),
        }
    }

    fn validate(&self, row: usize) -> Result<()> {
        if self.prompt_id.is_empty() {
            return Err(Error::schema(Some(row), "empty prompt_id"));
        }
        match (self.subtest, &self.choices) {
            (Subtest::WordComprehension, Some(c)) if c.len() == 6 => {}
            (Subtest::WordComprehension, _) => {
                return Err(Error::schema(Some(row), "word comprehension items need exactly six choices"))
            }
            (_, Some(_)) => return Err(Error::schema(Some(row), "choices are only valid for word comprehension")),
            (_, None) => {}
        }
        if self.expected_repetition_target.is_some() && self.subtest != Subtest::Repetition {
            return Err(Error::schema(Some(row), "repetition target on a non-repetition item"));
        }
        Ok(())
    }
}

/// Ordered, validated prompt list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Battery {
    items: Vec<PromptItem>,
}

impl Battery {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN).expect("builtin battery is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(Error::schema(None, "battery file is empty"));
        }
        let rows: Vec<serde_json::Value> =
            serde_json::from_str(text).map_err(|e| Error::schema(None, format!("battery is not a JSON array: {e}")))?;
        let items = rows
            .into_iter()
            .enumerate()
            .map(|(i, v)| serde_json::from_value(v).map_err(|e| Error::schema(Some(i), e.to_string())))
            .collect::<Result<Vec<PromptItem>>>()?;
        Self::new(items)
    }

    pub fn new(items: Vec<PromptItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::schema(None, "battery has no prompts"));
        }
        let mut seen = HashSet::new();
        for (i, item) in items.iter().enumerate() {
            item.validate(i)?;
            if !seen.insert(item.prompt_id.as_str()) {
                return Err(Error::schema(Some(i), format!("duplicate prompt_id `{}`", item.prompt_id)));
            }
        }
        Ok(Self { items })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.items).expect("prompt items serialise");
        s.push('\n');
        s
    }

    pub fn items(&self) -> &[PromptItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, prompt_id: &str) -> Option<&PromptItem> {
        self.items.iter().find(|p| p.prompt_id == prompt_id)
    }

    pub fn count(&self, subtest: Subtest) -> usize {
        self.items.iter().filter(|p| p.subtest == subtest).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_has_five_per_subtest() {
        let b = Battery::builtin();
        assert_eq!(b.len(), 20);
        for s in Subtest::ALL {
            assert_eq!(b.count(s), 5, "{s}");
        }
        assert_eq!(b.items()[0].text, "Tell me about the best trip you ever took");
        assert_eq!(
            b.get("rep_01").unwrap().expected_repetition_target.as_deref(),
            Some("house")
        );
    }

    #[test]
    fn rendered_prompts_list_choices() {
        let b = Battery::builtin();
        assert_eq!(b.get("ct_03").unwrap().rendered(), "Tell me about your first job");
        let wc = b.get("wc_05").unwrap().rendered();
        assert!(wc.ends_with("Options: giraffe, mouse, rabbit, penguin, salmon, beetle."), "{wc}");
    }

    #[test]
    fn builtin_round_trips_bit_exactly() {
        let b = Battery::builtin();
        let json = b.to_json();
        let again = Battery::from_json(&json).unwrap();
        assert_eq!(again, b);
        assert_eq!(again.to_json(), json);
    }

    #[test]
    fn rejects_empty_duplicate_and_malformed() {
        assert!(matches!(Battery::from_json(""), Err(Error::Schema { .. })));
        assert!(matches!(Battery::from_json("[]"), Err(Error::Schema { .. })));
        let dup = r#"[{"prompt_id":"a","subtest":"connected_text","text":"x"},
                      {"prompt_id":"a","subtest":"connected_text","text":"y"}]"#;
        assert!(matches!(Battery::from_json(dup), Err(Error::Schema { row: Some(1), .. })));
        let bad = r#"[{"prompt_id":"a","subtest":"naming","text":"x"}]"#;
        assert!(matches!(Battery::from_json(bad), Err(Error::Schema { row: Some(0), .. })));
        let five = r#"[{"prompt_id":"a","subtest":"word_comprehension","text":"x","choices":["1","2","3","4","5"]}]"#;
        assert!(Battery::from_json(five).is_err());
    }

    #[test]
    fn single_custom_prompt() {
        let b = Battery::new(vec![PromptItem::connected_text("mine", "Tell me a story")]).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(Battery::from_json(&b.to_json()).unwrap(), b);
    }
}
