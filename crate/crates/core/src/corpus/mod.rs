//! Utterances, label inventories, CoNLL-style I/O, synthetic data and metrics.

mod conll;
mod metrics;
mod synthetic;

pub use conll::{load_conll, parse_conll, to_conll, write_conll, INTENT_PREFIX};
pub use metrics::{evaluate, extract_spans, intent_acc, overall_acc, slot_f1, EvalReport, Span};
pub use synthetic::{gen_synthetic, SyntheticSpec};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embedder::Vocab;
use crate::error::{Error, Result};

pub const OUTSIDE: &str = "O";

/// One labelled utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub slots: Vec<String>,
    pub intent: String,
}

impl Utterance {
    pub fn new(tokens: Vec<String>, slots: Vec<String>, intent: impl Into<String>) -> Result<Self> {
        let u = Self {
            tokens,
            slots,
            intent: intent.into(),
        };
        u.validate()?;
        Ok(u)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.slots.len() {
            return Err(Error::Invalid(format!(
                "{} tokens but {} slot labels",
                self.tokens.len(),
                self.slots.len()
            )));
        }
        if self.tokens.is_empty() {
            return Err(Error::Invalid("utterance has no tokens".into()));
        }
        if self.intent.is_empty() {
            return Err(Error::Invalid("utterance has an empty intent".into()));
        }
        for s in &self.slots {
            check_bio_label(s)?;
        }
        Ok(())
    }
}

/// Accepts `O`, `B-<type>` and `I-<type>`.
pub fn check_bio_label(label: &str) -> Result<()> {
    if label == OUTSIDE {
        return Ok(());
    }
    match label.split_once('-') {
        Some(("B" | "I", ty)) if !ty.is_empty() => Ok(()),
        _ => Err(Error::Invalid(format!("`{label}` is not O, B-<type> or I-<type>"))),
    }
}

/// True when every `I-X` follows a `B-X` or `I-X`.
pub fn is_well_formed(slots: &[String]) -> bool {
    let mut prev: Option<&str> = None;
    for s in slots {
        if let Some(ty) = s.strip_prefix("I-") {
            if prev != Some(ty) {
                return false;
            }
        }
        prev = s.strip_prefix("B-").or_else(|| s.strip_prefix("I-"));
    }
    true
}

/// Labelled utterances plus the token, slot and intent inventories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub vocab: Vocab,
    /// Slot labels with `O` first, the rest in order of first appearance.
    pub slot_labels: Vec<String>,
    /// Intent labels in order of first appearance.
    pub intents: Vec<String>,
}

impl Dataset {
    /// Builds inventories from the utterances themselves.
    pub fn from_utterances(utterances: Vec<Utterance>) -> Result<Self> {
        let mut vocab = Vocab::new();
        let mut slot_labels = vec![OUTSIDE.to_string()];
        let mut intents: Vec<String> = Vec::new();
        for u in &utterances {
            u.validate()?;
            for t in &u.tokens {
                vocab.add(t);
            }
            for s in &u.slots {
                if !slot_labels.contains(s) {
                    slot_labels.push(s.clone());
                }
            }
            if !intents.contains(&u.intent) {
                intents.push(u.intent.clone());
            }
        }
        Ok(Self {
            utterances,
            vocab,
            slot_labels,
            intents,
        })
    }

    /// Reuses the inventories of `reference`. Unknown labels are an error;
    /// unknown tokens map to `<unk>` at encoding time.
    pub fn with_inventories(utterances: Vec<Utterance>, reference: &Dataset) -> Result<Self> {
        let ds = Self {
            utterances,
            vocab: reference.vocab.clone(),
            slot_labels: reference.slot_labels.clone(),
            intents: reference.intents.clone(),
        };
        let index = ds.index();
        for u in &ds.utterances {
            u.validate()?;
            index.encode(u)?;
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn index(&self) -> LabelIndex {
        LabelIndex::new(&self.slot_labels, &self.intents)
    }
}

/// Label-to-id lookup tables.
#[derive(Debug, Clone)]
pub struct LabelIndex {
    slots: HashMap<String, usize>,
    intents: HashMap<String, usize>,
}

/// An utterance mapped to label ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedLabels {
    pub slots: Vec<usize>,
    pub intent: usize,
}

impl LabelIndex {
    pub fn new(slot_labels: &[String], intents: &[String]) -> Self {
        let map = |xs: &[String]| xs.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self {
            slots: map(slot_labels),
            intents: map(intents),
        }
    }

    pub fn slot(&self, label: &str) -> Result<usize> {
        self.slots.get(label).copied().ok_or_else(|| Error::UnknownLabel {
            kind: "slot",
            label: label.to_string(),
        })
    }

    pub fn intent(&self, label: &str) -> Result<usize> {
        self.intents.get(label).copied().ok_or_else(|| Error::UnknownLabel {
            kind: "intent",
            label: label.to_string(),
        })
    }

    pub fn encode(&self, u: &Utterance) -> Result<EncodedLabels> {
        Ok(EncodedLabels {
            slots: u.slots.iter().map(|s| self.slot(s)).collect::<Result<_>>()?,
            intent: self.intent(&u.intent)?,
        })
    }
}
