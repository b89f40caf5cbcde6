//! Domain types shared by every probe: answer labels, multiple-choice items,
//! option permutations, parsed predictions and persisted run records.
//!
//! Everything here is an immutable value. Constructors enforce the item
//! invariants so the rest of the crate can rely on them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DomainError {
    #[error("item {id}: {reason}")]
    InvalidItem { id: String, reason: String },
    #[error("permutation for item {item}: {reason}")]
    InvalidPermutation { item: String, reason: String },
    #[error("unscored record: {0}")]
    UnscoredRecord(String),
    #[error("invalid label {0:?}")]
    InvalidLabel(String),
}

/// Answer label. Items carry four or five options labelled contiguously from `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    A,
    B,
    C,
    D,
    E,
}

impl Label {
    pub const ALL: [Label; 5] = [Label::A, Label::B, Label::C, Label::D, Label::E];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn as_char(self) -> char {
        (b'A' + self as u8) as char
    }

    /// Parses a bare letter, tolerating surrounding whitespace and lowercase.
    pub fn parse_loose(s: &str) -> Option<Label> {
        let t = s.trim();
        let mut chars = t.chars();
        let c = chars.next()?;
        if chars.next().is_some() {
            return None;
        }
        match c.to_ascii_uppercase() {
            'A' => Some(Label::A),
            'B' => Some(Label::B),
            'C' => Some(Label::C),
            'D' => Some(Label::D),
            'E' => Some(Label::E),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for Label {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::parse_loose(s).ok_or_else(|| DomainError::InvalidLabel(s.to_string()))
    }
}

/// NFC-normalizes `s`, collapses every whitespace run to one space and trims.
pub fn normalize_text(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One multiple-choice question.
///
/// Serializes to the dataset line schema
/// `{"id", "question", "options": {"A": ..}, "answer"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawItem", into = "RawItem")]
pub struct McqItem {
    id: String,
    question_text: String,
    options: BTreeMap<Label, String>,
    gold_label: Label,
}

#[derive(Serialize, Deserialize)]
struct RawItem {
    id: String,
    question: String,
    options: BTreeMap<String, String>,
    answer: String,
}

impl TryFrom<RawItem> for McqItem {
    type Error = DomainError;

    fn try_from(raw: RawItem) -> Result<Self, Self::Error> {
        let invalid = |reason: String| DomainError::InvalidItem {
            id: raw.id.clone(),
            reason,
        };
        let mut options = BTreeMap::new();
        for (k, v) in &raw.options {
            // Keys must be uppercase letters; answers are normalized separately.
            let label = match k.as_str() {
                "A" | "B" | "C" | "D" | "E" => Label::parse_loose(k).unwrap(),
                _ => return Err(invalid(format!("option key {k:?} is not one of A-E"))),
            };
            options.insert(label, v.clone());
        }
        let gold = Label::parse_loose(&raw.answer)
            .ok_or_else(|| invalid(format!("answer {:?} is not a label", raw.answer)))?;
        McqItem::new(raw.id.clone(), &raw.question, options, gold)
    }
}

impl From<McqItem> for RawItem {
    fn from(item: McqItem) -> Self {
        RawItem {
            id: item.id,
            question: item.question_text,
            options: item
                .options
                .into_iter()
                .map(|(l, t)| (l.to_string(), t))
                .collect(),
            answer: item.gold_label.to_string(),
        }
    }
}

impl McqItem {
    /// Builds a validated item. Question and option texts are normalized
    /// (NFC, collapsed whitespace) before the invariants are checked.
    pub fn new(
        id: impl Into<String>,
        question: &str,
        options: BTreeMap<Label, String>,
        gold_label: Label,
    ) -> Result<Self, DomainError> {
        let id = id.into();
        let invalid = |reason: String| DomainError::InvalidItem {
            id: id.clone(),
            reason,
        };
        if id.trim().is_empty() {
            return Err(invalid("empty id".into()));
        }
        let question_text = normalize_text(question);
        if question_text.is_empty() {
            return Err(invalid("empty question".into()));
        }
        let n = options.len();
        if !(4..=5).contains(&n) {
            return Err(invalid(format!("expected 4 or 5 options, got {n}")));
        }
        for (i, label) in options.keys().enumerate() {
            if label.index() != i {
                return Err(invalid("option labels are not contiguous from A".into()));
            }
        }
        let options: BTreeMap<Label, String> = options
            .into_iter()
            .map(|(l, t)| (l, normalize_text(&t)))
            .collect();
        let mut seen = BTreeSet::new();
        for (label, text) in &options {
            if text.is_empty() {
                return Err(invalid(format!("option {label} is empty")));
            }
            if !seen.insert(text.as_str()) {
                return Err(invalid(format!("option {label} duplicates another option")));
            }
        }
        if !options.contains_key(&gold_label) {
            return Err(invalid(format!("gold label {gold_label} is not an option")));
        }
        Ok(McqItem {
            id,
            question_text,
            options,
            gold_label,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn question_text(&self) -> &str {
        &self.question_text
    }

    pub fn options(&self) -> &BTreeMap<Label, String> {
        &self.options
    }

    pub fn option(&self, label: Label) -> Option<&str> {
        self.options.get(&label).map(String::as_str)
    }

    pub fn gold_label(&self) -> Label {
        self.gold_label
    }

    pub fn gold_text(&self) -> &str {
        &self.options[&self.gold_label]
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.options.keys().copied()
    }

    pub fn num_options(&self) -> usize {
        self.options.len()
    }

    /// Labels other than the gold label, in order.
    pub fn wrong_labels(&self) -> Vec<Label> {
        self.labels().filter(|l| *l != self.gold_label).collect()
    }

    /// Same item with a replaced question text (used for redacted prompts).
    pub fn with_question_text(&self, text: &str) -> McqItem {
        McqItem {
            question_text: normalize_text(text),
            ..self.clone()
        }
    }

    /// Label whose option text equals `text`, if any.
    pub fn label_of_text(&self, text: &str) -> Option<Label> {
        self.options
            .iter()
            .find(|(_, t)| t.as_str() == text)
            .map(|(l, _)| *l)
    }
}

/// Records how an item's options were relabelled: `old label -> new label`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    pub mapping: BTreeMap<Label, Label>,
    pub applied_to: String,
}

impl Permutation {
    pub fn new(applied_to: impl Into<String>, mapping: BTreeMap<Label, Label>) -> Self {
        Permutation {
            mapping,
            applied_to: applied_to.into(),
        }
    }

    pub fn identity(item: &McqItem) -> Self {
        Permutation::new(item.id(), item.labels().map(|l| (l, l)).collect())
    }

    /// Exchanges two labels, leaving all others fixed.
    pub fn swap(item: &McqItem, a: Label, b: Label) -> Self {
        let mut p = Permutation::identity(item);
        p.mapping.insert(a, b);
        p.mapping.insert(b, a);
        p
    }

    /// Moves the option at `from` to `to`; the remaining options keep their
    /// relative order and close up around it.
    pub fn move_to(item: &McqItem, from: Label, to: Label) -> Self {
        let mut order: Vec<Label> = item.labels().filter(|l| *l != from).collect();
        order.insert(to.index().min(order.len()), from);
        let mapping = order
            .iter()
            .enumerate()
            .map(|(new_idx, old)| (*old, Label::from_index(new_idx).unwrap()))
            .collect();
        Permutation::new(item.id(), mapping)
    }

    pub fn map(&self, label: Label) -> Option<Label> {
        self.mapping.get(&label).copied()
    }

    pub fn inverse(&self) -> Permutation {
        Permutation::new(
            self.applied_to.clone(),
            self.mapping.iter().map(|(a, b)| (*b, *a)).collect(),
        )
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &Permutation) -> Permutation {
        let mapping = self
            .mapping
            .iter()
            .map(|(a, b)| (*a, next.map(*b).unwrap_or(*b)))
            .collect();
        Permutation::new(self.applied_to.clone(), mapping)
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().all(|(a, b)| a == b)
    }

    fn check_bijection(&self, item: &McqItem) -> Result<(), DomainError> {
        let err = |reason: &str| DomainError::InvalidPermutation {
            item: item.id().to_string(),
            reason: reason.to_string(),
        };
        let labels: BTreeSet<Label> = item.labels().collect();
        let domain: BTreeSet<Label> = self.mapping.keys().copied().collect();
        let image: BTreeSet<Label> = self.mapping.values().copied().collect();
        if domain != labels {
            return Err(err("domain does not match the item's labels"));
        }
        if image != labels || image.len() != self.mapping.len() {
            return Err(err("mapping is not a bijection over the item's labels"));
        }
        Ok(())
    }
}

/// Moves option texts according to `perm`; the gold label follows its text.
pub fn apply_permutation(item: &McqItem, perm: &Permutation) -> Result<McqItem, DomainError> {
    perm.check_bijection(item)?;
    let options = item
        .options
        .iter()
        .map(|(old, text)| (perm.mapping[old], text.clone()))
        .collect();
    Ok(McqItem {
        id: item.id.clone(),
        question_text: item.question_text.clone(),
        options,
        gold_label: perm.mapping[&item.gold_label],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    Repaired,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub reason: String,
    pub quote: String,
    /// Set once the quote has been checked against the question text.
    #[serde(default)]
    pub valid: bool,
}

/// Structured chain-of-thought answer: quoted steps plus a final letter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotPrediction {
    pub steps: Vec<ReasoningStep>,
    pub final_answer: Option<Label>,
    pub raw_text: String,
    pub parse_status: ParseStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

/// Two-key answer (`cot`/`final_answer` or `reasoning`/`answer`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BriefPrediction {
    pub reasoning: String,
    pub final_answer: Option<Label>,
    pub raw_text: String,
    pub parse_status: ParseStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum Prediction {
    Cot(CotPrediction),
    Brief(BriefPrediction),
    FreeText { text: String },
}

impl Prediction {
    /// Predicted label, or `None` when unparsed or free text.
    pub fn label(&self) -> Option<Label> {
        match self {
            Prediction::Cot(p) if p.parse_status != ParseStatus::Failed => p.final_answer,
            Prediction::Brief(p) if p.parse_status != ParseStatus::Failed => p.final_answer,
            _ => None,
        }
    }

    pub fn parse_status(&self) -> ParseStatus {
        match self {
            Prediction::Cot(p) => p.parse_status,
            Prediction::Brief(p) => p.parse_status,
            Prediction::FreeText { .. } => ParseStatus::Ok,
        }
    }

    pub fn raw_text(&self) -> &str {
        match self {
            Prediction::Cot(p) => &p.raw_text,
            Prediction::Brief(p) => &p.raw_text,
            Prediction::FreeText { text } => text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Exp1,
    Exp2,
    Exp3,
    Exp4,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Exp1 => "exp1",
            Experiment::Exp2 => "exp2",
            Experiment::Exp3 => "exp3",
            Experiment::Exp4 => "exp4",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Experimental condition a single model call was made under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Condition {
    Exp1Baseline,
    Exp1Ablated { step_index: usize },
    Exp2Unbiased,
    Exp2BiasToGold,
    Exp2BiasToWrong,
    Exp3Unbiased,
    Exp3HintToGold,
    Exp3HintToWrong,
    Exp4Freeform,
}

impl Condition {
    pub fn experiment(self) -> Experiment {
        match self {
            Condition::Exp1Baseline | Condition::Exp1Ablated { .. } => Experiment::Exp1,
            Condition::Exp2Unbiased | Condition::Exp2BiasToGold | Condition::Exp2BiasToWrong => {
                Experiment::Exp2
            }
            Condition::Exp3Unbiased | Condition::Exp3HintToGold | Condition::Exp3HintToWrong => {
                Experiment::Exp3
            }
            Condition::Exp4Freeform => Experiment::Exp4,
        }
    }

    /// Stable textual key, e.g. `exp1_ablated:2`.
    pub fn key(self) -> String {
        match self {
            Condition::Exp1Ablated { step_index } => format!("exp1_ablated:{step_index}"),
            other => other.name().to_string(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Condition::Exp1Baseline => "exp1_baseline",
            Condition::Exp1Ablated { .. } => "exp1_ablated",
            Condition::Exp2Unbiased => "exp2_unbiased",
            Condition::Exp2BiasToGold => "exp2_bias_to_gold",
            Condition::Exp2BiasToWrong => "exp2_bias_to_wrong",
            Condition::Exp3Unbiased => "exp3_unbiased",
            Condition::Exp3HintToGold => "exp3_hint_to_gold",
            Condition::Exp3HintToWrong => "exp3_hint_to_wrong",
            Condition::Exp4Freeform => "exp4_freeform",
        }
    }

    pub fn is_hint(self) -> bool {
        matches!(self, Condition::Exp3HintToGold | Condition::Exp3HintToWrong)
    }

    pub fn is_position_bias(self) -> bool {
        matches!(self, Condition::Exp2BiasToGold | Condition::Exp2BiasToWrong)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RequestParams {
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub seed: Option<u64>,
}

/// Redacted span of an ablated run, in bytes of the normalized question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblatedSpan {
    pub quote: String,
    pub start: usize,
    pub end: usize,
}

/// One model call under one (experiment, condition, item, model) key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: Experiment,
    pub condition: Condition,
    pub item_id: String,
    pub model_id: String,
    pub prompt_fingerprint: String,
    pub prediction: Prediction,
    pub gold_label_after_permutation: Option<Label>,
    pub hinted_label: Option<Label>,
    pub reasoning_text: String,
    pub created_at: DateTime<Utc>,
    pub request_params: RequestParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<Permutation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblatedSpan>,
    #[serde(default)]
    pub repair_retry: bool,
    #[serde(default)]
    pub backend: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RunKey {
    pub experiment: Experiment,
    pub condition: String,
    pub item_id: String,
    pub model_id: String,
}

impl RunKey {
    pub fn new(condition: Condition, item_id: &str, model_id: &str) -> Self {
        RunKey {
            experiment: condition.experiment(),
            condition: condition.key(),
            item_id: item_id.to_string(),
            model_id: model_id.to_string(),
        }
    }
}

impl fmt::Display for RunKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.experiment, self.condition, self.item_id, self.model_id
        )
    }
}

impl RunRecord {
    pub fn key(&self) -> RunKey {
        RunKey::new(self.condition, &self.item_id, &self.model_id)
    }

    pub fn predicted_label(&self) -> Option<Label> {
        self.prediction.label()
    }

    pub fn is_scored(&self) -> bool {
        self.predicted_label().is_some() && self.gold_label_after_permutation.is_some()
    }
}

/// True iff the predicted label equals the gold label after permutation.
pub fn is_correct(record: &RunRecord) -> Result<bool, DomainError> {
    let predicted = record
        .predicted_label()
        .ok_or_else(|| DomainError::UnscoredRecord(record.key().to_string()))?;
    let gold = record
        .gold_label_after_permutation
        .ok_or_else(|| DomainError::UnscoredRecord(record.key().to_string()))?;
    Ok(predicted == gold)
}

/// Content hash of a (system, user) prompt pair.
pub fn prompt_fingerprint(system: &str, user: &str) -> String {
    let mut h = Sha256::new();
    h.update(system.as_bytes());
    h.update([0u8]);
    h.update(user.as_bytes());
    hex::encode(h.finalize())
}
