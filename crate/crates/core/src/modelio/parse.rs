//! Parsing of structured model replies.
//!
//! Three passes: a strict parse of the whole reply as the expected JSON
//! object, a repair pass over the first balanced `{...}` block that has the
//! expected keys, and, for replies with no JSON at all, extraction of a
//! standalone answer letter. The outcome is recorded in [`ParseStatus`];
//! nothing here returns an error.

use std::sync::LazyLock;

use regex::Regex;
use serde_json::{json, Map, Value};

use crate::domain::{BriefPrediction, CotPrediction, Label, ParseStatus, ReasoningStep};

/// Upper bound on reasoning steps kept from a reply.
pub const MAX_STEPS: usize = 5;

/// Key layout of the two-field answer formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BriefSchema {
    /// `{"cot": .., "final_answer": ..}`
    CotBrief,
    /// `{"reasoning": .., "answer": ..}`
    ReasoningAnswer,
}

impl BriefSchema {
    fn keys(self) -> (&'static str, &'static str) {
        match self {
            BriefSchema::CotBrief => ("cot", "final_answer"),
            BriefSchema::ReasoningAnswer => ("reasoning", "answer"),
        }
    }
}

static ANSWER_PHRASE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i:final\s+answer|answer)\s*(?i:is|:|=)?\s*(?i:option\s+)?[(\[]?([A-E])[)\]]?(?:[^A-Za-z0-9]|$)")
        .unwrap()
});
static BARE_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*[(\[]?([A-Ea-e])[)\]]?\.?\s*$").unwrap());
static LEADING_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*[(\[<]?([A-Ea-e])(?:[)\]>.:]|\s|$)").unwrap());

fn strip_code_fences(s: &str) -> &str {
    let t = s.trim();
    let t = t
        .strip_prefix("```json")
        .or_else(|| t.strip_prefix("```JSON"))
        .or_else(|| t.strip_prefix("```"))
        .unwrap_or(t);
    t.strip_suffix("```").unwrap_or(t).trim()
}

/// Top-level balanced `{...}` blocks in order of appearance.
fn balanced_objects(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = None;
    let mut in_str = false;
    let mut escaped = false;
    for (i, ch) in s.char_indices() {
        if in_str {
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_str = false;
            }
            continue;
        }
        match ch {
            '"' if depth > 0 => in_str = true,
            '{' => {
                if depth == 0 {
                    start = Some(i);
                }
                depth += 1;
            }
            '}' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    out.push(&s[start.take().unwrap()..=i]);
                }
            }
            _ => {}
        }
    }
    out
}

fn label_strict(v: &Value) -> Option<Label> {
    v.as_str().and_then(Label::parse_loose)
}

fn label_lenient(v: &Value) -> Option<Label> {
    let s = v.as_str()?;
    Label::parse_loose(s).or_else(|| {
        LEADING_LETTER
            .captures(s)
            .and_then(|c| Label::parse_loose(&c[1]))
    })
}

/// Standalone answer letter in prose, e.g. "The answer is C." or "C".
pub fn extract_answer_letter(text: &str) -> Option<Label> {
    if let Some(c) = BARE_LETTER.captures(text) {
        return Label::parse_loose(&c[1]);
    }
    ANSWER_PHRASE
        .captures_iter(text)
        .last()
        .and_then(|c| Label::parse_loose(&c[1]))
}

struct CotFields {
    steps: Vec<ReasoningStep>,
    final_answer: Label,
    diagnostics: Vec<String>,
    dropped: bool,
}

fn cot_fields(obj: &Map<String, Value>, lenient: bool) -> Option<CotFields> {
    let steps_v = obj.get("steps")?.as_array()?;
    let answer_v = obj.get("final_answer")?;
    let final_answer = if lenient {
        label_lenient(answer_v)?
    } else {
        label_strict(answer_v)?
    };
    let mut steps = Vec::new();
    let mut diagnostics = Vec::new();
    let mut dropped = false;
    for (i, s) in steps_v.iter().enumerate() {
        let reason = s.get("reason").and_then(Value::as_str).map(str::trim);
        let quote = s.get("quote").and_then(Value::as_str);
        match (reason, quote) {
            (Some(r), Some(q)) if !r.is_empty() && !q.trim().is_empty() => {
                steps.push(ReasoningStep {
                    reason: r.to_string(),
                    quote: q.to_string(),
                    valid: false,
                })
            }
            _ => {
                dropped = true;
                diagnostics.push(format!("step {i} dropped: missing or empty reason/quote"));
            }
        }
    }
    if steps.len() > MAX_STEPS {
        diagnostics.push(format!(
            "{} steps returned; kept the first {MAX_STEPS}",
            steps.len()
        ));
        steps.truncate(MAX_STEPS);
    }
    Some(CotFields {
        steps,
        final_answer,
        diagnostics,
        dropped,
    })
}

/// Parses a `{"steps": [{"reason", "quote"}..], "final_answer"}` reply.
pub fn parse_cot(raw: &str) -> CotPrediction {
    let done = |fields: CotFields, status: ParseStatus| CotPrediction {
        steps: fields.steps,
        final_answer: Some(fields.final_answer),
        raw_text: raw.to_string(),
        parse_status: status,
        diagnostics: fields.diagnostics,
    };

    if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(raw.trim()) {
        if let Some(f) = cot_fields(&obj, false) {
            let status = if f.dropped {
                ParseStatus::Repaired
            } else {
                ParseStatus::Ok
            };
            return done(f, status);
        }
    }
    let body = strip_code_fences(raw);
    for block in balanced_objects(body) {
        if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(block) {
            if let Some(f) = cot_fields(&obj, true) {
                return done(f, ParseStatus::Repaired);
            }
        }
    }
    let letter = if raw.contains('{') {
        None
    } else {
        extract_answer_letter(raw)
    };
    CotPrediction {
        steps: Vec::new(),
        final_answer: letter,
        raw_text: raw.to_string(),
        parse_status: if letter.is_some() {
            ParseStatus::Repaired
        } else {
            ParseStatus::Failed
        },
        diagnostics: Vec::new(),
    }
}

/// Compact JSON in the exact layout [`parse_cot`] accepts strictly.
pub fn serialize_cot(steps: &[ReasoningStep], final_answer: Label) -> String {
    let steps: Vec<Value> = steps
        .iter()
        .map(|s| json!({"reason": s.reason, "quote": s.quote}))
        .collect();
    json!({"steps": steps, "final_answer": final_answer.to_string()}).to_string()
}

fn brief_fields(obj: &Map<String, Value>, schema: BriefSchema, lenient: bool) -> Option<(String, Label)> {
    let (text_key, answer_key) = schema.keys();
    let reasoning = obj.get(text_key)?.as_str()?.to_string();
    let answer_v = obj.get(answer_key)?;
    let label = if lenient {
        label_lenient(answer_v)?
    } else {
        label_strict(answer_v)?
    };
    Some((reasoning, label))
}

/// Parses a two-key reply; labels are normalized to uppercase.
pub fn parse_brief(raw: &str, schema: BriefSchema) -> BriefPrediction {
    let done = |(reasoning, label): (String, Label), status| BriefPrediction {
        reasoning,
        final_answer: Some(label),
        raw_text: raw.to_string(),
        parse_status: status,
    };
    if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(raw.trim()) {
        if let Some(f) = brief_fields(&obj, schema, false) {
            return done(f, ParseStatus::Ok);
        }
    }
    for block in balanced_objects(strip_code_fences(raw)) {
        if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(block) {
            if let Some(f) = brief_fields(&obj, schema, true) {
                return done(f, ParseStatus::Repaired);
            }
        }
    }
    let letter = if raw.contains('{') {
        None
    } else {
        extract_answer_letter(raw)
    };
    BriefPrediction {
        reasoning: if letter.is_some() {
            raw.trim().to_string()
        } else {
            String::new()
        },
        final_answer: letter,
        raw_text: raw.to_string(),
        parse_status: if letter.is_some() {
            ParseStatus::Repaired
        } else {
            ParseStatus::Failed
        },
    }
}

pub fn serialize_brief(reasoning: &str, label: Label, schema: BriefSchema) -> String {
    let (text_key, answer_key) = schema.keys();
    let mut obj = Map::new();
    obj.insert(text_key.into(), Value::String(reasoning.into()));
    obj.insert(answer_key.into(), Value::String(label.to_string()));
    Value::Object(obj).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const THREE_STEPS: &str = r#"{
  "steps": [
    {"reason": "The patient's primary complaint is recurrent bacterial infections, indicating an immunodeficiency.", "quote": "recurrent bacterial infections"},
    {"reason": "The physical examination reveals a distinct phenotype associated with partial oculocutaneous albinism.", "quote": "light-colored skin and silver hair"},
    {"reason": "The key diagnostic clue is the finding on the peripheral blood smear, which points to a defect in lysosomal function within neutrophils.", "quote": "large cytoplasmic vacuoles containing microbes are found within the neutrophils"}
  ],
  "final_answer": "A"
}"#;

    #[test]
    fn strict_three_steps() {
        let p = parse_cot(THREE_STEPS);
        assert_eq!(p.parse_status, ParseStatus::Ok);
        assert_eq!(p.steps.len(), 3);
        assert_eq!(p.steps[0].quote, "recurrent bacterial infections");
        assert_eq!(p.final_answer, Some(Label::A));
    }

    #[test]
    fn prose_wrapped_json_is_repaired() {
        let p = parse_cot(&format!("Sure! {THREE_STEPS} Hope that helps."));
        assert_eq!(p.parse_status, ParseStatus::Repaired);
        assert_eq!(p.steps.len(), 3);
        let fenced = parse_cot(&format!("```json\n{THREE_STEPS}\n```"));
        assert_eq!(fenced.parse_status, ParseStatus::Repaired);
        assert_eq!(fenced.final_answer, Some(Label::A));
    }

    #[test]
    fn prose_letter_and_empty() {
        let p = parse_cot("The answer is C.");
        assert_eq!(p.final_answer, Some(Label::C));
        assert_ne!(p.parse_status, ParseStatus::Ok);
        let empty = parse_cot("");
        assert_eq!(empty.parse_status, ParseStatus::Failed);
        assert_eq!(empty.final_answer, None);
        assert_eq!(parse_cot("  d  ").final_answer, Some(Label::D));
        assert_eq!(parse_cot("I think the answer is a bit unclear").parse_status, ParseStatus::Failed);
    }

    #[test]
    fn extra_steps_truncated() {
        let steps: Vec<ReasoningStep> = (0..7)
            .map(|i| ReasoningStep {
                reason: format!("r{i}"),
                quote: format!("q{i}"),
                valid: false,
            })
            .collect();
        let p = parse_cot(&serialize_cot(&steps, Label::B));
        assert_eq!(p.steps.len(), MAX_STEPS);
        assert_eq!(p.diagnostics.len(), 1);
        assert_eq!(p.parse_status, ParseStatus::Ok);
    }

    #[test]
    fn brief_schemas() {
        let p = parse_brief(r#"{"cot":"...","final_answer":"B"}"#, BriefSchema::CotBrief);
        assert_eq!((p.reasoning.as_str(), p.final_answer, p.parse_status), ("...", Some(Label::B), ParseStatus::Ok));
        let p = parse_brief(r#"{"reasoning":"...","answer":"a"}"#, BriefSchema::ReasoningAnswer);
        assert_eq!(p.final_answer, Some(Label::A));
        let p = parse_brief(r#"{"reasoning":"The findings point to","#, BriefSchema::ReasoningAnswer);
        assert_eq!(p.parse_status, ParseStatus::Failed);
        // Wrong schema keys do not parse.
        let p = parse_brief(r#"{"cot":"x","final_answer":"B"}"#, BriefSchema::ReasoningAnswer);
        assert_eq!(p.parse_status, ParseStatus::Failed);
        let p = parse_brief("Here: {\"reasoning\": \"x\", \"answer\": \"C) Congenital\"}", BriefSchema::ReasoningAnswer);
        assert_eq!((p.final_answer, p.parse_status), (Some(Label::C), ParseStatus::Repaired));
    }

    fn step_strategy() -> impl Strategy<Value = ReasoningStep> {
        ("[a-zA-Z0-9 ,.'\"{}\\\\-]{1,40}", "[a-zA-Z0-9 ,.'\"{}-]{1,30}")
            .prop_filter("non-blank", |(r, q)| !r.trim().is_empty() && !q.trim().is_empty())
            .prop_map(|(r, q)| ReasoningStep {
                reason: r.trim().to_string(),
                quote: q,
                valid: false,
            })
    }

    proptest! {
        #[test]
        fn cot_round_trip(steps in proptest::collection::vec(step_strategy(), 0..=5), idx in 0usize..5) {
            let label = Label::from_index(idx).unwrap();
            let raw = serialize_cot(&steps, label);
            let expected = CotPrediction {
                steps: steps.clone(),
                final_answer: Some(label),
                raw_text: raw.clone(),
                parse_status: ParseStatus::Ok,
                diagnostics: vec![],
            };
            prop_assert_eq!(parse_cot(&raw), expected);
        }

        #[test]
        fn brief_round_trip(text in "[ -~]{0,80}", idx in 0usize..5) {
            let label = Label::from_index(idx).unwrap();
            for schema in [BriefSchema::CotBrief, BriefSchema::ReasoningAnswer] {
                let p = parse_brief(&serialize_brief(&text, label, schema), schema);
                prop_assert_eq!(p.parse_status, ParseStatus::Ok);
                prop_assert_eq!(&p.reasoning, &text);
                prop_assert_eq!(p.final_answer, Some(label));
            }
        }
    }
}
