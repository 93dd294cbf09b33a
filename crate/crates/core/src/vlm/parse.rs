//! Structured-output parsing. Scoring reads responses only through here.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Repair {
    None,
    FenceStripped,
    Failed,
}

/// What to do with expected keys the model left out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    ImputeZero,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmResponse {
    pub raw: String,
    /// Expected keys only.
    pub parsed: BTreeMap<String, f64>,
    pub repair_applied: Repair,
    pub imputed: Vec<String>,
    /// Keys the model added; never scored.
    pub extras: Vec<String>,
}

/// Body of the first ``` fence, if any.
fn strip_fence(raw: &str) -> Option<&str> {
    let start = raw.find("```")?;
    let after = &raw[start + 3..];
    let body_start = after.find('\n').map_or(0, |i| i + 1);
    let lang = after[..body_start].trim();
    if !lang.is_empty() && !lang.chars().all(|c| c.is_ascii_alphanumeric()) {
        return None;
    }
    let body = &after[body_start..];
    let end = body.find("```")?;
    Some(&body[..end])
}

fn first_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(m))) = stream.next() {
            return Some(m);
        }
    }
    None
}

fn to_grams(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => {
            let t = s.trim();
            let end = t.find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-' || c == '+')).unwrap_or(t.len());
            t[..end].parse().ok()
        }
        _ => None,
    }
    .filter(|x: &f64| x.is_finite())
}

pub fn parse_structured(raw: &str, expected_keys: &[String], policy: MissingPolicy) -> VlmResponse {
    let (object, repair) = match strip_fence(raw) {
        Some(body) => (first_object(body), Repair::FenceStripped),
        None => (first_object(raw), Repair::None),
    };
    let Some(object) = object else {
        return VlmResponse {
            raw: raw.to_string(),
            parsed: BTreeMap::new(),
            repair_applied: Repair::Failed,
            imputed: Vec::new(),
            extras: Vec::new(),
        };
    };
    let mut parsed = BTreeMap::new();
    let mut imputed = Vec::new();
    for key in expected_keys {
        match object.get(key).and_then(to_grams) {
            Some(g) => {
                parsed.insert(key.clone(), g);
            }
            None => {
                tracing::warn!(key = key.as_str(), "expected key missing from response");
                if policy == MissingPolicy::ImputeZero {
                    parsed.insert(key.clone(), 0.0);
                }
                imputed.push(key.clone());
            }
        }
    }
    let extras: Vec<String> = object.keys().filter(|k| !expected_keys.contains(k)).cloned().collect();
    if !extras.is_empty() {
        tracing::debug!(?extras, "ignoring extra keys");
    }
    VlmResponse { raw: raw.to_string(), parsed, repair_applied: repair, imputed, extras }
}
