//! Pulling strategy candidates out of free-form model responses.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dsl::Program;
use crate::strategy::{Direction, StrategySpec};

/// A candidate that was dropped, and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub name: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationParse {
    pub specs: Vec<StrategySpec>,
    pub rejected: Vec<Rejection>,
}

impl GenerationParse {
    pub fn is_barren(&self) -> bool {
        self.specs.is_empty()
    }
}

/// End index (exclusive) of the balanced `{...}` starting at `start`,
/// skipping braces inside strings.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let (mut depth, mut in_str, mut escaped) = (0usize, false, false);
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// First JSON object in `text` that has `key` at the top level. Tolerates
/// prose and code fences around it.
pub fn extract_json_object(text: &str, key: &str) -> Option<Value> {
    let bytes = text.as_bytes();
    let mut from = 0;
    while let Some(off) = text[from..].find('{') {
        let start = from + off;
        if let Some(end) = balanced_end(bytes, start) {
            if let Ok(v) = serde_json::from_str::<Value>(&text[start..end]) {
                if v.get(key).is_some() {
                    return Some(v);
                }
            }
        }
        from = start + 1;
    }
    None
}

fn field<'a>(obj: &'a Value, key: &str) -> Option<&'a str> {
    obj.get(key).and_then(Value::as_str)
}

/// Reads `{"metrics": [...]}` from a generation response. Invalid entries
/// are recorded and skipped; at most `limit` candidates are kept.
pub fn parse_generation(text: &str, limit: usize) -> GenerationParse {
    let mut out = GenerationParse::default();
    let Some(root) = extract_json_object(text, "metrics") else {
        out.rejected.push(Rejection {
            name: None,
            reason: "response holds no JSON object with a `metrics` list".into(),
        });
        return out;
    };
    let Some(items) = root.get("metrics").and_then(Value::as_array) else {
        out.rejected.push(Rejection {
            name: None,
            reason: "`metrics` is not a list".into(),
        });
        return out;
    };
    let mut names = HashSet::new();
    for (i, item) in items.iter().enumerate() {
        let name = field(item, "name").map(str::trim).filter(|n| !n.is_empty());
        let reject = |out: &mut GenerationParse, reason: String| {
            out.rejected.push(Rejection {
                name: name.map(str::to_string),
                reason,
            })
        };
        let Some(name) = name else {
            reject(&mut out, format!("candidate {i} has no name"));
            continue;
        };
        let Some(code) = field(item, "code") else {
            reject(&mut out, "missing `code`".into());
            continue;
        };
        let behavior = field(item, "expected_behavior").unwrap_or("");
        let Some(direction) = Direction::parse_behavior(behavior) else {
            reject(
                &mut out,
                format!("expected_behavior `{behavior}` names no direction"),
            );
            continue;
        };
        if let Err(e) = Program::compile(code) {
            reject(&mut out, format!("invalid program: {e}"));
            continue;
        }
        if !names.insert(name.to_string()) {
            reject(&mut out, "duplicate name in this response".into());
            continue;
        }
        if out.specs.len() >= limit {
            reject(&mut out, format!("beyond the {limit} candidates requested"));
            continue;
        }
        out.specs.push(
            StrategySpec::new(name, code.trim(), direction)
                .with_formula(field(item, "formula").unwrap_or(""))
                .with_description(field(item, "description").unwrap_or("")),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const THREE: &str = r#"Sure! Here are three metrics.
```json
{"metrics": [
  {"name": "gap", "formula": "mean relu(max LP - TLP)", "description": "margin {not json}",
   "code": "mean(relu(max_v(LP) - TLP))", "expected_behavior": "lower for members"},
  {"name": "tp_mean", "code": "mean(TP)", "expected_behavior": "higher for members"},
  {"name": "rough", "code": "std(diff(TLP))", "expected_behavior": "Lower for members"}
]}
```
Hope this helps."#;

    #[test]
    fn well_formed_response() {
        let p = parse_generation(THREE, 5);
        assert_eq!(p.specs.len(), 3);
        assert!(p.rejected.is_empty());
        assert_eq!(p.specs[0].direction, Direction::LowerForMembers);
        assert_eq!(p.specs[0].description, "margin {not json}");
    }

    #[test]
    fn one_bad_program_is_dropped() {
        let text = THREE.replace("std(diff(TLP))", "std(sort(TLP))");
        let p = parse_generation(&text, 5);
        assert_eq!(p.specs.len(), 2);
        assert_eq!(p.rejected.len(), 1);
        assert_eq!(p.rejected[0].name.as_deref(), Some("rough"));
        assert!(p.rejected[0].reason.contains("sort"));
    }

    #[test]
    fn non_json_is_barren() {
        let p = parse_generation("I cannot help with that.", 5);
        assert!(p.is_barren());
        assert_eq!(p.rejected.len(), 1);
    }

    #[test]
    fn limit_and_placeholder_direction() {
        assert_eq!(parse_generation(THREE, 2).specs.len(), 2);
        let text = THREE.replace("\"higher for members\"", "\"higher/lower for members\"");
        assert_eq!(parse_generation(&text, 5).specs.len(), 2);
    }
}
