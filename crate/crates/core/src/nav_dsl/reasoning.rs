use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::fields::{as_array, as_str, as_u32, field, violation};
use super::json_extract::json_objects;
use super::NavError;

/// Stage-3 output: one note per executed view plus a conclusion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningResult {
    pub step_notes: Vec<String>,
    pub conclusion: String,
    pub answer_index: Option<usize>,
}

fn decode(obj: &Map<String, Value>) -> Result<ReasoningResult, NavError> {
    let step_notes = as_array(field(obj, "step_notes", "")?, "step_notes")?
        .iter()
        .enumerate()
        .map(|(i, v)| as_str(v, &format!("step_notes[{i}]")).map(str::to_string))
        .collect::<Result<Vec<_>, _>>()?;
    let conclusion = as_str(field(obj, "conclusion", "")?, "conclusion")?.to_string();
    let answer_index = match obj.get("answer_index") {
        None | Some(Value::Null) => None,
        Some(v) => Some(as_u32(v, "answer_index")? as usize),
    };
    Ok(ReasoningResult {
        step_notes,
        conclusion,
        answer_index,
    })
}

/// Parses a reasoning reply for a plan of `expected_steps` views.
///
/// `n_options` is `Some` in VQA mode; a structured `answer_index` must then be
/// in range. In description mode any `answer_index` is dropped.
pub fn parse_reasoning_result(
    text: &str,
    expected_steps: usize,
    n_options: Option<usize>,
) -> Result<ReasoningResult, NavError> {
    let objects = json_objects(text);
    let mut first_err = None;
    for obj in &objects {
        match decode(obj) {
            Ok(mut r) => {
                if r.step_notes.len() != expected_steps {
                    return Err(violation(
                        "step_notes",
                        format!("expected {expected_steps} notes, got {}", r.step_notes.len()),
                    ));
                }
                match n_options {
                    Some(n) => {
                        if let Some(i) = r.answer_index {
                            if i >= n {
                                return Err(violation("answer_index", format!("{i} not below {n} options")));
                            }
                        }
                    }
                    None => r.answer_index = None,
                }
                return Ok(r);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    Err(first_err.unwrap_or(NavError::NoJsonFound))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_vqa_result() {
        let t = r#"```json
{"step_notes":["overview","zoom"],"conclusion":"Answer: B","answer_index":null}
```"#;
        let r = parse_reasoning_result(t, 2, Some(4)).unwrap();
        assert_eq!(r.answer_index, None);
        assert_eq!(r.conclusion, "Answer: B");
    }

    #[test]
    fn wrong_note_count() {
        let t = r#"{"step_notes":["a"],"conclusion":"c"}"#;
        assert!(matches!(
            parse_reasoning_result(t, 2, None),
            Err(NavError::SchemaViolation { .. })
        ));
    }

    #[test]
    fn answer_index_range() {
        let t = r#"{"step_notes":["a"],"conclusion":"c","answer_index":4}"#;
        assert!(parse_reasoning_result(t, 1, Some(4)).is_err());
        assert_eq!(parse_reasoning_result(t, 1, Some(5)).unwrap().answer_index, Some(4));
        assert_eq!(parse_reasoning_result(t, 1, None).unwrap().answer_index, None);
    }
}
