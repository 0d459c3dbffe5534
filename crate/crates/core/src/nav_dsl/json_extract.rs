//! Locating JSON objects inside free-form model output.

use serde_json::{Map, Value};

/// Index of the `}` closing the object opened at `start`, honoring strings.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_str = false;
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// All top-level JSON objects in `text`, in order of appearance. Prose,
/// Markdown fences and unparseable brace spans are skipped.
pub fn json_objects(text: &str) -> Vec<Map<String, Value>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'{' {
            i += 1;
            continue;
        }
        if let Some(end) = balanced_end(bytes, i) {
            // Both ends are ASCII, so the slice is on char boundaries.
            if let Ok(Value::Object(m)) = serde_json::from_str::<Value>(&text[i..=end]) {
                out.push(m);
                i = end + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}
