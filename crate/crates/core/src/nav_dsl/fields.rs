//! Typed field access over `serde_json` maps with path-carrying errors.

use serde_json::{Map, Value};

use super::NavError;

pub(crate) fn violation(path: impl Into<String>, reason: impl Into<String>) -> NavError {
    NavError::SchemaViolation {
        path: path.into(),
        reason: reason.into(),
    }
}

pub(crate) fn field<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value, NavError> {
    obj.get(key).ok_or_else(|| violation(join(path, key), "missing field"))
}

pub(crate) fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

pub(crate) fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>, NavError> {
    v.as_array().ok_or_else(|| violation(path, "expected array"))
}

pub(crate) fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, NavError> {
    v.as_object().ok_or_else(|| violation(path, "expected object"))
}

pub(crate) fn as_str<'a>(v: &'a Value, path: &str) -> Result<&'a str, NavError> {
    v.as_str().ok_or_else(|| violation(path, "expected string"))
}

pub(crate) fn as_bool(v: &Value, path: &str) -> Result<bool, NavError> {
    v.as_bool().ok_or_else(|| violation(path, "expected boolean"))
}

pub(crate) fn as_u32(v: &Value, path: &str) -> Result<u32, NavError> {
    v.as_u64()
        .and_then(|n| u32::try_from(n).ok())
        .ok_or_else(|| violation(path, "expected non-negative integer"))
}

/// Accepts JSON numbers and numeric strings such as `"2.5x"` or `" 3 ×"`.
pub(crate) fn as_number(v: &Value, path: &str) -> Result<f64, NavError> {
    match v {
        Value::Number(n) => n.as_f64().ok_or_else(|| violation(path, "expected number")),
        Value::String(s) => {
            let t = s.trim();
            let t = t.strip_suffix(['x', 'X', '×']).map(str::trim_end).unwrap_or(t);
            t.parse::<f64>()
                .map_err(|_| violation(path, format!("expected number, got {s:?}")))
        }
        _ => Err(violation(path, "expected number")),
    }
}
