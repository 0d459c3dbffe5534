//! Layered run configuration: defaults, then a TOML/JSON file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pathagent::agent_runtime::AgentConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const RESOLVED_FILE: &str = "config.resolved.json";
const PATH_KEYS: [&str; 3] = ["backend", "script", "prompts"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    /// HTTP backend profile (TOML/JSON).
    pub backend: Option<PathBuf>,
    /// Scripted backend file; takes precedence over `backend`.
    pub script: Option<PathBuf>,
    /// Prompt pack directory.
    pub prompts: Option<PathBuf>,
    #[serde(flatten)]
    pub agent: AgentConfig,
}

fn as_map(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

fn merge(base: &mut Map<String, Value>, over: Map<String, Value>) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Object(b)), Value::Object(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("cannot resolve {}", p.display()))
}

/// Reads a config layer. Relative paths inside it are taken relative to the
/// file. A previously resolved config contributes its `settings` object.
pub fn read_layer(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let value: Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("invalid JSON in {}", path.display()))?
    } else {
        let t: toml::Value = toml::from_str(&text).with_context(|| format!("invalid TOML in {}", path.display()))?;
        serde_json::to_value(t)?
    };
    let mut map = as_map(value);
    if let Some(Value::Object(settings)) = map.remove("settings") {
        map = settings;
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    for key in PATH_KEYS {
        if let Some(Value::String(s)) = map.get(key) {
            let p = Path::new(s);
            let joined = if p.is_absolute() { p.to_path_buf() } else { dir.join(p) };
            map.insert(key.into(), Value::String(absolute(&joined)?.display().to_string()));
        }
    }
    Ok(map)
}

/// Applies `layers` in order over the defaults and validates the result.
pub fn resolve(layers: Vec<Map<String, Value>>) -> Result<Settings> {
    let mut merged = as_map(serde_json::to_value(Settings::default())?);
    let known: Vec<String> = merged.keys().cloned().collect();
    for layer in layers {
        if let Some(bad) = layer.keys().find(|k| !known.contains(k)) {
            bail!("unknown config key {bad:?}");
        }
        merge(&mut merged, layer);
    }
    let settings: Settings = serde_json::from_value(Value::Object(merged)).context("invalid config value")?;
    settings.agent.validate()?;
    Ok(settings)
}

/// Flag layer: only values given on the command line, with paths made
/// absolute.
pub fn flag_layer(pairs: Vec<(&str, Option<Value>)>) -> Result<Map<String, Value>> {
    let mut map = Map::new();
    for (k, v) in pairs {
        let Some(v) = v else { continue };
        let v = match (PATH_KEYS.contains(&k), v) {
            (true, Value::String(s)) => Value::String(absolute(Path::new(&s))?.display().to_string()),
            (_, v) => v,
        };
        map.insert(k.to_string(), v);
    }
    Ok(map)
}
