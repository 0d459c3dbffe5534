use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, Completion, CompletionRequest};

/// Which calls a script entry answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Always,
    /// Exact stage tag, or the tag followed by `_` and a variant suffix, so
    /// `reasoning` also answers `reasoning_vqa`.
    Stage(String),
    /// Substring of the request's text parts.
    Contains(String),
}

impl Matcher {
    pub fn matches(&self, req: &CompletionRequest) -> bool {
        match self {
            Matcher::Always => true,
            Matcher::Stage(tag) => req.stage.as_deref().is_some_and(|s| {
                s == tag || (s.len() > tag.len() && s.starts_with(tag.as_str()) && s.as_bytes()[tag.len()] == b'_')
            }),
            Matcher::Contains(needle) => req.messages.iter().any(|m| m.text().contains(needle.as_str())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedFault {
    Timeout,
    RateLimited,
    Transport,
    Api { status: u16, body: String },
}

impl ScriptedFault {
    fn to_error(&self) -> BackendError {
        match self {
            ScriptedFault::Timeout => BackendError::Timeout { attempts: 1 },
            ScriptedFault::RateLimited => BackendError::RateLimited { retries: 0 },
            ScriptedFault::Transport => BackendError::Transport("scripted transport fault".into()),
            ScriptedFault::Api { status, body } => BackendError::ApiError {
                status: *status,
                body: body.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptReply {
    Response(String),
    Error(ScriptedFault),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    #[serde(flatten)]
    pub reply: ScriptReply,
}

impl ScriptEntry {
    pub fn new(matcher: Matcher, text: impl Into<String>) -> Self {
        Self {
            matcher,
            reply: ScriptReply::Response(text.into()),
        }
    }

    pub fn fault(matcher: Matcher, fault: ScriptedFault) -> Self {
        Self {
            matcher,
            reply: ScriptReply::Error(fault),
        }
    }
}

fn default_name() -> String {
    "scripted".into()
}
fn default_max_images() -> usize {
    64
}

/// On-disk script: a default sequence every conversation replays, plus
/// per-conversation entries tried before it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptFile {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_max_images")]
    pub max_images: usize,
    #[serde(default)]
    pub default: Vec<ScriptEntry>,
    #[serde(default)]
    pub conversations: BTreeMap<String, Vec<ScriptEntry>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordedCall {
    pub conversation_id: String,
    pub stage: Option<String>,
    pub text: String,
    pub image_count: usize,
}

/// Deterministic test double. Each conversation consumes its own copy of the
/// script: a call takes the first unconsumed entry whose matcher fires,
/// looking at the conversation's own entries before the default ones.
#[derive(Debug)]
pub struct ScriptedBackend {
    name: String,
    max_images: usize,
    default: Vec<ScriptEntry>,
    conversations: BTreeMap<String, Vec<ScriptEntry>>,
    consumed: Mutex<HashMap<String, Vec<bool>>>,
    calls: Mutex<Vec<RecordedCall>>,
}

impl ScriptedBackend {
    pub fn new(script: Vec<ScriptEntry>) -> Result<Self, BackendError> {
        Self::from_file(ScriptFile {
            name: default_name(),
            max_images: default_max_images(),
            default: script,
            conversations: BTreeMap::new(),
        })
    }

    pub fn from_file(file: ScriptFile) -> Result<Self, BackendError> {
        if file.default.is_empty() && file.conversations.values().all(Vec::is_empty) {
            return Err(BackendError::Config("script is empty".into()));
        }
        if file.max_images < 1 {
            return Err(BackendError::Config("max_images must be >= 1".into()));
        }
        Ok(Self {
            name: file.name,
            max_images: file.max_images,
            default: file.default,
            conversations: file.conversations,
            consumed: Mutex::new(HashMap::new()),
            calls: Mutex::new(Vec::new()),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let file: ScriptFile =
            serde_json::from_str(&text).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Self::from_file(file)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_max_images(mut self, max: usize) -> Self {
        self.max_images = max.max(1);
        self
    }

    /// Adds entries tried before the default script for one conversation.
    pub fn with_conversation(mut self, conversation_id: impl Into<String>, entries: Vec<ScriptEntry>) -> Self {
        self.conversations
            .entry(conversation_id.into())
            .or_default()
            .extend(entries);
        self
    }

    /// Calls seen so far, in arrival order.
    pub fn calls(&self) -> Vec<RecordedCall> {
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn max_images_per_request(&self) -> usize {
        self.max_images
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        req.check(self.max_images)?;
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).push(RecordedCall {
            conversation_id: req.conversation_id.clone(),
            stage: req.stage.clone(),
            text: req.messages.iter().map(|m| m.text()).collect::<Vec<_>>().join("\n"),
            image_count: req.image_count(),
        });
        let own = self
            .conversations
            .get(&req.conversation_id)
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        let entries: Vec<&ScriptEntry> = own.iter().chain(self.default.iter()).collect();
        let mut consumed = self.consumed.lock().unwrap_or_else(|e| e.into_inner());
        let flags = consumed
            .entry(req.conversation_id.clone())
            .or_insert_with(|| vec![false; entries.len()]);
        let hit = entries
            .iter()
            .enumerate()
            .position(|(i, e)| !flags[i] && e.matcher.matches(req))
            .ok_or_else(|| BackendError::ScriptExhausted {
                conversation_id: req.conversation_id.clone(),
                stage: req.stage.clone(),
            })?;
        flags[hit] = true;
        match &entries[hit].reply {
            ScriptReply::Response(t) => Ok(Completion::immediate(t.clone())),
            ScriptReply::Error(f) => Err(f.to_error()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ChatMessage;
    use std::sync::Arc;

    fn req(conv: &str, stage: Option<&str>, text: &str) -> CompletionRequest {
        let mut r = CompletionRequest::new(conv, vec![ChatMessage::user_text(text)]);
        r.stage = stage.map(str::to_string);
        r
    }

    #[test]
    fn pong() {
        let b = ScriptedBackend::new(vec![ScriptEntry::new(Matcher::Always, "PONG")]).unwrap();
        assert_eq!(b.complete(&req("c", None, "ping")).unwrap().text, "PONG");
    }

    #[test]
    fn single_entry_is_consumed() {
        let b = ScriptedBackend::new(vec![ScriptEntry::new(Matcher::Always, "A")]).unwrap();
        assert_eq!(b.complete(&req("c", None, "x")).unwrap().text, "A");
        assert!(matches!(
            b.complete(&req("c", None, "x")),
            Err(BackendError::ScriptExhausted { .. })
        ));
        // another conversation has its own copy
        assert_eq!(b.complete(&req("d", None, "x")).unwrap().text, "A");
    }

    #[test]
    fn stage_routing() {
        let b = ScriptedBackend::new(vec![
            ScriptEntry::new(Matcher::Stage("navigation_planning".into()), "plan"),
            ScriptEntry::new(Matcher::Stage("reasoning".into()), "notes"),
        ])
        .unwrap();
        assert!(b.complete(&req("c", Some("global_screening"), "x")).is_err());
        assert_eq!(b.complete(&req("c", Some("reasoning_vqa"), "x")).unwrap().text, "notes");
        assert_eq!(
            b.complete(&req("c", Some("navigation_planning"), "x")).unwrap().text,
            "plan"
        );
        assert!(!Matcher::Stage("reason".into()).matches(&req("c", Some("reasoning"), "")));
    }

    #[test]
    fn contains_matcher_and_faults() {
        let b = ScriptedBackend::new(vec![ScriptEntry::new(Matcher::Always, "fallback")])
            .unwrap()
            .with_conversation(
                "bad",
                vec![ScriptEntry::fault(
                    Matcher::Contains("needle".into()),
                    ScriptedFault::Timeout,
                )],
            );
        assert!(matches!(
            b.complete(&req("bad", None, "a needle")),
            Err(BackendError::Timeout { .. })
        ));
        assert_eq!(b.complete(&req("bad", None, "a needle")).unwrap().text, "fallback");
        assert_eq!(b.calls().len(), 2);
    }

    #[test]
    fn concurrent_conversations_see_own_sequence() {
        let b = Arc::new(
            ScriptedBackend::new(
                (0..5)
                    .map(|i| ScriptEntry::new(Matcher::Always, format!("r{i}")))
                    .collect(),
            )
            .unwrap(),
        );
        let handles: Vec<_> = (0..8)
            .map(|c| {
                let b = b.clone();
                std::thread::spawn(move || {
                    (0..5)
                        .map(|_| b.complete(&req(&format!("conv{c}"), None, "x")).unwrap().text)
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), vec!["r0", "r1", "r2", "r3", "r4"]);
        }
    }

    #[test]
    fn script_file_format() {
        let json = r#"{
            "max_images": 2,
            "default": [{"match": "always", "response": "ok"}],
            "conversations": {"x": [{"match": {"stage": "reasoning"}, "error": "timeout"},
                                    {"match": {"contains": "q"}, "error": {"api": {"status": 500, "body": "boom"}}}]}
        }"#;
        let f: ScriptFile = serde_json::from_str(json).unwrap();
        assert_eq!(
            f.conversations["x"][0].reply,
            ScriptReply::Error(ScriptedFault::Timeout)
        );
        let b = ScriptedBackend::from_file(f).unwrap();
        assert_eq!(b.max_images_per_request(), 2);
        assert!(matches!(
            b.complete(&req("x", None, "q")),
            Err(BackendError::ApiError { status: 500, .. })
        ));
    }

    #[test]
    fn empty_script_rejected() {
        assert!(ScriptedBackend::new(vec![]).is_err());
    }
}
