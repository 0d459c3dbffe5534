//! Multimodal chat-completion contract shared by every agent stage.
//!
//! [`HttpBackend`] speaks the OpenAI-compatible chat-completions protocol;
//! [`ScriptedBackend`] replays canned replies per conversation for tests and
//! offline runs.

mod http;
mod limiter;
mod scripted;
mod transcript;

use std::io::Cursor;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::{backoff_bounds, HttpBackend, API_KEY_ENV};
pub use limiter::RequestLimiter;
pub use scripted::{Matcher, RecordedCall, ScriptEntry, ScriptFile, ScriptReply, ScriptedBackend, ScriptedFault};
pub use transcript::{read_transcript, write_transcript, TranscriptEntry, TranscriptMessage, TranscriptPart};

/// Sampling temperature for path-diversity runs (pass@k attempts).
pub const SAMPLING_TEMPERATURE: f64 = 0.8;
/// Sampling temperature for evaluation runs.
pub const EVAL_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("rate limited; gave up after {retries} retries")]
    RateLimited { retries: u32 },
    #[error("API error {status}: {body}")]
    ApiError { status: u16, body: String },
    #[error("{count} images exceed the per-request limit of {max}")]
    TooManyImages { count: usize, max: usize },
    #[error("script exhausted for conversation {conversation_id:?} (stage {stage:?})")]
    ScriptExhausted {
        conversation_id: String,
        stage: Option<String>,
    },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend config: {0}")]
    Config(String),
    #[error("cannot decode response: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MessagePart {
    Text(String),
    /// Always sent as PNG.
    Image(Arc<RgbImage>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<MessagePart>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            parts: vec![MessagePart::Text(text.into())],
        }
    }

    pub fn user(parts: Vec<MessagePart>) -> Self {
        Self {
            role: Role::User,
            parts,
        }
    }

    pub fn user_text(text: impl Into<String>) -> Self {
        Self::user(vec![MessagePart::Text(text.into())])
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            parts: vec![MessagePart::Text(text.into())],
        }
    }

    pub fn image_count(&self) -> usize {
        self.parts.iter().filter(|p| matches!(p, MessagePart::Image(_))).count()
    }

    /// Concatenated text parts.
    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                MessagePart::Text(t) => Some(t.as_str()),
                MessagePart::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    /// Groups calls of one logical conversation; scripted replies and
    /// transcripts are keyed on it.
    pub conversation_id: String,
    /// Agent stage tag such as `navigation_planning`.
    pub stage: Option<String>,
}

impl CompletionRequest {
    pub fn new(conversation_id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            temperature: EVAL_TEMPERATURE,
            max_tokens: 4096,
            seed: None,
            conversation_id: conversation_id.into(),
            stage: None,
        }
    }

    pub fn with_stage(mut self, stage: impl Into<String>) -> Self {
        self.stage = Some(stage.into());
        self
    }

    pub fn image_count(&self) -> usize {
        self.messages.iter().map(ChatMessage::image_count).sum()
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        for (i, m) in self.messages.iter().enumerate() {
            if m.parts.is_empty() {
                return Err(BackendError::InvalidRequest(format!("message {i} has no parts")));
            }
            if m.role != Role::User && m.image_count() > 0 {
                return Err(BackendError::InvalidRequest(format!(
                    "message {i}: images are only allowed in user messages"
                )));
            }
        }
        Ok(())
    }

    /// Checks structure and the image limit; runs before any network I/O.
    pub fn check(&self, max_images: usize) -> Result<(), BackendError> {
        self.validate()?;
        let count = self.image_count();
        if count > max_images {
            return Err(BackendError::TooManyImages { count, max: max_images });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    /// Retries spent before the successful attempt.
    pub retries: u32,
    /// Total time slept between attempts.
    pub backoff: Duration,
    pub response_id: Option<String>,
}

impl Completion {
    pub fn immediate(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            retries: 0,
            backoff: Duration::ZERO,
            response_id: None,
        }
    }
}

/// A chat-completion provider. Handles are shared across worker threads.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn max_images_per_request(&self) -> usize;
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError>;
}

fn default_max_images() -> usize {
    16
}
fn default_timeout_s() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    4
}
fn default_backoff_ms() -> u64 {
    1000
}
fn default_max_backoff_ms() -> u64 {
    60_000
}
fn default_in_flight() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendProfile {
    pub name: String,
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_max_images")]
    pub max_images: usize,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: f64,
    /// Retries after the first attempt.
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// Upper bound on any single sleep between attempts.
    #[serde(default = "default_max_backoff_ms")]
    pub max_backoff_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// 0 disables the budget.
    #[serde(default)]
    pub requests_per_minute: u32,
}

impl BackendProfile {
    pub fn new(name: impl Into<String>, base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            base_url: base_url.into(),
            model: model.into(),
            max_images: default_max_images(),
            timeout_s: default_timeout_s(),
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            max_backoff_ms: default_max_backoff_ms(),
            max_in_flight: default_in_flight(),
            requests_per_minute: 0,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_images < 1 {
            return Err(BackendError::Config("max_images must be >= 1".into()));
        }
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(BackendError::Config("timeout_s must be positive".into()));
        }
        if self.max_in_flight < 1 {
            return Err(BackendError::Config("max_in_flight must be >= 1".into()));
        }
        if self.base_url.trim().is_empty() {
            return Err(BackendError::Config("base_url is empty".into()));
        }
        Ok(())
    }

    /// Reads a TOML or JSON profile (by extension; `.json` is JSON).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let profile: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?
        };
        profile.validate()?;
        Ok(profile)
    }
}

/// Lossless PNG encoding used on the wire.
pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    buf.into_inner()
}

/// Content hash of a raster: sha256 over width, height (little-endian u32)
/// and the raw RGB bytes.
pub fn image_sha256(img: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(img.width().to_le_bytes());
    h.update(img.height().to_le_bytes());
    h.update(img.as_raw());
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn png_round_trip_is_exact() {
        let img = RgbImage::from_fn(37, 23, |x, y| Rgb([(x * 7) as u8, (y * 11) as u8, (x ^ y) as u8]));
        let bytes = encode_png(&img);
        let back = image::load_from_memory(&bytes).unwrap().to_rgb8();
        assert_eq!(back, img);
    }

    #[test]
    fn hash_depends_on_shape() {
        let a = RgbImage::new(4, 2);
        let b = RgbImage::new(2, 4);
        assert_ne!(image_sha256(&a), image_sha256(&b));
        assert_eq!(image_sha256(&a), image_sha256(&a.clone()));
    }

    #[test]
    fn images_only_from_user() {
        let img = Arc::new(RgbImage::new(1, 1));
        let mut req = CompletionRequest::new(
            "c",
            vec![ChatMessage {
                role: Role::Assistant,
                parts: vec![MessagePart::Image(img)],
            }],
        );
        assert!(matches!(req.validate(), Err(BackendError::InvalidRequest(_))));
        req.messages.clear();
        assert!(req.validate().is_err());
    }

    #[test]
    fn too_many_images() {
        let img = Arc::new(RgbImage::new(1, 1));
        let req = CompletionRequest::new(
            "c",
            vec![ChatMessage::user(vec![
                MessagePart::Image(img.clone()),
                MessagePart::Image(img),
            ])],
        );
        assert_eq!(req.check(1), Err(BackendError::TooManyImages { count: 2, max: 1 }));
        assert!(req.check(2).is_ok());
    }

    #[test]
    fn temperature_range() {
        let mut req = CompletionRequest::new("c", vec![ChatMessage::user_text("hi")]);
        req.temperature = 2.5;
        assert!(req.validate().is_err());
        req.temperature = 0.8;
        assert!(req.validate().is_ok());
    }

    #[test]
    fn profile_from_toml_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("p.toml");
        std::fs::write(
            &t,
            "name = \"local\"\nbase_url = \"http://127.0.0.1:9/v1\"\nmodel = \"m\"\nmax_images = 4\ntimeout_s = 5\nretries = 2\n",
        )
        .unwrap();
        let p = BackendProfile::load(&t).unwrap();
        assert_eq!(p.max_images, 4);
        assert_eq!(p.retries, 2);
        assert_eq!(p.backoff_ms, 1000);

        let j = dir.path().join("p.json");
        std::fs::write(&j, r#"{"name":"x","base_url":"http://h","model":"m","max_images":0}"#).unwrap();
        assert!(matches!(BackendProfile::load(&j), Err(BackendError::Config(_))));
    }
}
