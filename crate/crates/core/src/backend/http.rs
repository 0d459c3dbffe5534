use std::time::Duration;

use base64::Engine as _;
use rand::Rng;
use serde_json::{json, Value};

use super::limiter::RequestLimiter;
use super::{encode_png, Backend, BackendError, BackendProfile, Completion, CompletionRequest, MessagePart};

/// Bearer token for [`HttpBackend`].
pub const API_KEY_ENV: &str = "PATHAGENT_API_KEY";

const BODY_EXCERPT: usize = 512;

/// OpenAI-compatible chat-completions client.
pub struct HttpBackend {
    profile: BackendProfile,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    limiter: RequestLimiter,
}

/// Sleep before retry `attempt` (0-based): `base·2^attempt` plus up to half
/// of that again as jitter, capped at `max`.
fn backoff_delay(profile: &BackendProfile, attempt: u32, rng: &mut impl Rng) -> Duration {
    let base = profile.backoff_ms.saturating_mul(1u64 << attempt.min(30));
    let jitter = if base > 1 { rng.gen_range(0..=base / 2) } else { 0 };
    Duration::from_millis(base.saturating_add(jitter).min(profile.max_backoff_ms))
}

/// Range the total sleep can fall in after `retries` retries.
pub fn backoff_bounds(profile: &BackendProfile, retries: u32) -> (Duration, Duration) {
    let (mut lo, mut hi) = (0u64, 0u64);
    for a in 0..retries {
        let base = profile.backoff_ms.saturating_mul(1u64 << a.min(30));
        lo += base.min(profile.max_backoff_ms);
        hi += (base + base / 2).min(profile.max_backoff_ms);
    }
    (Duration::from_millis(lo), Duration::from_millis(hi))
}

enum Failure {
    Retryable(BackendError),
    Fatal(BackendError),
}

fn excerpt(body: &str) -> String {
    let mut end = body.len().min(BODY_EXCERPT);
    while !body.is_char_boundary(end) {
        end -= 1;
    }
    body[..end].to_string()
}

/// Pulls the assistant text from a chat-completions response.
fn response_text(v: &Value) -> Result<String, BackendError> {
    let content = &v["choices"][0]["message"]["content"];
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join("")),
        _ => Err(BackendError::Decode("missing choices[0].message.content".into())),
    }
}

impl HttpBackend {
    /// Builds a client; the API key is read from `PATHAGENT_API_KEY`.
    pub fn new(profile: BackendProfile) -> Result<Self, BackendError> {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_api_key(profile, key)
    }

    pub fn with_api_key(profile: BackendProfile, api_key: Option<String>) -> Result<Self, BackendError> {
        profile.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(profile.timeout_s))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let limiter = RequestLimiter::new(profile.max_in_flight, profile.requests_per_minute);
        Ok(Self {
            profile,
            client,
            api_key,
            limiter,
        })
    }

    pub fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    fn endpoint(&self) -> String {
        let base = self.profile.base_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }

    /// Request body in the chat-completions wire format.
    pub fn request_body(&self, req: &CompletionRequest) -> Value {
        let engine = base64::engine::general_purpose::STANDARD;
        let messages: Vec<Value> = req
            .messages
            .iter()
            .map(|m| {
                let content: Vec<Value> = m
                    .parts
                    .iter()
                    .map(|p| match p {
                        MessagePart::Text(t) => json!({"type": "text", "text": t}),
                        MessagePart::Image(img) => json!({
                            "type": "image_url",
                            "image_url": {"url": format!("data:image/png;base64,{}", engine.encode(encode_png(img)))}
                        }),
                    })
                    .collect();
                json!({"role": m.role.as_str(), "content": content})
            })
            .collect();
        let mut body = json!({
            "model": self.profile.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<(String, Option<String>), Failure> {
        let mut rb = self.client.post(self.endpoint()).json(body);
        if let Some(k) = &self.api_key {
            rb = rb.bearer_auth(k);
        }
        let resp = match rb.send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Err(Failure::Retryable(BackendError::Timeout { attempts: 1 })),
            Err(e) => return Err(Failure::Retryable(BackendError::Transport(e.to_string()))),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) if e.is_timeout() => return Err(Failure::Retryable(BackendError::Timeout { attempts: 1 })),
            Err(e) => return Err(Failure::Retryable(BackendError::Transport(e.to_string()))),
        };
        if status.as_u16() == 429 {
            return Err(Failure::Retryable(BackendError::RateLimited { retries: 0 }));
        }
        if !status.is_success() {
            let err = BackendError::ApiError {
                status: status.as_u16(),
                body: excerpt(&text),
            };
            return Err(if status.is_server_error() {
                Failure::Retryable(err)
            } else {
                Failure::Fatal(err)
            });
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| Failure::Fatal(BackendError::Decode(e.to_string())))?;
        let id = v["id"].as_str().map(str::to_string);
        Ok((response_text(&v).map_err(Failure::Fatal)?, id))
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        &self.profile.name
    }

    fn max_images_per_request(&self) -> usize {
        self.profile.max_images
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        req.check(self.profile.max_images)?;
        let body = self.request_body(req);
        let mut rng = rand::thread_rng();
        let mut backoff = Duration::ZERO;
        let mut retries = 0u32;
        loop {
            let outcome = {
                let _permit = self.limiter.acquire();
                self.attempt(&body)
            };
            match outcome {
                Ok((text, response_id)) => {
                    log::info!(
                        "backend={} conversation={} stage={} response_id={} retries={retries} backoff_ms={}",
                        self.profile.name,
                        req.conversation_id,
                        req.stage.as_deref().unwrap_or("-"),
                        response_id.as_deref().unwrap_or("-"),
                        backoff.as_millis()
                    );
                    return Ok(Completion {
                        text,
                        retries,
                        backoff,
                        response_id,
                    });
                }
                Err(Failure::Fatal(e)) => {
                    log::warn!(
                        "backend={} conversation={} failed: {e}",
                        self.profile.name,
                        req.conversation_id
                    );
                    return Err(e);
                }
                Err(Failure::Retryable(e)) => {
                    if retries >= self.profile.retries {
                        log::warn!(
                            "backend={} conversation={} giving up after {retries} retries: {e}",
                            self.profile.name,
                            req.conversation_id
                        );
                        return Err(match e {
                            BackendError::RateLimited { .. } => BackendError::RateLimited { retries },
                            BackendError::Timeout { .. } => BackendError::Timeout { attempts: retries + 1 },
                            other => other,
                        });
                    }
                    let delay = backoff_delay(&self.profile, retries, &mut rng);
                    log::info!(
                        "backend={} conversation={} retry {} in {}ms after: {e}",
                        self.profile.name,
                        req.conversation_id,
                        retries + 1,
                        delay.as_millis()
                    );
                    std::thread::sleep(delay);
                    backoff += delay;
                    retries += 1;
                }
            }
        }
    }
}
