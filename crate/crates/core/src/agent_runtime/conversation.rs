use crate::backend::{Backend, BackendError, ChatMessage, CompletionRequest, TranscriptEntry};

use super::Stage;

/// Sampling settings plus the transcript of one logical conversation.
#[derive(Debug, Clone)]
pub struct Conversation {
    pub id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    pub transcript: Vec<TranscriptEntry>,
}

impl Conversation {
    pub fn new(id: impl Into<String>, temperature: f64, max_tokens: u32, seed: Option<u64>) -> Self {
        Self {
            id: id.into(),
            temperature,
            max_tokens,
            seed,
            transcript: Vec::new(),
        }
    }

    /// Sends `messages` as one call and records it.
    pub fn send(
        &mut self,
        backend: &dyn Backend,
        stage: Stage,
        messages: Vec<ChatMessage>,
    ) -> Result<String, BackendError> {
        let req = CompletionRequest {
            messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            seed: self.seed,
            conversation_id: self.id.clone(),
            stage: Some(stage.as_str().to_string()),
        };
        let result = backend.complete(&req);
        let entry = TranscriptEntry::record(backend.name(), self.transcript.len(), &req, &result);
        self.transcript.push(entry);
        result.map(|c| c.text)
    }

    /// Notes what the caller made of the latest response.
    pub fn mark(&mut self, outcome: impl Into<String>) {
        if let Some(last) = self.transcript.last_mut() {
            last.outcome = Some(outcome.into());
        }
    }
}
