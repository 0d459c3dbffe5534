use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{image_sha256, BackendError, Completion, CompletionRequest, MessagePart, Role};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptPart {
    Text(String),
    Image { sha256: String, width: u32, height: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptMessage {
    pub role: Role,
    pub parts: Vec<TranscriptPart>,
}

/// One backend call. Images are replaced by content hashes and no wall-clock
/// data is kept, so transcripts of scripted runs are byte-stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub conversation_id: String,
    /// Position of the call within its conversation.
    pub call_index: usize,
    pub stage: Option<String>,
    pub backend: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    pub messages: Vec<TranscriptMessage>,
    pub response: Option<String>,
    pub error: Option<String>,
    pub retries: u32,
    /// What the caller made of the response, e.g. `parsed` or a parse error.
    pub outcome: Option<String>,
}

impl TranscriptEntry {
    pub fn record(
        backend: &str,
        call_index: usize,
        req: &CompletionRequest,
        result: &Result<Completion, BackendError>,
    ) -> Self {
        let messages = req
            .messages
            .iter()
            .map(|m| TranscriptMessage {
                role: m.role,
                parts: m
                    .parts
                    .iter()
                    .map(|p| match p {
                        MessagePart::Text(t) => TranscriptPart::Text(t.clone()),
                        MessagePart::Image(img) => TranscriptPart::Image {
                            sha256: image_sha256(img),
                            width: img.width(),
                            height: img.height(),
                        },
                    })
                    .collect(),
            })
            .collect();
        let (response, error, retries) = match result {
            Ok(c) => (Some(c.text.clone()), None, c.retries),
            Err(e) => (None, Some(e.to_string()), 0),
        };
        Self {
            conversation_id: req.conversation_id.clone(),
            call_index,
            stage: req.stage.clone(),
            backend: backend.to_string(),
            temperature: req.temperature,
            max_tokens: req.max_tokens,
            seed: req.seed,
            messages,
            response,
            error,
            retries,
            outcome: None,
        }
    }
}

/// Writes one JSON object per line.
pub fn write_transcript<'a>(
    entries: impl IntoIterator<Item = &'a TranscriptEntry>,
    mut out: impl Write,
) -> std::io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_transcript(path: impl AsRef<Path>) -> std::io::Result<Vec<TranscriptEntry>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
        out.push(e);
    }
    Ok(out)
}
