//! Benchmark and pipeline data: VQA manifests, report pairing and the
//! text-only shortcut filter.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent_runtime::{format_options, PromptError, Stage, StagePrompts};
use crate::backend::{Backend, ChatMessage, CompletionRequest, TranscriptEntry};
use crate::nav_dsl::extract_answer;

/// Cancer-type subsets of the region-level VQA benchmark, in report order.
pub const VQA_SUBSETS: [&str; 10] = [
    "BRCA", "LUAD", "LUSC", "KIRP", "KIRC", "KICH", "ESCA", "THCA", "BLCA", "TGCT",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {reason}")]
    SchemaViolation { line: usize, reason: String },
    #[error("line {line}: duplicate record id {record_id:?}")]
    DuplicateRecordId { line: usize, record_id: String },
    #[error("line {line}: answer_index {answer_index} out of range for {n_options} options")]
    BadAnswerIndex {
        line: usize,
        answer_index: usize,
        n_options: usize,
    },
    #[error("shortcut filter needs two distinct backends, got {0:?} twice")]
    SameBackend(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Where a question's region image lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RegionRef {
    Path(PathBuf),
    Slide { slide_id: String, region_id: u32 },
}

impl RegionRef {
    /// Paths resolve against `root`; slide references resolve to the tiler's
    /// `<root>/<slide_id>/region_<id>.png` layout.
    pub fn resolve(&self, root: &Path) -> PathBuf {
        match self {
            RegionRef::Path(p) if p.is_absolute() => p.clone(),
            RegionRef::Path(p) => root.join(p),
            RegionRef::Slide { slide_id, region_id } => root.join(slide_id).join(format!("region_{region_id}.png")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqaRecord {
    pub record_id: String,
    pub region_ref: RegionRef,
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    pub subset: String,
}

impl VqaRecord {
    fn validate(&self, line: usize) -> Result<(), DatasetError> {
        let n = self.options.len();
        if !(2..=8).contains(&n) {
            return Err(DatasetError::SchemaViolation {
                line,
                reason: format!("expected 2 to 8 options, got {n}"),
            });
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.options.iter().find(|o| !seen.insert(o.as_str())) {
            return Err(DatasetError::SchemaViolation {
                line,
                reason: format!("option {dup:?} repeated"),
            });
        }
        if self.answer_index >= n {
            return Err(DatasetError::BadAnswerIndex {
                line,
                answer_index: self.answer_index,
                n_options: n,
            });
        }
        Ok(())
    }
}

/// Reads a VQA JSONL manifest. Blank lines are skipped; errors carry 1-based
/// line numbers.
pub fn load_vqa_manifest(path: impl AsRef<Path>) -> Result<Vec<VqaRecord>, DatasetError> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: VqaRecord = serde_json::from_str(&line).map_err(|e| DatasetError::SchemaViolation {
            line: line_no,
            reason: e.to_string(),
        })?;
        rec.validate(line_no)?;
        if !ids.insert(rec.record_id.clone()) {
            return Err(DatasetError::DuplicateRecordId {
                line: line_no,
                record_id: rec.record_id,
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Canonical JSONL: one record per line, fixed key order.
pub fn write_vqa_manifest<'a>(
    records: impl IntoIterator<Item = &'a VqaRecord>,
    mut out: impl Write,
) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuessOutcome {
    pub backend: String,
    pub answer_index: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterLogEntry {
    pub record_id: String,
    pub answer_index: usize,
    pub guesses: [GuessOutcome; 2],
    pub dropped: bool,
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub kept: Vec<VqaRecord>,
    pub dropped: Vec<VqaRecord>,
    /// One entry per input record, in input order.
    pub log: Vec<FilterLogEntry>,
    /// Transcript of every text-only call, grouped by record.
    pub transcript: Vec<TranscriptEntry>,
    pub warnings: Vec<String>,
}

impl FilterOutcome {
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), DatasetError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            std::fs::File::create(&p)
                .map(std::io::BufWriter::new)
                .map_err(|e| io_err(&p, e))
        };
        write_vqa_manifest(&self.kept, open("kept.jsonl")?).map_err(|e| io_err(dir, e))?;
        write_vqa_manifest(&self.dropped, open("dropped.jsonl")?).map_err(|e| io_err(dir, e))?;
        let mut log = open("filter_log.jsonl")?;
        for entry in &self.log {
            serde_json::to_writer(&mut log, entry).map_err(|e| io_err(dir, e))?;
            log.write_all(b"\n").map_err(|e| io_err(dir, e))?;
        }
        log.flush().map_err(|e| io_err(dir, e))
    }
}

fn guess(
    backend: &dyn Backend,
    prompts: &StagePrompts,
    rec: &VqaRecord,
    transcript: &mut Vec<TranscriptEntry>,
) -> Result<GuessOutcome, DatasetError> {
    let options = format_options(&rec.options);
    let text = prompts.render(
        Stage::TextOnlyGuess,
        &[("question", rec.question.as_str()), ("options", options.as_str())],
    )?;
    let conversation_id = format!("shortcut/{}/{}", rec.record_id, backend.name());
    let req = CompletionRequest::new(conversation_id, vec![ChatMessage::user_text(text)])
        .with_stage(Stage::TextOnlyGuess.as_str());
    let result = backend.complete(&req);
    let mut entry = TranscriptEntry::record(backend.name(), 0, &req, &result);
    let outcome = match result {
        Ok(c) => {
            let parsed = extract_answer(&c.text, &rec.options);
            entry.outcome = Some(match &parsed {
                Ok(i) => format!("answer {i}"),
                Err(e) => e.to_string(),
            });
            GuessOutcome {
                backend: backend.name().to_string(),
                answer_index: parsed.ok(),
                error: None,
            }
        }
        Err(e) => GuessOutcome {
            backend: backend.name().to_string(),
            answer_index: None,
            error: Some(e.to_string()),
        },
    };
    transcript.push(entry);
    Ok(outcome)
}

/// Drops records both text-only backends answer correctly. A backend error
/// keeps the record and adds a warning; an unparseable guess counts as wrong.
pub fn shortcut_filter(
    records: &[VqaRecord],
    backends: [&dyn Backend; 2],
    prompts: &StagePrompts,
) -> Result<FilterOutcome, DatasetError> {
    if backends[0].name() == backends[1].name() {
        return Err(DatasetError::SameBackend(backends[0].name().to_string()));
    }
    let per_record: Vec<(FilterLogEntry, Vec<TranscriptEntry>)> = records
        .par_iter()
        .map(|rec| {
            let mut transcript = Vec::new();
            let a = guess(backends[0], prompts, rec, &mut transcript)?;
            let b = guess(backends[1], prompts, rec, &mut transcript)?;
            let dropped = a.answer_index == Some(rec.answer_index) && b.answer_index == Some(rec.answer_index);
            Ok((
                FilterLogEntry {
                    record_id: rec.record_id.clone(),
                    answer_index: rec.answer_index,
                    guesses: [a, b],
                    dropped,
                },
                transcript,
            ))
        })
        .collect::<Result<_, DatasetError>>()?;

    let mut out = FilterOutcome::default();
    for (rec, (entry, transcript)) in records.iter().zip(per_record) {
        for g in &entry.guesses {
            if let Some(e) = &g.error {
                let w = format!(
                    "record {}: backend {} failed, keeping record: {e}",
                    rec.record_id, g.backend
                );
                log::warn!("{w}");
                out.warnings.push(w);
            }
        }
        if entry.dropped {
            out.dropped.push(rec.clone());
        } else {
            out.kept.push(rec.clone());
        }
        out.log.push(entry);
        out.transcript.extend(transcript);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportPair {
    pub slide_id: String,
    pub report_text: String,
    /// Optional region-level excerpts from `<slide_id>.regions.json`.
    #[serde(default)]
    pub region_extracts: BTreeMap<u32, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportPairing {
    pub pairs: Vec<ReportPair>,
    pub unmatched: Vec<String>,
}

/// Pairs slides with `<reports_dir>/<slide_id>.txt`. Repeated slide ids are
/// paired once; a missing directory leaves every slide unmatched.
pub fn pair_reports<S: AsRef<str>>(slides: &[S], reports_dir: impl AsRef<Path>) -> Result<ReportPairing, DatasetError> {
    let dir = reports_dir.as_ref();
    let mut out = ReportPairing::default();
    let mut seen = HashSet::new();
    for slide in slides {
        let id = slide.as_ref();
        if !seen.insert(id.to_string()) {
            continue;
        }
        let path = dir.join(format!("{id}.txt"));
        if !path.is_file() {
            out.unmatched.push(id.to_string());
            continue;
        }
        let report_text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let extracts_path = dir.join(format!("{id}.regions.json"));
        let region_extracts = if extracts_path.is_file() {
            let text = std::fs::read_to_string(&extracts_path).map_err(|e| io_err(&extracts_path, e))?;
            serde_json::from_str(&text).map_err(|e| io_err(&extracts_path, e))?
        } else {
            BTreeMap::new()
        };
        out.pairs.push(ReportPair {
            slide_id: id.to_string(),
            report_text,
            region_extracts,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Matcher, ScriptEntry, ScriptedBackend, ScriptedFault};

    fn line(id: &str, answer: usize, n: usize) -> String {
        let opts: Vec<String> = (0..n).map(|i| format!("option {i}")).collect();
        serde_json::json!({
            "record_id": id, "region_ref": {"slide_id": "S1", "region_id": 2},
            "question": "Which pattern?", "options": opts, "answer_index": answer, "subset": "BRCA"
        })
        .to_string()
    }

    fn manifest(lines: &[String]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vqa.jsonl");
        std::fs::write(&p, lines.join("\n") + "\n").unwrap();
        (dir, p)
    }

    #[test]
    fn loads_valid_lines() {
        let (_d, p) = manifest(&[line("a", 0, 4), line("b", 3, 4), String::new(), line("c", 1, 2)]);
        let recs = load_vqa_manifest(&p).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(
            recs[0].region_ref,
            RegionRef::Slide {
                slide_id: "S1".into(),
                region_id: 2
            }
        );
    }

    #[test]
    fn bad_answer_index_reports_line() {
        let (_d, p) = manifest(&[line("a", 0, 4), line("b", 4, 4)]);
        match load_vqa_manifest(&p) {
            Err(DatasetError::BadAnswerIndex {
                line,
                answer_index,
                n_options,
            }) => {
                assert_eq!((line, answer_index, n_options), (2, 4, 4));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_ids() {
        let (_d, p) = manifest(&[line("a", 0, 4), line("a", 1, 4)]);
        assert!(matches!(
            load_vqa_manifest(&p),
            Err(DatasetError::DuplicateRecordId { line: 2, .. })
        ));
    }

    #[test]
    fn option_rules() {
        let (_d, p) = manifest(&[line("a", 0, 1)]);
        assert!(matches!(
            load_vqa_manifest(&p),
            Err(DatasetError::SchemaViolation { line: 1, .. })
        ));
        let dup = r#"{"record_id":"x","region_ref":"r.png","question":"q","options":["a","a"],"answer_index":0,"subset":"KICH"}"#;
        let (_d, p) = manifest(&[dup.to_string()]);
        assert!(matches!(
            load_vqa_manifest(&p),
            Err(DatasetError::SchemaViolation { .. })
        ));
        let (_d, p) = manifest(&["{not json".to_string()]);
        assert!(matches!(
            load_vqa_manifest(&p),
            Err(DatasetError::SchemaViolation { line: 1, .. })
        ));
    }

    #[test]
    fn canonical_writer_is_stable() {
        let shuffled = r#"{"subset":"LUAD","answer_index":1,"options":["x","y"],"question":"q","region_ref":"regions/r1.png","record_id":"r1"}"#;
        let (_d, p) = manifest(&[shuffled.to_string()]);
        let recs = load_vqa_manifest(&p).unwrap();
        let mut a = Vec::new();
        write_vqa_manifest(&recs, &mut a).unwrap();
        let (_d2, p2) = manifest(&[String::from_utf8(a.clone()).unwrap().trim_end().to_string()]);
        let mut b = Vec::new();
        write_vqa_manifest(&load_vqa_manifest(&p2).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            recs[0].region_ref.resolve(Path::new("/d")),
            PathBuf::from("/d/regions/r1.png")
        );
    }

    fn record(id: &str, answer: usize) -> VqaRecord {
        serde_json::from_str(&line(id, answer, 4)).unwrap()
    }

    fn guesser(name: &str, answers: &[(&str, &str)]) -> ScriptedBackend {
        let mut b = ScriptedBackend::new(vec![ScriptEntry::new(Matcher::Always, "I cannot tell.")])
            .unwrap()
            .with_name(name);
        for (id, reply) in answers {
            let entry = if *reply == "FAULT" {
                ScriptEntry::fault(Matcher::Always, ScriptedFault::Timeout)
            } else {
                ScriptEntry::new(Matcher::Always, *reply)
            };
            b = b.with_conversation(format!("shortcut/{id}/{name}"), vec![entry]);
        }
        b
    }

    #[test]
    fn filter_rule() {
        let recs = vec![record("x", 1), record("y", 2), record("z", 0)];
        let a = guesser("a", &[("x", "Answer: B"), ("y", "Answer: C"), ("z", "FAULT")]);
        let b = guesser("b", &[("x", "Answer: B"), ("y", "Answer: A"), ("z", "Answer: A")]);
        let out = shortcut_filter(&recs, [&a, &b], &StagePrompts::builtin()).unwrap();
        assert_eq!(
            out.dropped.iter().map(|r| r.record_id.as_str()).collect::<Vec<_>>(),
            ["x"]
        );
        assert_eq!(
            out.kept.iter().map(|r| r.record_id.as_str()).collect::<Vec<_>>(),
            ["y", "z"]
        );
        assert_eq!(out.warnings.len(), 1);
        assert!(out.log[2].guesses[0].error.is_some());
        assert_eq!(out.transcript.len(), 6);
    }

    #[test]
    fn filter_needs_distinct_backends() {
        let a = guesser("same", &[]);
        let b = guesser("same", &[]);
        assert!(matches!(
            shortcut_filter(&[], [&a, &b], &StagePrompts::builtin()),
            Err(DatasetError::SameBackend(_))
        ));
    }

    #[test]
    fn pairing() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("S1.txt"), "report one").unwrap();
        std::fs::write(dir.path().join("S2.txt"), "report two").unwrap();
        std::fs::write(dir.path().join("S2.regions.json"), r#"{"3": "necrosis"}"#).unwrap();
        let p = pair_reports(&["S1", "S2"], dir.path()).unwrap();
        assert_eq!(p.pairs.len(), 2);
        assert_eq!(p.pairs[1].region_extracts[&3], "necrosis");
        let p = pair_reports(&["S1", "S3"], dir.path()).unwrap();
        assert_eq!((p.pairs.len(), p.unmatched.clone()), (1, vec!["S3".to_string()]));
        let empty = tempfile::tempdir().unwrap();
        assert_eq!(pair_reports(&["S1", "S2"], empty.path()).unwrap().unmatched.len(), 2);
    }
}
