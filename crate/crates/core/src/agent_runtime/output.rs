use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::backend::write_transcript;
use crate::nav_dsl::serialize_nav_plan;

use super::{AgentError, RegionRun, RegionTimings, WsiRun};

/// Directory under the output root that holds per-slide runs.
pub const RUN_DIR: &str = "run";

fn io(path: &Path, e: impl std::fmt::Display) -> AgentError {
    AgentError::InvalidInput(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), AgentError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io(path, e))
}

fn write_jsonl<'a>(
    path: &Path,
    entries: impl IntoIterator<Item = &'a crate::backend::TranscriptEntry>,
) -> Result<(), AgentError> {
    let f = fs::File::create(path).map_err(|e| io(path, e))?;
    let mut w = BufWriter::new(f);
    write_transcript(entries, &mut w).map_err(|e| io(path, e))?;
    w.flush().map_err(|e| io(path, e))
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    region_id: u32,
    stage: Option<super::Stage>,
    error: String,
    conversation_id: &'a str,
}

/// Writes `plan.json`, `views/step_<k>.png`, `reasoning.json` (or
/// `error.json`) and `transcript.jsonl` into `dir`.
pub fn write_region_run(dir: &Path, run: &RegionRun) -> Result<(), AgentError> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let views_dir = dir.join("views");
    if views_dir.exists() {
        fs::remove_dir_all(&views_dir).map_err(|e| io(&views_dir, e))?;
    }
    for stale in ["plan.json", "reasoning.json", "error.json"] {
        let p = dir.join(stale);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| io(&p, e))?;
        }
    }
    if let Some(plan) = &run.plan {
        let p = dir.join("plan.json");
        fs::write(&p, serialize_nav_plan(plan) + "\n").map_err(|e| io(&p, e))?;
    }
    if !run.views.is_empty() {
        fs::create_dir_all(&views_dir).map_err(|e| io(&views_dir, e))?;
        for (k, v) in run.views.iter().enumerate() {
            let p = views_dir.join(format!("step_{}.png", v.step_index.unwrap_or(k)));
            v.pixels.save(&p).map_err(|e| io(&p, e))?;
        }
    }
    match &run.result {
        Ok(report) => write_json(&dir.join("reasoning.json"), report)?,
        Err(e) => write_json(
            &dir.join("error.json"),
            &ErrorRecord {
                region_id: run.region_id,
                stage: e.stage(),
                error: e.to_string(),
                conversation_id: &run.conversation_id,
            },
        )?,
    }
    write_jsonl(&dir.join("transcript.jsonl"), &run.transcript)
}

/// Writes a whole-slide run under `<out>/run/<slide_id>/` and returns that
/// directory. Wall-clock timings go to `timings.json`, apart from the report.
pub fn write_wsi_run(out: &Path, run: &WsiRun) -> Result<PathBuf, AgentError> {
    let dir = out.join(RUN_DIR).join(&run.report.slide_id);
    fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    write_json(&dir.join("selection.json"), &run.report.selection)?;
    if let Some(img) = &run.screening_image {
        let p = dir.join("screening.png");
        img.save(&p).map_err(|e| io(&p, e))?;
    }
    let mut timings: BTreeMap<String, RegionTimings> = BTreeMap::new();
    for r in &run.region_runs {
        write_region_run(&dir.join(format!("region_{}", r.region_id)), r)?;
        if let Ok(rep) = &r.result {
            timings.insert(format!("region_{}", r.region_id), rep.timings);
        }
    }
    write_json(&dir.join("report.json"), &run.report)?;
    write_json(&dir.join("timings.json"), &timings)?;
    write_jsonl(&dir.join("transcript.jsonl"), run.transcript())?;
    Ok(dir)
}
