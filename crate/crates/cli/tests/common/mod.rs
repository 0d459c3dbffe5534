#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pathagent"))
}

pub fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Stained-looking noise; every pixel passes the default tissue rule.
pub fn tissue(w: u32, h: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| {
        Rgb([rng.gen_range(170..220), rng.gen_range(70..130), rng.gen_range(140..190)])
    })
}

/// Writes a single-level slide and returns its manifest path.
pub fn write_slide(dir: &Path, slide_id: &str, img: &RgbImage) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    img.save(dir.join("level0.png")).unwrap();
    let manifest = json!({
        "slide_id": slide_id,
        "width_px": img.width(),
        "height_px": img.height(),
        "levels": [{"downsample": 1.0, "path": "level0.png"}],
    });
    let p = dir.join("slide.json");
    std::fs::write(&p, manifest.to_string()).unwrap();
    p
}

pub const PLAN: &str = r#"{"steps":[
    {"action":"overview","center":[0.5,0.5],"magnification":1,"rationale":"survey"},
    {"action":"zoom_in","center":[0.3,0.6],"magnification":2,"rationale":"dense focus"}]}"#;

pub fn reasoning(conclusion: &str, answer: Option<usize>) -> String {
    json!({"step_notes": ["overview", "closer look"], "conclusion": conclusion, "answer_index": answer}).to_string()
}

/// Sorted relative paths and contents of every file under `dir`, skipping
/// the log.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if !p.ends_with("pathagent.log.jsonl") {
                out.push((
                    p.strip_prefix(root).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
