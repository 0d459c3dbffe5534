use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context as _, Result};
use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use pathagent::agent_runtime::{
    write_region_run, write_wsi_run, Agent, RegionMode, RegionRun, StagePrompts, WsiReport, RUN_DIR,
};
use pathagent::backend::{write_transcript, Backend, BackendProfile, HttpBackend, ScriptedBackend, TranscriptEntry};
use pathagent::dataset_io::{load_vqa_manifest, shortcut_filter, VqaRecord};
use pathagent::eval_harness::{
    aggregate_pass_at_k, balanced_accuracy, load_predictions, pass_at_k, render_vqa_table, score_vqa,
    write_predictions, EvalReport, VqaPrediction,
};
use pathagent::nav_dsl::parse_nav_plan;
use pathagent::region_tiler::{extract_region, filter_regions, plan_regions, write_region_manifest};
use pathagent::slide_model::{
    annotate_grid, load_pyramid, make_thumbnail, multiscale_grid, RegionImage, ViewImage, ViewRecord, GRID_INTERVAL,
};

use crate::config::Settings;

pub struct Context {
    pub out: PathBuf,
    pub settings: Settings,
}

impl Context {
    fn prompts(&self) -> Result<StagePrompts> {
        Ok(match &self.settings.prompts {
            Some(dir) => StagePrompts::load_dir(dir)?,
            None => StagePrompts::builtin(),
        })
    }

    fn backend(&self) -> Result<Arc<dyn Backend>> {
        make_backend(self.settings.script.as_deref(), self.settings.backend.as_deref())
    }

    fn agent(&self) -> Result<Agent> {
        Ok(Agent::new(
            self.backend()?,
            self.prompts()?,
            self.settings.agent.clone(),
        )?)
    }
}

fn make_backend(script: Option<&Path>, profile: Option<&Path>) -> Result<Arc<dyn Backend>> {
    if let Some(s) = script {
        return Ok(Arc::new(ScriptedBackend::load(s)?));
    }
    if let Some(p) = profile {
        return Ok(Arc::new(HttpBackend::new(BackendProfile::load(p)?)?));
    }
    bail!("no backend configured; pass --script or --backend")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn write_jsonl_transcript<'a>(path: &Path, entries: impl IntoIterator<Item = &'a TranscriptEntry>) -> Result<()> {
    let mut w = create(path)?;
    write_transcript(entries, &mut w)?;
    w.flush()?;
    Ok(())
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct TileArgs {
    /// Slide manifest (slide.json)
    #[arg(long)]
    pub slide: PathBuf,
}

pub fn tile(ctx: &Context, a: &TileArgs) -> Result<()> {
    let cfg = &ctx.settings.agent;
    let pyramid = load_pyramid(&a.slide)?;
    let plan = plan_regions(
        &pyramid.slide_id,
        pyramid.width_px,
        pyramid.height_px,
        cfg.region_size,
        cfg.overlap,
    )?;
    let kept = filter_regions(&plan, &pyramid, cfg.min_tissue, cfg.tissue_rule)?;
    log::info!(
        "slide {}: {} of {} regions kept",
        pyramid.slide_id,
        kept.specs.len(),
        plan.specs.len()
    );
    let dir = ctx.out.join(&pyramid.slide_id);
    fs::create_dir_all(&dir)?;
    kept.specs.par_iter().try_for_each(|spec| -> Result<()> {
        let region = extract_region(&pyramid, spec)?;
        let png = dir.join(format!("region_{}.png", spec.region_id));
        region
            .pixels
            .save(&png)
            .with_context(|| format!("cannot write {}", png.display()))?;
        write_json(&png.with_extension("json"), &region.sidecar())
    })?;
    let mut w = create(&dir.join("regions.jsonl"))?;
    write_region_manifest(&kept, &mut w)?;
    w.flush()?;
    println!("{} regions written to {}", kept.specs.len(), dir.display());
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct ThumbnailArgs {
    #[arg(long)]
    pub slide: PathBuf,
    /// Downscale factor; defaults to the configured thumbnail factor
    #[arg(long)]
    pub factor: Option<u32>,
}

pub fn thumbnail(ctx: &Context, a: &ThumbnailArgs) -> Result<()> {
    let pyramid = load_pyramid(&a.slide)?;
    let thumb = make_thumbnail(&pyramid, a.factor.unwrap_or(ctx.settings.agent.thumbnail_factor))?;
    let p = ctx.out.join(format!("{}_thumbnail.png", pyramid.slide_id));
    thumb
        .save(&p)
        .with_context(|| format!("cannot write {}", p.display()))?;
    println!("{}", p.display());
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct GridArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Grid spacing in normalized coordinates
    #[arg(long, default_value_t = GRID_INTERVAL)]
    pub interval: f64,
}

pub fn grid(ctx: &Context, a: &GridArgs) -> Result<()> {
    if !(a.interval > 0.0 && a.interval <= 1.0) {
        bail!("--interval must be in (0, 1]");
    }
    let img = image::open(&a.image)
        .with_context(|| format!("cannot read {}", a.image.display()))?
        .to_rgb8();
    let p = ctx.out.join(format!("{}_grid.png", file_stem(&a.image)));
    annotate_grid(&img, a.interval).save(&p)?;
    println!("{}", p.display());
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct CropArgs {
    /// Region raster, optionally with a JSON sidecar
    #[arg(long)]
    pub region: PathBuf,
    /// Navigation plan (JSON, or text containing one)
    #[arg(long, required_unless_present = "multiscale", conflicts_with = "multiscale")]
    pub plan: Option<PathBuf>,
    /// Render the fixed multi-scale view grid instead of a plan
    #[arg(long)]
    pub multiscale: bool,
}

fn write_views(dir: &Path, views: &[ViewImage]) -> Result<()> {
    let views_dir = dir.join("views");
    if views_dir.exists() {
        fs::remove_dir_all(&views_dir)?;
    }
    fs::create_dir_all(&views_dir)?;
    views.par_iter().enumerate().try_for_each(|(k, v)| -> Result<()> {
        let p = views_dir.join(format!("step_{k}.png"));
        v.pixels
            .save(&p)
            .with_context(|| format!("cannot write {}", p.display()))?;
        Ok(())
    })?;
    let records: Vec<ViewRecord> = views.iter().map(ViewImage::record).collect();
    write_json(&dir.join("views.json"), &records)
}

pub fn crop(ctx: &Context, a: &CropArgs) -> Result<()> {
    let region = RegionImage::load(&a.region)?;
    let views = match &a.plan {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            let plan = parse_nav_plan(&text)?;
            pathagent::agent_runtime::execute_plan(&region, &plan, &ctx.settings.agent.crop_options())?
        }
        None => multiscale_grid(&region, ctx.settings.agent.out_res)?,
    };
    write_views(&ctx.out, &views)?;
    println!("{} views written to {}", views.len(), ctx.out.join("views").display());
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct RunRegionArgs {
    /// Region raster to describe
    #[arg(long, required_unless_present = "vqa", conflicts_with = "vqa")]
    pub region: Option<PathBuf>,
    /// VQA manifest; every record (or --record) is answered
    #[arg(long)]
    pub vqa: Option<PathBuf>,
    /// Only run these record ids
    #[arg(long, requires = "vqa")]
    pub record: Vec<String>,
    /// Root for relative region references; defaults to the manifest directory
    #[arg(long, requires = "vqa")]
    pub regions_root: Option<PathBuf>,
    /// Run the configured number of sampled attempts per region
    #[arg(long)]
    pub sample: bool,
}

fn region_runs(agent: &Agent, region: &RegionImage, mode: &RegionMode, sample: bool) -> Result<Vec<RegionRun>> {
    if sample {
        Ok(agent.run_region_attempts(region, mode, agent.config().attempts)?)
    } else {
        Ok(vec![agent.run_region(region, mode)])
    }
}

fn write_runs(dir: &Path, runs: &[RegionRun]) -> Result<()> {
    for r in runs {
        match r.attempt {
            Some(i) => write_region_run(&dir.join(format!("attempt_{i}")), r)?,
            None => write_region_run(dir, r)?,
        }
    }
    Ok(())
}

pub fn run_region(ctx: &Context, a: &RunRegionArgs) -> Result<()> {
    let agent = ctx.agent()?;
    if let Some(path) = &a.region {
        let region = RegionImage::load(path)?;
        let runs = region_runs(&agent, &region, &RegionMode::Describe, a.sample)?;
        let dir = ctx
            .out
            .join(RUN_DIR)
            .join(&region.slide_id)
            .join(format!("region_{}", region.region_id));
        write_runs(&dir, &runs)?;
        let failed: Vec<String> = runs
            .iter()
            .filter_map(|r| r.result.as_ref().err().map(|e| format!("{}: {e}", r.conversation_id)))
            .collect();
        println!("{}", dir.display());
        if failed.len() == runs.len() {
            bail!("region run failed: {}", failed.join("; "));
        }
        return Ok(());
    }
    let manifest = a.vqa.as_ref().expect("clap requires --region or --vqa");
    let records = load_vqa_manifest(manifest)?;
    let records: Vec<&VqaRecord> = if a.record.is_empty() {
        records.iter().collect()
    } else {
        let wanted: Vec<&VqaRecord> = records.iter().filter(|r| a.record.contains(&r.record_id)).collect();
        if let Some(missing) = a.record.iter().find(|id| !wanted.iter().any(|r| &&r.record_id == id)) {
            bail!("record {missing:?} not in {}", manifest.display());
        }
        wanted
    };
    let root = match &a.regions_root {
        Some(r) => r.clone(),
        None => manifest.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    let per_record: Vec<Vec<VqaPrediction>> = records
        .par_iter()
        .map(|rec| -> Result<Vec<VqaPrediction>> {
            let dir = ctx.out.join("vqa").join(&rec.record_id);
            let region = match RegionImage::load(rec.region_ref.resolve(&root)) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("record {}: {e}", rec.record_id);
                    let n = if a.sample { agent.config().attempts } else { 1 };
                    return Ok((0..n)
                        .map(|i| VqaPrediction::failed(&rec.record_id, i, e.to_string()))
                        .collect());
                }
            };
            let runs = region_runs(&agent, &region, &RegionMode::Vqa((*rec).clone()), a.sample)?;
            write_runs(&dir, &runs)?;
            Ok(runs
                .iter()
                .map(|r| {
                    let i = r.attempt.unwrap_or(0);
                    match &r.result {
                        Ok(rep) => match rep.answer_index {
                            Some(ans) => VqaPrediction::answered(&rec.record_id, i, ans),
                            None => VqaPrediction::failed(&rec.record_id, i, "no answer"),
                        },
                        Err(e) => VqaPrediction::failed(&rec.record_id, i, e.to_string()),
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let preds: Vec<VqaPrediction> = per_record.into_iter().flatten().collect();
    let p = ctx.out.join("predictions.jsonl");
    let mut w = create(&p)?;
    write_predictions(&preds, &mut w)?;
    w.flush()?;
    let failed = preds.iter().filter(|p| p.error.is_some()).count();
    println!(
        "{} predictions ({failed} failed) written to {}",
        preds.len(),
        p.display()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct RunWsiArgs {
    #[arg(long)]
    pub slide: PathBuf,
}

pub fn run_wsi(ctx: &Context, a: &RunWsiArgs) -> Result<()> {
    let agent = ctx.agent()?;
    let pyramid = load_pyramid(&a.slide)?;
    let run = agent.run_wsi(&pyramid)?;
    let dir = write_wsi_run(&ctx.out, &run)?;
    for w in &run.report.warnings {
        log::warn!("{w}");
    }
    println!(
        "{}: {} regions described, {} failed",
        dir.display(),
        run.report.region_reports.len(),
        run.report.failures.len()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct ClassifyArgs {
    /// WSI report.json files from run-wsi
    #[arg(long, required = true, num_args = 1..)]
    pub report: Vec<PathBuf>,
    /// Candidate label (repeatable)
    #[arg(long)]
    pub label: Vec<String>,
    /// File with one candidate label per line
    #[arg(long)]
    pub labels_file: Option<PathBuf>,
    /// JSON object mapping slide id to gold label
    #[arg(long)]
    pub gold: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Classification {
    slide_id: String,
    predicted_label: Option<String>,
    error: Option<String>,
}

pub fn classify_wsi(ctx: &Context, a: &ClassifyArgs) -> Result<()> {
    let mut labels = a.label.clone();
    if let Some(f) = &a.labels_file {
        let text = fs::read_to_string(f).with_context(|| format!("cannot read {}", f.display()))?;
        labels.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from));
    }
    if labels.is_empty() {
        bail!("no labels; pass --label or --labels-file");
    }
    let agent = ctx.agent()?;
    let reports: Vec<WsiReport> = a
        .report
        .iter()
        .map(|p| -> Result<WsiReport> {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid report {}", p.display()))
        })
        .collect::<Result<_>>()?;
    let results: Vec<(Classification, Vec<TranscriptEntry>)> = reports
        .par_iter()
        .map(|rep| {
            let mut conv = agent.classification_conversation(&rep.slide_id);
            let r = agent.classify_wsi(rep, &labels, &mut conv);
            let c = Classification {
                slide_id: rep.slide_id.clone(),
                predicted_label: r.as_ref().ok().cloned(),
                error: r.err().map(|e| e.to_string()),
            };
            (c, conv.transcript)
        })
        .collect();
    let mut w = create(&ctx.out.join("classifications.jsonl"))?;
    for (c, _) in &results {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    write_jsonl_transcript(
        &ctx.out.join("classification_transcript.jsonl"),
        results.iter().flat_map(|(_, t)| t),
    )?;
    for (c, _) in &results {
        match (&c.predicted_label, &c.error) {
            (Some(l), _) => println!("{}\t{l}", c.slide_id),
            (None, Some(e)) => println!("{}\terror: {e}", c.slide_id),
            _ => {}
        }
    }
    if let Some(g) = &a.gold {
        let text = fs::read_to_string(g).with_context(|| format!("cannot read {}", g.display()))?;
        let gold: BTreeMap<String, String> = serde_json::from_str(&text).context("gold must map slide id to label")?;
        let mut preds = Vec::new();
        let mut truth = Vec::new();
        for (c, _) in &results {
            let Some(t) = gold.get(&c.slide_id) else {
                log::warn!("slide {} has no gold label", c.slide_id);
                continue;
            };
            preds.push(c.predicted_label.clone().unwrap_or_default());
            truth.push(t.clone());
        }
        let ba = balanced_accuracy(&preds, &truth, &labels)?;
        write_json(&ctx.out.join("balanced_accuracy.json"), &ba)?;
        println!("balanced accuracy {:.4}", ba.value);
    }
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct EvalVqaArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    /// pass@k values to report (repeatable)
    #[arg(long)]
    pub k: Vec<usize>,
    /// Row name in the table
    #[arg(long, default_value = "model")]
    pub model: String,
}

fn evaluate(manifest: &Path, predictions: &Path, ks: &[usize]) -> Result<EvalReport> {
    let gold = load_vqa_manifest(manifest)?;
    let preds = load_predictions(predictions)?;
    let first: Vec<VqaPrediction> = preds.iter().filter(|p| p.attempt_index == 0).cloned().collect();
    let mut report = score_vqa(&first, &gold)?;
    if !ks.is_empty() {
        report.pass_at_k = aggregate_pass_at_k(&preds, &gold, ks)?;
    }
    Ok(report)
}

pub fn eval_vqa(ctx: &Context, a: &EvalVqaArgs) -> Result<()> {
    let report = evaluate(&a.manifest, &a.predictions, &a.k)?;
    write_json(&ctx.out.join("eval_report.json"), &report)?;
    let table = render_vqa_table(&report, &a.model);
    fs::write(ctx.out.join("eval_table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct PassAtKArgs {
    #[arg(long)]
    pub n: u64,
    #[arg(long)]
    pub c: u64,
    #[arg(long)]
    pub k: u64,
}

pub fn pass_at_k_cmd(_ctx: &Context, a: &PassAtKArgs) -> Result<()> {
    println!("{:.6}", pass_at_k(a.n, a.c, a.k)?);
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct FilterArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Scripted backend for the first text-only model
    #[arg(long, required_unless_present = "backend_a")]
    pub script_a: Option<PathBuf>,
    /// HTTP profile for the first text-only model
    #[arg(long)]
    pub backend_a: Option<PathBuf>,
    #[arg(long, required_unless_present = "backend_b")]
    pub script_b: Option<PathBuf>,
    #[arg(long)]
    pub backend_b: Option<PathBuf>,
}

pub fn filter_shortcuts(ctx: &Context, a: &FilterArgs) -> Result<()> {
    let records = load_vqa_manifest(&a.manifest)?;
    let ba = make_backend(a.script_a.as_deref(), a.backend_a.as_deref())?;
    let bb = make_backend(a.script_b.as_deref(), a.backend_b.as_deref())?;
    let outcome = shortcut_filter(&records, [ba.as_ref(), bb.as_ref()], &ctx.prompts()?)?;
    outcome.write_dir(&ctx.out)?;
    write_jsonl_transcript(&ctx.out.join("filter_transcript.jsonl"), &outcome.transcript)?;
    println!(
        "kept {}, dropped {}, {} backend warnings",
        outcome.kept.len(),
        outcome.dropped.len(),
        outcome.warnings.len()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// eval_report.json from eval-vqa
    #[arg(long, conflicts_with_all = ["manifest", "predictions"], required_unless_present = "manifest")]
    pub eval: Option<PathBuf>,
    #[arg(long, requires = "predictions")]
    pub manifest: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub k: Vec<usize>,
    #[arg(long, default_value = "model")]
    pub model: String,
}

pub fn report(ctx: &Context, a: &ReportArgs) -> Result<()> {
    let report: EvalReport = match (&a.eval, &a.manifest, &a.predictions) {
        (Some(e), _, _) => {
            let text = fs::read_to_string(e).with_context(|| format!("cannot read {}", e.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid eval report {}", e.display()))?
        }
        (None, Some(m), Some(p)) => evaluate(m, p, &a.k)?,
        _ => return Err(anyhow!("pass --eval, or --manifest with --predictions")),
    };
    let table = render_vqa_table(&report, &a.model);
    fs::write(ctx.out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}
