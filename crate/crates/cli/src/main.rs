mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use config::{flag_layer, read_layer, resolve, Settings, RESOLVED_FILE};

#[derive(Debug, Parser)]
#[command(
    name = "pathagent",
    version,
    about = "Slide tiling, viewport navigation, agent runs and evaluation",
    subcommand_required = false,
    arg_required_else_help = true
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Output directory
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Config file (TOML, or JSON by extension)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Reuse <out>/config.resolved.json from an earlier run; without a
    /// subcommand the recorded command is repeated too
    #[arg(long, global = true)]
    rerun: bool,
    /// HTTP backend profile
    #[arg(long, global = true)]
    backend: Option<PathBuf>,
    /// Scripted backend file (overrides --backend)
    #[arg(long, global = true)]
    script: Option<PathBuf>,
    /// Prompt pack directory
    #[arg(long, global = true)]
    prompts: Option<PathBuf>,
    /// Worker threads
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Side of rendered views in pixels
    #[arg(long, global = true)]
    out_res: Option<u32>,
    #[arg(long, global = true)]
    region_size: Option<u32>,
    #[arg(long, global = true)]
    overlap: Option<f64>,
    #[arg(long, global = true)]
    min_tissue: Option<f64>,
    /// Tissue rule: minimum HSV saturation
    #[arg(long, global = true)]
    min_saturation: Option<f64>,
    /// Tissue rule: maximum HSV value
    #[arg(long, global = true)]
    max_value: Option<f64>,
    #[arg(long, global = true)]
    max_steps: Option<usize>,
    /// Attempts per region in sampling mode
    #[arg(long, global = true)]
    attempts: Option<usize>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    attempt_temperature: Option<f64>,
    #[arg(long, global = true)]
    max_magnification: Option<f64>,
    #[arg(long, global = true)]
    thumbnail_factor: Option<u32>,
    /// Skip regions whose group does not need high magnification
    #[arg(long, global = true)]
    skip_low_priority: bool,
}

#[derive(Debug, Subcommand, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
enum Command {
    /// Plan, tissue-filter and extract regions of a slide
    Tile(commands::TileArgs),
    /// Write a downscaled slide thumbnail
    Thumbnail(commands::ThumbnailArgs),
    /// Draw a labelled coordinate grid over an image
    Grid(commands::GridArgs),
    /// Render the views of a navigation plan, or the fixed multi-scale grid
    Crop(commands::CropArgs),
    /// Plan, render and reason over one region, or over VQA records
    RunRegion(commands::RunRegionArgs),
    /// Screen a slide and describe its priority regions
    RunWsi(commands::RunWsiArgs),
    /// Classify slides from their run reports
    ClassifyWsi(commands::ClassifyArgs),
    /// Score VQA predictions per subset, with pass@k
    EvalVqa(commands::EvalVqaArgs),
    /// Unbiased pass@k for n attempts with c successes
    PassAtK(commands::PassAtKArgs),
    /// Drop VQA records two text-only backends both answer correctly
    FilterShortcuts(commands::FilterArgs),
    /// Render the per-subset accuracy table
    Report(commands::ReportArgs),
}

impl GlobalArgs {
    fn layers(&self) -> Result<Vec<serde_json::Map<String, Value>>> {
        let mut layers = Vec::new();
        if self.rerun {
            layers.push(read_layer(&self.out.join(RESOLVED_FILE)).context("--rerun needs an earlier run in --out")?);
        }
        if let Some(c) = &self.config {
            layers.push(read_layer(c)?);
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| json!(p));
        layers.push(flag_layer(vec![
            ("backend", path(&self.backend)),
            ("script", path(&self.script)),
            ("prompts", path(&self.prompts)),
            ("workers", self.workers.map(|v| json!(v))),
            ("seed", self.seed.map(|v| json!(v))),
            ("out_res", self.out_res.map(|v| json!(v))),
            ("region_size", self.region_size.map(|v| json!(v))),
            ("overlap", self.overlap.map(|v| json!(v))),
            ("min_tissue", self.min_tissue.map(|v| json!(v))),
            ("max_steps", self.max_steps.map(|v| json!(v))),
            ("attempts", self.attempts.map(|v| json!(v))),
            ("temperature", self.temperature.map(|v| json!(v))),
            ("attempt_temperature", self.attempt_temperature.map(|v| json!(v))),
            ("max_magnification", self.max_magnification.map(|v| json!(v))),
            ("thumbnail_factor", self.thumbnail_factor.map(|v| json!(v))),
            ("skip_low_priority", self.skip_low_priority.then_some(json!(true))),
            ("tissue_rule", self.tissue_rule_layer()),
        ])?);
        Ok(layers)
    }

    fn tissue_rule_layer(&self) -> Option<Value> {
        let mut m = serde_json::Map::new();
        if let Some(v) = self.min_saturation {
            m.insert("min_saturation".into(), json!(v));
        }
        if let Some(v) = self.max_value {
            m.insert("max_value".into(), json!(v));
        }
        (!m.is_empty()).then_some(Value::Object(m))
    }
}

fn init_logging(out: &std::path::Path) -> Result<()> {
    let file = fern::log_file(out.join("pathagent.log.jsonl")).context("cannot open log file")?;
    let to_file = fern::Dispatch::new()
        .level(log::LevelFilter::Info)
        .format(|o, message, record| {
            let ts = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0);
            o.finish(format_args!(
                "{}",
                json!({"ts_ms": ts as u64, "level": record.level().as_str(), "target": record.target(), "message": message.to_string()})
            ))
        })
        .chain(file);
    let to_stderr = fern::Dispatch::new()
        .level(log::LevelFilter::Warn)
        .format(|o, message, record| o.finish(format_args!("{}: {message}", record.level().as_str().to_lowercase())))
        .chain(std::io::stderr());
    // A logger may already be installed when called twice in one process.
    let _ = fern::Dispatch::new().chain(to_file).chain(to_stderr).apply();
    Ok(())
}

fn recorded_command(out: &std::path::Path) -> Result<Command> {
    let p = out.join(RESOLVED_FILE);
    let text = std::fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))?;
    let v: Value = serde_json::from_str(&text)?;
    serde_json::from_value(v["command"].clone()).context("no usable command recorded")
}

fn run(cli: Cli) -> Result<()> {
    let command = match cli.command {
        Some(c) => c,
        None if cli.global.rerun => recorded_command(&cli.global.out)?,
        None => unreachable!("checked in main"),
    };
    let settings: Settings = resolve(cli.global.layers()?)?;
    let out = cli.global.out.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    init_logging(&out)?;
    let resolved = json!({"command": command, "settings": settings});
    std::fs::write(out.join(RESOLVED_FILE), serde_json::to_string_pretty(&resolved)? + "\n")
        .context("cannot write resolved config")?;
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.agent.workers)
        .build_global();
    let ctx = commands::Context { out, settings };
    match &command {
        Command::Tile(a) => commands::tile(&ctx, a),
        Command::Thumbnail(a) => commands::thumbnail(&ctx, a),
        Command::Grid(a) => commands::grid(&ctx, a),
        Command::Crop(a) => commands::crop(&ctx, a),
        Command::RunRegion(a) => commands::run_region(&ctx, a),
        Command::RunWsi(a) => commands::run_wsi(&ctx, a),
        Command::ClassifyWsi(a) => commands::classify_wsi(&ctx, a),
        Command::EvalVqa(a) => commands::eval_vqa(&ctx, a),
        Command::PassAtK(a) => commands::pass_at_k_cmd(&ctx, a),
        Command::FilterShortcuts(a) => commands::filter_shortcuts(&ctx, a),
        Command::Report(a) => commands::report(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if cli.command.is_none() && !cli.global.rerun {
        Cli::command()
            .error(
                ErrorKind::MissingSubcommand,
                "a subcommand is required unless --rerun is given",
            )
            .exit();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
