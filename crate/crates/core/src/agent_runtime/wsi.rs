use std::sync::Arc;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{ChatMessage, MessagePart, TranscriptEntry};
use crate::nav_dsl::{parse_region_selection, RegionSelection, REGION_SELECTION_SCHEMA};
use crate::region_tiler::{filter_regions, plan_regions, RegionSpec, TilingPlan};
use crate::slide_model::{draw_labeled_box, make_thumbnail, PixelRect, RegionImage, SlidePyramid};

use super::{Agent, AgentError, Conversation, RegionMode, RegionReport, RegionRun, Stage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionFailure {
    pub region_id: u32,
    pub stage: Option<Stage>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WsiReport {
    pub slide_id: String,
    /// Regions that passed tissue filtering, with their tissue fractions.
    pub regions: Vec<RegionSpec>,
    pub selection: RegionSelection,
    /// Successful regions in priority order.
    pub region_reports: Vec<RegionReport>,
    pub failures: Vec<RegionFailure>,
    pub warnings: Vec<String>,
    pub predicted_label: Option<String>,
}

#[derive(Debug)]
pub struct WsiRun {
    pub report: WsiReport,
    /// Thumbnail with region outlines as sent for screening.
    pub screening_image: Option<RgbImage>,
    /// Per-region runs in priority order.
    pub region_runs: Vec<RegionRun>,
    pub screening_transcript: Vec<TranscriptEntry>,
}

impl WsiRun {
    /// Screening calls, then each region's calls in priority order.
    pub fn transcript(&self) -> Vec<&TranscriptEntry> {
        self.screening_transcript
            .iter()
            .chain(self.region_runs.iter().flat_map(|r| r.transcript.iter()))
            .collect()
    }
}

/// Maps a free-text reply to one label: an exact case-insensitive match
/// first, otherwise the single label contained in the reply.
pub fn match_label<S: AsRef<str>>(response: &str, labels: &[S]) -> Result<String, AgentError> {
    let norm = |s: &str| {
        s.trim()
            .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
            .to_lowercase()
    };
    let reply = norm(response);
    if let Some(l) = labels.iter().find(|l| norm(l.as_ref()) == reply) {
        return Ok(l.as_ref().to_string());
    }
    let lower = response.to_lowercase();
    let hits: Vec<&S> = labels
        .iter()
        .filter(|l| {
            let l = norm(l.as_ref());
            !l.is_empty() && lower.contains(&l)
        })
        .collect();
    match hits.as_slice() {
        [one] => Ok(one.as_ref().to_string()),
        _ => Err(AgentError::LabelMismatch {
            response: response.to_string(),
            matches: hits.len(),
        }),
    }
}

/// Region outline in thumbnail pixels.
fn thumb_rect(spec: &RegionSpec, plan: &TilingPlan, thumb: &RgbImage) -> PixelRect {
    let sx = thumb.width() as f64 / plan.width_px as f64;
    let sy = thumb.height() as f64 / plan.height_px as f64;
    let x0 = ((spec.x as f64 * sx).floor() as u32).min(thumb.width().saturating_sub(1));
    let y0 = ((spec.y as f64 * sy).floor() as u32).min(thumb.height().saturating_sub(1));
    let x1 = (((spec.x + spec.w) as f64 * sx).ceil() as u32).clamp(x0 + 1, thumb.width());
    let y1 = (((spec.y + spec.h) as f64 * sy).ceil() as u32).clamp(y0 + 1, thumb.height());
    PixelRect::new(x0, y0, x1 - x0, y1 - y0)
}

/// Thumbnail with every planned region outlined and labelled by id.
pub fn screening_overlay(thumbnail: &RgbImage, plan: &TilingPlan) -> RgbImage {
    let mut img = thumbnail.clone();
    for spec in &plan.specs {
        draw_labeled_box(&mut img, thumb_rect(spec, plan, thumbnail), &spec.region_id.to_string());
    }
    img
}

impl Agent {
    /// Sends the outlined thumbnail and parses the region selection; every
    /// selected id must belong to `plan`.
    pub fn run_global_screening(
        &self,
        thumbnail: &RgbImage,
        plan: &TilingPlan,
        conv: &mut Conversation,
    ) -> Result<RegionSelection, AgentError> {
        let stage = Stage::GlobalScreening;
        let overlay = screening_overlay(thumbnail, plan);
        let ids = plan
            .region_ids()
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(", ");
        let text = self
            .prompts
            .render(stage, &[("region_ids", &ids), ("schema", REGION_SELECTION_SCHEMA)])?;
        let msg = ChatMessage::user(vec![MessagePart::Text(text), MessagePart::Image(Arc::new(overlay))]);
        let reply = conv
            .send(self.backend(), stage, vec![msg])
            .map_err(|source| AgentError::Backend { stage, source })?;
        let sel = match parse_region_selection(&reply) {
            Ok(s) => s,
            Err(source) => {
                conv.mark(format!("parse error: {source}"));
                return Err(AgentError::Parse { stage, source });
            }
        };
        let known = plan.region_ids();
        if let Some(&bad) = sel.all_region_ids().iter().find(|id| !known.contains(id)) {
            conv.mark(format!("unknown region id {bad}"));
            return Err(AgentError::UnknownRegionId(bad));
        }
        conv.mark("parsed");
        Ok(sel)
    }

    /// Tiles, filters, screens and then describes every priority region.
    /// Region failures are recorded and do not stop the run.
    pub fn run_wsi(&self, pyramid: &SlidePyramid) -> Result<WsiRun, AgentError> {
        let cfg = &self.config;
        let plan = plan_regions(
            pyramid.slide_id.clone(),
            pyramid.width_px,
            pyramid.height_px,
            cfg.region_size,
            cfg.overlap,
        )?;
        let plan = filter_regions(&plan, pyramid, cfg.min_tissue, cfg.tissue_rule)?;
        let mut report = WsiReport {
            slide_id: pyramid.slide_id.clone(),
            regions: plan.specs.clone(),
            selection: RegionSelection::default(),
            region_reports: Vec::new(),
            failures: Vec::new(),
            warnings: Vec::new(),
            predicted_label: None,
        };
        if plan.specs.is_empty() {
            let w = format!("slide {}: no region passed tissue filtering", pyramid.slide_id);
            log::warn!("{w}");
            report.warnings.push(w);
            return Ok(WsiRun {
                report,
                screening_image: None,
                region_runs: Vec::new(),
                screening_transcript: Vec::new(),
            });
        }

        let thumbnail = make_thumbnail(pyramid, cfg.thumbnail_factor)?;
        let mut conv = self.conversation(format!("{}/screening", pyramid.slide_id), cfg.temperature, cfg.seed);
        let selection = self.run_global_screening(&thumbnail, &plan, &mut conv)?;
        let screening_image = Some(screening_overlay(&thumbnail, &plan));

        let order: Vec<u32> = selection
            .priority
            .iter()
            .copied()
            .filter(|id| {
                let keep = !cfg.skip_low_priority || selection.group_of(*id).is_none_or(|g| g.needs_high_mag);
                if !keep {
                    log::info!("slide {}: skipping low-priority region {id}", pyramid.slide_id);
                }
                keep
            })
            .collect();
        report.selection = selection;

        let base = pyramid.load_level(0)?;
        let pool = self.pool()?;
        let runs: Vec<RegionRun> = pool.install(|| {
            order
                .par_iter()
                .map(|id| {
                    let spec = plan.spec(*id).expect("selection validated against plan");
                    let pixels = image::imageops::crop_imm(base.as_ref(), spec.x, spec.y, spec.w, spec.h).to_image();
                    let region = RegionImage::new(spec.region_id, pyramid.slide_id.clone(), (spec.x, spec.y), pixels);
                    self.run_region(&region, &RegionMode::Describe)
                })
                .collect()
        });
        for run in &runs {
            match &run.result {
                Ok(r) => report.region_reports.push(r.clone()),
                Err(e) => {
                    log::warn!("slide {} region {}: {e}", pyramid.slide_id, run.region_id);
                    report.failures.push(RegionFailure {
                        region_id: run.region_id,
                        stage: e.stage(),
                        error: e.to_string(),
                    });
                }
            }
        }
        Ok(WsiRun {
            report,
            screening_image,
            region_runs: runs,
            screening_transcript: conv.transcript,
        })
    }

    /// Sends every region conclusion with the label list and maps the reply
    /// to one label.
    pub fn classify_wsi<S: AsRef<str>>(
        &self,
        report: &WsiReport,
        labels: &[S],
        conv: &mut Conversation,
    ) -> Result<String, AgentError> {
        let stage = Stage::WsiClassification;
        if labels.is_empty() {
            return Err(AgentError::InvalidInput("no labels given".into()));
        }
        if report.region_reports.is_empty() {
            return Err(AgentError::InvalidInput(format!(
                "slide {} has no region descriptions",
                report.slide_id
            )));
        }
        let descriptions = report
            .region_reports
            .iter()
            .map(|r| match report.selection.group_of(r.region_id) {
                Some(g) => format!("Region {} ({}): {}", r.region_id, g.name, r.reasoning.conclusion),
                None => format!("Region {}: {}", r.region_id, r.reasoning.conclusion),
            })
            .collect::<Vec<_>>()
            .join("\n\n");
        let label_list = labels
            .iter()
            .map(|l| format!("- {}", l.as_ref()))
            .collect::<Vec<_>>()
            .join("\n");
        let text = self
            .prompts
            .render(stage, &[("labels", &label_list), ("descriptions", &descriptions)])?;
        let reply = conv
            .send(self.backend(), stage, vec![ChatMessage::user_text(text)])
            .map_err(|source| AgentError::Backend { stage, source })?;
        let label = match_label(&reply, labels);
        conv.mark(match &label {
            Ok(l) => format!("label {l}"),
            Err(e) => e.to_string(),
        });
        label
    }

    pub fn classification_conversation(&self, slide_id: &str) -> Conversation {
        self.conversation(
            format!("{slide_id}/classification"),
            self.config.temperature,
            self.config.seed,
        )
    }
}
