//! The screening → planning → reasoning loop over a chat backend.
//!
//! A slide is tiled and filtered, the backend picks and orders regions from an
//! annotated thumbnail, and each chosen region gets its own conversation: a
//! navigation plan over a gridded overview, rendering of the planned views,
//! then step-by-step reasoning over those views.

mod conversation;
mod output;
mod prompts;
mod region;
mod wsi;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::nav_dsl::NavError;
use crate::region_tiler::{TilerError, TissueRule, DEFAULT_MIN_TISSUE, DEFAULT_OVERLAP, DEFAULT_REGION_SIZE};
use crate::slide_model::{CropOptions, SlideError, DEFAULT_OUT_RES, THUMBNAIL_FACTOR};

pub use conversation::Conversation;
pub use output::{write_region_run, write_wsi_run, RUN_DIR};
pub use prompts::{format_options, PromptError, Stage, StagePrompts};
pub use region::{execute_plan, AnswerSource, ReasoningOutcome, RegionMode, RegionReport, RegionRun, RegionTimings};
pub use wsi::{match_label, RegionFailure, WsiReport, WsiRun};

pub const DEFAULT_MAX_STEPS: usize = 12;
pub const DEFAULT_ATTEMPTS: usize = 8;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("{stage}: {source}")]
    Backend { stage: Stage, source: BackendError },
    #[error("{stage}: {source}")]
    Parse { stage: Stage, source: NavError },
    #[error("screening selected region {0}, which is not in the tiling plan")]
    UnknownRegionId(u32),
    #[error("no answer could be extracted ({reason}); conclusion: {conclusion:?}")]
    AnswerMissing { reason: String, conclusion: String },
    #[error("classification reply matched {matches} labels: {response:?}")]
    LabelMismatch { response: String, matches: usize },
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error(transparent)]
    Tiler(#[from] TilerError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{0}")]
    InvalidInput(String),
}

impl AgentError {
    /// Stage the error arose in, when it came from a backend exchange.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            AgentError::Backend { stage, .. } | AgentError::Parse { stage, .. } => Some(*stage),
            AgentError::UnknownRegionId(_) => Some(Stage::GlobalScreening),
            AgentError::LabelMismatch { .. } => Some(Stage::WsiClassification),
            AgentError::AnswerMissing { .. } => Some(Stage::ReasoningVqa),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub out_res: u32,
    pub max_steps: usize,
    /// `None` uses the crop default.
    pub max_magnification: Option<f64>,
    pub region_size: u32,
    pub overlap: f64,
    pub min_tissue: f64,
    pub tissue_rule: TissueRule,
    pub thumbnail_factor: u32,
    pub temperature: f64,
    /// Temperature for repeated attempts.
    pub attempt_temperature: f64,
    pub attempts: usize,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    pub workers: usize,
    /// Skip regions whose group does not need high magnification.
    pub skip_low_priority: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            out_res: DEFAULT_OUT_RES,
            max_steps: DEFAULT_MAX_STEPS,
            max_magnification: None,
            region_size: DEFAULT_REGION_SIZE,
            overlap: DEFAULT_OVERLAP,
            min_tissue: DEFAULT_MIN_TISSUE,
            tissue_rule: TissueRule::default(),
            thumbnail_factor: THUMBNAIL_FACTOR,
            temperature: crate::backend::EVAL_TEMPERATURE,
            attempt_temperature: crate::backend::SAMPLING_TEMPERATURE,
            attempts: DEFAULT_ATTEMPTS,
            max_tokens: 4096,
            seed: None,
            workers: 4,
            skip_low_priority: false,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidInput(m.to_string()));
        if self.out_res == 0 {
            return bad("out_res must be >= 1");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be >= 1");
        }
        if self.max_magnification.is_some_and(|m| m.is_nan() || m < 1.0) {
            return bad("max_magnification must be >= 1");
        }
        if self.region_size == 0 {
            return bad("region_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad("overlap must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.min_tissue) {
            return bad("min_tissue must be in [0, 1]");
        }
        if self.thumbnail_factor == 0 {
            return bad("thumbnail_factor must be >= 1");
        }
        if !(0.0..=2.0).contains(&self.temperature) || !(0.0..=2.0).contains(&self.attempt_temperature) {
            return bad("temperatures must be in [0, 2]");
        }
        if self.attempts == 0 {
            return bad("attempts must be >= 1");
        }
        if self.workers == 0 {
            return bad("workers must be >= 1");
        }
        Ok(())
    }

    pub fn crop_options(&self) -> CropOptions {
        CropOptions {
            out_res: self.out_res,
            max_magnification: self.max_magnification,
        }
    }
}

/// Runs agent stages against one backend with one prompt pack.
#[derive(Clone)]
pub struct Agent {
    backend: Arc<dyn Backend>,
    prompts: StagePrompts,
    config: AgentConfig,
}

impl Agent {
    pub fn new(backend: Arc<dyn Backend>, prompts: StagePrompts, config: AgentConfig) -> Result<Self, AgentError> {
        config.validate()?;
        Ok(Self {
            backend,
            prompts,
            config,
        })
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    pub fn prompts(&self) -> &StagePrompts {
        &self.prompts
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    fn pool(&self) -> Result<rayon::ThreadPool, AgentError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| AgentError::InvalidInput(format!("cannot start worker pool: {e}")))
    }
}
