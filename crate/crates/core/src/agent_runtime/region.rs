use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::TranscriptEntry;
use crate::backend::{ChatMessage, MessagePart};
use crate::dataset_io::VqaRecord;
use crate::nav_dsl::{
    extract_answer, parse_nav_plan, parse_reasoning_result, NavPlan, ReasoningResult, NAV_PLAN_SCHEMA,
    REASONING_RESULT_SCHEMA,
};
use crate::slide_model::{
    annotate_grid, crop_viewport_with, CropOptions, RegionImage, SlideError, ViewImage, ViewRecord, Viewport,
    GRID_INTERVAL,
};

use super::{format_options, Agent, AgentError, Conversation, Stage};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegionMode {
    Describe,
    Vqa(VqaRecord),
}

impl RegionMode {
    fn question(&self) -> Option<&VqaRecord> {
        match self {
            RegionMode::Describe => None,
            RegionMode::Vqa(r) => Some(r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    /// The reply's `answer_index` field.
    Structured,
    /// Recovered from the conclusion text.
    Extracted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningOutcome {
    pub result: ReasoningResult,
    pub answer_index: Option<usize>,
    pub answer_source: Option<AnswerSource>,
}

/// Wall-clock per stage; kept out of serialized reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionTimings {
    pub planning_ms: u64,
    pub execution_ms: u64,
    pub reasoning_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub region_id: u32,
    pub slide_id: String,
    pub record_id: Option<String>,
    pub plan: NavPlan,
    pub views: Vec<ViewRecord>,
    pub reasoning: ReasoningResult,
    pub answer_index: Option<usize>,
    pub answer_source: Option<AnswerSource>,
    #[serde(skip)]
    pub timings: RegionTimings,
}

/// Everything one region conversation produced, including partial output
/// when a stage failed.
#[derive(Debug)]
pub struct RegionRun {
    pub region_id: u32,
    pub conversation_id: String,
    pub attempt: Option<usize>,
    pub plan: Option<NavPlan>,
    pub views: Vec<ViewImage>,
    pub transcript: Vec<TranscriptEntry>,
    pub result: Result<RegionReport, AgentError>,
}

/// Renders one view per plan step, in order.
pub fn execute_plan(region: &RegionImage, plan: &NavPlan, opts: &CropOptions) -> Result<Vec<ViewImage>, SlideError> {
    plan.steps
        .iter()
        .enumerate()
        .map(|(k, step)| {
            let mut v = crop_viewport_with(region, step.viewport, opts)?;
            v.step_index = Some(k);
            Ok(v)
        })
        .collect()
}

fn ms(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

fn step_caption(k: usize, n: usize, plan: &NavPlan, view: &ViewImage) -> String {
    let step = &plan.steps[k];
    let v = view.viewport;
    let mut s = format!(
        "Step {}/{n}: {} at center ({:.3}, {:.3}), magnification {:.2}x.",
        k + 1,
        step.action.as_str(),
        v.center.0,
        v.center.1,
        v.magnification
    );
    if view.clamp.any() {
        let r = view.requested;
        s.push_str(&format!(
            " Adjusted from center ({:.3}, {:.3}), magnification {:.2}x to stay inside the region.",
            r.center.0, r.center.1, r.magnification
        ));
    }
    if !step.rationale.is_empty() {
        s.push_str(" Rationale: ");
        s.push_str(&step.rationale);
    }
    s
}

fn strip_images(msg: &ChatMessage, first_step: usize) -> ChatMessage {
    let mut k = first_step;
    ChatMessage {
        role: msg.role,
        parts: msg
            .parts
            .iter()
            .map(|p| match p {
                MessagePart::Image(_) => {
                    k += 1;
                    MessagePart::Text(format!("[view for step {k} was shown earlier]"))
                }
                other => other.clone(),
            })
            .collect(),
    }
}

impl Agent {
    pub(crate) fn conversation(&self, id: impl Into<String>, temperature: f64, seed: Option<u64>) -> Conversation {
        Conversation::new(id, temperature, self.config.max_tokens, seed)
    }

    /// Default conversation id for a region run.
    pub fn region_conversation_id(region: &RegionImage, mode: &RegionMode) -> String {
        match mode {
            RegionMode::Describe => format!("{}/region_{}", region.slide_id, region.region_id),
            RegionMode::Vqa(r) => format!("vqa/{}", r.record_id),
        }
    }

    /// Sends the gridded 1× overview and parses the returned plan, truncated
    /// to `max_steps`.
    pub fn run_navigation_planning(
        &self,
        region: &RegionImage,
        question: Option<&VqaRecord>,
        conv: &mut Conversation,
    ) -> Result<NavPlan, AgentError> {
        let overview = crop_viewport_with(region, Viewport::overview(), &self.config.crop_options())?;
        let gridded = annotate_grid(&overview.pixels, GRID_INTERVAL);
        let max_steps = self.config.max_steps.to_string();
        let interval = GRID_INTERVAL.to_string();
        let (stage, text) = match question {
            None => (
                Stage::NavigationPlanning,
                self.prompts.render(
                    Stage::NavigationPlanning,
                    &[
                        ("max_steps", &max_steps),
                        ("schema", NAV_PLAN_SCHEMA),
                        ("grid_interval", &interval),
                    ],
                )?,
            ),
            Some(q) => {
                let options = format_options(&q.options);
                (
                    Stage::NavigationPlanningVqa,
                    self.prompts.render(
                        Stage::NavigationPlanningVqa,
                        &[
                            ("question", &q.question),
                            ("options", &options),
                            ("max_steps", &max_steps),
                            ("schema", NAV_PLAN_SCHEMA),
                            ("grid_interval", &interval),
                        ],
                    )?,
                )
            }
        };
        let msg = ChatMessage::user(vec![MessagePart::Text(text), MessagePart::Image(Arc::new(gridded))]);
        let reply = conv
            .send(self.backend(), stage, vec![msg])
            .map_err(|source| AgentError::Backend { stage, source })?;
        match parse_nav_plan(&reply) {
            Ok(mut plan) => {
                let n = plan.steps.len();
                plan.truncate(self.config.max_steps);
                conv.mark(if plan.truncated {
                    format!("parsed; truncated {n} steps to {}", plan.steps.len())
                } else {
                    "parsed".to_string()
                });
                Ok(plan)
            }
            Err(source) => {
                conv.mark(format!("parse error: {source}"));
                Err(AgentError::Parse { stage, source })
            }
        }
    }

    pub fn execute_plan(&self, region: &RegionImage, plan: &NavPlan) -> Result<Vec<ViewImage>, AgentError> {
        Ok(execute_plan(region, plan, &self.config.crop_options())?)
    }

    /// Sends the views with per-step captions and parses the reasoning.
    /// Views beyond the backend's image limit go out in consecutive calls of
    /// the same conversation; earlier images are then replaced by text
    /// placeholders so every call stays within the limit.
    pub fn run_reasoning(
        &self,
        views: &[ViewImage],
        plan: &NavPlan,
        question: Option<&VqaRecord>,
        conv: &mut Conversation,
    ) -> Result<ReasoningOutcome, AgentError> {
        if views.is_empty() || views.len() != plan.steps.len() {
            return Err(AgentError::InvalidInput(format!(
                "{} views for a {}-step plan",
                views.len(),
                plan.steps.len()
            )));
        }
        let n = views.len();
        let step_count = n.to_string();
        let (stage, header) = match question {
            None => (
                Stage::Reasoning,
                self.prompts.render(
                    Stage::Reasoning,
                    &[("step_count", &step_count), ("schema", REASONING_RESULT_SCHEMA)],
                )?,
            ),
            Some(q) => {
                let options = format_options(&q.options);
                (
                    Stage::ReasoningVqa,
                    self.prompts.render(
                        Stage::ReasoningVqa,
                        &[
                            ("step_count", &step_count),
                            ("question", &q.question),
                            ("options", &options),
                            ("schema", REASONING_RESULT_SCHEMA),
                        ],
                    )?,
                )
            }
        };

        let per_call = self.backend().max_images_per_request().max(1);
        let batches: Vec<(usize, &[ViewImage])> = views
            .chunks(per_call)
            .enumerate()
            .map(|(i, c)| (i * per_call, c))
            .collect();
        let mut history: Vec<ChatMessage> = Vec::new();
        let mut reply = String::new();
        for (bi, &(start, chunk)) in batches.iter().enumerate() {
            let mut parts = Vec::new();
            if bi == 0 {
                parts.push(MessagePart::Text(header.clone()));
            }
            for (j, view) in chunk.iter().enumerate() {
                parts.push(MessagePart::Text(step_caption(start + j, n, plan, view)));
                parts.push(MessagePart::Image(Arc::new(view.pixels.clone())));
            }
            if batches.len() > 1 {
                let (a, b) = (start + 1, start + chunk.len());
                parts.push(MessagePart::Text(if bi + 1 < batches.len() {
                    format!("Views {a} to {b} of {n} are shown above and more follow. For now reply only with short notes on these views.")
                } else {
                    format!("Views {a} to {b} of {n} are shown above; that completes the path. Now reply as first instructed, covering all {n} views.")
                }));
            }
            let msg = ChatMessage::user(parts);
            let mut request = history.clone();
            request.push(msg.clone());
            reply = conv
                .send(self.backend(), stage, request)
                .map_err(|source| AgentError::Backend { stage, source })?;
            history.push(strip_images(&msg, start));
            history.push(ChatMessage::assistant(reply.clone()));
            if bi + 1 < batches.len() {
                conv.mark("continued");
            }
        }

        let n_options = question.map(|q| q.options.len());
        let result = match parse_reasoning_result(&reply, n, n_options) {
            Ok(r) => r,
            Err(source) => {
                conv.mark(format!("parse error: {source}"));
                return Err(AgentError::Parse { stage, source });
            }
        };
        let (answer_index, answer_source) = match question {
            None => (None, None),
            Some(_) if result.answer_index.is_some() => (result.answer_index, Some(AnswerSource::Structured)),
            Some(q) => match extract_answer(&result.conclusion, &q.options) {
                Ok(i) => (Some(i), Some(AnswerSource::Extracted)),
                Err(e) => {
                    conv.mark(format!("answer missing: {e}"));
                    return Err(AgentError::AnswerMissing {
                        reason: e.to_string(),
                        conclusion: result.conclusion,
                    });
                }
            },
        };
        conv.mark("parsed");
        Ok(ReasoningOutcome {
            result,
            answer_index,
            answer_source,
        })
    }

    /// Planning, view rendering and reasoning for one region in its own
    /// conversation.
    pub fn run_region(&self, region: &RegionImage, mode: &RegionMode) -> RegionRun {
        let id = Self::region_conversation_id(region, mode);
        let conv = self.conversation(id, self.config.temperature, self.config.seed);
        self.run_region_in(region, mode, conv, None)
    }

    /// Repeats `run_region` `n` times at the attempt temperature; attempt `i`
    /// uses seed `seed + i` and its own conversation.
    pub fn run_region_attempts(
        &self,
        region: &RegionImage,
        mode: &RegionMode,
        n: usize,
    ) -> Result<Vec<RegionRun>, AgentError> {
        use rayon::prelude::*;
        let base = Self::region_conversation_id(region, mode);
        let pool = self.pool()?;
        Ok(pool.install(|| {
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let conv = self.conversation(
                        format!("{base}/attempt_{i}"),
                        self.config.attempt_temperature,
                        self.config.seed.map(|s| s.wrapping_add(i as u64)),
                    );
                    self.run_region_in(region, mode, conv, Some(i))
                })
                .collect()
        }))
    }

    pub(crate) fn run_region_in(
        &self,
        region: &RegionImage,
        mode: &RegionMode,
        mut conv: Conversation,
        attempt: Option<usize>,
    ) -> RegionRun {
        let mut run = RegionRun {
            region_id: region.region_id,
            conversation_id: conv.id.clone(),
            attempt,
            plan: None,
            views: Vec::new(),
            transcript: Vec::new(),
            result: Err(AgentError::InvalidInput("not started".into())),
        };
        let question = mode.question();
        let mut timings = RegionTimings::default();

        let t = Instant::now();
        let plan = self.run_navigation_planning(region, question, &mut conv);
        timings.planning_ms = ms(t);
        let plan = match plan {
            Ok(p) => p,
            Err(e) => {
                run.transcript = conv.transcript;
                run.result = Err(e);
                return run;
            }
        };
        run.plan = Some(plan.clone());

        let t = Instant::now();
        match self.execute_plan(region, &plan) {
            Ok(v) => run.views = v,
            Err(e) => {
                run.transcript = conv.transcript;
                run.result = Err(e);
                return run;
            }
        }
        timings.execution_ms = ms(t);

        let t = Instant::now();
        let reasoning = self.run_reasoning(&run.views, &plan, question, &mut conv);
        timings.reasoning_ms = ms(t);
        run.transcript = conv.transcript;
        run.result = reasoning.map(|r| RegionReport {
            region_id: region.region_id,
            slide_id: region.slide_id.clone(),
            record_id: question.map(|q| q.record_id.clone()),
            views: run.views.iter().map(ViewImage::record).collect(),
            plan,
            reasoning: r.result,
            answer_index: r.answer_index,
            answer_source: r.answer_source,
            timings,
        });
        run
    }
}
