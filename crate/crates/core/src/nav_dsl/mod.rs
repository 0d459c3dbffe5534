//! Structured outputs exchanged with the model at each stage.
//!
//! Every parser accepts free-form replies: the first JSON object that decodes
//! against the expected shape is used, whether it is bare, wrapped in prose,
//! or inside a Markdown fence. The canonical JSON Schemas live in
//! `schemas/` and are exposed as constants so prompts can embed them.

mod answer;
mod fields;
mod json_extract;
mod plan;
mod reasoning;
mod selection;

use thiserror::Error;

pub use answer::{extract_answer, option_letter, OPTION_LETTERS};
pub use json_extract::json_objects;
pub use plan::{
    canonical_center, canonical_magnification, parse_nav_plan, serialize_nav_plan, NavAction, NavPlan, NavStep,
    AUTO_OVERVIEW_RATIONALE,
};
pub use reasoning::{parse_reasoning_result, ReasoningResult};
pub use selection::{parse_region_selection, RegionGroup, RegionSelection};

pub const REGION_SELECTION_SCHEMA: &str = include_str!("../../schemas/region_selection.schema.json");
pub const NAV_PLAN_SCHEMA: &str = include_str!("../../schemas/nav_plan.schema.json");
pub const REASONING_RESULT_SCHEMA: &str = include_str!("../../schemas/reasoning_result.schema.json");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NavError {
    #[error("no JSON object found in response")]
    NoJsonFound,
    #[error("schema violation at {path}: {reason}")]
    SchemaViolation { path: String, reason: String },
    #[error("region id {0} listed more than once")]
    DuplicateRegionId(u32),
    #[error("step {step}: invalid viewport: {reason}")]
    InvalidViewport { step: usize, reason: String },
    #[error("step {step}: inconsistent action: {reason}")]
    InconsistentAction { step: usize, reason: String },
    #[error("cannot extract answer: {0}")]
    Unparseable(String),
    #[error("option count must be between 2 and 8, got {0}")]
    BadOptionCount(usize),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schemas_are_valid_json() {
        for s in [REGION_SELECTION_SCHEMA, NAV_PLAN_SCHEMA, REASONING_RESULT_SCHEMA] {
            let v: serde_json::Value = serde_json::from_str(s).unwrap();
            assert_eq!(v["type"], "object");
        }
    }
}
