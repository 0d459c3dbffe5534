use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::fields::{as_array, as_number, as_object, as_str, field, violation};
use super::json_extract::json_objects;
use super::NavError;
use crate::slide_model::Viewport;

/// Rationale attached to an overview step the parser had to insert.
pub const AUTO_OVERVIEW_RATIONALE: &str = "auto-inserted overview";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NavAction {
    Overview,
    Move,
    ZoomIn,
    ZoomOut,
}

impl NavAction {
    pub fn as_str(&self) -> &'static str {
        match self {
            NavAction::Overview => "overview",
            NavAction::Move => "move",
            NavAction::ZoomIn => "zoom_in",
            NavAction::ZoomOut => "zoom_out",
        }
    }

    /// Lenient: case-insensitive, `-` and spaces read as `_`.
    pub fn parse(s: &str) -> Option<Self> {
        let norm: String = s
            .trim()
            .chars()
            .map(|c| {
                if c == '-' || c == ' ' {
                    '_'
                } else {
                    c.to_ascii_lowercase()
                }
            })
            .collect();
        match norm.as_str() {
            "overview" => Some(NavAction::Overview),
            "move" => Some(NavAction::Move),
            "zoom_in" | "zoomin" => Some(NavAction::ZoomIn),
            "zoom_out" | "zoomout" => Some(NavAction::ZoomOut),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavStep {
    pub action: NavAction,
    pub viewport: Viewport,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavPlan {
    pub steps: Vec<NavStep>,
    /// The parser prepended an overview step.
    #[serde(default)]
    pub auto_overview: bool,
    /// Steps beyond the runtime's cap were dropped.
    #[serde(default)]
    pub truncated: bool,
}

/// Centers are kept to three decimals.
pub fn canonical_center(x: f64) -> f64 {
    format!("{x:.3}").parse().unwrap_or(x)
}

/// Magnifications are kept to two decimals.
pub fn canonical_magnification(m: f64) -> f64 {
    format!("{m:.2}").parse().unwrap_or(m)
}

impl NavPlan {
    pub fn new(steps: Vec<NavStep>) -> Self {
        Self {
            steps,
            auto_overview: false,
            truncated: false,
        }
    }

    /// Checks viewport ranges and action/magnification consistency.
    pub fn validate(&self) -> Result<(), NavError> {
        if self.steps.is_empty() {
            return Err(violation("steps", "plan has no steps"));
        }
        if self.steps[0].action != NavAction::Overview {
            return Err(NavError::InconsistentAction {
                step: 0,
                reason: "plan must start with an overview".into(),
            });
        }
        for (i, s) in self.steps.iter().enumerate() {
            let v = s.viewport;
            let (cx, cy) = v.center;
            if !v.magnification.is_finite() || v.magnification < 1.0 {
                return Err(NavError::InvalidViewport {
                    step: i,
                    reason: format!("magnification {} is not >= 1", v.magnification),
                });
            }
            if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
                return Err(NavError::InvalidViewport {
                    step: i,
                    reason: format!("center ({cx}, {cy}) outside [0,1]"),
                });
            }
            let inconsistent = |reason: String| NavError::InconsistentAction { step: i, reason };
            if s.action == NavAction::Overview && v.magnification != 1.0 {
                return Err(inconsistent(format!("overview at {}x", v.magnification)));
            }
            if i == 0 {
                continue;
            }
            let prev = self.steps[i - 1].viewport;
            match s.action {
                NavAction::ZoomIn if v.magnification <= prev.magnification => {
                    return Err(inconsistent(format!(
                        "zoom_in from {}x to {}x",
                        prev.magnification, v.magnification
                    )))
                }
                NavAction::ZoomOut if v.magnification >= prev.magnification => {
                    return Err(inconsistent(format!(
                        "zoom_out from {}x to {}x",
                        prev.magnification, v.magnification
                    )))
                }
                NavAction::Move if v.magnification != prev.magnification => {
                    return Err(inconsistent(format!(
                        "move changes magnification {}x -> {}x",
                        prev.magnification, v.magnification
                    )))
                }
                NavAction::Move if v.center == prev.center => {
                    return Err(inconsistent("move keeps the same center".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Keeps at most `max_steps` steps, flagging the plan when it shrinks.
    pub fn truncate(&mut self, max_steps: usize) {
        if self.steps.len() > max_steps {
            self.steps.truncate(max_steps.max(1));
            self.truncated = true;
        }
    }
}

fn decode_step(v: &Value, i: usize) -> Result<NavStep, NavError> {
    let path = format!("steps[{i}]");
    let obj = as_object(v, &path)?;
    let action_s = as_str(field(obj, "action", &path)?, &format!("{path}.action"))?;
    let action = NavAction::parse(action_s)
        .ok_or_else(|| violation(format!("{path}.action"), format!("unknown action {action_s:?}")))?;
    let center_path = format!("{path}.center");
    let center = as_array(field(obj, "center", &path)?, &center_path)?;
    if center.len() != 2 {
        return Err(violation(center_path, "expected [x, y]"));
    }
    let cx = as_number(&center[0], &format!("{center_path}[0]"))?;
    let cy = as_number(&center[1], &format!("{center_path}[1]"))?;
    let m = as_number(field(obj, "magnification", &path)?, &format!("{path}.magnification"))?;
    let rationale = match obj.get("rationale") {
        None | Some(Value::Null) => String::new(),
        Some(r) => as_str(r, &format!("{path}.rationale"))?.to_string(),
    };
    Ok(NavStep {
        action,
        viewport: Viewport::new(canonical_center(cx), canonical_center(cy), canonical_magnification(m)),
        rationale,
    })
}

fn decode(obj: &Map<String, Value>) -> Result<NavPlan, NavError> {
    let steps = as_array(field(obj, "steps", "")?, "steps")?
        .iter()
        .enumerate()
        .map(|(i, v)| decode_step(v, i))
        .collect::<Result<Vec<_>, _>>()?;
    if steps.is_empty() {
        return Err(violation("steps", "plan has no steps"));
    }
    Ok(NavPlan::new(steps))
}

/// Extracts and validates a navigation plan. Coordinates are rounded to the
/// canonical precision before validation. A plan that does not open with an
/// overview gets one prepended and `auto_overview` set.
pub fn parse_nav_plan(text: &str) -> Result<NavPlan, NavError> {
    let objects = json_objects(text);
    let mut first_err = None;
    for obj in &objects {
        match decode(obj) {
            Ok(mut plan) => {
                if plan.steps[0].action != NavAction::Overview {
                    plan.steps.insert(
                        0,
                        NavStep {
                            action: NavAction::Overview,
                            viewport: Viewport::overview(),
                            rationale: AUTO_OVERVIEW_RATIONALE.into(),
                        },
                    );
                    plan.auto_overview = true;
                }
                plan.validate()?;
                return Ok(plan);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    Err(first_err.unwrap_or(NavError::NoJsonFound))
}

/// Canonical compact JSON: keys in fixed order, centers at three decimals,
/// magnifications at two.
pub fn serialize_nav_plan(plan: &NavPlan) -> String {
    let mut out = String::from("{\"steps\":[");
    for (i, s) in plan.steps.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let rationale = serde_json::to_string(&s.rationale).expect("string serializes");
        let _ = write!(
            out,
            "{{\"action\":\"{}\",\"center\":[{:.3},{:.3}],\"magnification\":{:.2},\"rationale\":{}}}",
            s.action.as_str(),
            s.viewport.center.0,
            s.viewport.center.1,
            s.viewport.magnification,
            rationale
        );
    }
    out.push_str("]}");
    out
}
