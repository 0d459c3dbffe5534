use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Agent stages; the tag doubles as the prompt file stem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    GlobalScreening,
    NavigationPlanning,
    NavigationPlanningVqa,
    Reasoning,
    ReasoningVqa,
    WsiClassification,
    TextOnlyGuess,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GlobalScreening,
        Stage::NavigationPlanning,
        Stage::NavigationPlanningVqa,
        Stage::Reasoning,
        Stage::ReasoningVqa,
        Stage::WsiClassification,
        Stage::TextOnlyGuess,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::GlobalScreening => "global_screening",
            Stage::NavigationPlanning => "navigation_planning",
            Stage::NavigationPlanningVqa => "navigation_planning_vqa",
            Stage::Reasoning => "reasoning",
            Stage::ReasoningVqa => "reasoning_vqa",
            Stage::WsiClassification => "wsi_classification",
            Stage::TextOnlyGuess => "text_only_guess",
        }
    }

    /// Placeholders a template for this stage must contain.
    pub fn required_placeholders(&self) -> &'static [&'static str] {
        match self {
            Stage::GlobalScreening => &["region_ids"],
            Stage::NavigationPlanning => &["max_steps"],
            Stage::NavigationPlanningVqa => &["question", "options", "max_steps"],
            Stage::Reasoning => &["step_count"],
            Stage::ReasoningVqa => &["step_count", "question", "options"],
            Stage::WsiClassification => &["labels", "descriptions"],
            Stage::TextOnlyGuess => &["question", "options"],
        }
    }

    /// Every placeholder the runtime supplies for this stage.
    pub fn supplied_placeholders(&self) -> &'static [&'static str] {
        match self {
            Stage::GlobalScreening => &["region_ids", "schema"],
            Stage::NavigationPlanning => &["max_steps", "schema", "grid_interval"],
            Stage::NavigationPlanningVqa => &["question", "options", "max_steps", "schema", "grid_interval"],
            Stage::Reasoning => &["step_count", "schema"],
            Stage::ReasoningVqa => &["step_count", "question", "options", "schema"],
            Stage::WsiClassification => &["labels", "descriptions"],
            Stage::TextOnlyGuess => &["question", "options"],
        }
    }

    fn builtin(&self) -> &'static str {
        match self {
            Stage::GlobalScreening => include_str!("../../prompts/global_screening.txt"),
            Stage::NavigationPlanning => include_str!("../../prompts/navigation_planning.txt"),
            Stage::NavigationPlanningVqa => include_str!("../../prompts/navigation_planning_vqa.txt"),
            Stage::Reasoning => include_str!("../../prompts/reasoning.txt"),
            Stage::ReasoningVqa => include_str!("../../prompts/reasoning_vqa.txt"),
            Stage::WsiClassification => include_str!("../../prompts/wsi_classification.txt"),
            Stage::TextOnlyGuess => include_str!("../../prompts/text_only_guess.txt"),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("{stage} template lacks placeholder {{{{{name}}}}}")]
    MissingPlaceholder { stage: Stage, name: String },
    #[error("{stage} template uses unknown placeholder {{{{{name}}}}}")]
    UnknownPlaceholder { stage: Stage, name: String },
    #[error("no value for placeholder {{{{{name}}}}} in {stage}")]
    MissingValue { stage: Stage, name: String },
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}").expect("valid regex"))
}

fn placeholders(template: &str) -> BTreeSet<String> {
    placeholder_re()
        .captures_iter(template)
        .map(|c| c[1].to_string())
        .collect()
}

fn check(stage: Stage, template: &str) -> Result<(), PromptError> {
    let used = placeholders(template);
    for name in stage.required_placeholders() {
        if !used.contains(*name) {
            return Err(PromptError::MissingPlaceholder {
                stage,
                name: name.to_string(),
            });
        }
    }
    if let Some(name) = used
        .iter()
        .find(|n| !stage.supplied_placeholders().contains(&n.as_str()))
    {
        return Err(PromptError::UnknownPlaceholder {
            stage,
            name: name.clone(),
        });
    }
    Ok(())
}

/// Text templates with `{{placeholder}}` slots, one per stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePrompts {
    templates: BTreeMap<Stage, String>,
}

impl Default for StagePrompts {
    fn default() -> Self {
        Self::builtin()
    }
}

impl StagePrompts {
    pub fn builtin() -> Self {
        Self {
            templates: Stage::ALL.iter().map(|s| (*s, s.builtin().to_string())).collect(),
        }
    }

    /// Loads `<stage>.txt` files from `dir`; stages without a file keep the
    /// built-in template.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(PromptError::Io {
                path: dir.display().to_string(),
                reason: "not a directory".into(),
            });
        }
        let mut out = Self::builtin();
        for stage in Stage::ALL {
            let path = dir.join(format!("{}.txt", stage.as_str()));
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| PromptError::Io {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })?;
                out.set(stage, text)?;
            }
        }
        Ok(out)
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), PromptError> {
        let dir = dir.as_ref();
        let io = |e: std::io::Error| PromptError::Io {
            path: dir.display().to_string(),
            reason: e.to_string(),
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        for (stage, text) in &self.templates {
            std::fs::write(dir.join(format!("{}.txt", stage.as_str())), text).map_err(io)?;
        }
        Ok(())
    }

    pub fn set(&mut self, stage: Stage, template: impl Into<String>) -> Result<(), PromptError> {
        let template = template.into();
        check(stage, &template)?;
        self.templates.insert(stage, template);
        Ok(())
    }

    pub fn template(&self, stage: Stage) -> &str {
        &self.templates[&stage]
    }

    /// Substitutes `vars` into the stage template. Every placeholder in the
    /// template needs a value; extra values are ignored.
    pub fn render(&self, stage: Stage, vars: &[(&str, &str)]) -> Result<String, PromptError> {
        let template = self.template(stage);
        let mut missing = None;
        let out = placeholder_re().replace_all(template, |c: &regex::Captures<'_>| {
            match vars.iter().find(|(k, _)| *k == &c[1]) {
                Some((_, v)) => v.to_string(),
                None => {
                    missing.get_or_insert_with(|| c[1].to_string());
                    String::new()
                }
            }
        });
        match missing {
            Some(name) => Err(PromptError::MissingValue { stage, name }),
            None => Ok(out.trim_end().to_string()),
        }
    }
}

/// Options as `A. text` lines.
pub fn format_options<S: AsRef<str>>(options: &[S]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let letter = crate::nav_dsl::option_letter(i).unwrap_or('?');
            format!("{letter}. {}", o.as_ref())
        })
        .collect::<Vec<_>>()
        .join("\n")
}
