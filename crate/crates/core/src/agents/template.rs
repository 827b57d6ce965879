//! Workflow templates: ordered, optionally gated steps that a subagent runs in
//! plan-and-execute mode. Templates are TOML documents (`*.wf`), so new
//! workflows need no code changes.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AgentId, ReasoningMode, TaskKind};
use crate::model::{FindingLabel, MeasurementKind};
use crate::toolkit::{Capability, ImageSlot};

const BUILTIN: [(&str, &str); 5] = [
    ("cardiomegaly.wf", include_str!("../../templates/cardiomegaly.wf")),
    ("diaphragm_elevation.wf", include_str!("../../templates/diaphragm_elevation.wf")),
    ("finding_progression.wf", include_str!("../../templates/finding_progression.wf")),
    ("pleural_effusion.wf", include_str!("../../templates/pleural_effusion.wf")),
    ("tracheal_deviation.wf", include_str!("../../templates/tracheal_deviation.wf")),
];

/// Placeholder replaced by the finding's display name in step questions.
pub const FINDING_PLACEHOLDER: &str = "{finding}";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("template `{template}`: {message}")]
    Invalid { template: String, message: String },
    #[error("template `{template}` step `{step}`: gate references `{target}`, which is not an earlier step")]
    StepGateUnsatisfiable {
        template: String,
        step: String,
        target: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Measure,
    Localize,
    Characterize,
    Compare,
    Diagnose,
    VcotAssess,
    VcotValidate,
}

impl StepKind {
    /// The reasoning mode a step exercises; the two visual chain-of-thought
    /// phases are cross-cutting and belong to none.
    pub fn mode(self) -> Option<ReasoningMode> {
        match self {
            StepKind::Measure => Some(ReasoningMode::M1),
            StepKind::Localize => Some(ReasoningMode::M2),
            StepKind::Characterize => Some(ReasoningMode::M3),
            StepKind::Compare => Some(ReasoningMode::M4),
            StepKind::Diagnose => Some(ReasoningMode::M5),
            StepKind::VcotAssess | StepKind::VcotValidate => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::Measure => "measure",
            StepKind::Localize => "localize",
            StepKind::Characterize => "characterize",
            StepKind::Compare => "compare",
            StepKind::Diagnose => "diagnose",
            StepKind::VcotAssess => "vcot_assess",
            StepKind::VcotValidate => "vcot_validate",
        }
    }

    fn needs_tool(self) -> bool {
        matches!(
            self,
            StepKind::Measure | StepKind::Localize | StepKind::Characterize | StepKind::VcotAssess
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateOp {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
}

impl GateOp {
    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            GateOp::Gt => lhs > rhs,
            GateOp::Ge => lhs >= rhs,
            GateOp::Lt => lhs < rhs,
            GateOp::Le => lhs <= rhs,
        }
    }
}

impl fmt::Display for GateOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateOp::Gt => ">",
            GateOp::Ge => ">=",
            GateOp::Lt => "<",
            GateOp::Le => "<=",
        })
    }
}

/// Run the step only if an earlier step's scalar output satisfies `op value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub step: String,
    pub op: GateOp,
    pub value: f64,
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.step, self.op, self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowStep {
    pub id: String,
    pub kind: StepKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_capability: Option<Capability>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurement: Option<MeasurementKind>,
    #[serde(default)]
    pub slot: ImageSlot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<Gate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowTemplate {
    pub name: String,
    /// `None` means the agent whose scope covers the finding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner: Option<AgentId>,
    pub task: TaskKind,
    /// `None` means the template is generic and instantiated per finding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finding: Option<FindingLabel>,
    pub modes_used: BTreeSet<ReasoningMode>,
    pub steps: Vec<WorkflowStep>,
}

impl WorkflowTemplate {
    pub fn parse(text: &str, origin: &str) -> Result<Self, TemplateError> {
        let t: WorkflowTemplate = toml::from_str(text).map_err(|e| TemplateError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path).map_err(|source| TemplateError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    fn invalid(&self, message: impl Into<String>) -> TemplateError {
        TemplateError::Invalid {
            template: self.name.clone(),
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        if self.steps.is_empty() {
            return Err(self.invalid("no steps"));
        }
        let mut seen: Vec<&str> = Vec::new();
        let mut assessed = false;
        for step in &self.steps {
            if seen.contains(&step.id.as_str()) {
                return Err(self.invalid(format!("duplicate step id `{}`", step.id)));
            }
            if step.kind.needs_tool() && step.tool_capability.is_none() {
                return Err(self.invalid(format!("{} step `{}` names no tool capability", step.kind.as_str(), step.id)));
            }
            match step.kind {
                StepKind::Measure if step.measurement.is_none() => {
                    return Err(self.invalid(format!("measure step `{}` names no measurement", step.id)));
                }
                StepKind::VcotAssess => assessed = true,
                StepKind::VcotValidate if !assessed => {
                    return Err(self.invalid(format!("`{}` validates before any vcot_assess", step.id)));
                }
                StepKind::Compare
                    if step.inputs.len() != 2 || step.inputs.iter().any(|i| !seen.contains(&i.as_str())) =>
                {
                    return Err(self.invalid(format!("compare step `{}` needs two earlier inputs", step.id)));
                }
                _ => {}
            }
            if let Some(gate) = &step.gate {
                if !seen.contains(&gate.step.as_str()) {
                    return Err(TemplateError::StepGateUnsatisfiable {
                        template: self.name.clone(),
                        step: step.id.clone(),
                        target: gate.step.clone(),
                    });
                }
            }
            seen.push(&step.id);
        }
        let exercised: BTreeSet<ReasoningMode> = self.steps.iter().filter_map(|s| s.kind.mode()).collect();
        if exercised != self.modes_used {
            return Err(self.invalid(format!(
                "modes_used {:?} but steps exercise {:?}",
                self.modes_used, exercised
            )));
        }
        if self.task == TaskKind::EaVqa && self.finding.is_none() {
            return Err(self.invalid("existence templates must name their finding"));
        }
        Ok(())
    }

    pub fn capabilities(&self) -> BTreeSet<Capability> {
        let mut caps: BTreeSet<Capability> = self.steps.iter().filter_map(|s| s.tool_capability).collect();
        if self.steps.iter().any(|s| s.kind == StepKind::Measure) {
            caps.insert(Capability::Segment);
        }
        caps
    }

    /// Binds a generic template to `finding` and resolves its owner.
    pub fn instantiate(&self, finding: FindingLabel) -> WorkflowTemplate {
        let mut t = self.clone();
        t.finding = Some(finding);
        t.owner = Some(t.owner.unwrap_or_else(|| AgentId::owner_of(finding)));
        for step in &mut t.steps {
            if let Some(q) = &mut step.question {
                *q = q.replace(FINDING_PLACEHOLDER, finding.display_name());
            }
        }
        t
    }

    pub fn applies_to(&self, task: TaskKind, finding: FindingLabel) -> bool {
        self.task == task && self.finding.is_none_or(|f| f == finding)
    }
}

/// The templates an orchestrator can choose from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TemplateSet {
    templates: Vec<WorkflowTemplate>,
}

impl TemplateSet {
    pub fn new(templates: Vec<WorkflowTemplate>) -> Self {
        Self { templates }
    }

    /// The five shipped templates.
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(name, text)| WorkflowTemplate::parse(text, name).expect("shipped templates are valid"))
            .collect();
        Self { templates }
    }

    /// Every `*.wf` file in `dir`, sorted by file name.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let entries = std::fs::read_dir(dir).map_err(|source| TemplateError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "wf"))
            .collect();
        paths.sort();
        let templates = paths.iter().map(|p| WorkflowTemplate::load(p)).collect::<Result<_, _>>()?;
        Ok(Self { templates })
    }

    pub fn iter(&self) -> impl Iterator<Item = &WorkflowTemplate> {
        self.templates.iter()
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&WorkflowTemplate> {
        self.templates.iter().find(|t| t.name == name)
    }

    /// The instantiated template for `(task, finding)` owned by `agent`.
    /// Finding-specific templates win over generic ones.
    pub fn find(&self, agent: AgentId, task: TaskKind, finding: FindingLabel) -> Option<WorkflowTemplate> {
        let mut candidates: Vec<&WorkflowTemplate> = self.templates.iter().filter(|t| t.applies_to(task, finding)).collect();
        candidates.sort_by_key(|t| t.finding.is_none());
        candidates
            .into_iter()
            .map(|t| t.instantiate(finding))
            .find(|t| t.owner == Some(agent))
    }
}
