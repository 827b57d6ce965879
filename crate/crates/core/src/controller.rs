//! The orchestrator: reads the query, picks subagents and their reasoning
//! mode, slices the study for each, and runs them in parallel.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    run_subagent, AgentContext, AgentId, AgentReport, AgentTask, ExecMode, TaskKind, TemplateSet, WorkflowTemplate,
    DEFAULT_MAX_STEPS,
};
use crate::geometry::GeometryThresholds;
use crate::labels::{labels_mentioned, phrase_positions};
use crate::model::{Confidence, FindingLabel};
use crate::phantom::CaseStudy;
use crate::toolkit::{Capability, ToolRegistry};
use crate::trace::{Phase, TraceStep};
use crate::verify::Verifier;

pub const ORCHESTRATOR: &str = "orchestrator";

const PROGRESSION_CUES: &[&str] = &[
    "improving",
    "worsening",
    "stable",
    "progression",
    "progressed",
    "changed",
    "change",
    "compare",
    "compared",
    "interval",
];
const REPORT_CUES: &[&str] = &[
    "describe the findings",
    "findings section",
    "write a report",
    "write the report",
    "generate a report",
    "radiology report",
];
const EXISTENCE_CUES: &[&str] = &[
    "is present",
    "are present",
    "is there",
    "are there",
    "is the",
    "are the",
    "evidence of",
    "describe if",
    "presence of",
    "any",
    "do you see",
    "is seen",
    "does the",
];

#[derive(Debug, Error, PartialEq)]
pub enum ControllerError {
    #[error("the tool registry is empty")]
    EmptyRegistry,
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("template `{template}` needs a `{capability}` tool and none is registered")]
    NoCapableTool { template: String, capability: &'static str },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub task_kind: TaskKind,
    pub target_finding: Option<FindingLabel>,
    pub references_prior: bool,
}

impl Query {
    pub fn new(
        text: impl Into<String>,
        task_kind: TaskKind,
        target_finding: Option<FindingLabel>,
        references_prior: bool,
    ) -> Result<Self, ControllerError> {
        let q = Self {
            text: text.into(),
            task_kind,
            target_finding,
            references_prior,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        let needs_target = matches!(self.task_kind, TaskKind::EaVqa | TaskKind::CpVqa);
        if needs_target && self.target_finding.is_none() {
            return Err(ControllerError::InvalidQuery(format!(
                "{} needs a target finding",
                self.task_kind.as_str()
            )));
        }
        if self.task_kind == TaskKind::CpVqa && !self.references_prior {
            return Err(ControllerError::InvalidQuery("cp_vqa needs a prior study".into()));
        }
        Ok(())
    }
}

/// Existence-and-attributes prompt for one finding.
pub fn ea_prompt(label: FindingLabel) -> String {
    format!(
        "Describe if {} is present; if present, describe amount on each side.",
        label.display_name()
    )
}

/// Comparison prompt for one finding against the prior study.
pub fn cp_prompt(label: FindingLabel) -> String {
    format!(
        "Compare the current chest X-ray with the prior study and decide if {} is improving, stable, or worsening.",
        label.display_name()
    )
}

pub fn report_prompt() -> String {
    "Describe the findings in the current chest X-ray, covering the airway, lungs and pleura, heart, diaphragm and everything else.".to_string()
}

fn has_any(lower: &str, cues: &[&str]) -> bool {
    cues.iter().any(|c| !phrase_positions(lower, c).is_empty())
}

/// Rule-based task recognition. Freeform is the fallback.
pub fn classify_query(text: &str, case: &CaseStudy) -> Query {
    let lower = text.to_lowercase();
    let target = labels_mentioned(text).into_iter().find(|l| *l != FindingLabel::NoFinding);
    let has_prior = case.has_prior();
    let (task_kind, target_finding) = if has_prior && target.is_some() && has_any(&lower, PROGRESSION_CUES) {
        (TaskKind::CpVqa, target)
    } else if has_any(&lower, REPORT_CUES) {
        (TaskKind::Report, None)
    } else if target.is_some() && has_any(&lower, EXISTENCE_CUES) {
        (TaskKind::EaVqa, target)
    } else {
        (TaskKind::Freeform, None)
    };
    Query {
        text: text.to_string(),
        task_kind,
        target_finding,
        references_prior: task_kind == TaskKind::CpVqa,
    }
}

/// Agents a free-form question touches: owners of named findings plus
/// keyword matches, in A to E order.
pub fn freeform_agents(text: &str) -> Vec<AgentId> {
    let lower = text.to_lowercase();
    let mut set: BTreeSet<AgentId> = labels_mentioned(text).into_iter().map(AgentId::owner_of).collect();
    for agent in AgentId::ALL {
        if has_any(&lower, agent.keywords()) {
            set.insert(agent);
        }
    }
    if set.is_empty() {
        set.insert(AgentId::EverythingElse);
    }
    set.into_iter().collect()
}

/// What an agent gets to see of the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSlice {
    pub prior: bool,
    pub patient_context: bool,
}

impl ContextSlice {
    pub fn apply(&self, case: &CaseStudy) -> CaseStudy {
        let mut out = if self.prior { case.clone() } else { case.without_prior() };
        if !self.patient_context {
            out = out.without_patient_context();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub agent: AgentId,
    pub exec: ExecMode,
    pub template: Option<WorkflowTemplate>,
    pub task: AgentTask,
    pub slice: ContextSlice,
    /// Why a template-backed agent fell back to ReAct.
    pub degraded: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub query: Query,
    pub assignments: Vec<Assignment>,
    pub rationale: String,
}

impl Plan {
    pub fn selected_agents(&self) -> Vec<AgentId> {
        self.assignments.iter().map(|a| a.agent).collect()
    }

    pub fn assignment(&self, agent: AgentId) -> Option<&Assignment> {
        self.assignments.iter().find(|a| a.agent == agent)
    }

    /// The orchestrate-phase steps of the run's trace.
    pub fn trace_steps(&self) -> Vec<TraceStep> {
        let target = self.query.target_finding.map(|f| f.as_snake()).unwrap_or("none");
        let mut steps = vec![TraceStep::new(
            Phase::Orchestrate,
            ORCHESTRATOR,
            "classify_query",
            format!("task={} target={} | {}", self.query.task_kind.as_str(), target, self.rationale),
            Confidence::ONE,
        )];
        for a in &self.assignments {
            let template = a.template.as_ref().map(|t| t.name.as_str()).unwrap_or("-");
            let mut summary = format!(
                "mode={} template={} prior={}",
                a.exec.as_str(),
                template,
                a.slice.prior
            );
            if let Some(d) = &a.degraded {
                summary.push_str(&format!(" degraded: {d}"));
            }
            steps.push(TraceStep::new(
                Phase::Orchestrate,
                ORCHESTRATOR,
                format!("activate {}", a.agent),
                summary,
                Confidence::ONE,
            ));
        }
        steps
    }
}

fn missing_capability(template: &WorkflowTemplate, registry: &ToolRegistry) -> Option<Capability> {
    template.capabilities().into_iter().find(|c| !registry.has_capability(*c))
}

/// Routing and mode choice. A template for (agent, task, finding) means
/// plan-and-execute; anything else runs ReAct.
pub fn make_plan(query: &Query, registry: &ToolRegistry, templates: &TemplateSet) -> Result<Plan, ControllerError> {
    if registry.is_empty() {
        return Err(ControllerError::EmptyRegistry);
    }
    query.validate()?;
    let agents = match (query.task_kind, query.target_finding) {
        (TaskKind::EaVqa | TaskKind::CpVqa, Some(f)) => vec![AgentId::owner_of(f)],
        (TaskKind::Report, _) => AgentId::ALL.to_vec(),
        _ => freeform_agents(&query.text),
    };
    let slice = ContextSlice {
        prior: query.task_kind == TaskKind::CpVqa,
        patient_context: true,
    };
    let mut assignments = Vec::with_capacity(agents.len());
    for agent in agents {
        let template = query
            .target_finding
            .and_then(|f| templates.find(agent, query.task_kind, f));
        let (exec, template, degraded) = match template {
            Some(t) => match missing_capability(&t, registry) {
                None => (ExecMode::PlanExecute, Some(t), None),
                Some(cap) => {
                    let err = ControllerError::NoCapableTool {
                        template: t.name.clone(),
                        capability: cap.as_str(),
                    };
                    (ExecMode::React, None, Some(err.to_string()))
                }
            },
            None => (ExecMode::React, None, None),
        };
        assignments.push(Assignment {
            agent,
            exec,
            template,
            task: AgentTask {
                kind: query.task_kind,
                text: query.text.clone(),
                finding: query.target_finding,
            },
            slice,
            degraded,
        });
    }
    let rationale = match query.task_kind {
        TaskKind::Report => "report task activates all five agents".to_string(),
        TaskKind::Freeform => "freeform question routed by scope keywords".to_string(),
        _ => format!(
            "{} is in the {} agent's scope",
            query.target_finding.map(|f| f.display_name()).unwrap_or("?"),
            assignments[0].agent.title()
        ),
    };
    Ok(Plan {
        query: query.clone(),
        assignments,
        rationale,
    })
}

/// Everything agents share at run time. Tools are stateless handles.
#[derive(Debug, Clone)]
pub struct AgentRuntime {
    pub tools: ToolRegistry,
    pub templates: TemplateSet,
    pub verifier: Verifier,
    pub thresholds: GeometryThresholds,
    pub max_steps: usize,
}

impl AgentRuntime {
    pub fn new(tools: ToolRegistry) -> Self {
        Self {
            tools,
            templates: TemplateSet::builtin(),
            verifier: Verifier::default(),
            thresholds: GeometryThresholds::default(),
            max_steps: DEFAULT_MAX_STEPS,
        }
    }

    pub fn context(&self, assignment: &Assignment, case: &CaseStudy) -> AgentContext {
        AgentContext {
            agent: assignment.agent,
            task: assignment.task.clone(),
            case: assignment.slice.apply(case),
            tools: self.tools.clone(),
            verifier: self.verifier.clone(),
            thresholds: self.thresholds,
            max_steps: self.max_steps,
        }
    }
}

fn run_assignment(runtime: &AgentRuntime, assignment: &Assignment, case: &CaseStudy) -> AgentReport {
    let ctx = runtime.context(assignment, case);
    let name = assignment.template.as_ref().map(|t| t.name.clone());
    let outcome = catch_unwind(AssertUnwindSafe(|| {
        run_subagent(&ctx, assignment.exec, assignment.template.as_ref())
    }));
    match outcome {
        Ok(Ok(report)) => report,
        Ok(Err(e)) => AgentReport::failed(assignment.agent, assignment.exec, name, e.to_string()),
        Err(_) => AgentReport::failed(assignment.agent, assignment.exec, name, "agent panicked"),
    }
}

/// Runs every assigned agent on its own thread and joins in A to E order.
/// A failing agent yields an uncertain report; the others are unaffected.
pub fn dispatch(plan: &Plan, case: &CaseStudy, runtime: &AgentRuntime) -> Vec<AgentReport> {
    let mut order: Vec<&Assignment> = plan.assignments.iter().collect();
    order.sort_by_key(|a| a.agent);
    std::thread::scope(|s| {
        let handles: Vec<_> = order
            .iter()
            .map(|a| (*a, s.spawn(move || run_assignment(runtime, a, case))))
            .collect();
        handles
            .into_iter()
            .map(|(a, h)| {
                h.join().unwrap_or_else(|_| {
                    let name = a.template.as_ref().map(|t| t.name.clone());
                    AgentReport::failed(a.agent, a.exec, name, "agent thread panicked")
                })
            })
            .collect()
    })
}
