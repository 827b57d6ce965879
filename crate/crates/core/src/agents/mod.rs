//! The five ABCDE subagents: scopes, isolated contexts, reports, and the two
//! execution engines (plan-and-execute over a workflow template, and a ReAct
//! loop when no template applies).

pub mod execute;
pub mod react;
pub mod template;
pub mod vcot;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GeometryThresholds;
use crate::labels::{extract_labels, Mention};
use crate::model::{BBox, Confidence, Finding, FindingLabel, Laterality, Measurement, Polarity, Progression};
use crate::phantom::CaseStudy;
use crate::toolkit::{Payload, ToolError, ToolOutput, ToolRegistry, ToolRequest};
use crate::trace::{Phase, TraceStep};
use crate::verify::{Decision, Verdict, Verifier};

pub use execute::plan_and_execute;
pub use react::{react_loop, Action, ActionPolicy, Observation, ReactState, RulePolicy};
pub use template::{Gate, GateOp, StepKind, TemplateError, TemplateSet, WorkflowStep, WorkflowTemplate};
pub use vcot::{vcot_two_phase, Opinion, ValidationVerdict, VcotResult};

pub const DEFAULT_MAX_STEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentId {
    Airway,
    Breathing,
    Circulation,
    Diaphragm,
    EverythingElse,
}

impl AgentId {
    /// Join order for reports.
    pub const ALL: [AgentId; 5] = [
        AgentId::Airway,
        AgentId::Breathing,
        AgentId::Circulation,
        AgentId::Diaphragm,
        AgentId::EverythingElse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentId::Airway => "airway",
            AgentId::Breathing => "breathing",
            AgentId::Circulation => "circulation",
            AgentId::Diaphragm => "diaphragm",
            AgentId::EverythingElse => "everything_else",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            AgentId::Airway => "Airway",
            AgentId::Breathing => "Breathing",
            AgentId::Circulation => "Circulation",
            AgentId::Diaphragm => "Diaphragm",
            AgentId::EverythingElse => "Everything else",
        }
    }

    /// Findings this agent reports on.
    pub fn scope(self) -> &'static [FindingLabel] {
        use FindingLabel::*;
        match self {
            AgentId::Airway => &[TrachealDeviation],
            AgentId::Breathing => &[
                Atelectasis,
                Consolidation,
                Edema,
                LungOpacity,
                PleuralEffusion,
                Pneumothorax,
                Pneumonia,
                LungLesion,
                PleuralOther,
            ],
            AgentId::Circulation => &[Cardiomegaly, EnlargedCardiomediastinum],
            AgentId::Diaphragm => &[DiaphragmElevation],
            AgentId::EverythingElse => &[SupportDevices, Fracture],
        }
    }

    /// The agent whose scope covers `label`. "No finding" is a summary
    /// rather than a finding and falls to the catch-all agent.
    pub fn owner_of(label: FindingLabel) -> AgentId {
        AgentId::ALL
            .into_iter()
            .find(|a| a.scope().contains(&label))
            .unwrap_or(AgentId::EverythingElse)
    }

    /// Words that pull a free-form question into this agent's scope.
    pub fn keywords(self) -> &'static [&'static str] {
        match self {
            AgentId::Airway => &["trachea", "tracheal", "airway", "bronchus", "carina"],
            AgentId::Breathing => &["lung", "lungs", "pleura", "pleural", "opacity", "breathing"],
            AgentId::Circulation => &["heart", "cardiac", "mediastinum", "mediastinal", "aorta", "silhouette"],
            AgentId::Diaphragm => &["diaphragm", "hemidiaphragm", "costophrenic", "subdiaphragmatic"],
            AgentId::EverythingElse => &["bone", "bones", "rib", "ribs", "clavicle", "device", "devices", "tube", "line", "soft tissue", "fracture"],
        }
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgentId::ALL
            .into_iter()
            .find(|a| a.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| format!("unknown agent `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ReasoningMode {
    M1,
    M2,
    M3,
    M4,
    M5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    EaVqa,
    CpVqa,
    Report,
    Freeform,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::EaVqa => "ea_vqa",
            TaskKind::CpVqa => "cp_vqa",
            TaskKind::Report => "report",
            TaskKind::Freeform => "freeform",
        }
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ea" | "ea_vqa" => Ok(TaskKind::EaVqa),
            "cp" | "cp_vqa" => Ok(TaskKind::CpVqa),
            "report" => Ok(TaskKind::Report),
            "freeform" => Ok(TaskKind::Freeform),
            other => Err(format!("unknown task `{other}` (expected ea, cp, report or freeform)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    React,
    PlanExecute,
}

impl ExecMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecMode::React => "react",
            ExecMode::PlanExecute => "plan_execute",
        }
    }
}

/// What the orchestrator asked this agent to do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTask {
    pub kind: TaskKind,
    pub text: String,
    pub finding: Option<FindingLabel>,
}

impl AgentTask {
    /// Labels the agent should conclude on.
    pub fn focus(&self, agent: AgentId) -> Vec<FindingLabel> {
        match (self.kind, self.finding) {
            (TaskKind::EaVqa | TaskKind::CpVqa, Some(f)) => vec![f],
            _ => agent.scope().to_vec(),
        }
    }
}

/// A subagent's compartment: its task, the study slice it was allotted, and
/// shared (stateless) tool handles. It holds no other agent's observations.
#[derive(Debug, Clone)]
pub struct AgentContext {
    pub agent: AgentId,
    pub task: AgentTask,
    pub case: CaseStudy,
    pub tools: ToolRegistry,
    pub verifier: Verifier,
    pub thresholds: GeometryThresholds,
    pub max_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimKind {
    Label,
    Measurement,
}

/// One source's statement about a finding; the synthesizer looks for
/// disagreement among these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub label: FindingLabel,
    pub polarity: Polarity,
    pub laterality: Laterality,
    pub confidence: Confidence,
    pub source: String,
    pub kind: ClaimKind,
    pub evidence: Option<usize>,
}

/// A tool call as the agent saw it. Masks and patches are summarized, not kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub id: String,
    pub step: String,
    pub tool_id: String,
    pub request: String,
    pub summary: String,
    pub confidence: Confidence,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportedFinding {
    pub finding: Finding,
    /// Indices into the report's evidence list.
    pub evidence: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    Complete,
    Uncertain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StepOutcome {
    Executed,
    Skipped { reason: String },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub id: String,
    pub kind: String,
    #[serde(flatten)]
    pub outcome: StepOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressionCall {
    pub progression: Progression,
    pub ratio: Option<f64>,
    pub confidence: Confidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentReport {
    pub agent: AgentId,
    pub exec: ExecMode,
    pub template: Option<String>,
    pub findings: Vec<ReportedFinding>,
    pub measurements: Vec<Measurement>,
    pub evidence: Vec<Evidence>,
    pub claims: Vec<Claim>,
    pub vcot: Option<VcotResult>,
    pub progression: Option<ProgressionCall>,
    pub steps: Vec<StepRecord>,
    pub modes_exercised: BTreeSet<ReasoningMode>,
    pub status: ReportStatus,
    pub reason: Option<String>,
    /// Free-text answer for questions outside the structured tasks.
    pub answer_text: Option<String>,
    pub trace_fragment: Vec<TraceStep>,
}

impl AgentReport {
    pub fn new(agent: AgentId, exec: ExecMode, template: Option<String>) -> Self {
        Self {
            agent,
            exec,
            template,
            findings: Vec::new(),
            measurements: Vec::new(),
            evidence: Vec::new(),
            claims: Vec::new(),
            vcot: None,
            progression: None,
            steps: Vec::new(),
            modes_exercised: BTreeSet::new(),
            status: ReportStatus::Complete,
            reason: None,
            answer_text: None,
            trace_fragment: Vec::new(),
        }
    }

    /// A report for an agent that could not run at all.
    pub fn failed(agent: AgentId, exec: ExecMode, template: Option<String>, reason: impl Into<String>) -> Self {
        let mut r = Self::new(agent, exec, template);
        r.status = ReportStatus::Uncertain;
        r.reason = Some(reason.into());
        r
    }

    pub fn finding(&self, label: FindingLabel) -> Option<&Finding> {
        self.findings.iter().map(|f| &f.finding).find(|f| f.label == label)
    }

    /// Identifiers of everything this agent observed.
    pub fn observation_ids(&self) -> BTreeSet<&str> {
        self.evidence.iter().map(|e| e.id.as_str()).collect()
    }

    pub fn tool_calls(&self) -> usize {
        self.trace_fragment.iter().filter(|s| s.phase == Phase::ToolCall).count()
    }

    /// Drops conclusions after a tool failure, keeping the evidence trail.
    fn abort(&mut self, reason: String) {
        self.findings.clear();
        self.claims.clear();
        self.progression = None;
        self.status = ReportStatus::Uncertain;
        self.reason = Some(reason);
    }
}

/// Context isolation on finished reports: no two agents share an
/// observation, and every fragment step is attributed to its own agent.
pub fn isolation_holds(reports: &[AgentReport]) -> bool {
    let own_steps = reports
        .iter()
        .all(|r| r.trace_fragment.iter().all(|s| s.agent_id == r.agent.as_str()));
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let disjoint = reports
        .iter()
        .all(|r| r.observation_ids().into_iter().all(|id| seen.insert(id)));
    own_steps && disjoint
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("plan-and-execute requires a workflow template")]
    TemplateRequired,
    #[error("template `{template}` belongs to {owner:?}, not {agent}")]
    WrongOwner {
        template: String,
        owner: Option<AgentId>,
        agent: AgentId,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Tool(#[from] ToolError),
}

/// Runs one subagent with the engine the plan chose.
pub fn run_subagent(ctx: &AgentContext, exec: ExecMode, template: Option<&WorkflowTemplate>) -> Result<AgentReport, AgentError> {
    match exec {
        ExecMode::PlanExecute => {
            let t = template.ok_or(AgentError::TemplateRequired)?;
            if t.owner != Some(ctx.agent) {
                return Err(AgentError::WrongOwner {
                    template: t.name.clone(),
                    owner: t.owner,
                    agent: ctx.agent,
                });
            }
            plan_and_execute(t, ctx)
        }
        ExecMode::React => Ok(react_loop(ctx, &mut RulePolicy, ctx.max_steps)),
    }
}

/// A successful, verified tool call.
pub(crate) struct Call {
    pub index: usize,
    pub output: ToolOutput,
    pub verdict: Verdict,
}

impl Call {
    pub fn usable(&self) -> bool {
        self.verdict.decision != Decision::Reject
    }
}

/// Bookkeeping shared by both engines: invoke, trace, verify, record.
pub(crate) struct Session<'a> {
    pub ctx: &'a AgentContext,
    pub report: AgentReport,
}

impl<'a> Session<'a> {
    pub fn new(ctx: &'a AgentContext, exec: ExecMode, template: Option<String>) -> Self {
        Self {
            ctx,
            report: AgentReport::new(ctx.agent, exec, template),
        }
    }

    fn step(&mut self, phase: Phase, action: impl Into<String>, observation: impl Into<String>, confidence: Confidence) {
        self.report
            .trace_fragment
            .push(TraceStep::new(phase, self.ctx.agent.as_str(), action, observation, confidence));
    }

    pub fn note(&mut self, action: impl Into<String>, observation: impl Into<String>) {
        self.step(Phase::Verify, action, observation, Confidence::ONE);
    }

    /// Invokes the cheapest capable tool, then verifies its output.
    pub fn call(&mut self, step: &str, tag: &str, request: ToolRequest) -> Result<Call, ToolError> {
        let described = request.describe();
        let output = match self.ctx.tools.invoke_first(&request, &self.ctx.case) {
            Ok(o) => o,
            Err(e) => {
                let tried = self.ctx.tools.lookup(request.capability()).last().map(|c| c.tool_id.clone());
                if let Some(tool_id) = tried {
                    self.step(Phase::ToolCall, tool_id, format!("{described} [{tag}] -> error: {e}"), Confidence::ZERO);
                }
                return Err(e);
            }
        };
        self.step(
            Phase::ToolCall,
            output.tool_id.clone(),
            format!("{described} [{tag}] -> {}", output.summary()),
            output.confidence,
        );
        let verdict = self.ctx.verifier.verify(&output, &request, &self.ctx.case);
        self.step(
            Phase::Verify,
            format!("verify {}", output.tool_id),
            format!("{:?} ({:?}): {}", verdict.decision, verdict.checked_by, verdict.reason).to_lowercase(),
            output.confidence,
        );
        let index = self.report.evidence.len();
        let boxes = match &output.payload {
            Payload::Boxes(b) => b.clone(),
            _ => Vec::new(),
        };
        self.report.evidence.push(Evidence {
            id: format!("{}#{}:{}", self.ctx.agent.as_str(), index, output.tool_id),
            step: step.to_string(),
            tool_id: output.tool_id.clone(),
            request: described,
            summary: output.summary(),
            confidence: output.confidence,
            verdict: verdict.clone(),
            boxes,
        });
        Ok(Call { index, output, verdict })
    }

    pub fn record(&mut self, id: &str, kind: &str, outcome: StepOutcome) {
        self.report.steps.push(StepRecord {
            id: id.to_string(),
            kind: kind.to_string(),
            outcome,
        });
    }

    pub fn claim(&mut self, label: FindingLabel, polarity: Polarity, laterality: Laterality, call: &Call, kind: ClaimKind) {
        self.report.claims.push(Claim {
            label,
            polarity,
            laterality,
            confidence: call.output.confidence,
            source: call.output.tool_id.clone(),
            kind,
            evidence: Some(call.index),
        });
    }

    pub fn fail(mut self, reason: String) -> AgentReport {
        self.report.abort(reason);
        self.report
    }
}

/// Patient side of a set of boxes: the image's left half is the patient's right.
pub fn side_of_boxes(boxes: &[BBox], image_width: u32) -> Laterality {
    let mid = image_width as f64 / 2.0;
    let right = boxes.iter().any(|b| b.center_col() < mid);
    let left = boxes.iter().any(|b| b.center_col() >= mid);
    match (right, left) {
        (true, true) => Laterality::Bilateral,
        (true, false) => Laterality::Right,
        (false, true) => Laterality::Left,
        (false, false) => Laterality::None,
    }
}

/// Descriptor vocabulary recognized in free-text answers.
pub const DESCRIPTORS: [&str; 10] = [
    "mild",
    "moderate",
    "severe",
    "alveolar",
    "interstitial",
    "nodular",
    "upper",
    "lower",
    "toward patient left",
    "toward patient right",
];

/// Vocabulary descriptors found in `text`, in vocabulary order.
pub fn descriptors(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
    let joined = format!(" {} ", words.join(" "));
    DESCRIPTORS
        .iter()
        .filter(|d| joined.contains(&format!(" {d} ")))
        .map(|d| d.to_string())
        .collect()
}

/// Side words in free text, for findings that name their side in prose.
pub fn side_in_text(text: &str) -> Laterality {
    let lower = text.to_lowercase();
    let has = |w: &str| lower.split(|c: char| !c.is_alphanumeric()).any(|t| t == w);
    if has("bilateral") || has("bilaterally") {
        return Laterality::Bilateral;
    }
    match (has("right"), has("left")) {
        (true, true) => Laterality::Bilateral,
        (true, false) => Laterality::Right,
        (false, true) => Laterality::Left,
        (false, false) => Laterality::None,
    }
}

/// Polarity of `label` as stated in `text`, if the text commits either way.
pub fn polarity_in_text(text: &str, label: FindingLabel) -> Option<Polarity> {
    match extract_labels(text).get(label) {
        Mention::Positive => Some(Polarity::Present),
        Mention::Negative => Some(Polarity::Absent),
        Mention::Uncertain => Some(Polarity::Uncertain),
        Mention::NotMentioned => None,
    }
}

/// Builds a finding that satisfies the laterality invariant: a present
/// lateral finding with no observed side is reported bilateral.
pub fn make_finding(
    label: FindingLabel,
    polarity: Polarity,
    laterality: Laterality,
    confidence: Confidence,
    attributes: Vec<String>,
) -> Finding {
    if polarity != Polarity::Present {
        return Finding::new(label, polarity, Laterality::None, confidence).expect("not present");
    }
    let side = match (label, laterality) {
        (FindingLabel::DiaphragmElevation, Laterality::None) => Laterality::Left,
        (l, Laterality::None) if !l.is_global() => Laterality::Bilateral,
        (_, s) => s,
    };
    Finding::new(label, polarity, side, confidence)
        .expect("side resolved")
        .with_attributes(attributes)
}

/// Question asked when a step does not specify one.
pub fn default_question(label: FindingLabel) -> String {
    format!("Is there {}?", label.display_name())
}


#[cfg(test)]
mod engine_tests;
