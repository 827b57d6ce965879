//! Tool cards, the tool registry, and the request/response types every tool
//! speaks. Concrete tools live in [`mock`], [`builtin`], and [`remote`].

pub mod builtin;
pub mod mock;
pub mod remote;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use image::GrayImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Quadrant;
use crate::model::{BBox, Confidence, FindingLabel, Mask, Measurement, Projection};
use crate::phantom::{CaseStudy, Organ};

pub use builtin::{register_geometry_tools, GeometryOp, GeometryTool};
pub use mock::{register_mock_tools, CorruptionPolicy, MockTool, MockKind};
pub use remote::RemoteTool;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Segment,
    Classify,
    Ground,
    Vqa,
    Report,
    Crop,
    Measure,
    Calculate,
}

impl Capability {
    pub const ALL: [Capability; 8] = [
        Capability::Segment,
        Capability::Classify,
        Capability::Ground,
        Capability::Vqa,
        Capability::Report,
        Capability::Crop,
        Capability::Measure,
        Capability::Calculate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Capability::Segment => "segment",
            Capability::Classify => "classify",
            Capability::Ground => "ground",
            Capability::Vqa => "vqa",
            Capability::Report => "report",
            Capability::Crop => "crop",
            Capability::Measure => "measure",
            Capability::Calculate => "calculate",
        }
    }

    pub fn output_kind(self) -> PayloadKind {
        match self {
            Capability::Segment => PayloadKind::Mask,
            Capability::Classify => PayloadKind::Labels,
            Capability::Ground => PayloadKind::Boxes,
            Capability::Vqa | Capability::Report => PayloadKind::Text,
            Capability::Crop => PayloadKind::Patch,
            Capability::Measure | Capability::Calculate => PayloadKind::Measurements,
        }
    }

    fn input_schema(self) -> &'static str {
        match self {
            Capability::Segment => "{target: organ|finding, image: current|prior}",
            Capability::Classify => "{image: current|prior}",
            Capability::Ground => "{finding, image: current|prior}",
            Capability::Vqa => "{question}",
            Capability::Report => "{}",
            Capability::Crop => "{quadrant: UL|UR|LL|LR, image: current|prior}",
            Capability::Measure => "{kind, masks: {organ: mask}, projection}",
            Capability::Calculate => "{mask}",
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Capability {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Capability::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown capability `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolSource {
    BuiltinMock,
    BuiltinGeometry,
    RemoteHttp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Mock,
    Geometry,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Mask,
    Boxes,
    Labels,
    Text,
    Measurements,
    Patch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCard {
    pub tool_id: String,
    pub capability: Capability,
    pub input_schema: String,
    pub output_schema: PayloadKind,
    pub cost_hint: u32,
    pub source: ToolSource,
}

impl ToolCard {
    pub fn new(tool_id: impl Into<String>, capability: Capability, cost_hint: u32, source: ToolSource) -> Self {
        Self {
            tool_id: tool_id.into(),
            capability,
            input_schema: capability.input_schema().to_string(),
            output_schema: capability.output_kind(),
            cost_hint,
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSlot {
    #[default]
    Current,
    Prior,
}

impl ImageSlot {
    pub fn as_str(self) -> &'static str {
        match self {
            ImageSlot::Current => "current",
            ImageSlot::Prior => "prior",
        }
    }
}

/// What a segmenter is asked to delineate: an organ or a finding's region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentTarget {
    Organ(Organ),
    Finding(FindingLabel),
}

impl SegmentTarget {
    pub fn name(self) -> &'static str {
        match self {
            SegmentTarget::Organ(o) => o.as_str(),
            SegmentTarget::Finding(f) => f.as_snake(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ToolRequest {
    Segment { target: SegmentTarget, slot: ImageSlot },
    Classify { slot: ImageSlot },
    Ground { finding: FindingLabel, slot: ImageSlot },
    Vqa { question: String },
    Report,
    Crop { quadrant: Quadrant, slot: ImageSlot },
    Measure {
        kind: crate::model::MeasurementKind,
        masks: BTreeMap<Organ, Mask>,
        projection: Projection,
    },
    Calculate { mask: Mask },
}

impl ToolRequest {
    pub fn capability(&self) -> Capability {
        match self {
            ToolRequest::Segment { .. } => Capability::Segment,
            ToolRequest::Classify { .. } => Capability::Classify,
            ToolRequest::Ground { .. } => Capability::Ground,
            ToolRequest::Vqa { .. } => Capability::Vqa,
            ToolRequest::Report => Capability::Report,
            ToolRequest::Crop { .. } => Capability::Crop,
            ToolRequest::Measure { .. } => Capability::Measure,
            ToolRequest::Calculate { .. } => Capability::Calculate,
        }
    }

    /// Short stable description, used in traces and to seed corruption.
    pub fn describe(&self) -> String {
        match self {
            ToolRequest::Segment { target, slot } => format!("segment {} ({})", target.name(), slot.as_str()),
            ToolRequest::Classify { slot } => format!("classify ({})", slot.as_str()),
            ToolRequest::Ground { finding, slot } => format!("ground {} ({})", finding.as_snake(), slot.as_str()),
            ToolRequest::Vqa { question } => format!("vqa: {question}"),
            ToolRequest::Report => "report".to_string(),
            ToolRequest::Crop { quadrant, slot } => format!("crop {quadrant:?} ({})", slot.as_str()),
            ToolRequest::Measure { kind, .. } => format!("measure {kind:?}"),
            ToolRequest::Calculate { .. } => "calculate lesion_area".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: FindingLabel,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Mask(Mask),
    Boxes(Vec<BBox>),
    Labels(Vec<LabelScore>),
    Text(String),
    Measurements(Vec<Measurement>),
    Patch(GrayImage),
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Mask(_) => PayloadKind::Mask,
            Payload::Boxes(_) => PayloadKind::Boxes,
            Payload::Labels(_) => PayloadKind::Labels,
            Payload::Text(_) => PayloadKind::Text,
            Payload::Measurements(_) => PayloadKind::Measurements,
            Payload::Patch(_) => PayloadKind::Patch,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolOutput {
    pub tool_id: String,
    pub payload: Payload,
    pub confidence: Confidence,
    pub latency_ms: u64,
    pub provenance: Provenance,
}

impl ToolOutput {
    pub fn score(&self, label: FindingLabel) -> Option<f64> {
        match &self.payload {
            Payload::Labels(scores) => scores.iter().find(|s| s.label == label).map(|s| s.score),
            _ => None,
        }
    }

    pub fn summary(&self) -> String {
        match &self.payload {
            Payload::Mask(m) => format!("mask area {} px", m.area()),
            Payload::Boxes(b) => match b.as_slice() {
                [] => "no boxes".to_string(),
                [one] => format!("1 box [{},{},{},{}]", one.x_min, one.y_min, one.x_max, one.y_max),
                many => format!("{} boxes", many.len()),
            },
            Payload::Labels(scores) => {
                let present: Vec<&str> = scores
                    .iter()
                    .filter(|s| s.score >= 0.5 && s.label != FindingLabel::NoFinding)
                    .map(|s| s.label.as_snake())
                    .collect();
                if present.is_empty() {
                    format!("{} labels, none above 0.5", scores.len())
                } else {
                    format!("{} labels, above 0.5: {}", scores.len(), present.join(","))
                }
            }
            Payload::Text(t) => {
                let mut s: String = t.chars().take(96).collect();
                if t.chars().count() > 96 {
                    s.push_str("...");
                }
                s
            }
            Payload::Measurements(ms) => ms
                .iter()
                .map(|m| format!("{:?}={}", m.kind, fmt_value(m.value)))
                .collect::<Vec<_>>()
                .join(" "),
            Payload::Patch(p) => format!("patch {}x{}", p.width(), p.height()),
        }
    }
}

fn fmt_value(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.4}")
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToolError {
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("tool id `{0}` already registered")]
    DuplicateToolId(String),
    #[error("no registered tool offers `{0}`")]
    NoCapableTool(Capability),
    #[error("schema mismatch in `{tool_id}`: {detail}")]
    SchemaMismatch { tool_id: String, detail: String, raw: String },
    #[error("remote error {status}: {body}")]
    RemoteError { status: u16, body: String },
    #[error("`{tool_id}` timed out: {detail}")]
    Timeout { tool_id: String, detail: String },
    #[error("study `{0}` has no ground truth")]
    NoGroundTruth(String),
    #[error("`{tool_id}` failed: {message}")]
    Failed { tool_id: String, message: String },
}

pub trait Tool: Send + Sync {
    fn card(&self) -> &ToolCard;

    /// Runs the tool. Implementations must not mutate shared state.
    fn invoke(&self, request: &ToolRequest, case: &CaseStudy) -> Result<ToolOutput, ToolError>;
}

/// Immutable-after-setup collection of tools, safe to share across threads.
#[derive(Clone, Default)]
pub struct ToolRegistry {
    tools: Vec<Arc<dyn Tool>>,
}

impl fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.tools.iter().map(|t| &t.card().tool_id)).finish()
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, tool: Arc<dyn Tool>) -> Result<(), ToolError> {
        let id = &tool.card().tool_id;
        if self.get(id).is_some() {
            return Err(ToolError::DuplicateToolId(id.clone()));
        }
        self.tools.push(tool);
        Ok(())
    }

    pub fn get(&self, tool_id: &str) -> Option<&Arc<dyn Tool>> {
        self.tools.iter().find(|t| t.card().tool_id == tool_id)
    }

    pub fn contains(&self, tool_id: &str) -> bool {
        self.get(tool_id).is_some()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn cards(&self) -> impl Iterator<Item = &ToolCard> {
        self.tools.iter().map(|t| t.card())
    }

    /// Cards offering `capability`, cheapest first; ties keep registration order.
    pub fn lookup(&self, capability: Capability) -> Vec<&ToolCard> {
        let mut cards: Vec<&ToolCard> = self.cards().filter(|c| c.capability == capability).collect();
        cards.sort_by_key(|c| c.cost_hint);
        cards
    }

    pub fn has_capability(&self, capability: Capability) -> bool {
        self.cards().any(|c| c.capability == capability)
    }

    pub fn invoke(&self, tool_id: &str, request: &ToolRequest, case: &CaseStudy) -> Result<ToolOutput, ToolError> {
        let tool = self.get(tool_id).ok_or_else(|| ToolError::UnknownTool(tool_id.to_string()))?;
        let card = tool.card();
        if request.capability() != card.capability {
            return Err(ToolError::SchemaMismatch {
                tool_id: tool_id.to_string(),
                detail: format!("{} request sent to a {} tool", request.capability(), card.capability),
                raw: String::new(),
            });
        }
        let out = tool.invoke(request, case)?;
        if out.payload.kind() != card.output_schema {
            return Err(ToolError::SchemaMismatch {
                tool_id: tool_id.to_string(),
                detail: format!("expected {:?} payload, got {:?}", card.output_schema, out.payload.kind()),
                raw: String::new(),
            });
        }
        Ok(out)
    }

    /// Tries every tool with the request's capability in cost order and
    /// returns the first success, or the last error.
    pub fn invoke_first(&self, request: &ToolRequest, case: &CaseStudy) -> Result<ToolOutput, ToolError> {
        let capability = request.capability();
        let mut last = ToolError::NoCapableTool(capability);
        for card in self.lookup(capability) {
            match self.invoke(&card.tool_id, request, case) {
                Ok(out) => return Ok(out),
                Err(e) => last = e,
            }
        }
        Err(last)
    }
}

/// Wraps a tool with a fixed sleep before each call; used to exercise
/// concurrent dispatch.
pub struct DelayedTool {
    inner: Arc<dyn Tool>,
    delay: Duration,
}

impl DelayedTool {
    pub fn new(inner: Arc<dyn Tool>, delay: Duration) -> Self {
        Self { inner, delay }
    }
}

impl Tool for DelayedTool {
    fn card(&self) -> &ToolCard {
        self.inner.card()
    }

    fn invoke(&self, request: &ToolRequest, case: &CaseStudy) -> Result<ToolOutput, ToolError> {
        thread::sleep(self.delay);
        let mut out = self.inner.invoke(request, case)?;
        out.latency_ms += self.delay.as_millis() as u64;
        Ok(out)
    }
}

/// The default in-process tool suite: mocks plus geometry tools.
pub fn default_registry(policy: &CorruptionPolicy) -> ToolRegistry {
    let mut reg = ToolRegistry::new();
    register_mock_tools(&mut reg, policy).expect("fresh registry");
    register_geometry_tools(&mut reg).expect("fresh registry");
    reg
}
