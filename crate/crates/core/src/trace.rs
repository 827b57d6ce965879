//! Trajectory traces: the ordered record of every reasoning step in a run.
//!
//! A trace moves through four phases in order (orchestrate, tool calls,
//! verification, synthesis). Appending a step from an earlier phase is an
//! error, so every trace that exists is phase-monotone.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Confidence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Orchestrate,
    ToolCall,
    Verify,
    Synthesize,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Orchestrate => "orchestrate",
            Phase::ToolCall => "tool_call",
            Phase::Verify => "verify",
            Phase::Synthesize => "synthesize",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub phase: Phase,
    pub agent_id: String,
    pub action: String,
    pub observation_summary: String,
    pub confidence: Confidence,
}

impl TraceStep {
    pub fn new(
        phase: Phase,
        agent_id: impl Into<String>,
        action: impl Into<String>,
        observation_summary: impl Into<String>,
        confidence: Confidence,
    ) -> Self {
        Self {
            phase,
            agent_id: agent_id.into(),
            action: action.into(),
            observation_summary: observation_summary.into(),
            confidence,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("phase order violation: {attempted:?} after {last:?}")]
    PhaseOrderViolation { last: Phase, attempted: Phase },
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("tool_call step {index} names unregistered tool `{tool}`")]
    UnregisteredTool { index: usize, tool: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTrace {
    steps: Vec<TraceStep>,
    final_answer: String,
    final_confidence: Confidence,
}

impl Default for TrajectoryTrace {
    fn default() -> Self {
        Self::new()
    }
}

impl TrajectoryTrace {
    pub fn new() -> Self {
        Self {
            steps: Vec::new(),
            final_answer: String::new(),
            final_confidence: Confidence::ZERO,
        }
    }

    pub fn steps(&self) -> &[TraceStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_answer(&self) -> &str {
        &self.final_answer
    }

    pub fn final_confidence(&self) -> Confidence {
        self.final_confidence
    }

    pub fn last_phase(&self) -> Option<Phase> {
        self.steps.last().map(|s| s.phase)
    }

    /// Appends a step, consuming the trace. Earlier steps are never touched.
    pub fn append(mut self, step: TraceStep) -> Result<Self, TraceError> {
        self.push(step)?;
        Ok(self)
    }

    pub fn push(&mut self, step: TraceStep) -> Result<(), TraceError> {
        if let Some(last) = self.last_phase() {
            if step.phase < last {
                return Err(TraceError::PhaseOrderViolation {
                    last,
                    attempted: step.phase,
                });
            }
        }
        self.steps.push(step);
        Ok(())
    }

    pub fn finish(mut self, answer: impl Into<String>, confidence: Confidence) -> Self {
        self.final_answer = answer.into();
        self.final_confidence = confidence;
        self
    }

    pub fn is_phase_monotone(&self) -> bool {
        self.steps.windows(2).all(|w| w[0].phase <= w[1].phase)
    }

    pub fn count_phase(&self, phase: Phase) -> usize {
        self.steps.iter().filter(|s| s.phase == phase).count()
    }

    /// Checks that every tool-call step names a tool accepted by `is_registered`.
    pub fn check_tools(&self, is_registered: impl Fn(&str) -> bool) -> Result<(), TraceError> {
        for (index, step) in self.steps.iter().enumerate() {
            if step.phase == Phase::ToolCall && !is_registered(&step.action) {
                return Err(TraceError::UnregisteredTool {
                    index,
                    tool: step.action.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("trace serialization is infallible");
        out.push(b'\n');
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, TraceError> {
        let trace: TrajectoryTrace = serde_json::from_slice(bytes).map_err(|e| TraceError::Parse {
            offset: byte_offset(bytes, e.line(), e.column()),
            message: e.to_string(),
        })?;
        for w in trace.steps.windows(2) {
            if w[1].phase < w[0].phase {
                return Err(TraceError::PhaseOrderViolation {
                    last: w[0].phase,
                    attempted: w[1].phase,
                });
            }
        }
        Ok(trace)
    }

    /// Plain-text rendering, one block per phase.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut current: Option<Phase> = None;
        for (i, step) in self.steps.iter().enumerate() {
            if current != Some(step.phase) {
                let _ = writeln!(out, "== {} ==", step.phase.as_str());
                current = Some(step.phase);
            }
            let _ = writeln!(
                out,
                "{:>3}. [{}] {} -> {} (conf {})",
                i + 1,
                step.agent_id,
                step.action,
                step.observation_summary,
                step.confidence
            );
        }
        let _ = writeln!(out, "== final ==");
        let _ = writeln!(out, "{} (conf {})", self.final_answer, self.final_confidence);
        out
    }
}

/// Converts serde_json's 1-based line/column into a byte offset.
fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut current_line = 1;
    let mut line_start = 0;
    for (i, b) in bytes.iter().enumerate() {
        if current_line == line {
            break;
        }
        if *b == b'\n' {
            current_line += 1;
            line_start = i + 1;
        }
    }
    (line_start + column.saturating_sub(1)).min(bytes.len())
}
