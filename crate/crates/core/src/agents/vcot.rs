//! Two-phase visual chain of thought: a tool-blind visual assessment, then a
//! validation against the tool evidence that recalibrates confidence.

use serde::{Deserialize, Serialize};

use crate::model::{Confidence, Polarity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationVerdict {
    Agree,
    Disagree,
    Uncertain,
}

/// A polarity with the confidence of whoever asserted it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Opinion {
    pub polarity: Polarity,
    pub confidence: Confidence,
}

impl Opinion {
    pub fn new(polarity: Polarity, confidence: Confidence) -> Self {
        Self { polarity, confidence }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcotResult {
    pub assessment_text: String,
    pub assessment: Option<Opinion>,
    pub tool: Option<Opinion>,
    pub validation_verdict: ValidationVerdict,
    pub recalibrated_confidence: Confidence,
}

impl VcotResult {
    /// A disagreement is handed to the synthesizer as a conflict.
    pub fn flags_conflict(&self) -> bool {
        self.validation_verdict == ValidationVerdict::Disagree
    }
}

pub const DISAGREE_FACTOR: f64 = 0.5;
pub const UNCERTAIN_FACTOR: f64 = 0.8;

/// Compares the visual assessment with the tool evidence.
///
/// Agreement keeps the larger confidence, disagreement halves the smaller
/// one, and anything else discounts the one opinion available.
pub fn vcot_two_phase(assessment_text: &str, assessment: Option<Opinion>, tool: Option<Opinion>) -> VcotResult {
    let definite = |o: Option<Opinion>| o.filter(|o| o.polarity != Polarity::Uncertain);
    let (verdict, conf) = match (definite(assessment), definite(tool)) {
        (Some(a), Some(t)) if a.polarity == t.polarity => (ValidationVerdict::Agree, a.confidence.get().max(t.confidence.get())),
        (Some(a), Some(t)) => (
            ValidationVerdict::Disagree,
            DISAGREE_FACTOR * a.confidence.get().min(t.confidence.get()),
        ),
        (None, Some(t)) => (ValidationVerdict::Uncertain, UNCERTAIN_FACTOR * t.confidence.get()),
        (Some(a), None) => (ValidationVerdict::Uncertain, UNCERTAIN_FACTOR * a.confidence.get()),
        (None, None) => (ValidationVerdict::Uncertain, 0.0),
    };
    VcotResult {
        assessment_text: assessment_text.to_string(),
        assessment,
        tool,
        validation_verdict: verdict,
        recalibrated_confidence: Confidence::saturating(conf),
    }
}
