//! The context verifier: plausibility rules on every tool output, and an
//! optional judge consulted when a tool reports low confidence.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry;
use crate::labels::{extract_labels, labels_mentioned, Mention};
use crate::model::{FindingLabel, Polarity};
use crate::phantom::CaseStudy;
use crate::toolkit::mock::finding_region;
use crate::toolkit::{Capability, ImageSlot, Payload, RemoteTool, SegmentTarget, Tool, ToolOutput, ToolRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
    Uncertain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckedBy {
    Rules,
    Judge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    pub reason: String,
    pub checked_by: CheckedBy,
}

impl Verdict {
    fn new(decision: Decision, reason: impl Into<String>, checked_by: CheckedBy) -> Self {
        Self {
            decision,
            reason: reason.into(),
            checked_by,
        }
    }

    pub fn is_reject(&self) -> bool {
        self.decision == Decision::Reject
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifierConfig {
    /// Outputs below this confidence are sent to the judge.
    pub uncertainty_gate: f64,
    /// Plausible mask area, as a fraction of the image.
    pub mask_area_band: (f64, f64),
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            uncertainty_gate: 0.6,
            mask_area_band: (0.005, 0.6),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JudgeError {
    #[error("judge unavailable: {0}")]
    Unavailable(String),
}

/// A second opinion on a single tool output.
pub trait Judge: Send + Sync {
    /// `Ok(Ok(reason))` accepts, `Ok(Err(reason))` rejects.
    fn judge(&self, output: &ToolOutput, request: &ToolRequest, case: &CaseStudy) -> Result<Result<String, String>, JudgeError>;
}

fn rules(output: &ToolOutput, case: &CaseStudy, config: &VerifierConfig) -> Option<String> {
    let (w, h) = (case.current_pixels.width(), case.current_pixels.height());
    match &output.payload {
        Payload::Mask(mask) => {
            if mask.is_empty() {
                return Some("empty mask".into());
            }
            let frac = geometry::mask_area_fraction(mask);
            let (lo, hi) = config.mask_area_band;
            if frac < lo || frac > hi {
                return Some(format!("mask area fraction {frac:.4} outside [{lo}, {hi}]"));
            }
            None
        }
        Payload::Boxes(boxes) => boxes.iter().find_map(|b| {
            if b.is_degenerate() {
                Some(format!("zero-area box [{},{},{},{}]", b.x_min, b.y_min, b.x_max, b.y_max))
            } else if !b.within(w, h) {
                Some(format!("box [{},{},{},{}] outside {w}x{h} image", b.x_min, b.y_min, b.x_max, b.y_max))
            } else {
                None
            }
        }),
        Payload::Labels(scores) => scores
            .iter()
            .find(|s| !(0.0..=1.0).contains(&s.score))
            .map(|s| format!("score {} for {} outside [0,1]", s.score, s.label)),
        Payload::Text(t) if t.trim().is_empty() => Some("empty text".into()),
        _ => None,
    }
}

/// Rules first; then, for low-confidence outputs, the judge if one is
/// configured. A missing or failing judge leaves the output uncertain.
pub fn verify(
    output: &ToolOutput,
    request: &ToolRequest,
    case: &CaseStudy,
    judge: Option<&dyn Judge>,
    config: &VerifierConfig,
) -> Verdict {
    if let Some(reason) = rules(output, case, config) {
        return Verdict::new(Decision::Reject, reason, CheckedBy::Rules);
    }
    if output.confidence.get() >= config.uncertainty_gate {
        return Verdict::new(Decision::Accept, "rules passed", CheckedBy::Rules);
    }
    let low = format!("confidence {} below {}", output.confidence, config.uncertainty_gate);
    match judge.map(|j| j.judge(output, request, case)) {
        None => Verdict::new(Decision::Uncertain, format!("{low}; no judge configured"), CheckedBy::Rules),
        Some(Err(e)) => Verdict::new(Decision::Uncertain, format!("{low}; {e}"), CheckedBy::Rules),
        Some(Ok(Ok(reason))) => Verdict::new(Decision::Accept, reason, CheckedBy::Judge),
        Some(Ok(Err(reason))) => Verdict::new(Decision::Reject, reason, CheckedBy::Judge),
    }
}

/// Verifier bundle carried by agents.
#[derive(Clone, Default)]
pub struct Verifier {
    pub config: VerifierConfig,
    pub judge: Option<Arc<dyn Judge>>,
}

impl std::fmt::Debug for Verifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Verifier")
            .field("config", &self.config)
            .field("judge", &self.judge.is_some())
            .finish()
    }
}

impl Verifier {
    pub fn new(config: VerifierConfig, judge: Option<Arc<dyn Judge>>) -> Self {
        Self { config, judge }
    }

    pub fn verify(&self, output: &ToolOutput, request: &ToolRequest, case: &CaseStudy) -> Verdict {
        verify(output, request, case, self.judge.as_deref(), &self.config)
    }
}

/// Judges against phantom ground truth.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhantomJudge;

impl Judge for PhantomJudge {
    fn judge(&self, output: &ToolOutput, request: &ToolRequest, case: &CaseStudy) -> Result<Result<String, String>, JudgeError> {
        let slot = match request {
            ToolRequest::Segment { slot, .. } | ToolRequest::Classify { slot } | ToolRequest::Ground { slot, .. } => *slot,
            _ => ImageSlot::Current,
        };
        let truth = match slot {
            ImageSlot::Current => case.truth.as_deref(),
            ImageSlot::Prior => case.prior_truth.as_deref(),
        }
        .ok_or_else(|| JudgeError::Unavailable("no ground truth".into()))?;
        let verdict = match (&output.payload, request) {
            (Payload::Mask(mask), ToolRequest::Segment { target, .. }) => {
                let expected = match target {
                    SegmentTarget::Organ(o) => Some(truth.masks.get(*o).clone()),
                    SegmentTarget::Finding(f) => finding_region(truth, *f),
                };
                let iou = match expected {
                    Some(e) => mask_iou(mask, &e),
                    None => {
                        if mask.is_empty() {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                if iou >= 0.5 {
                    Ok(format!("mask agrees with reference (IoU {iou:.2})"))
                } else {
                    Err(format!("mask disagrees with reference (IoU {iou:.2})"))
                }
            }
            (Payload::Labels(scores), _) => match scores
                .iter()
                .find(|s| (s.score >= 0.5) != (truth.polarity(s.label) == Polarity::Present))
            {
                Some(s) => Err(format!("{} score {} contradicts the image", s.label, s.score)),
                None => Ok("labels consistent".into()),
            },
            (Payload::Boxes(boxes), ToolRequest::Ground { finding, .. }) => {
                let present = truth.polarity(*finding) == Polarity::Present;
                if present == !boxes.is_empty() {
                    Ok("localization consistent".into())
                } else {
                    Err(format!("{finding} localization contradicts the image"))
                }
            }
            (Payload::Text(text), ToolRequest::Vqa { question }) => match labels_mentioned(question).first() {
                Some(&label) => text_consistent(text, &[label], truth),
                None => Ok("no finding asked".into()),
            },
            (Payload::Text(text), ToolRequest::Report) => {
                let labels: Vec<FindingLabel> = FindingLabel::CHEXPERT.to_vec();
                text_consistent(text, &labels, truth)
            }
            _ => Ok("nothing to check".into()),
        };
        Ok(verdict)
    }
}

fn text_consistent(text: &str, labels: &[FindingLabel], truth: &crate::phantom::GroundTruth) -> Result<String, String> {
    let extracted = extract_labels(text);
    for &label in labels {
        let said = extracted.get(label);
        let present = truth.polarity(label) == Polarity::Present;
        let wrong = match said {
            Mention::Positive => !present,
            Mention::Negative => present,
            _ => false,
        };
        if wrong {
            return Err(format!("statement about {label} contradicts the image"));
        }
    }
    Ok("text consistent".into())
}

fn mask_iou(a: &crate::model::Mask, b: &crate::model::Mask) -> f64 {
    if a.width() != b.width() || a.height() != b.height() {
        return 0.0;
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (x, y) in a.bits().iter().zip(b.bits()) {
        inter += u64::from(*x && *y);
        union += u64::from(*x || *y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Asks a remote vqa endpoint whether an output is correct.
pub struct RemoteJudge {
    tool: RemoteTool,
}

impl RemoteJudge {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let tool = RemoteTool::new("remote_judge", Capability::Vqa, base_url, 0, timeout).expect("vqa has an endpoint");
        Self { tool }
    }
}

impl Judge for RemoteJudge {
    fn judge(&self, output: &ToolOutput, request: &ToolRequest, case: &CaseStudy) -> Result<Result<String, String>, JudgeError> {
        let question = format!(
            "A tool was asked to {} and returned: {}. Is this output correct? Answer yes or no.",
            request.describe(),
            output.summary()
        );
        let answer = self
            .tool
            .invoke(&ToolRequest::Vqa { question }, case)
            .map_err(|e| JudgeError::Unavailable(e.to_string()))?;
        let Payload::Text(text) = answer.payload else {
            return Err(JudgeError::Unavailable("judge returned no text".into()));
        };
        let lower = text.trim().to_lowercase();
        if lower.starts_with("yes") {
            Ok(Ok(format!("judge: {}", text.trim())))
        } else if lower.starts_with("no") {
            Ok(Err(format!("judge: {}", text.trim())))
        } else {
            Err(JudgeError::Unavailable(format!("unparseable judge answer `{}`", text.trim())))
        }
    }
}
