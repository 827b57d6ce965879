//! Deterministic mock tools that answer from phantom ground truth, with
//! optional seeded corruption.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    Capability, ImageSlot, LabelScore, Payload, Provenance, SegmentTarget, Tool, ToolCard, ToolError, ToolOutput,
    ToolRegistry, ToolRequest, ToolSource,
};
use crate::geometry;
use crate::labels::{absent_sentence, finding_sentence, labels_mentioned};
use crate::model::{BBox, Confidence, Finding, FindingLabel, Laterality, Mask, Polarity};
use crate::phantom::{CaseStudy, GroundTruth};

pub const SEGMENT_CONFIDENCE: f64 = 0.95;
pub const CLEAN_CONFIDENCE: f64 = 0.9;
pub const PRESENT_SCORE: f64 = 0.9;
pub const ABSENT_SCORE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionPolicy {
    pub flip_label_prob: f64,
    pub mask_dropout_prob: f64,
    pub confidence_when_corrupted: f64,
    pub seed: u64,
}

impl Default for CorruptionPolicy {
    fn default() -> Self {
        Self::none()
    }
}

impl CorruptionPolicy {
    pub fn none() -> Self {
        Self {
            flip_label_prob: 0.0,
            mask_dropout_prob: 0.0,
            confidence_when_corrupted: 0.5,
            seed: 0,
        }
    }

    pub fn flip(prob: f64, seed: u64) -> Self {
        Self {
            flip_label_prob: prob,
            seed,
            ..Self::none()
        }
    }

    pub fn dropout(prob: f64, seed: u64) -> Self {
        Self {
            mask_dropout_prob: prob,
            seed,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("flip_label_prob", self.flip_label_prob),
            ("mask_dropout_prob", self.mask_dropout_prob),
            ("confidence_when_corrupted", self.confidence_when_corrupted),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn is_clean(&self) -> bool {
        self.flip_label_prob == 0.0 && self.mask_dropout_prob == 0.0
    }

    /// A generator keyed by everything that identifies one call, so the
    /// outcome does not depend on call order or thread scheduling.
    fn rng(&self, case: &CaseStudy, tool_id: &str, request: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for part in [case.id(), tool_id, request] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        ChaCha8Rng::from_seed(seed)
    }

    fn corrupted_confidence(&self) -> Confidence {
        Confidence::saturating(self.confidence_when_corrupted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockKind {
    Segmenter,
    Classifier,
    Grounder,
    Vqa,
    Report,
}

impl MockKind {
    pub const ALL: [MockKind; 5] = [
        MockKind::Segmenter,
        MockKind::Classifier,
        MockKind::Grounder,
        MockKind::Vqa,
        MockKind::Report,
    ];

    pub fn tool_id(self) -> &'static str {
        match self {
            MockKind::Segmenter => "mock_segmenter",
            MockKind::Classifier => "mock_classifier",
            MockKind::Grounder => "mock_grounder",
            MockKind::Vqa => "mock_vqa",
            MockKind::Report => "mock_report",
        }
    }

    pub fn capability(self) -> Capability {
        match self {
            MockKind::Segmenter => Capability::Segment,
            MockKind::Classifier => Capability::Classify,
            MockKind::Grounder => Capability::Ground,
            MockKind::Vqa => Capability::Vqa,
            MockKind::Report => Capability::Report,
        }
    }
}

pub struct MockTool {
    card: ToolCard,
    kind: MockKind,
    policy: CorruptionPolicy,
}

impl MockTool {
    pub fn new(kind: MockKind, policy: CorruptionPolicy) -> Self {
        Self::with_id(kind, kind.tool_id(), policy)
    }

    pub fn with_id(kind: MockKind, tool_id: impl Into<String>, policy: CorruptionPolicy) -> Self {
        Self {
            card: ToolCard::new(tool_id, kind.capability(), 1, ToolSource::BuiltinMock),
            kind,
            policy,
        }
    }

    fn output(&self, payload: Payload, confidence: Confidence) -> ToolOutput {
        ToolOutput {
            tool_id: self.card.tool_id.clone(),
            payload,
            confidence,
            latency_ms: 0,
            provenance: Provenance::Mock,
        }
    }

    fn mismatch(&self, request: &ToolRequest) -> ToolError {
        ToolError::SchemaMismatch {
            tool_id: self.card.tool_id.clone(),
            detail: format!("cannot serve `{}`", request.describe()),
            raw: String::new(),
        }
    }
}

pub fn register_mock_tools(registry: &mut ToolRegistry, policy: &CorruptionPolicy) -> Result<(), ToolError> {
    for kind in MockKind::ALL {
        registry.register(Arc::new(MockTool::new(kind, *policy)))?;
    }
    Ok(())
}

fn truth_for(case: &CaseStudy, slot: ImageSlot) -> Result<&GroundTruth, ToolError> {
    let truth = match slot {
        ImageSlot::Current => case.truth.as_deref(),
        ImageSlot::Prior => case.prior_truth.as_deref(),
    };
    truth.ok_or_else(|| ToolError::NoGroundTruth(case.id().to_string()))
}

/// The ground-truth region of a finding: its lesion mask, or the organ that
/// realizes a geometric finding.
pub fn finding_region(truth: &GroundTruth, label: FindingLabel) -> Option<Mask> {
    if truth.polarity(label) != Polarity::Present {
        return None;
    }
    match label {
        FindingLabel::Cardiomegaly => Some(truth.masks.heart.clone()),
        FindingLabel::TrachealDeviation => Some(truth.masks.trachea.clone()),
        FindingLabel::DiaphragmElevation => Some(truth.masks.left_hemidiaphragm.clone()),
        _ => truth.lesion(label).map(|l| l.mask.clone()),
    }
}

/// Tight boxes around `region`, one per lung it touches.
fn region_boxes(truth: &GroundTruth, region: &Mask) -> Vec<BBox> {
    let per_lung: Vec<BBox> = [&truth.masks.right_lung, &truth.masks.left_lung]
        .into_iter()
        .filter_map(|lung| region.intersection(lung).and_then(|m| geometry::mask_bbox(&m)))
        .collect();
    if per_lung.is_empty() {
        geometry::mask_bbox(region).into_iter().collect()
    } else {
        per_lung
    }
}

/// A plausible-looking box where nothing is: the middle third of the right lung.
fn spurious_box(truth: &GroundTruth) -> Vec<BBox> {
    match geometry::mask_bbox(&truth.masks.right_lung) {
        Some(b) => {
            let third = b.height() / 3;
            vec![BBox {
                y_min: b.y_min + third,
                y_max: b.y_min + 2 * third,
                ..b
            }]
        }
        None => Vec::new(),
    }
}

fn polar_finding(truth: &GroundTruth, label: FindingLabel, polarity: Polarity, confidence: Confidence) -> Finding {
    match (polarity, truth.finding(label)) {
        (Polarity::Present, Some(f)) => Finding {
            confidence,
            ..f.clone()
        },
        (Polarity::Present, None) => {
            let side = if label.is_global() {
                Laterality::None
            } else {
                Laterality::Right
            };
            Finding::new(label, Polarity::Present, side, confidence).expect("sided")
        }
        (p, _) => Finding::new(label, p, Laterality::None, confidence).expect("not present"),
    }
}

impl MockTool {
    fn segment(&self, case: &CaseStudy, target: SegmentTarget, slot: ImageSlot, key: &str) -> Result<ToolOutput, ToolError> {
        let truth = truth_for(case, slot)?;
        let mask = match target {
            SegmentTarget::Organ(o) => truth.masks.get(o).clone(),
            SegmentTarget::Finding(f) => {
                finding_region(truth, f).unwrap_or_else(|| Mask::empty(truth.masks.heart.width(), truth.masks.heart.height()))
            }
        };
        let mut rng = self.policy.rng(case, &self.card.tool_id, key);
        if rng.random_bool(self.policy.mask_dropout_prob) {
            let empty = Mask::empty(mask.width(), mask.height());
            return Ok(self.output(Payload::Mask(empty), self.policy.corrupted_confidence()));
        }
        Ok(self.output(Payload::Mask(mask), Confidence::saturating(SEGMENT_CONFIDENCE)))
    }

    fn classify(&self, case: &CaseStudy, slot: ImageSlot, key: &str) -> Result<ToolOutput, ToolError> {
        let truth = truth_for(case, slot)?;
        let mut rng = self.policy.rng(case, &self.card.tool_id, key);
        let mut flipped = false;
        let scores = FindingLabel::CHEXPERT
            .iter()
            .map(|&label| {
                let present = truth.polarity(label) == Polarity::Present;
                let flip = rng.random_bool(self.policy.flip_label_prob);
                flipped |= flip;
                let shown = present != flip;
                LabelScore {
                    label,
                    score: if shown { PRESENT_SCORE } else { ABSENT_SCORE },
                }
            })
            .collect();
        let confidence = if flipped {
            self.policy.corrupted_confidence()
        } else {
            Confidence::saturating(CLEAN_CONFIDENCE)
        };
        Ok(self.output(Payload::Labels(scores), confidence))
    }

    fn ground(&self, case: &CaseStudy, finding: FindingLabel, slot: ImageSlot, key: &str) -> Result<ToolOutput, ToolError> {
        let truth = truth_for(case, slot)?;
        let mut rng = self.policy.rng(case, &self.card.tool_id, key);
        let region = finding_region(truth, finding);
        if rng.random_bool(self.policy.flip_label_prob) {
            let boxes = match region {
                Some(_) => Vec::new(),
                None => spurious_box(truth),
            };
            return Ok(self.output(Payload::Boxes(boxes), self.policy.corrupted_confidence()));
        }
        let boxes = match region {
            Some(r) if finding.is_geometric() => geometry::mask_bbox(&r).into_iter().collect(),
            Some(r) => region_boxes(truth, &r),
            None => Vec::new(),
        };
        Ok(self.output(Payload::Boxes(boxes), Confidence::saturating(CLEAN_CONFIDENCE)))
    }

    fn vqa(&self, case: &CaseStudy, question: &str, key: &str) -> Result<ToolOutput, ToolError> {
        let truth = truth_for(case, ImageSlot::Current)?;
        let mut rng = self.policy.rng(case, &self.card.tool_id, key);
        let Some(&label) = labels_mentioned(question).first() else {
            return Ok(self.output(
                Payload::Text("The question does not name a finding I can assess.".into()),
                Confidence::saturating(CLEAN_CONFIDENCE),
            ));
        };
        let mut polarity = truth.polarity(label);
        let mut confidence = Confidence::saturating(CLEAN_CONFIDENCE);
        if rng.random_bool(self.policy.flip_label_prob) {
            polarity = polarity.opposite();
            confidence = self.policy.corrupted_confidence();
        }
        let answer = match polarity {
            Polarity::Present => format!("Yes. {}", finding_sentence(&polar_finding(truth, label, polarity, confidence))),
            _ => format!("No. {}", absent_sentence(label)),
        };
        Ok(self.output(Payload::Text(answer), confidence))
    }

    fn report(&self, case: &CaseStudy, key: &str) -> Result<ToolOutput, ToolError> {
        let truth = truth_for(case, ImageSlot::Current)?;
        let mut rng = self.policy.rng(case, &self.card.tool_id, key);
        let mut flipped = false;
        let mut sentences = Vec::new();
        for &label in FindingLabel::ALL {
            if label == FindingLabel::NoFinding {
                continue;
            }
            let mut polarity = truth.polarity(label);
            if rng.random_bool(self.policy.flip_label_prob) {
                polarity = polarity.opposite();
                flipped = true;
            }
            sentences.push(finding_sentence(&polar_finding(truth, label, polarity, Confidence::ONE)));
        }
        let confidence = if flipped {
            self.policy.corrupted_confidence()
        } else {
            Confidence::saturating(CLEAN_CONFIDENCE)
        };
        Ok(self.output(Payload::Text(sentences.join(" ")), confidence))
    }
}

impl Tool for MockTool {
    fn card(&self) -> &ToolCard {
        &self.card
    }

    fn invoke(&self, request: &ToolRequest, case: &CaseStudy) -> Result<ToolOutput, ToolError> {
        let key = request.describe();
        match (self.kind, request) {
            (MockKind::Segmenter, ToolRequest::Segment { target, slot }) => self.segment(case, *target, *slot, &key),
            (MockKind::Classifier, ToolRequest::Classify { slot }) => self.classify(case, *slot, &key),
            (MockKind::Grounder, ToolRequest::Ground { finding, slot }) => self.ground(case, *finding, *slot, &key),
            (MockKind::Vqa, ToolRequest::Vqa { question }) => self.vqa(case, question, &key),
            (MockKind::Report, ToolRequest::Report) => self.report(case, &key),
            _ => Err(self.mismatch(request)),
        }
    }
}
