//! Plan-and-execute: runs a workflow template's steps in order.

use std::collections::{BTreeMap, HashMap};

use super::template::{StepKind, WorkflowStep, WorkflowTemplate};
use super::vcot::{vcot_two_phase, Opinion};
use super::{
    default_question, descriptors, make_finding, polarity_in_text, side_of_boxes, AgentContext, AgentError, AgentReport, Call,
    ClaimKind, ExecMode, ProgressionCall, ReportedFinding, Session, StepOutcome,
};
use crate::geometry::TrachealVerdict;
use crate::model::{Confidence, FindingLabel, Laterality, Mask, Measurement, MeasurementKind, Polarity, Progression};
use crate::phantom::Organ;
use crate::toolkit::{Capability, Payload, SegmentTarget, ToolRequest};

/// Area ratio (current over prior) above which a finding is worsening.
pub const WORSENING_RATIO: f64 = 1.25;
/// Area ratio below which a finding is improving.
pub const IMPROVING_RATIO: f64 = 0.8;

/// Progression from lesion areas on the prior and current images.
pub fn progression_from_areas(prior: f64, current: f64) -> (Progression, Option<f64>) {
    if prior <= 0.0 {
        let p = if current > 0.0 {
            Progression::Worsening
        } else {
            Progression::Stable
        };
        return (p, None);
    }
    let ratio = current / prior;
    let p = if ratio > WORSENING_RATIO {
        Progression::Worsening
    } else if ratio < IMPROVING_RATIO {
        Progression::Improving
    } else {
        Progression::Stable
    };
    (p, Some(ratio))
}

fn organs_for(kind: MeasurementKind) -> &'static [Organ] {
    match kind {
        MeasurementKind::Ctr | MeasurementKind::CardiacWidth | MeasurementKind::ThoracicWidth => {
            &[Organ::Heart, Organ::LeftLung, Organ::RightLung]
        }
        MeasurementKind::TrachealOffset => &[Organ::Trachea, Organ::LeftLung, Organ::RightLung],
        MeasurementKind::DiaphragmDelta => &[Organ::LeftHemidiaphragm, Organ::RightHemidiaphragm],
        MeasurementKind::LesionArea => &[],
    }
}

/// The finding a measurement speaks to, with the unit it is judged in.
fn judged_value(kind: MeasurementKind, ms: &[Measurement]) -> Option<f64> {
    let pick = |k: MeasurementKind, u: crate::model::Units| ms.iter().find(|m| m.kind == k && m.units == u).map(|m| m.value);
    use crate::model::Units;
    match kind {
        MeasurementKind::Ctr => pick(MeasurementKind::Ctr, Units::Ratio),
        MeasurementKind::TrachealOffset => pick(MeasurementKind::TrachealOffset, Units::Normalized),
        other => pick(other, Units::Px),
    }
}

struct Measured {
    value: f64,
    confidence: Confidence,
}

struct Run<'a> {
    session: Session<'a>,
    template: &'a WorkflowTemplate,
    finding: FindingLabel,
    values: HashMap<String, Option<f64>>,
    measured: HashMap<String, Measured>,
    localized: Option<(Laterality, usize)>,
    attributes: Vec<String>,
    assessment: Option<(String, Option<Opinion>)>,
}

impl<'a> Run<'a> {
    fn tag(step: &WorkflowStep) -> String {
        match step.kind.mode() {
            Some(m) => format!("{}|{:?}", step.id, m),
            None => format!("{}|vcot", step.id),
        }
    }

    fn gate_open(&mut self, step: &WorkflowStep) -> Result<Result<(), String>, AgentError> {
        let Some(gate) = &step.gate else { return Ok(Ok(())) };
        let Some(value) = self.values.get(&gate.step) else {
            return Err(AgentError::Template(super::TemplateError::StepGateUnsatisfiable {
                template: self.template.name.clone(),
                step: step.id.clone(),
                target: gate.step.clone(),
            }));
        };
        Ok(match value {
            None => Err(format!("gate {gate}: `{}` produced no usable value", gate.step)),
            Some(v) if gate.op.holds(*v, gate.value) => Ok(()),
            Some(v) => Err(format!("gate {gate} is false ({} = {v})", gate.step)),
        })
    }

    fn measure(&mut self, step: &WorkflowStep) -> Result<Option<f64>, crate::toolkit::ToolError> {
        let kind = step.measurement.expect("validated");
        let tag = Self::tag(step);
        let mut masks = BTreeMap::new();
        let mut confidence = Confidence::ONE;
        let mut lesion: Option<Mask> = None;
        let targets: Vec<SegmentTarget> = if kind == MeasurementKind::LesionArea {
            vec![SegmentTarget::Finding(self.finding)]
        } else {
            organs_for(kind).iter().map(|&o| SegmentTarget::Organ(o)).collect()
        };
        for target in targets {
            let call = self.session.call(
                &step.id,
                &tag,
                ToolRequest::Segment {
                    target,
                    slot: step.slot,
                },
            )?;
            if !call.usable() {
                let reason = format!("{} mask rejected: {}", target.name(), call.verdict.reason);
                self.session.record(&step.id, step.kind.as_str(), StepOutcome::Failed { reason });
                return Ok(None);
            }
            confidence = confidence.min(call.output.confidence);
            let Payload::Mask(mask) = call.output.payload else { unreachable!("registry checks payload kinds") };
            match target {
                SegmentTarget::Organ(o) => {
                    masks.insert(o, mask);
                }
                SegmentTarget::Finding(_) => lesion = Some(mask),
            }
        }
        let request = match (step.tool_capability, lesion) {
            (_, Some(mask)) => ToolRequest::Calculate { mask },
            (Some(Capability::Calculate), None) => unreachable!("calculate steps measure lesion area"),
            _ => ToolRequest::Measure {
                kind,
                masks,
                projection: self.session.ctx.case.study.view,
            },
        };
        let call = self.session.call(&step.id, &tag, request)?;
        let Payload::Measurements(ms) = &call.output.payload else { unreachable!("registry checks payload kinds") };
        let Some(value) = judged_value(kind, ms) else {
            let reason = format!("no {kind:?} in tool output");
            self.session.record(&step.id, step.kind.as_str(), StepOutcome::Failed { reason });
            return Ok(None);
        };
        self.session.report.measurements.extend(ms.iter().cloned());
        let confidence = confidence.min(call.output.confidence);
        self.measured.insert(step.id.clone(), Measured { value, confidence });
        if let Some((label, polarity, side, attrs)) = self.interpret(kind, value) {
            self.session.report.claims.push(super::Claim {
                label,
                polarity,
                laterality: side,
                confidence,
                source: call.output.tool_id.clone(),
                kind: ClaimKind::Measurement,
                evidence: Some(call.index),
            });
            self.attributes.extend(attrs);
        }
        Ok(Some(value))
    }

    /// Threshold rules turning a measurement into a polarity.
    fn interpret(&self, kind: MeasurementKind, value: f64) -> Option<(FindingLabel, Polarity, Laterality, Vec<String>)> {
        let th = &self.session.ctx.thresholds;
        let case = &self.session.ctx.case;
        match kind {
            MeasurementKind::Ctr => {
                let present = value > th.ctr_cutoff(case.study.view);
                Some((FindingLabel::Cardiomegaly, Polarity::from_present(present), Laterality::None, Vec::new()))
            }
            MeasurementKind::TrachealOffset => {
                let verdict = if value.abs() <= th.midline_tolerance {
                    TrachealVerdict::Midline
                } else if value > 0.0 {
                    TrachealVerdict::DeviatedPatientLeft
                } else {
                    TrachealVerdict::DeviatedPatientRight
                };
                let attrs = match verdict {
                    TrachealVerdict::Midline => Vec::new(),
                    TrachealVerdict::DeviatedPatientLeft => vec!["toward patient left".to_string()],
                    TrachealVerdict::DeviatedPatientRight => vec!["toward patient right".to_string()],
                };
                let present = verdict != TrachealVerdict::Midline;
                Some((FindingLabel::TrachealDeviation, Polarity::from_present(present), Laterality::None, attrs))
            }
            MeasurementKind::DiaphragmDelta => {
                // delta = left apex row - right apex row; a left apex higher
                // (smaller row) than the right by the margin is abnormal.
                let height = case.current_pixels.height() as f64;
                let present = -value > th.diaphragm_height_fraction * height;
                let side = if present { Laterality::Left } else { Laterality::None };
                Some((FindingLabel::DiaphragmElevation, Polarity::from_present(present), side, Vec::new()))
            }
            _ => None,
        }
    }

    fn localize(&mut self, step: &WorkflowStep) -> Result<Option<f64>, crate::toolkit::ToolError> {
        let call = self.session.call(
            &step.id,
            &Self::tag(step),
            ToolRequest::Ground {
                finding: self.finding,
                slot: step.slot,
            },
        )?;
        if !call.usable() {
            return Ok(None);
        }
        let Payload::Boxes(boxes) = &call.output.payload else { unreachable!("registry checks payload kinds") };
        let side = if self.finding.is_global() {
            Laterality::None
        } else {
            side_of_boxes(boxes, self.session.ctx.case.current_pixels.width())
        };
        let n = boxes.len();
        self.session
            .claim(self.finding, Polarity::from_present(n > 0), side, &call, ClaimKind::Label);
        if n > 0 {
            self.localized = Some((side, call.index));
        }
        Ok(Some(n as f64))
    }

    fn characterize(&mut self, step: &WorkflowStep) -> Result<Option<f64>, crate::toolkit::ToolError> {
        let tag = Self::tag(step);
        let request = match step.tool_capability.expect("validated") {
            Capability::Classify => ToolRequest::Classify { slot: step.slot },
            Capability::Vqa => ToolRequest::Vqa {
                question: step.question.clone().unwrap_or_else(|| default_question(self.finding)),
            },
            Capability::Report => ToolRequest::Report,
            other => {
                let reason = format!("characterize cannot use {other}");
                self.session.record(&step.id, step.kind.as_str(), StepOutcome::Failed { reason });
                return Ok(None);
            }
        };
        let call = self.session.call(&step.id, &tag, request)?;
        if !call.usable() {
            return Ok(None);
        }
        match &call.output.payload {
            Payload::Labels(_) => {
                let Some(score) = call.output.score(self.finding) else { return Ok(None) };
                let polarity = Polarity::from_present(score >= 0.5);
                self.session.claim(self.finding, polarity, Laterality::None, &call, ClaimKind::Label);
                Ok(Some(score))
            }
            Payload::Text(text) => {
                let text = text.clone();
                Ok(self.text_claim(&call, &text))
            }
            _ => Ok(None),
        }
    }

    fn text_claim(&mut self, call: &Call, text: &str) -> Option<f64> {
        let polarity = polarity_in_text(text, self.finding)?;
        if polarity == Polarity::Present {
            self.attributes.extend(descriptors(text));
        }
        let side = if polarity == Polarity::Present && !self.finding.is_global() {
            super::side_in_text(text)
        } else {
            Laterality::None
        };
        self.session.claim(self.finding, polarity, side, call, ClaimKind::Label);
        Some(if polarity == Polarity::Present { 1.0 } else { 0.0 })
    }

    fn assess(&mut self, step: &WorkflowStep) -> Result<Option<f64>, crate::toolkit::ToolError> {
        // Phase one sees only the image and the question, never earlier tool output.
        let question = step.question.clone().unwrap_or_else(|| default_question(self.finding));
        let call = self.session.call(&step.id, &Self::tag(step), ToolRequest::Vqa { question })?;
        let Payload::Text(text) = &call.output.payload else { unreachable!("registry checks payload kinds") };
        let text = text.clone();
        let opinion = if call.usable() {
            polarity_in_text(&text, self.finding).map(|p| Opinion::new(p, call.output.confidence))
        } else {
            None
        };
        if let Some(o) = opinion.filter(|o| o.polarity != Polarity::Uncertain) {
            self.session.report.claims.push(super::Claim {
                label: self.finding,
                polarity: o.polarity,
                laterality: Laterality::None,
                confidence: o.confidence,
                source: format!("vcot:{}", call.output.tool_id),
                kind: ClaimKind::Label,
                evidence: Some(call.index),
            });
        }
        self.assessment = Some((text, opinion));
        Ok(opinion.map(|o| if o.polarity == Polarity::Present { 1.0 } else { 0.0 }))
    }

    /// First claim from the template's own tool evidence (not the visual assessment).
    fn primary_claim(&self) -> Option<&super::Claim> {
        self.session
            .report
            .claims
            .iter()
            .find(|c| c.label == self.finding && !c.source.starts_with("vcot:"))
    }

    fn validate(&mut self) {
        let (text, assessment) = self.assessment.clone().unwrap_or_default();
        let tool = self.primary_claim().map(|c| Opinion::new(c.polarity, c.confidence));
        self.session.report.vcot = Some(vcot_two_phase(&text, assessment, tool));
    }

    fn compare(&mut self, step: &WorkflowStep) -> Option<f64> {
        let (a, b) = (&step.inputs[0], &step.inputs[1]);
        let (Some(prior), Some(current)) = (self.measured.get(a), self.measured.get(b)) else {
            let reason = format!("inputs `{a}` and `{b}` are not both measured");
            self.session.record(&step.id, step.kind.as_str(), StepOutcome::Failed { reason });
            return None;
        };
        let (progression, ratio) = progression_from_areas(prior.value, current.value);
        let confidence = prior.confidence.min(current.confidence);
        self.session.note(
            format!("compare {a} {b}"),
            format!("{} -> {}", ratio.map_or("n/a".to_string(), |r| format!("ratio {r:.3}")), progression.as_str()),
        );
        self.session.report.progression = Some(ProgressionCall {
            progression,
            ratio,
            confidence,
        });
        ratio.or(Some(current.value))
    }

    fn diagnose(&mut self) {
        let primary = self.primary_claim().cloned().or_else(|| {
            self.session
                .report
                .claims
                .iter()
                .find(|c| c.label == self.finding)
                .cloned()
        });
        let Some(primary) = primary else {
            let f = make_finding(self.finding, Polarity::Uncertain, Laterality::None, Confidence::ZERO, Vec::new());
            self.session.report.findings.push(ReportedFinding {
                finding: f,
                evidence: Vec::new(),
            });
            return;
        };
        let confidence = self
            .session
            .report
            .vcot
            .as_ref()
            .map_or(primary.confidence, |v| v.recalibrated_confidence);
        let mut evidence: Vec<usize> = primary.evidence.into_iter().collect();
        let mut side = primary.laterality;
        if let Some((s, idx)) = self.localized {
            if s != Laterality::None {
                side = s;
            }
            if !evidence.contains(&idx) {
                evidence.push(idx);
            }
        }
        if side == Laterality::None {
            side = self
                .session
                .report
                .claims
                .iter()
                .filter(|c| c.label == self.finding && c.polarity == Polarity::Present)
                .map(|c| c.laterality)
                .find(|l| l.is_sided())
                .unwrap_or(Laterality::None);
        }
        let mut attrs = Vec::new();
        for a in &self.attributes {
            if !attrs.contains(a) {
                attrs.push(a.clone());
            }
        }
        let f = make_finding(self.finding, primary.polarity, side, confidence, attrs);
        self.session.report.findings.push(ReportedFinding { finding: f, evidence });
    }
}

/// Executes `template` for the agent in `ctx`. A tool failure ends the run
/// with a partial report marked uncertain; a gate that is false skips its step.
pub fn plan_and_execute(template: &WorkflowTemplate, ctx: &AgentContext) -> Result<AgentReport, AgentError> {
    template.validate()?;
    let finding = template
        .finding
        .or(ctx.task.finding)
        .ok_or_else(|| AgentError::Template(super::TemplateError::Invalid {
            template: template.name.clone(),
            message: "no finding bound".into(),
        }))?;
    let mut run = Run {
        session: Session::new(ctx, ExecMode::PlanExecute, Some(template.name.clone())),
        template,
        finding,
        values: HashMap::new(),
        measured: HashMap::new(),
        localized: None,
        attributes: Vec::new(),
        assessment: None,
    };
    for step in &template.steps {
        if let Err(reason) = run.gate_open(step)? {
            run.session.note(format!("gate {}", step.id), format!("skipped: {reason}"));
            run.session.record(&step.id, step.kind.as_str(), StepOutcome::Skipped { reason });
            run.values.insert(step.id.clone(), None);
            continue;
        }
        let before = run.session.report.steps.len();
        let value = match step.kind {
            StepKind::Measure => run.measure(step),
            StepKind::Localize => run.localize(step),
            StepKind::Characterize => run.characterize(step),
            StepKind::VcotAssess => run.assess(step),
            StepKind::Compare => Ok(run.compare(step)),
            StepKind::VcotValidate => {
                run.validate();
                Ok(None)
            }
            StepKind::Diagnose => {
                run.diagnose();
                Ok(None)
            }
        };
        let value = match value {
            Ok(v) => v,
            Err(e) => {
                let reason = format!("tool failure at step `{}`: {e}", step.id);
                run.session.record(&step.id, step.kind.as_str(), StepOutcome::Failed { reason: reason.clone() });
                return Ok(run.session.fail(reason));
            }
        };
        if run.session.report.steps.len() == before {
            run.session.record(&step.id, step.kind.as_str(), StepOutcome::Executed);
        }
        if let Some(m) = step.kind.mode() {
            run.session.report.modes_exercised.insert(m);
        }
        run.values.insert(step.id.clone(), value);
    }
    let mut report = run.session.report;
    let undecided = report.findings.iter().any(|f| f.finding.polarity == Polarity::Uncertain)
        || (template.task == super::TaskKind::CpVqa && report.progression.is_none());
    if undecided {
        report.status = super::ReportStatus::Uncertain;
        report.reason.get_or_insert_with(|| "no usable evidence".to_string());
    }
    Ok(report)
}
