//! ReAct: thought, action, observation, repeated until the policy finishes or
//! the step budget runs out.

use super::{
    default_question, descriptors, make_finding, polarity_in_text, side_in_text, side_of_boxes, AgentContext, AgentReport,
    ClaimKind, ExecMode, ReportStatus, ReportedFinding, Session, TaskKind,
};
use crate::model::{Confidence, FindingLabel, Laterality, Polarity};
use crate::toolkit::{Capability, ImageSlot, Payload, ToolError, ToolOutput, ToolRequest};
use crate::verify::{Decision, Verdict};

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Invoke { request: ToolRequest, thought: String },
    Finish { thought: String },
}

impl Action {
    pub fn invoke(request: ToolRequest, thought: impl Into<String>) -> Self {
        Action::Invoke {
            request,
            thought: thought.into(),
        }
    }

    pub fn finish(thought: impl Into<String>) -> Self {
        Action::Finish { thought: thought.into() }
    }
}

#[derive(Debug, Clone)]
pub struct Observation {
    pub request: ToolRequest,
    pub result: Result<ToolOutput, ToolError>,
    pub verdict: Option<Verdict>,
}

impl Observation {
    /// The output, if the call succeeded and the verifier did not reject it.
    pub fn usable(&self) -> Option<&ToolOutput> {
        match (&self.result, &self.verdict) {
            (Ok(o), Some(v)) if v.decision != Decision::Reject => Some(o),
            _ => None,
        }
    }
}

/// What a policy sees when choosing its next action.
pub struct ReactState<'a> {
    pub ctx: &'a AgentContext,
    pub history: &'a [Observation],
}

impl ReactState<'_> {
    pub fn has(&self, capability: Capability) -> bool {
        self.ctx.tools.has_capability(capability)
    }

    pub fn asked(&self, pred: impl Fn(&ToolRequest) -> bool) -> bool {
        self.history.iter().any(|o| pred(&o.request))
    }

    /// Whether any usable observation so far says `label` is present.
    pub fn positive(&self, label: FindingLabel) -> bool {
        self.history.iter().filter_map(Observation::usable).any(|o| match &o.payload {
            Payload::Labels(_) => o.score(label).is_some_and(|s| s >= 0.5),
            Payload::Text(t) => polarity_in_text(t, label) == Some(Polarity::Present),
            _ => false,
        })
    }

    fn classified(&self, label: FindingLabel) -> bool {
        self.history
            .iter()
            .filter_map(Observation::usable)
            .any(|o| o.score(label).is_some())
    }
}

pub trait ActionPolicy {
    fn next_action(&mut self, state: &ReactState<'_>) -> Action;
}

impl<F> ActionPolicy for F
where
    F: FnMut(&ReactState<'_>) -> Action,
{
    fn next_action(&mut self, state: &ReactState<'_>) -> Action {
        self(state)
    }
}

/// Deterministic rule table: classify, ask about what the classifier does
/// not cover, localize what looks present, then stop.
#[derive(Debug, Clone, Copy, Default)]
pub struct RulePolicy;

impl RulePolicy {
    fn survey(&self, st: &ReactState<'_>, labels: &[FindingLabel]) -> Action {
        let classify = |r: &ToolRequest| matches!(r, ToolRequest::Classify { .. });
        if st.has(Capability::Classify) && labels.iter().any(|l| l.is_chexpert()) && !st.asked(classify) {
            return Action::invoke(
                ToolRequest::Classify { slot: ImageSlot::Current },
                "Screen the image with the classifier.",
            );
        }
        if st.has(Capability::Vqa) {
            for &label in labels {
                let question = default_question(label);
                let asked = st.asked(|r| matches!(r, ToolRequest::Vqa { question: q } if *q == question));
                let need = !st.classified(label) || (labels.len() == 1 && st.has(Capability::Classify));
                if need && !asked {
                    return Action::invoke(
                        ToolRequest::Vqa { question },
                        format!("Ask directly about {}.", label.display_name()),
                    );
                }
            }
        }
        if st.has(Capability::Ground) {
            for &label in labels {
                let grounded = st.asked(|r| matches!(r, ToolRequest::Ground { finding, .. } if *finding == label));
                if !label.is_global() && st.positive(label) && !grounded {
                    return Action::invoke(
                        ToolRequest::Ground {
                            finding: label,
                            slot: ImageSlot::Current,
                        },
                        format!("Localize {} to find its side.", label.display_name()),
                    );
                }
            }
        }
        Action::finish("Evidence gathered.")
    }
}

impl ActionPolicy for RulePolicy {
    fn next_action(&mut self, st: &ReactState<'_>) -> Action {
        if st.history.last().is_some_and(|o| o.result.is_err()) {
            return Action::finish("A tool failed; stopping.");
        }
        match st.ctx.task.kind {
            TaskKind::Freeform => {
                if st.has(Capability::Vqa) && st.history.is_empty() {
                    Action::invoke(
                        ToolRequest::Vqa {
                            question: st.ctx.task.text.clone(),
                        },
                        "Pose the question to the visual question answering tool.",
                    )
                } else {
                    Action::finish("Answered.")
                }
            }
            _ => self.survey(st, &st.ctx.task.focus(st.ctx.agent)),
        }
    }
}

/// Runs the loop. At most `max_steps` tools are called; a policy still
/// acting after that ends the run as `budget_exhausted`.
pub fn react_loop(ctx: &AgentContext, policy: &mut dyn ActionPolicy, max_steps: usize) -> AgentReport {
    let mut session = Session::new(ctx, ExecMode::React, None);
    let mut history: Vec<Observation> = Vec::new();
    let mut finished = false;
    for _ in 0..=max_steps {
        let action = policy.next_action(&ReactState { ctx, history: &history });
        let (request, thought) = match action {
            Action::Finish { thought } => {
                session.note("react finish", thought);
                finished = true;
                break;
            }
            Action::Invoke { request, thought } => (request, thought),
        };
        if history.len() == max_steps {
            break;
        }
        let tag = format!("react: {thought}");
        let step = format!("react{}", history.len() + 1);
        let obs = match session.call(&step, &tag, request.clone()) {
            Ok(call) => {
                let verdict = Some(call.verdict.clone());
                Observation {
                    request,
                    result: Ok(call.output),
                    verdict,
                }
            }
            Err(e) => Observation {
                request,
                result: Err(e),
                verdict: None,
            },
        };
        history.push(obs);
    }
    session.report.modes_exercised.clear();
    if let Some(err) = history.iter().find_map(|o| o.result.as_ref().err()) {
        return session.fail(format!("tool failure: {err}"));
    }
    conclude(&mut session, &history);
    if !finished {
        for f in &mut session.report.findings {
            f.finding = make_finding(f.finding.label, Polarity::Uncertain, Laterality::None, Confidence::ZERO, Vec::new());
            f.evidence.clear();
        }
        session.report.status = ReportStatus::Uncertain;
        session.report.reason = Some("budget_exhausted".to_string());
    } else if history.is_empty() {
        session.report.status = ReportStatus::Uncertain;
        session.report.reason = Some("finished without evidence".to_string());
    }
    session.report
}

/// Claims from each usable observation, then one finding per focus label:
/// the most confident claim wins (earliest on ties).
fn conclude(session: &mut Session<'_>, history: &[Observation]) {
    let ctx = session.ctx;
    let focus = ctx.task.focus(ctx.agent);
    let width = ctx.case.current_pixels.width();
    for (i, obs) in history.iter().enumerate() {
        let Some(out) = obs.usable() else { continue };
        let index = session.report.evidence.iter().position(|e| e.step == format!("react{}", i + 1));
        let mut push = |label, polarity, laterality| {
            session.report.claims.push(super::Claim {
                label,
                polarity,
                laterality,
                confidence: out.confidence,
                source: out.tool_id.clone(),
                kind: ClaimKind::Label,
                evidence: index,
            })
        };
        match (&out.payload, &obs.request) {
            (Payload::Labels(_), _) => {
                for &label in &focus {
                    if let Some(s) = out.score(label) {
                        push(label, Polarity::from_present(s >= 0.5), Laterality::None);
                    }
                }
            }
            (Payload::Boxes(boxes), ToolRequest::Ground { finding, .. }) if focus.contains(finding) => {
                let side = if finding.is_global() {
                    Laterality::None
                } else {
                    side_of_boxes(boxes, width)
                };
                push(*finding, Polarity::from_present(!boxes.is_empty()), side);
            }
            (Payload::Text(text), _) => {
                session.report.answer_text = Some(text.clone());
                for &label in &focus {
                    if let Some(p @ (Polarity::Present | Polarity::Absent)) = polarity_in_text(text, label) {
                        let side = if p == Polarity::Present && !label.is_global() {
                            side_in_text(text)
                        } else {
                            Laterality::None
                        };
                        session.report.claims.push(super::Claim {
                            label,
                            polarity: p,
                            laterality: side,
                            confidence: out.confidence,
                            source: out.tool_id.clone(),
                            kind: ClaimKind::Label,
                            evidence: index,
                        });
                    }
                }
            }
            _ => {}
        }
    }
    let texts: Vec<&str> = history
        .iter()
        .filter_map(Observation::usable)
        .filter_map(|o| match &o.payload {
            Payload::Text(t) => Some(t.as_str()),
            _ => None,
        })
        .collect();
    for &label in &focus {
        let claims: Vec<&super::Claim> = session.report.claims.iter().filter(|c| c.label == label).collect();
        let Some(best) = claims
            .iter()
            .copied()
            .reduce(|a, b| if b.confidence.get() > a.confidence.get() { b } else { a })
        else {
            continue;
        };
        let side = claims
            .iter()
            .filter(|c| c.polarity == Polarity::Present)
            .map(|c| c.laterality)
            .find(|l| l.is_sided())
            .unwrap_or(Laterality::None);
        let attrs: Vec<String> = texts
            .iter()
            .filter(|t| polarity_in_text(t, label) == Some(Polarity::Present))
            .flat_map(|t| descriptors(t))
            .fold(Vec::new(), |mut acc, d| {
                if !acc.contains(&d) {
                    acc.push(d);
                }
                acc
            });
        let evidence: Vec<usize> = claims
            .iter()
            .filter(|c| c.polarity == best.polarity)
            .filter_map(|c| c.evidence)
            .collect();
        let finding = make_finding(label, best.polarity, side, best.confidence, attrs);
        session.report.findings.push(ReportedFinding { finding, evidence });
    }
}
