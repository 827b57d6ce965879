use std::sync::Arc;

use super::*;
use crate::model::{MeasurementKind, Progression, Severity};
use crate::phantom::{generate_pair, generate_study, pair_case, PhantomFinding, PhantomParams};
use crate::toolkit::{default_registry, Capability, CorruptionPolicy, ImageSlot, Tool, ToolCard, ToolSource};

fn ctx(agent: AgentId, kind: TaskKind, finding: Option<FindingLabel>, case: CaseStudy, tools: ToolRegistry) -> AgentContext {
    AgentContext {
        agent,
        task: AgentTask {
            kind,
            text: String::new(),
            finding,
        },
        case,
        tools,
        verifier: Verifier::default(),
        thresholds: GeometryThresholds::default(),
        max_steps: DEFAULT_MAX_STEPS,
    }
}

fn clean() -> ToolRegistry {
    default_registry(&CorruptionPolicy::none())
}

fn phantom(f: impl FnOnce(&mut PhantomParams)) -> CaseStudy {
    let mut p = PhantomParams::default();
    f(&mut p);
    generate_study(&p).unwrap().to_case()
}

fn template(name: &str, agent: AgentId, finding: FindingLabel) -> WorkflowTemplate {
    let set = TemplateSet::builtin();
    let t = set.get(name).unwrap();
    let kind = t.task;
    set.find(agent, kind, finding).unwrap()
}

#[test]
fn cardiomegaly_template_measures_and_diagnoses() {
    let case = phantom(|p| p.heart_width_frac = 0.62);
    let c = ctx(AgentId::Circulation, TaskKind::EaVqa, Some(FindingLabel::Cardiomegaly), case, clean());
    let t = template("cardiomegaly", AgentId::Circulation, FindingLabel::Cardiomegaly);
    let r = run_subagent(&c, ExecMode::PlanExecute, Some(&t)).unwrap();
    let ctr = r.measurements.iter().find(|m| m.kind == MeasurementKind::Ctr).unwrap();
    assert!((ctr.value - 0.62).abs() <= 0.01, "{}", ctr.value);
    let f = r.finding(FindingLabel::Cardiomegaly).unwrap();
    assert_eq!(f.polarity, Polarity::Present);
    let ids: Vec<&str> = r.steps.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["ctr", "assess", "validate", "diagnose"]);
    assert!(r.steps.iter().all(|s| s.outcome == StepOutcome::Executed));
    assert_eq!(r.modes_exercised, t.modes_used);
    assert_eq!(r.vcot.as_ref().unwrap().validation_verdict, ValidationVerdict::Agree);
    assert_eq!(r.status, ReportStatus::Complete);
    // Three segmentations, the measurement, and the visual assessment.
    assert_eq!(r.tool_calls(), 5);
    for rf in &r.findings {
        assert!(!rf.evidence.is_empty());
    }
}

#[test]
fn tracheal_template_on_midline_phantom() {
    let case = phantom(|p| p.trachea_offset_frac = 0.0);
    let c = ctx(AgentId::Airway, TaskKind::EaVqa, Some(FindingLabel::TrachealDeviation), case, clean());
    let t = template("tracheal_deviation", AgentId::Airway, FindingLabel::TrachealDeviation);
    let r = plan_and_execute(&t, &c).unwrap();
    assert_eq!(r.finding(FindingLabel::TrachealDeviation).unwrap().polarity, Polarity::Absent);
    let off = r
        .measurements
        .iter()
        .find(|m| m.kind == MeasurementKind::TrachealOffset && m.units == crate::model::Units::Px)
        .unwrap();
    assert!(off.value.abs() <= 1.0);
}

#[test]
fn tracheal_and_diaphragm_templates_follow_truth() {
    let case = phantom(|p| {
        p.trachea_offset_frac = -0.10;
        p.left_diaphragm_row_frac = 0.60;
        p.right_diaphragm_row_frac = 0.70;
    });
    let truth = case.truth.clone().unwrap();
    let c = ctx(AgentId::Airway, TaskKind::EaVqa, Some(FindingLabel::TrachealDeviation), case.clone(), clean());
    let r = plan_and_execute(&template("tracheal_deviation", AgentId::Airway, FindingLabel::TrachealDeviation), &c).unwrap();
    let f = r.finding(FindingLabel::TrachealDeviation).unwrap();
    assert_eq!(f.polarity, Polarity::Present);
    assert_eq!(f.attributes, truth.finding(FindingLabel::TrachealDeviation).unwrap().attributes);

    let c = ctx(AgentId::Diaphragm, TaskKind::EaVqa, Some(FindingLabel::DiaphragmElevation), case, clean());
    let r = plan_and_execute(&template("diaphragm_elevation", AgentId::Diaphragm, FindingLabel::DiaphragmElevation), &c).unwrap();
    let f = r.finding(FindingLabel::DiaphragmElevation).unwrap();
    assert_eq!((f.polarity, f.laterality), (Polarity::Present, Laterality::Left));
}

#[test]
fn effusion_gate_skips_and_logs() {
    let case = phantom(|_| {});
    let c = ctx(AgentId::Breathing, TaskKind::EaVqa, Some(FindingLabel::PleuralEffusion), case, clean());
    let t = template("pleural_effusion", AgentId::Breathing, FindingLabel::PleuralEffusion);
    let r = plan_and_execute(&t, &c).unwrap();
    let skipped: Vec<&str> = r
        .steps
        .iter()
        .filter(|s| matches!(s.outcome, StepOutcome::Skipped { .. }))
        .map(|s| s.id.as_str())
        .collect();
    assert_eq!(skipped, ["localize", "describe"]);
    let logged = r
        .trace_fragment
        .iter()
        .filter(|s| s.action.starts_with("gate ") && s.observation_summary.contains("skipped"))
        .count();
    assert_eq!(logged, 2);
    assert_eq!(r.finding(FindingLabel::PleuralEffusion).unwrap().polarity, Polarity::Absent);
    assert!(!r.modes_exercised.contains(&ReasoningMode::M2));
}

#[test]
fn effusion_present_gets_side_and_attributes() {
    let case = phantom(|p| {
        p.findings.push(PhantomFinding {
            label: FindingLabel::PleuralEffusion,
            laterality: Laterality::Right,
            severity: Severity::Moderate,
        })
    });
    let c = ctx(AgentId::Breathing, TaskKind::EaVqa, Some(FindingLabel::PleuralEffusion), case, clean());
    let t = template("pleural_effusion", AgentId::Breathing, FindingLabel::PleuralEffusion);
    let r = plan_and_execute(&t, &c).unwrap();
    let f = r.finding(FindingLabel::PleuralEffusion).unwrap();
    assert_eq!((f.polarity, f.laterality), (Polarity::Present, Laterality::Right));
    assert!(f.attributes.contains(&"moderate".to_string()), "{:?}", f.attributes);
    assert_eq!(r.modes_exercised, t.modes_used);
}

#[test]
fn progression_template_reads_area_change() {
    for (prog, label) in [
        (Progression::Worsening, FindingLabel::PleuralEffusion),
        (Progression::Improving, FindingLabel::Edema),
        (Progression::Stable, FindingLabel::Pneumothorax),
    ] {
        let (prior, current) = generate_pair(&PhantomParams::default(), prog, label).unwrap();
        let case = pair_case(&prior, &current);
        let owner = AgentId::owner_of(label);
        let c = ctx(owner, TaskKind::CpVqa, Some(label), case, clean());
        let t = TemplateSet::builtin().find(owner, TaskKind::CpVqa, label).unwrap();
        let r = run_subagent(&c, ExecMode::PlanExecute, Some(&t)).unwrap();
        assert_eq!(r.progression.as_ref().unwrap().progression, prog);
        assert_eq!(r.modes_exercised, [ReasoningMode::M1, ReasoningMode::M4].into());
    }
}

#[test]
fn dropped_masks_fall_back_to_visual_assessment() {
    let case = phantom(|p| p.heart_width_frac = 0.62);
    let tools = default_registry(&CorruptionPolicy::dropout(1.0, 3));
    let c = ctx(AgentId::Circulation, TaskKind::EaVqa, Some(FindingLabel::Cardiomegaly), case, tools);
    let r = plan_and_execute(&template("cardiomegaly", AgentId::Circulation, FindingLabel::Cardiomegaly), &c).unwrap();
    assert!(matches!(r.steps[0].outcome, StepOutcome::Failed { .. }));
    assert!(r.evidence.iter().any(|e| e.verdict.decision == crate::verify::Decision::Reject));
    let f = r.finding(FindingLabel::Cardiomegaly).unwrap();
    assert_eq!(f.polarity, Polarity::Present);
    assert!((f.confidence.get() - 0.72).abs() < 1e-9);
}

struct Broken(ToolCard);

impl Tool for Broken {
    fn card(&self) -> &ToolCard {
        &self.0
    }

    fn invoke(&self, _: &ToolRequest, _: &CaseStudy) -> Result<crate::toolkit::ToolOutput, ToolError> {
        Err(ToolError::Timeout {
            tool_id: self.0.tool_id.clone(),
            detail: "injected".into(),
        })
    }
}

fn with_broken(cap: Capability) -> ToolRegistry {
    let mut reg = ToolRegistry::new();
    reg.register(Arc::new(Broken(ToolCard::new("broken", cap, 0, ToolSource::RemoteHttp)))).unwrap();
    for card in clean().cards().filter(|c| c.capability != cap) {
        let tool = clean().get(&card.tool_id).unwrap().clone();
        reg.register(tool).unwrap();
    }
    reg
}

#[test]
fn tool_timeout_gives_uncertain_partial_report() {
    let case = phantom(|p| p.heart_width_frac = 0.62);
    let c = ctx(AgentId::Circulation, TaskKind::EaVqa, Some(FindingLabel::Cardiomegaly), case.clone(), with_broken(Capability::Vqa));
    let r = plan_and_execute(&template("cardiomegaly", AgentId::Circulation, FindingLabel::Cardiomegaly), &c).unwrap();
    assert!(r.findings.is_empty());
    assert_eq!(r.status, ReportStatus::Uncertain);
    assert!(r.reason.as_deref().unwrap().contains("timed out"), "{:?}", r.reason);
    assert!(!r.measurements.is_empty());

    let c = ctx(AgentId::Breathing, TaskKind::EaVqa, Some(FindingLabel::Edema), case, with_broken(Capability::Classify));
    let r = react_loop(&c, &mut RulePolicy, 8);
    assert!(r.findings.is_empty());
    assert_eq!(r.status, ReportStatus::Uncertain);
    assert_eq!(r.tool_calls(), 1);
}

#[test]
fn react_finish_immediately() {
    let c = ctx(AgentId::Breathing, TaskKind::EaVqa, Some(FindingLabel::Edema), phantom(|_| {}), clean());
    let r = react_loop(&c, &mut |_: &ReactState<'_>| Action::finish("nothing to do"), 8);
    assert_eq!(r.tool_calls(), 0);
    assert!(r.findings.is_empty());
    assert_eq!(r.status, ReportStatus::Uncertain);
}

#[test]
fn react_scripted_classify_then_finish() {
    let case = phantom(|p| {
        p.findings.push(PhantomFinding {
            label: FindingLabel::Edema,
            laterality: Laterality::Bilateral,
            severity: Severity::Mild,
        })
    });
    let c = ctx(AgentId::Breathing, TaskKind::EaVqa, Some(FindingLabel::Edema), case, clean());
    let mut policy = |st: &ReactState<'_>| {
        let scored = st.history.iter().filter_map(|o| o.usable()).find_map(|o| o.score(FindingLabel::Edema));
        match scored {
            Some(s) if s >= 0.5 => Action::finish("classifier is confident"),
            _ => Action::invoke(ToolRequest::Classify { slot: ImageSlot::Current }, "classify"),
        }
    };
    let r = react_loop(&c, &mut policy, 8);
    assert_eq!(r.tool_calls(), 1);
    let f = r.finding(FindingLabel::Edema).unwrap();
    assert_eq!((f.polarity, f.laterality), (Polarity::Present, Laterality::Bilateral));
}

#[test]
fn react_budget_is_enforced() {
    let c = ctx(AgentId::Breathing, TaskKind::EaVqa, Some(FindingLabel::Edema), phantom(|_| {}), clean());
    let mut never = |_: &ReactState<'_>| Action::invoke(ToolRequest::Classify { slot: ImageSlot::Current }, "again");
    let r = react_loop(&c, &mut never, 3);
    assert_eq!(r.tool_calls(), 3);
    assert_eq!(r.reason.as_deref(), Some("budget_exhausted"));
    assert_eq!(r.status, ReportStatus::Uncertain);
    assert!(r.findings.iter().all(|f| f.finding.polarity == Polarity::Uncertain));
}

#[test]
fn react_rule_policy_on_free_question() {
    let mut c = ctx(AgentId::EverythingElse, TaskKind::EaVqa, Some(FindingLabel::Fracture), phantom(|_| {}), clean());
    c.task.text = "Is there a rib fracture near the clavicle?".into();
    let r = run_subagent(&c, ExecMode::React, None).unwrap();
    assert!(r.tool_calls() >= 1);
    assert_eq!(r.exec, ExecMode::React);
    assert_eq!(r.finding(FindingLabel::Fracture).unwrap().polarity, Polarity::Absent);
    assert!(r.trace_fragment.iter().any(|s| s.action == "react finish"));
}

#[test]
fn react_report_survey_covers_scope() {
    let case = phantom(|p| {
        p.trachea_offset_frac = 0.12;
        p.findings.push(PhantomFinding {
            label: FindingLabel::Consolidation,
            laterality: Laterality::Left,
            severity: Severity::Severe,
        });
    });
    let truth = case.truth.clone().unwrap();
    for agent in AgentId::ALL {
        let c = ctx(agent, TaskKind::Report, None, case.clone(), clean());
        let r = run_subagent(&c, ExecMode::React, None).unwrap();
        assert_eq!(r.status, ReportStatus::Complete, "{agent}: {:?}", r.reason);
        for &label in agent.scope() {
            let f = r.finding(label).unwrap_or_else(|| panic!("{agent} missing {label}"));
            assert_eq!(f.polarity, truth.polarity(label), "{label}");
            if let Some(t) = truth.finding(label) {
                assert_eq!(f.laterality, t.laterality, "{label}");
            }
        }
    }
}

#[test]
fn wrong_owner_or_missing_template_rejected() {
    let c = ctx(AgentId::Breathing, TaskKind::EaVqa, Some(FindingLabel::Cardiomegaly), phantom(|_| {}), clean());
    let t = template("cardiomegaly", AgentId::Circulation, FindingLabel::Cardiomegaly);
    assert!(matches!(run_subagent(&c, ExecMode::PlanExecute, Some(&t)), Err(AgentError::WrongOwner { .. })));
    assert!(matches!(run_subagent(&c, ExecMode::PlanExecute, None), Err(AgentError::TemplateRequired)));
}

#[test]
fn isolation_check_detects_shared_observations() {
    let case = phantom(|_| {});
    let reports: Vec<AgentReport> = AgentId::ALL
        .into_iter()
        .map(|a| run_subagent(&ctx(a, TaskKind::Report, None, case.clone(), clean()), ExecMode::React, None).unwrap())
        .collect();
    assert!(isolation_holds(&reports));
    let mut leaked = reports.clone();
    let stolen = leaked[0].evidence[0].clone();
    leaked[1].evidence.push(stolen);
    assert!(!isolation_holds(&leaked));
}
