//! Synthesis: merge agent reports, find contradictory claims, adjudicate
//! them against retrieved studies, and realize the final answer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agents::{make_finding, AgentId, AgentReport, ClaimKind, TaskKind};
use crate::controller::Plan;
use crate::labels::{absent_sentence, finding_sentence};
use crate::model::{Confidence, Finding, FindingLabel, Laterality, Measurement, Polarity, Progression};
use crate::trace::{Phase, TraceStep, TrajectoryTrace};
use crate::vrag::{Memory, RetrievalHit, VectorStore};

pub const SYNTHESIZER: &str = "synthesizer";
pub const UNRESOLVED_PENALTY: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictKind {
    Polarity,
    MeasurementVsLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictClaim {
    pub agent: AgentId,
    pub source: String,
    pub polarity: Polarity,
    pub laterality: Laterality,
    pub confidence: Confidence,
    pub kind: ClaimKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conflict {
    pub label: FindingLabel,
    pub laterality: Laterality,
    pub claims: Vec<ConflictClaim>,
    pub kind: ConflictKind,
}

impl Conflict {
    fn measurement_claims(&self) -> impl Iterator<Item = &ConflictClaim> {
        self.claims.iter().filter(|c| c.kind == ClaimKind::Measurement)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionMethod {
    VragVote,
    SingleSource,
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub label: FindingLabel,
    pub verdict: Polarity,
    pub method: ResolutionMethod,
    pub support: Vec<RetrievalHit>,
    pub confidence: Confidence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Resolution {
    pub fn unresolved(label: FindingLabel, support: Vec<RetrievalHit>, note: impl Into<String>) -> Self {
        Self {
            label,
            verdict: Polarity::Uncertain,
            method: ResolutionMethod::Unresolved,
            support,
            confidence: Confidence::ZERO,
            note: Some(note.into()),
        }
    }

    pub fn is_resolved(&self) -> bool {
        self.method != ResolutionMethod::Unresolved
    }
}

/// Claims grouped by label; a group holding both present and absent claims
/// is a conflict. Ordered by label name.
pub fn detect_conflicts(reports: &[AgentReport]) -> Vec<Conflict> {
    let mut groups: BTreeMap<&'static str, (FindingLabel, Vec<ConflictClaim>)> = BTreeMap::new();
    for r in reports {
        for c in &r.claims {
            groups
                .entry(c.label.as_snake())
                .or_insert_with(|| (c.label, Vec::new()))
                .1
                .push(ConflictClaim {
                    agent: r.agent,
                    source: c.source.clone(),
                    polarity: c.polarity,
                    laterality: c.laterality,
                    confidence: c.confidence,
                    kind: c.kind,
                });
        }
    }
    groups
        .into_values()
        .filter_map(|(label, claims)| {
            let has = |p: Polarity| claims.iter().any(|c| c.polarity == p);
            if !(has(Polarity::Present) && has(Polarity::Absent)) {
                return None;
            }
            let measured = claims.iter().filter(|c| c.kind == ClaimKind::Measurement);
            let labelled = || claims.iter().filter(|c| c.kind == ClaimKind::Label);
            let kind = if measured
                .clone()
                .any(|m| labelled().any(|l| l.polarity != Polarity::Uncertain && l.polarity != m.polarity))
            {
                ConflictKind::MeasurementVsLabel
            } else {
                ConflictKind::Polarity
            };
            let laterality = claims
                .iter()
                .filter(|c| c.polarity == Polarity::Present)
                .map(|c| c.laterality)
                .find(|l| l.is_sided())
                .unwrap_or(Laterality::None);
            Some(Conflict {
                label,
                laterality,
                claims,
                kind,
            })
        })
        .collect()
}

/// Similarity-weighted vote of the retrieved studies on the conflict's
/// label. Measurement claims vote too, weighted by their confidence.
/// Negative similarities carry no weight.
pub fn vote(conflict: &Conflict, hits: &[RetrievalHit], memory: &Memory) -> Resolution {
    let label = conflict.label;
    let (mut present, mut absent, mut carriers) = (0.0, 0.0, 0usize);
    for h in hits {
        let Some(record) = memory.get(h.index) else { continue };
        let w = h.similarity.max(0.0);
        match record.polarity(label) {
            Some(Polarity::Present) => present += w,
            Some(Polarity::Absent) => absent += w,
            _ => continue,
        }
        carriers += 1;
    }
    if carriers == 0 {
        return Resolution::unresolved(label, hits.to_vec(), "no retrieved study carries the label");
    }
    for m in conflict.measurement_claims() {
        match m.polarity {
            Polarity::Present => present += m.confidence.get(),
            Polarity::Absent => absent += m.confidence.get(),
            Polarity::Uncertain => {}
        }
    }
    let total = present + absent;
    let margin = present - absent;
    if total == 0.0 || margin == 0.0 {
        return Resolution::unresolved(label, hits.to_vec(), "tied vote");
    }
    Resolution {
        label,
        verdict: Polarity::from_present(margin > 0.0),
        method: ResolutionMethod::VragVote,
        support: hits.to_vec(),
        confidence: Confidence::saturating(margin.abs() / total),
        note: None,
    }
}

/// Retrieves the `k` studies nearest the query (never the query itself)
/// and votes.
pub fn resolve(conflict: &Conflict, query: &[f32], store: &dyn VectorStore, k: usize, query_id: &str) -> Resolution {
    let keep = |r: &crate::vrag::EmbeddingRecord| r.study_id != query_id;
    match store.search_filtered(query, k, &keep) {
        Ok(hits) => vote(conflict, &hits, store.memory()),
        Err(e) => Resolution::unresolved(conflict.label, Vec::new(), e.to_string()),
    }
}

/// Without retrieval: the most confident claim wins; a tie between
/// opposite claims stays unresolved.
pub fn resolve_single_source(conflict: &Conflict) -> Resolution {
    let decided = conflict.claims.iter().filter(|c| c.polarity != Polarity::Uncertain);
    let best = decided.clone().map(|c| c.confidence.get()).fold(f64::NEG_INFINITY, f64::max);
    let mut winners = decided.filter(|c| c.confidence.get() == best).map(|c| c.polarity);
    let Some(first) = winners.next() else {
        return Resolution::unresolved(conflict.label, Vec::new(), "no decided claim");
    };
    if winners.any(|p| p != first) {
        return Resolution::unresolved(conflict.label, Vec::new(), "equally confident opposite claims");
    }
    Resolution {
        label: conflict.label,
        verdict: first,
        method: ResolutionMethod::SingleSource,
        support: Vec::new(),
        confidence: Confidence::saturating(best),
        note: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub text: String,
    pub findings: Vec<Finding>,
    pub measurements: Vec<Measurement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progression: Option<Progression>,
    pub confidence: Confidence,
    pub conflicts: Vec<Conflict>,
    pub resolutions: Vec<Resolution>,
    pub trace: TrajectoryTrace,
}

impl FinalAnswer {
    pub fn finding(&self, label: FindingLabel) -> Option<&Finding> {
        self.findings.iter().find(|f| f.label == label)
    }
}

fn side_phrase(l: Laterality) -> &'static str {
    match l {
        Laterality::Left => " on the left",
        Laterality::Right => " on the right",
        Laterality::Bilateral => " bilaterally",
        Laterality::None => "",
    }
}

/// One sentence answering an existence question.
pub fn ea_sentence(f: &Finding) -> String {
    let name = f.label.capitalized();
    let verb = if f.label.display_name().ends_with('s') { "are" } else { "is" };
    match f.polarity {
        Polarity::Present => {
            let mut s = format!("{name} {verb} present{}", side_phrase(f.laterality));
            if !f.attributes.is_empty() {
                s.push_str(&format!(", {}", f.attributes.join(", ")));
            }
            s.push('.');
            s
        }
        Polarity::Absent => format!("{name} {verb} absent."),
        Polarity::Uncertain => format!("Possible {}.", f.label.display_name()),
    }
}

fn report_sentence(f: &Finding) -> String {
    match f.polarity {
        Polarity::Absent => absent_sentence(f.label),
        _ => finding_sentence(f),
    }
}

/// Applies a resolution to an agent's finding.
fn merged_finding(f: &Finding, conflict: Option<&Conflict>, res: &Resolution) -> Finding {
    if !res.is_resolved() {
        return make_finding(f.label, Polarity::Uncertain, Laterality::None, f.confidence, Vec::new());
    }
    if res.verdict == f.polarity {
        return Finding {
            confidence: res.confidence,
            ..f.clone()
        };
    }
    let side = conflict.map(|c| c.laterality).unwrap_or(Laterality::None);
    make_finding(f.label, res.verdict, side, res.confidence, Vec::new())
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Builds the final answer and the run's full trace.
pub fn synthesize(plan: &Plan, reports: &[AgentReport], conflicts: &[Conflict], resolutions: &[Resolution]) -> FinalAnswer {
    let mut findings: Vec<Finding> = Vec::new();
    let mut by_agent: Vec<(AgentId, Vec<Finding>)> = Vec::new();
    for r in reports {
        let mut own = Vec::new();
        for rf in &r.findings {
            let f = &rf.finding;
            if findings.iter().any(|g| g.label == f.label) {
                continue;
            }
            let merged = match resolutions.iter().find(|x| x.label == f.label) {
                Some(res) => merged_finding(f, conflicts.iter().find(|c| c.label == f.label), res),
                None => f.clone(),
            };
            findings.push(merged.clone());
            own.push(merged);
        }
        by_agent.push((r.agent, own));
    }
    let measurements: Vec<Measurement> = reports.iter().flat_map(|r| r.measurements.iter().cloned()).collect();
    let query = &plan.query;
    let progression_call = reports.iter().find_map(|r| r.progression.as_ref());
    let (text, contributing): (String, Vec<f64>) = match query.task_kind {
        TaskKind::EaVqa => {
            let label = query.target_finding.expect("validated query");
            match findings.iter().find(|f| f.label == label) {
                Some(f) => (ea_sentence(f), vec![f.confidence.get()]),
                None => (format!("Possible {}.", label.display_name()), vec![0.0]),
            }
        }
        TaskKind::CpVqa => match progression_call {
            Some(p) => (p.progression.as_str().to_string(), vec![p.confidence.get()]),
            None => (Progression::Stable.as_str().to_string(), vec![0.0]),
        },
        TaskKind::Report => {
            let mut text = String::from("Findings:");
            for (agent, own) in &by_agent {
                let para = if own.is_empty() {
                    "Assessment incomplete.".to_string()
                } else {
                    own.iter().map(report_sentence).collect::<Vec<_>>().join(" ")
                };
                text.push_str(&format!("\n\n{}: {para}", agent.title()));
            }
            (text, findings.iter().map(|f| f.confidence.get()).collect())
        }
        TaskKind::Freeform => {
            let answers: Vec<&str> = reports.iter().filter_map(|r| r.answer_text.as_deref()).collect();
            let confs: Vec<f64> = reports
                .iter()
                .filter(|r| r.answer_text.is_some())
                .flat_map(|r| r.evidence.iter().map(|e| e.confidence.get()))
                .collect();
            if answers.is_empty() {
                ("No answer could be produced.".to_string(), vec![0.0])
            } else {
                (answers.join(" "), confs)
            }
        }
    };
    let any_unresolved = resolutions.iter().any(|r| !r.is_resolved());
    let mut confidence = mean(&contributing);
    if any_unresolved {
        confidence *= UNRESOLVED_PENALTY;
    }
    let confidence = Confidence::saturating(confidence);

    let mut trace = TrajectoryTrace::new();
    let mut steps = plan.trace_steps();
    let mut fragments: Vec<TraceStep> = reports.iter().flat_map(|r| r.trace_fragment.iter().cloned()).collect();
    fragments.sort_by_key(|s| s.phase);
    steps.extend(fragments);
    for (c, res) in conflicts.iter().zip(resolutions) {
        let claims: Vec<String> = c
            .claims
            .iter()
            .map(|x| format!("{}:{}={:?}@{:.2}", x.agent, x.source, x.polarity, x.confidence.get()).to_lowercase())
            .collect();
        steps.push(TraceStep::new(
            Phase::Synthesize,
            SYNTHESIZER,
            format!("resolve {}", c.label.as_snake()),
            format!(
                "{:?} conflict [{}] -> {:?} by {:?} ({} references)",
                c.kind,
                claims.join(", "),
                res.verdict,
                res.method,
                res.support.len()
            )
            .to_lowercase(),
            res.confidence,
        ));
    }
    steps.push(TraceStep::new(Phase::Synthesize, SYNTHESIZER, "final answer", text.clone(), confidence));
    for s in steps {
        trace.push(s).expect("steps are assembled in phase order");
    }
    let trace = trace.finish(text.clone(), confidence);

    FinalAnswer {
        text,
        findings,
        measurements,
        progression: progression_call.map(|p| p.progression),
        confidence,
        conflicts: conflicts.to_vec(),
        resolutions: resolutions.to_vec(),
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{Claim, ExecMode};
    use crate::vrag::EmbeddingRecord;

    fn claim(label: FindingLabel, polarity: Polarity, conf: f64, source: &str, kind: ClaimKind) -> Claim {
        Claim {
            label,
            polarity,
            laterality: Laterality::None,
            confidence: Confidence::new(conf).unwrap(),
            source: source.into(),
            kind,
            evidence: None,
        }
    }

    fn report(agent: AgentId, claims: Vec<Claim>) -> AgentReport {
        let mut r = AgentReport::new(agent, ExecMode::React, None);
        r.claims = claims;
        r
    }

    fn memory(entries: &[(&str, Polarity)]) -> Memory {
        let mut m = Memory::with_dim(2);
        for (id, p) in entries {
            let f = make_finding(FindingLabel::Pneumothorax, *p, Laterality::Right, Confidence::ONE, Vec::new());
            m.insert(EmbeddingRecord {
                study_id: id.to_string(),
                image: String::new(),
                vector: vec![1.0, 0.0],
                report_text: String::new(),
                labels: vec![f],
            })
            .unwrap();
        }
        m
    }

    fn hits(sims: &[f64]) -> Vec<RetrievalHit> {
        sims.iter()
            .enumerate()
            .map(|(i, s)| RetrievalHit {
                index: i,
                study_id: format!("h{i}"),
                similarity: *s,
            })
            .collect()
    }

    fn ptx_conflict() -> Conflict {
        detect_conflicts(&[report(
            AgentId::Breathing,
            vec![
                claim(FindingLabel::Pneumothorax, Polarity::Present, 0.9, "a", ClaimKind::Label),
                claim(FindingLabel::Pneumothorax, Polarity::Absent, 0.5, "b", ClaimKind::Label),
            ],
        )])
        .remove(0)
    }

    #[test]
    fn measurement_against_classifier() {
        let reports = [report(
            AgentId::Circulation,
            vec![
                claim(FindingLabel::Cardiomegaly, Polarity::Absent, 0.7, "mock_classifier", ClaimKind::Label),
                claim(FindingLabel::Cardiomegaly, Polarity::Present, 0.95, "calc_ctr", ClaimKind::Measurement),
            ],
        )];
        let c = detect_conflicts(&reports);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].kind, ConflictKind::MeasurementVsLabel);
    }

    #[test]
    fn agreement_and_disjoint_labels_give_nothing() {
        let agree = [report(
            AgentId::Breathing,
            vec![
                claim(FindingLabel::Edema, Polarity::Present, 0.9, "a", ClaimKind::Label),
                claim(FindingLabel::Edema, Polarity::Present, 0.5, "b", ClaimKind::Label),
            ],
        )];
        assert!(detect_conflicts(&agree).is_empty());
        let disjoint = [
            report(AgentId::Breathing, vec![claim(FindingLabel::Edema, Polarity::Present, 0.9, "a", ClaimKind::Label)]),
            report(
                AgentId::Circulation,
                vec![claim(FindingLabel::Cardiomegaly, Polarity::Absent, 0.9, "b", ClaimKind::Label)],
            ),
        ];
        assert!(detect_conflicts(&disjoint).is_empty());
    }

    #[test]
    fn conflicts_sorted_by_label_name() {
        let r = report(
            AgentId::Breathing,
            vec![
                claim(FindingLabel::Pneumothorax, Polarity::Present, 0.9, "a", ClaimKind::Label),
                claim(FindingLabel::Pneumothorax, Polarity::Absent, 0.9, "b", ClaimKind::Label),
                claim(FindingLabel::Edema, Polarity::Present, 0.9, "a", ClaimKind::Label),
                claim(FindingLabel::Edema, Polarity::Absent, 0.9, "b", ClaimKind::Label),
            ],
        );
        let labels: Vec<FindingLabel> = detect_conflicts(&[r]).iter().map(|c| c.label).collect();
        assert_eq!(labels, [FindingLabel::Edema, FindingLabel::Pneumothorax]);
    }

    #[test]
    fn weighted_vote_arithmetic() {
        let m = memory(&[("p1", Polarity::Present), ("p2", Polarity::Present), ("a1", Polarity::Absent)]);
        let r = vote(&ptx_conflict(), &hits(&[0.9, 0.8, 0.7]), &m);
        assert_eq!((r.verdict, r.method), (Polarity::Present, ResolutionMethod::VragVote));
        let expected = (1.7 - 0.7) / 2.4;
        assert!((r.confidence.get() - expected).abs() < 1e-12);

        let m = memory(&[("p", Polarity::Present)]);
        let r = vote(&ptx_conflict(), &hits(&[1.0]), &m);
        assert_eq!((r.verdict, r.confidence.get()), (Polarity::Present, 1.0));

        let m = memory(&[("p", Polarity::Present), ("a", Polarity::Absent)]);
        let r = vote(&ptx_conflict(), &hits(&[0.6, 0.6]), &m);
        assert_eq!((r.verdict, r.method), (Polarity::Uncertain, ResolutionMethod::Unresolved));
    }

    #[test]
    fn single_source_rules() {
        let r = resolve_single_source(&ptx_conflict());
        assert_eq!((r.verdict, r.confidence.get()), (Polarity::Present, 0.9));
        let tie = detect_conflicts(&[report(
            AgentId::Breathing,
            vec![
                claim(FindingLabel::Pneumothorax, Polarity::Present, 0.5, "a", ClaimKind::Label),
                claim(FindingLabel::Pneumothorax, Polarity::Absent, 0.5, "b", ClaimKind::Label),
            ],
        )]);
        assert!(!resolve_single_source(&tie[0]).is_resolved());
    }

    #[test]
    fn realized_sentences() {
        let f = make_finding(
            FindingLabel::PleuralEffusion,
            Polarity::Present,
            Laterality::Right,
            Confidence::ONE,
            vec!["moderate".into()],
        );
        assert_eq!(ea_sentence(&f), "Pleural effusion is present on the right, moderate.");
        let a = make_finding(FindingLabel::Cardiomegaly, Polarity::Absent, Laterality::None, Confidence::ONE, vec![]);
        assert_eq!(ea_sentence(&a), "Cardiomegaly is absent.");
        for &label in FindingLabel::ALL {
            for p in [Polarity::Present, Polarity::Absent, Polarity::Uncertain] {
                let f = make_finding(label, p, Laterality::Left, Confidence::ONE, vec![]);
                let got = crate::labels::extract_labels(&ea_sentence(&f)).get(label).polarity();
                if label != FindingLabel::NoFinding {
                    assert_eq!(got, Some(p), "{}", ea_sentence(&f));
                }
            }
        }
    }
}
