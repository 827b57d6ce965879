//! Evaluation: phantom case grids, metrics, and the batch runner.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::TaskKind;
use crate::controller::{cp_prompt, ea_prompt, report_prompt, Query};
use crate::labels::extract_labels;
use crate::model::{Confidence, FindingLabel, Laterality, Polarity, Progression, Severity};
use crate::phantom::{
    generate_pair, generate_study, pair_case, random_params, CaseMeta, CaseStudy, LoadedCase, PhantomError,
    PhantomFinding, PhantomParams,
};
use crate::pipeline::{Engine, PipelineError};
use crate::trace::{Phase, TraceStep, TrajectoryTrace};
use crate::vrag::embed::Embedder;
use crate::vrag::{EmbeddingRecord, Memory, VragError};

pub const EA_GRID_SIZE: usize = 50;
pub const TWINS_PER_CASE: usize = 3;
const ENLARGED_HEART: f64 = 0.62;
const NORMAL_HEART: f64 = 0.42;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{preds} predictions for {golds} gold entries")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("`{0}` is not one of improving, stable, worsening")]
    InvalidLabel(String),
    #[error("no cases to score")]
    NoCases,
    #[error("case {case_id}: {message}")]
    InvalidCase { case_id: String, message: String },
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Vrag(#[from] VragError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Gold {
    Existence { label: FindingLabel, polarity: Polarity },
    Progression { label: FindingLabel, progression: Progression },
    Report { labels: BTreeSet<FindingLabel> },
}

impl Gold {
    pub fn task_kind(&self) -> TaskKind {
        match self {
            Gold::Existence { .. } => TaskKind::EaVqa,
            Gold::Progression { .. } => TaskKind::CpVqa,
            Gold::Report { .. } => TaskKind::Report,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalCase {
    pub case: CaseStudy,
    pub query: Query,
    pub gold: Gold,
    pub consensus: bool,
}

fn invalid(case: &CaseStudy, message: impl Into<String>) -> EvalError {
    EvalError::InvalidCase {
        case_id: case.id().to_string(),
        message: message.into(),
    }
}

impl EvalCase {
    /// Builds the task's canonical query and reads the gold from ground truth.
    pub fn new(task: TaskKind, case: CaseStudy, target: Option<FindingLabel>, progression: Option<Progression>) -> Result<Self, EvalError> {
        let truth = case.truth.clone().ok_or_else(|| invalid(&case, "no ground truth"))?;
        let need_target = || target.ok_or_else(|| invalid(&case, "no query finding"));
        let (text, gold) = match task {
            TaskKind::EaVqa => {
                let label = need_target()?;
                (ea_prompt(label), Gold::Existence { label, polarity: truth.polarity(label) })
            }
            TaskKind::CpVqa => {
                let label = need_target()?;
                let progression = progression.ok_or_else(|| invalid(&case, "no gold progression"))?;
                if !case.has_prior() {
                    return Err(invalid(&case, "comparison case without a prior"));
                }
                (cp_prompt(label), Gold::Progression { label, progression })
            }
            TaskKind::Report => {
                let labels = FindingLabel::CHEXPERT
                    .into_iter()
                    .filter(|l| truth.polarity(*l) == Polarity::Present)
                    .collect();
                (report_prompt(), Gold::Report { labels })
            }
            TaskKind::Freeform => return Err(invalid(&case, "freeform questions have no gold")),
        };
        let query = Query::new(text, task, target.filter(|_| task != TaskKind::Report), task == TaskKind::CpVqa)
            .map_err(|e| invalid(&case, e.to_string()))?;
        Ok(Self {
            case,
            query,
            gold,
            consensus: true,
        })
    }

    pub fn from_loaded(task: TaskKind, loaded: &LoadedCase) -> Result<Self, EvalError> {
        let mut c = Self::new(task, loaded.case.clone(), loaded.query_finding, loaded.progression)?;
        c.consensus = loaded.consensus;
        Ok(c)
    }

    pub fn id(&self) -> &str {
        self.case.id()
    }
}

fn sided(label: FindingLabel, i: usize) -> Laterality {
    match (label.is_global(), label) {
        (true, _) => Laterality::None,
        (_, FindingLabel::Edema) => Laterality::Bilateral,
        _ if i % 4 < 2 => Laterality::Right,
        _ => Laterality::Left,
    }
}

fn with_finding(params: &mut PhantomParams, label: FindingLabel, laterality: Laterality, severity: Severity) {
    if label == FindingLabel::Cardiomegaly {
        params.heart_width_frac = ENLARGED_HEART;
    } else {
        params.findings.push(PhantomFinding {
            label,
            laterality,
            severity,
        });
    }
}

/// Existence questions: case `i` asks about the `i mod 7`th queried finding,
/// present on even `i`; every third case carries an unrelated finding too.
pub fn ea_grid(n: usize) -> Result<Vec<(CaseStudy, CaseMeta)>, EvalError> {
    let q = FindingLabel::QUERIED;
    (0..n)
        .map(|i| {
            let target = q[i % q.len()];
            let mut p = random_params(1000 + i as u64);
            p.study_id = Some(format!("ea-{i:03}"));
            p.heart_width_frac = NORMAL_HEART;
            p.trachea_offset_frac = 0.0;
            if i % 2 == 0 {
                with_finding(&mut p, target, sided(target, i), Severity::ALL[i % 3]);
            }
            if i % 3 == 0 {
                let distractor = q[(i + 3) % q.len()];
                with_finding(&mut p, distractor, sided(distractor, i + 1), Severity::Moderate);
            }
            let study = generate_study(&p)?;
            Ok((
                study.to_case(),
                CaseMeta {
                    query_finding: Some(target),
                    progression: None,
                },
            ))
        })
        .collect()
}

/// Comparison pairs: every progression finding under every trajectory.
pub fn cp_grid() -> Result<Vec<(CaseStudy, CaseMeta)>, EvalError> {
    let mut out = Vec::new();
    for (li, label) in FindingLabel::PROGRESSION.into_iter().enumerate() {
        for (pi, progression) in Progression::ALL.into_iter().enumerate() {
            let mut p = random_params(2000 + (li * 3 + pi) as u64);
            p.study_id = Some(format!("cp-{}-{}", label.as_snake(), progression.as_str()));
            p.heart_width_frac = NORMAL_HEART;
            p.trachea_offset_frac = 0.0;
            let (prior, current) = generate_pair(&p, progression, label)?;
            out.push((
                pair_case(&prior, &current),
                CaseMeta {
                    query_finding: Some(label),
                    progression: Some(progression),
                },
            ));
        }
    }
    Ok(out)
}

pub fn grid_cases(task: TaskKind, grid: Vec<(CaseStudy, CaseMeta)>) -> Result<Vec<EvalCase>, EvalError> {
    grid.into_iter()
        .map(|(case, meta)| EvalCase::new(task, case, meta.query_finding, meta.progression))
        .collect()
}

/// A memory holding `TWINS_PER_CASE` truthful copies of every case, each
/// under its own study id, so a case's nearest neighbours are its twins.
pub fn stacked_memory(cases: &[CaseStudy], embedder: &dyn Embedder) -> Result<Memory, EvalError> {
    let mut memory = Memory::new();
    for case in cases {
        let truth = case.truth.as_ref().ok_or_else(|| invalid(case, "no ground truth"))?;
        for j in 0..TWINS_PER_CASE {
            let mut twin = case.clone();
            twin.study.study_id = format!("{}-twin{j}", case.id());
            let vector = embedder.embed(&twin)?;
            let image = twin.study.current_image.path.clone();
            memory.insert(EmbeddingRecord::from_truth(twin.id(), image, vector, truth))?;
        }
    }
    Ok(memory)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Summary {
    pub macro_f1: f64,
    pub per_label: BTreeMap<FindingLabel, LabelStats>,
}

/// Positive-versus-rest F1 per CheXpert label, averaged over the labels that
/// have a positive in either predictions or gold. With no such label the
/// score is 1.0.
pub fn macro_f1_14(preds: &[BTreeSet<FindingLabel>], golds: &[BTreeSet<FindingLabel>]) -> Result<F1Summary, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let mut per_label = BTreeMap::new();
    for label in FindingLabel::CHEXPERT {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, g) in preds.iter().zip(golds) {
            match (p.contains(&label), g.contains(&label)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        if tp + fp + fn_ == 0 {
            continue;
        }
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        per_label.insert(label, LabelStats { tp, fp, fn_, f1 });
    }
    let macro_f1 = if per_label.is_empty() {
        1.0
    } else {
        per_label.values().map(|s| s.f1).sum::<f64>() / per_label.len() as f64
    };
    Ok(F1Summary { macro_f1, per_label })
}

/// Exact-match accuracy over the three progression words.
pub fn eval_progression(preds: &[&str], golds: &[Progression]) -> Result<f64, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::NoCases);
    }
    let mut hits = 0;
    for (p, g) in preds.iter().zip(golds) {
        let p: Progression = p.parse().map_err(|_| EvalError::InvalidLabel(p.to_string()))?;
        hits += usize::from(p == *g);
    }
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub gold: Gold,
    pub answer: String,
    pub predicted: BTreeSet<FindingLabel>,
    pub confidence: Confidence,
    pub conflicts: usize,
    pub unresolved: usize,
    pub scored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_f1_14: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_label: BTreeMap<FindingLabel, LabelStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub total_ms: f64,
    pub mean_case_ms: f64,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task_kind: TaskKind,
    pub n_cases: usize,
    pub n_scored: usize,
    pub metrics: Metrics,
    pub cases: Vec<CaseResult>,
    pub failures: Vec<CaseFailure>,
    pub traces_written: usize,
    pub runtime: RuntimeStats,
}

impl MetricReport {
    /// Everything except timing.
    pub fn same_scores(&self, other: &MetricReport) -> bool {
        self.task_kind == other.task_kind
            && self.n_cases == other.n_cases
            && self.metrics == other.metrics
            && self.cases == other.cases
            && self.failures == other.failures
    }
}

fn predicted_labels(gold: &Gold, answer: &str) -> BTreeSet<FindingLabel> {
    let extracted = extract_labels(answer);
    match gold {
        Gold::Existence { label, .. } => [*label].into_iter().filter(|l| extracted.is_positive(*l)).collect(),
        _ => FindingLabel::CHEXPERT.into_iter().filter(|l| extracted.is_positive(*l)).collect(),
    }
}

fn gold_labels(gold: &Gold) -> BTreeSet<FindingLabel> {
    match gold {
        Gold::Existence { label, polarity } => {
            [*label].into_iter().filter(|_| *polarity == Polarity::Present).collect()
        }
        Gold::Report { labels } => labels.clone(),
        Gold::Progression { .. } => BTreeSet::new(),
    }
}

fn failure_trace(message: &str) -> TrajectoryTrace {
    let mut t = TrajectoryTrace::new();
    t.push(TraceStep::new(Phase::Synthesize, "evaluator", "case failed", message, Confidence::ZERO))
        .expect("single step");
    t.finish(format!("error: {message}"), Confidence::ZERO)
}

fn trace_file_name(case_id: &str) -> String {
    let safe: String = case_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.trace.json")
}

type Outcome = (Result<CaseResult, String>, TrajectoryTrace, f64);

fn run_case(engine: &Engine, c: &EvalCase) -> Outcome {
    let start = Instant::now();
    let run = engine.run_query(&c.case, &c.query);
    let ms = start.elapsed().as_secs_f64() * 1e3;
    match run {
        Ok(out) => {
            let a = &out.answer;
            let result = CaseResult {
                case_id: c.id().to_string(),
                gold: c.gold.clone(),
                answer: a.text.clone(),
                predicted: predicted_labels(&c.gold, &a.text),
                confidence: a.confidence,
                conflicts: a.conflicts.len(),
                unresolved: a.resolutions.iter().filter(|r| !r.is_resolved()).count(),
                scored: c.consensus,
            };
            (Ok(result), a.trace.clone(), ms)
        }
        Err(e) => {
            let message = match e {
                PipelineError::Controller(e) => e.to_string(),
                other => other.to_string(),
            };
            let trace = failure_trace(&message);
            (Err(message), trace, ms)
        }
    }
}

/// Runs every case through the engine, in parallel, and scores the
/// answers. Cases without reviewer consensus are run but not scored. When
/// `trace_dir` is given, one trace file is written per case.
pub fn run_eval(task: TaskKind, cases: &[EvalCase], engine: &Engine, trace_dir: Option<&Path>) -> Result<MetricReport, EvalError> {
    if let Some(c) = cases.iter().find(|c| c.gold.task_kind() != task) {
        return Err(invalid(&c.case, format!("gold does not match task {}", task.as_str())));
    }
    let start = Instant::now();
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(cases.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Outcome>>> = Mutex::new(vec![None; cases.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(c) = cases.get(i) else { break };
                let outcome = run_case(engine, c);
                slots.lock().expect("no panics while holding the lock")[i] = Some(outcome);
            });
        }
    });
    let outcomes: Vec<Outcome> = slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|o| o.expect("every case ran"))
        .collect();

    let mut traces_written = 0;
    if let Some(dir) = trace_dir {
        std::fs::create_dir_all(dir).map_err(|source| EvalError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for (c, (_, trace, _)) in cases.iter().zip(&outcomes) {
            let path = dir.join(trace_file_name(c.id()));
            std::fs::write(&path, trace.serialize()).map_err(|source| EvalError::Io { path, source })?;
            traces_written += 1;
        }
    }

    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut case_ms = 0.0;
    for (c, (r, _, ms)) in cases.iter().zip(outcomes) {
        case_ms += ms;
        match r {
            Ok(r) => results.push(r),
            Err(message) => failures.push(CaseFailure {
                case_id: c.id().to_string(),
                message,
            }),
        }
    }
    let scored: Vec<&CaseResult> = results.iter().filter(|r| r.scored).collect();
    let mut metrics = Metrics::default();
    match task {
        TaskKind::CpVqa => {
            let preds: Vec<&str> = scored.iter().map(|r| r.answer.as_str()).collect();
            let golds: Vec<Progression> = scored
                .iter()
                .map(|r| match r.gold {
                    Gold::Progression { progression, .. } => progression,
                    _ => unreachable!("task checked above"),
                })
                .collect();
            metrics.accuracy = match eval_progression(&preds, &golds) {
                Ok(a) => Some(a),
                Err(EvalError::NoCases) => None,
                Err(e) => return Err(e),
            };
        }
        _ => {
            let preds: Vec<BTreeSet<FindingLabel>> = scored.iter().map(|r| r.predicted.clone()).collect();
            let golds: Vec<BTreeSet<FindingLabel>> = scored.iter().map(|r| gold_labels(&r.gold)).collect();
            let f1 = macro_f1_14(&preds, &golds)?;
            metrics.macro_f1_14 = Some(f1.macro_f1);
            metrics.per_label = f1.per_label;
        }
    }
    Ok(MetricReport {
        task_kind: task,
        n_cases: cases.len(),
        n_scored: scored.len(),
        metrics,
        cases: results,
        failures,
        traces_written,
        runtime: RuntimeStats {
            total_ms: start.elapsed().as_secs_f64() * 1e3,
            mean_case_ms: if cases.is_empty() { 0.0 } else { case_ms / cases.len() as f64 },
            workers,
        },
    })
}
