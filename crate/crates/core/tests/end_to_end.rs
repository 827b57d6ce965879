use std::sync::Arc;

use radagents_core::agents::TaskKind;
use radagents_core::controller::{ea_prompt, AgentRuntime};
use radagents_core::eval::{cp_grid, ea_grid, grid_cases, run_eval, stacked_memory, Gold, EA_GRID_SIZE};
use radagents_core::model::{FindingLabel, Polarity, Progression};
use radagents_core::phantom::{generate_study, PhantomParams};
use radagents_core::pipeline::{Engine, VragSetup};
use radagents_core::toolkit::{default_registry, CorruptionPolicy};
use radagents_core::trace::{Phase, TrajectoryTrace};
use radagents_core::vrag::{HnswIndex, HnswParams, PhantomEmbedder};

fn clean_engine() -> Engine {
    Engine::new(AgentRuntime::new(default_registry(&CorruptionPolicy::none())))
}

#[test]
fn clean_existence_grid_is_perfect() {
    let cases = grid_cases(TaskKind::EaVqa, ea_grid(EA_GRID_SIZE).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = run_eval(TaskKind::EaVqa, &cases, &clean_engine(), Some(dir.path())).unwrap();
    let wrong: Vec<_> = report
        .cases
        .iter()
        .filter(|c| {
            let present = matches!(c.gold, Gold::Existence { polarity: Polarity::Present, .. });
            c.predicted.len() != usize::from(present)
        })
        .map(|c| (&c.case_id, &c.answer))
        .collect();
    assert!(wrong.is_empty(), "{wrong:?}");
    assert_eq!(report.metrics.macro_f1_14, Some(1.0));
    assert_eq!(report.failures.len(), 0);
    assert_eq!(report.traces_written, EA_GRID_SIZE);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), EA_GRID_SIZE);
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let bytes = std::fs::read(entry.unwrap().path()).unwrap();
        let t = TrajectoryTrace::parse(&bytes).unwrap();
        assert!(t.is_phase_monotone());
        assert!(t.count_phase(Phase::Synthesize) >= 1);
    }
}

#[test]
fn clean_comparison_grid_is_perfect() {
    let cases = grid_cases(TaskKind::CpVqa, cp_grid().unwrap()).unwrap();
    let report = run_eval(TaskKind::CpVqa, &cases, &clean_engine(), None).unwrap();
    for c in &report.cases {
        assert!(Progression::ALL.iter().any(|p| p.as_str() == c.answer), "{}", c.answer);
    }
    assert_eq!(report.metrics.accuracy, Some(1.0), "{:#?}", report.cases);
    assert_eq!(report.n_cases, 12);
}

#[test]
fn evaluation_is_deterministic() {
    let cases = grid_cases(TaskKind::EaVqa, ea_grid(14).unwrap()).unwrap();
    let engine = Engine::new(AgentRuntime::new(default_registry(&CorruptionPolicy::flip(0.3, 5))));
    let a = run_eval(TaskKind::EaVqa, &cases, &engine, None).unwrap();
    let b = run_eval(TaskKind::EaVqa, &cases, &engine, None).unwrap();
    assert!(a.same_scores(&b));
}

#[test]
fn cardiomegaly_answer_reads_present() {
    let p = PhantomParams {
        heart_width_frac: 0.62,
        ..PhantomParams::default()
    };
    let case = generate_study(&p).unwrap().to_case();
    let out = clean_engine().run(&case, &ea_prompt(FindingLabel::Cardiomegaly)).unwrap();
    assert!(out.answer.text.contains("present"), "{}", out.answer.text);
    assert_eq!(out.answer.finding(FindingLabel::Cardiomegaly).unwrap().polarity, Polarity::Present);
    assert!(out.answer.trace.is_phase_monotone());
}

#[test]
fn retrieval_never_lowers_the_score() {
    let grid = ea_grid(EA_GRID_SIZE).unwrap();
    let studies: Vec<_> = grid.iter().map(|(c, _)| c.clone()).collect();
    let cases = grid_cases(TaskKind::EaVqa, grid).unwrap();
    let memory = stacked_memory(&studies, &PhantomEmbedder).unwrap();
    let index = HnswIndex::build(&memory, HnswParams::default()).unwrap();
    let runtime = AgentRuntime::new(default_registry(&CorruptionPolicy::flip(0.3, 11)));
    let off = Engine::new(runtime.clone());
    let on = Engine::new(runtime).with_vrag(VragSetup {
        store: Arc::new(index),
        embedder: Arc::new(PhantomEmbedder),
        k: 3,
    });
    let r_off = run_eval(TaskKind::EaVqa, &cases, &off, None).unwrap();
    let r_on = run_eval(TaskKind::EaVqa, &cases, &on, None).unwrap();
    let (f_off, f_on) = (r_off.metrics.macro_f1_14.unwrap(), r_on.metrics.macro_f1_14.unwrap());
    let conflicts: usize = r_on.cases.iter().map(|c| c.conflicts).sum();
    eprintln!("off {f_off:.4} on {f_on:.4} conflicts {conflicts}");
    assert!(f_on >= f_off);
}
