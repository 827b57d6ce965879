//! Acceptance checks shared by the integration tests. Each check returns a
//! one-line summary on success and a description of the first violation on
//! failure. Oracles here are written independently of the library code.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use radagents_core::agents::{isolation_holds, AgentId, ExecMode, TaskKind};
use radagents_core::controller::{
    classify_query, cp_prompt, dispatch, ea_prompt, make_plan, report_prompt, AgentRuntime,
};
use radagents_core::eval::{
    cp_grid, ea_grid, grid_cases, run_eval, stacked_memory, EvalCase, EA_GRID_SIZE, TWINS_PER_CASE,
};
use radagents_core::geometry::{
    cardiothoracic_ratio, hemidiaphragm_comparison, quarter_patch, tracheal_deviation, DiaphragmFlag, Quadrant,
    TrachealVerdict,
};
use radagents_core::model::{FindingLabel, Mask, Polarity, Progression, Projection};
use radagents_core::phantom::{generate_pair, generate_study, pair_case, random_params, CaseStudy, PhantomFinding};
use radagents_core::pipeline::{Engine, RunOutput, VragSetup};
use radagents_core::toolkit::{default_registry, CorruptionPolicy, ImageSlot, Payload, SegmentTarget, ToolRequest};
use radagents_core::trace::TrajectoryTrace;
use radagents_core::verify::{Decision, Verifier};
use radagents_core::vrag::references::SweepQuery;
use radagents_core::vrag::{k_sweep, knn_exact, EmbeddingRecord, Embedder, HnswIndex, HnswParams, Memory, PhantomEmbedder};

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// ---------------------------------------------------------------- oracles

/// A union of one to four random rectangles.
pub fn random_blob(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Mask {
    let rects: Vec<(u32, u32, u32, u32)> = (0..rng.random_range(1..=4))
        .map(|_| {
            let x0 = rng.random_range(0..w);
            let y0 = rng.random_range(0..h);
            let x1 = rng.random_range(x0..w);
            let y1 = rng.random_range(y0..h);
            (x0, y0, x1, y1)
        })
        .collect();
    let mut bits = vec![false; (w * h) as usize];
    for row in 0..h {
        for col in 0..w {
            bits[(row * w + col) as usize] = rects
                .iter()
                .any(|&(x0, y0, x1, y1)| (x0..=x1).contains(&col) && (y0..=y1).contains(&row));
        }
    }
    Mask::from_bits(w, h, bits).unwrap()
}

/// Leftmost and rightmost occupied columns, by scanning columns outward.
pub fn oracle_cols(m: &Mask) -> Option<(u32, u32)> {
    let occupied = |c: u32| (0..m.height()).any(|r| m.get(r, c));
    let lo = (0..m.width()).find(|&c| occupied(c))?;
    let hi = (0..m.width()).rev().find(|&c| occupied(c))?;
    Some((lo, hi))
}

/// First occupied row from the top.
pub fn oracle_top_row(m: &Mask) -> Option<u32> {
    (0..m.height()).find(|&r| (0..m.width()).any(|c| m.get(r, c)))
}

pub fn oracle_mean_col(m: &Mask) -> f64 {
    let (mut n, mut s) = (0u64, 0u64);
    for r in 0..m.height() {
        for c in 0..m.width() {
            if m.get(r, c) {
                n += 1;
                s += c as u64;
            }
        }
    }
    s as f64 / n as f64
}

pub fn oracle_quarter(img: &GrayImage, q: Quadrant) -> GrayImage {
    let (w, h) = img.dimensions();
    let (lw, uh) = (w.div_ceil(2), h.div_ceil(2));
    let (x0, pw) = match q {
        Quadrant::UL | Quadrant::LL => (0, lw),
        _ => (lw, w - lw),
    };
    let (y0, ph) = match q {
        Quadrant::UL | Quadrant::UR => (0, uh),
        _ => (uh, h - uh),
    };
    GrayImage::from_fn(pw, ph, |x, y| *img.get_pixel(x0 + x, y0 + y))
}

pub fn check_geometry_oracles() -> Check {
    let mut worst = 0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.random_range(8..120u32), rng.random_range(8..120u32));
        let heart = random_blob(&mut rng, w, h);
        let left = random_blob(&mut rng, w, h);
        let right = random_blob(&mut rng, w, h);
        let trachea = random_blob(&mut rng, w, h);

        let (h0, h1) = oracle_cols(&heart).unwrap();
        let (l0, l1) = oracle_cols(&left).unwrap();
        let (r0, r1) = oracle_cols(&right).unwrap();
        let (t0, t1) = (l0.min(r0), l1.max(r1));
        let projection = if seed % 2 == 0 { Projection::PA } else { Projection::AP };
        let ctr = cardiothoracic_ratio(&heart, &left, &right, projection).map_err(|e| e.to_string())?;
        ensure!(ctr.cardiac_width_px == h1 - h0 + 1, "seed {seed}: cardiac width");
        ensure!(ctr.thoracic_width_px == t1 - t0 + 1, "seed {seed}: thoracic width");
        let ratio = (h1 - h0 + 1) as f64 / (t1 - t0 + 1) as f64;
        worst = worst.max((ctr.ratio - ratio).abs());

        let dev = tracheal_deviation(&trachea, &left, &right).map_err(|e| e.to_string())?;
        let offset = oracle_mean_col(&trachea) - (t0 + t1) as f64 / 2.0;
        let norm = offset / (t1 - t0 + 1) as f64;
        worst = worst.max((dev.normalized_offset - norm).abs());
        ensure!(dev.offset_px == offset.round() as i64, "seed {seed}: offset px");
        let verdict = if norm.abs() <= 0.03 {
            TrachealVerdict::Midline
        } else if norm > 0.0 {
            TrachealVerdict::DeviatedPatientLeft
        } else {
            TrachealVerdict::DeviatedPatientRight
        };
        ensure!(dev.verdict == verdict, "seed {seed}: tracheal verdict");

        let (lh, rh) = (random_blob(&mut rng, w, h), random_blob(&mut rng, w, h));
        let d = hemidiaphragm_comparison(&lh, &rh).map_err(|e| e.to_string())?;
        let (la, ra) = (oracle_top_row(&lh).unwrap(), oracle_top_row(&rh).unwrap());
        ensure!(d.left_apex_row == la && d.right_apex_row == ra, "seed {seed}: apex rows");
        ensure!(d.delta_rows == la as i64 - ra as i64, "seed {seed}: delta rows");
        let flag = if (ra as f64 - la as f64) > 0.02 * h as f64 {
            DiaphragmFlag::LeftHigherThanRight
        } else {
            DiaphragmFlag::Normal
        };
        ensure!(d.flag == flag, "seed {seed}: diaphragm flag");

        let img = GrayImage::from_fn(w, h, |_, _| image::Luma([rng.random()]));
        for q in Quadrant::ALL {
            let got = quarter_patch(&img, q).map_err(|e| e.to_string())?;
            ensure!(got == oracle_quarter(&img, q), "seed {seed}: quarter {q:?}");
        }
    }
    ensure!(worst <= 1e-9, "ratio error {worst:e} exceeds 1e-9");
    Ok(format!("100 mask sets, integer extents exact, max ratio error {worst:.1e}"))
}

// ---------------------------------------------------------------- phantoms

pub fn check_phantom_consistency() -> Check {
    let mut worst = 0f64;
    for seed in 0..50u64 {
        let p = random_params(seed);
        let a = generate_study(&p).map_err(|e| e.to_string())?;
        let m = &a.truth.masks;
        let ctr = cardiothoracic_ratio(&m.heart, &m.left_lung, &m.right_lung, p.projection).map_err(|e| e.to_string())?;
        let err = (ctr.ratio - p.heart_width_frac).abs();
        worst = worst.max(err);
        ensure!(err <= 0.01, "seed {seed}: ctr {} vs {}", ctr.ratio, p.heart_width_frac);
        let b = generate_study(&p).map_err(|e| e.to_string())?;
        ensure!(a.image.as_raw() == b.image.as_raw(), "seed {seed}: pixels differ on regeneration");
        ensure!(a.truth == b.truth && a.study == b.study, "seed {seed}: truth differs on regeneration");
    }
    Ok(format!("50 phantoms, max |CTR - heart_width_frac| {worst:.4}, regeneration byte-identical"))
}

// ---------------------------------------------------------------- retrieval

pub fn random_memory(n: usize, dim: usize, seed: u64) -> Memory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Memory::with_dim(dim);
    for i in 0..n {
        let vector = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        m.insert(EmbeddingRecord {
            study_id: format!("v{i:04}"),
            image: String::new(),
            vector,
            report_text: String::new(),
            labels: Vec::new(),
        })
        .unwrap();
    }
    m
}

pub fn recall(index: &HnswIndex, memory: &Memory, queries: &[Vec<f32>], k: usize, ef: usize) -> f64 {
    let mut total = 0.0;
    for q in queries {
        let exact: BTreeSet<usize> = knn_exact(memory, q, k).unwrap().iter().map(|h| h.index).collect();
        let approx = index.knn(q, k, ef).unwrap();
        total += approx.iter().filter(|h| exact.contains(&h.index)).count() as f64 / k as f64;
    }
    total / queries.len() as f64
}

pub fn check_hnsw_recall() -> Check {
    let (n, dim) = (1000, 768);
    let memory = random_memory(n, dim, 42);
    let index = HnswIndex::build(&memory, HnswParams::default()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let queries: Vec<Vec<f32>> = (0..100)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let r64 = recall(&index, &memory, &queries, 3, 64);
    let rn = recall(&index, &memory, &queries, 3, n);
    ensure!(r64 >= 0.95, "recall@3 at ef=64 is {r64:.3}");
    ensure!(rn == 1.0, "recall@3 at ef=N is {rn:.3}");
    Ok(format!("recall@3 {r64:.3} at ef=64, {rn:.3} at ef={n}"))
}

// ---------------------------------------------------------------- end to end

pub fn clean_engine() -> Engine {
    Engine::new(AgentRuntime::new(default_registry(&CorruptionPolicy::none())))
}

/// Serialize, parse back, compare, and check phase order.
pub fn trace_ok(t: &TrajectoryTrace) -> Result<(), String> {
    let back = TrajectoryTrace::parse(&t.serialize()).map_err(|e| e.to_string())?;
    ensure!(&back == t, "trace changed on round trip");
    ensure!(t.is_phase_monotone(), "trace phases out of order");
    Ok(())
}

fn run_checked(engine: &Engine, c: &EvalCase) -> Result<RunOutput, String> {
    let out = engine.run_query(&c.case, &c.query).map_err(|e| format!("{}: {e}", c.id()))?;
    trace_ok(&out.answer.trace).map_err(|e| format!("{}: {e}", c.id()))?;
    Ok(out)
}

pub fn check_clean_soundness() -> Check {
    let engine = clean_engine();
    let ea = grid_cases(TaskKind::EaVqa, ea_grid(EA_GRID_SIZE).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let cp = grid_cases(TaskKind::CpVqa, cp_grid().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let ea_report = run_eval(TaskKind::EaVqa, &ea, &engine, None).map_err(|e| e.to_string())?;
    let cp_report = run_eval(TaskKind::CpVqa, &cp, &engine, None).map_err(|e| e.to_string())?;
    let f1 = ea_report.metrics.macro_f1_14.unwrap_or(0.0);
    let acc = cp_report.metrics.accuracy.unwrap_or(0.0);
    ensure!(ea_report.n_cases == 50 && cp_report.n_cases == 12, "grid sizes");
    ensure!(f1 == 1.0, "ea macro-F1 {f1}");
    ensure!(acc == 1.0, "cp accuracy {acc}");
    for c in &cp_report.cases {
        ensure!(Progression::ALL.iter().any(|p| p.as_str() == c.answer), "open-vocabulary cp answer {:?}", c.answer);
    }
    Ok(format!("ea macro-F1 {f1:.3} over 50 cases, cp accuracy {acc:.3} over 12 pairs"))
}

// ---------------------------------------------------------------- verifier

/// Every segmentation request the agents can issue for a case.
pub fn segment_requests(case: &CaseStudy) -> Vec<ToolRequest> {
    let mut slots = vec![ImageSlot::Current];
    if case.has_prior() {
        slots.push(ImageSlot::Prior);
    }
    let mut out = Vec::new();
    for slot in slots {
        for organ in radagents_core::phantom::Organ::ALL {
            out.push(ToolRequest::Segment {
                target: SegmentTarget::Organ(organ),
                slot,
            });
        }
        for label in FindingLabel::PROGRESSION {
            out.push(ToolRequest::Segment {
                target: SegmentTarget::Finding(label),
                slot,
            });
        }
    }
    out
}

/// Questions whose workflows segment organs and lesions.
const SEGMENTING: [FindingLabel; 4] = [
    FindingLabel::Cardiomegaly,
    FindingLabel::PleuralEffusion,
    FindingLabel::TrachealDeviation,
    FindingLabel::DiaphragmElevation,
];

fn agent_evidence(engine: &Engine, cases: &[CaseStudy]) -> Result<Vec<radagents_core::agents::Evidence>, String> {
    let mut out = Vec::new();
    for case in cases.iter().take(25) {
        for label in SEGMENTING {
            let run = engine.run(case, &ea_prompt(label)).map_err(|e| e.to_string())?;
            trace_ok(&run.answer.trace)?;
            out.extend(run.reports.into_iter().flat_map(|r| r.evidence));
        }
    }
    Ok(out)
}

fn gating_cases() -> Result<Vec<CaseStudy>, String> {
    let mut cases: Vec<CaseStudy> = ea_grid(EA_GRID_SIZE).map_err(|e| e.to_string())?.into_iter().map(|(c, _)| c).collect();
    cases.extend(cp_grid().map_err(|e| e.to_string())?.into_iter().map(|(c, _)| c));
    Ok(cases)
}

pub fn check_verifier_gating() -> Check {
    let cases = gating_cases()?;
    let verifier = Verifier::default();
    let dropout = default_registry(&CorruptionPolicy::dropout(0.5, 7));
    let (mut empty, mut rejected) = (0, 0);
    for case in &cases {
        for req in segment_requests(case) {
            let Ok(out) = dropout.invoke_first(&req, case) else { continue };
            if let Payload::Mask(m) = &out.payload {
                if m.is_empty() {
                    empty += 1;
                    rejected += usize::from(verifier.verify(&out, &req, case).is_reject());
                }
            }
        }
    }
    ensure!(empty > 0, "dropout produced no empty masks");
    ensure!(rejected == empty, "{rejected} of {empty} empty masks rejected");

    // Through the agents: every empty mask they saw was rejected.
    let engine = Engine::new(AgentRuntime::new(dropout));
    let (mut seen_empty, mut seen_rejected) = (0, 0);
    for ev in agent_evidence(&engine, &cases)? {
        if ev.summary == "mask area 0 px" {
            seen_empty += 1;
            seen_rejected += usize::from(ev.verdict.decision == Decision::Reject);
        }
    }
    ensure!(seen_empty > 0, "agents never received an empty mask");
    ensure!(seen_rejected == seen_empty, "agents accepted {} empty masks", seen_empty - seen_rejected);

    // Clean mocks: no output of any capability is rejected.
    let clean = default_registry(&CorruptionPolicy::none());
    let mut checked = 0;
    for case in &cases {
        let mut reqs = segment_requests(case);
        reqs.push(ToolRequest::Classify { slot: ImageSlot::Current });
        reqs.push(ToolRequest::Report);
        for label in FindingLabel::QUERIED {
            reqs.push(ToolRequest::Vqa { question: ea_prompt(label) });
            if case.truth.as_ref().is_some_and(|t| t.polarity(label) == Polarity::Present) {
                reqs.push(ToolRequest::Ground {
                    finding: label,
                    slot: ImageSlot::Current,
                });
            }
        }
        for req in reqs {
            let out = match clean.invoke_first(&req, case) {
                Ok(o) => o,
                Err(_) => continue,
            };
            if let Payload::Mask(m) = &out.payload {
                if m.is_empty() {
                    continue;
                }
            }
            checked += 1;
            let v = verifier.verify(&out, &req, case);
            ensure!(!v.is_reject(), "{}: clean {} rejected: {}", case.id(), req.describe(), v.reason);
        }
    }
    let evidence = agent_evidence(&clean_engine(), &cases)?;
    let clean_evidence = evidence.len();
    for ev in &evidence {
        ensure!(ev.verdict.decision != Decision::Reject, "agent saw clean rejection {}: {}", ev.id, ev.verdict.reason);
    }
    Ok(format!(
        "{rejected}/{empty} empty masks rejected ({seen_rejected}/{seen_empty} inside agents); \
         0 rejections over {checked} clean outputs and {clean_evidence} clean agent calls"
    ))
}

// ---------------------------------------------------------------- V-RAG

pub struct VragComparison {
    pub f1_off: f64,
    pub f1_on: f64,
    pub conflicts: usize,
    pub resolved_true: usize,
}

pub fn vrag_comparison(seed: u64) -> Result<VragComparison, String> {
    let grid = ea_grid(EA_GRID_SIZE).map_err(|e| e.to_string())?;
    let studies: Vec<CaseStudy> = grid.iter().map(|(c, _)| c.clone()).collect();
    let cases = grid_cases(TaskKind::EaVqa, grid).map_err(|e| e.to_string())?;
    let memory = stacked_memory(&studies, &PhantomEmbedder).map_err(|e| e.to_string())?;
    let index = HnswIndex::build(&memory, HnswParams::default()).map_err(|e| e.to_string())?;
    let runtime = AgentRuntime::new(default_registry(&CorruptionPolicy::flip(0.3, seed)));
    let off = Engine::new(runtime.clone());
    let on = Engine::new(runtime).with_vrag(VragSetup {
        store: Arc::new(index),
        embedder: Arc::new(PhantomEmbedder),
        k: TWINS_PER_CASE,
    });
    let mut conflicts = 0;
    let mut resolved_true = 0;
    for c in &cases {
        let out = run_checked(&on, c)?;
        let truth = c.case.truth.as_ref().expect("phantom truth");
        for r in &out.answer.resolutions {
            conflicts += 1;
            if r.verdict == truth.polarity(r.label) {
                resolved_true += 1;
            }
        }
        run_checked(&off, c)?;
    }
    let f1_off = run_eval(TaskKind::EaVqa, &cases, &off, None).map_err(|e| e.to_string())?;
    let f1_on = run_eval(TaskKind::EaVqa, &cases, &on, None).map_err(|e| e.to_string())?;
    Ok(VragComparison {
        f1_off: f1_off.metrics.macro_f1_14.unwrap_or(0.0),
        f1_on: f1_on.metrics.macro_f1_14.unwrap_or(0.0),
        conflicts,
        resolved_true,
    })
}

pub fn check_vrag_resolution() -> Check {
    let mut lines = Vec::new();
    for seed in [11u64, 23, 37] {
        let v = vrag_comparison(seed)?;
        ensure!(v.conflicts > 0, "seed {seed}: no conflicts to resolve");
        ensure!(
            v.resolved_true == v.conflicts,
            "seed {seed}: {} of {} conflicts resolved to truth",
            v.resolved_true,
            v.conflicts
        );
        ensure!(v.f1_on >= v.f1_off, "seed {seed}: F1 on {:.4} < off {:.4}", v.f1_on, v.f1_off);
        lines.push(format!("seed {seed}: {} conflicts, F1 {:.3} -> {:.3}", v.conflicts, v.f1_off, v.f1_on));
    }
    Ok(lines.join("; "))
}

/// Phantom memory with eight records for each of the seven queried
/// findings, and one held-out query per record class.
pub fn sweep_setup() -> Result<(Memory, Vec<SweepQuery>), String> {
    let embedder = PhantomEmbedder;
    let mut memory = Memory::new();
    let mut queries = Vec::new();
    for (li, label) in FindingLabel::QUERIED.into_iter().enumerate() {
        for j in 0..9u64 {
            let mut p = random_params(5000 + li as u64 * 100 + j);
            p.heart_width_frac = 0.42;
            p.trachea_offset_frac = 0.0;
            p.study_id = Some(format!("sweep-{}-{j}", label.as_snake()));
            if label == FindingLabel::Cardiomegaly {
                p.heart_width_frac = 0.62;
            } else {
                p.findings.push(PhantomFinding {
                    label,
                    laterality: if label == FindingLabel::Edema {
                        radagents_core::model::Laterality::Bilateral
                    } else {
                        radagents_core::model::Laterality::Right
                    },
                    severity: radagents_core::model::Severity::ALL[(j % 3) as usize],
                });
            }
            let case = generate_study(&p).map_err(|e| e.to_string())?.to_case();
            let truth = case.truth.clone().unwrap();
            let vector = embedder.embed(&case).map_err(|e| e.to_string())?;
            if j == 0 {
                queries.push(SweepQuery {
                    vector,
                    exclude: Some(case.id().to_string()),
                    truth: FindingLabel::QUERIED.iter().map(|&l| (l, truth.polarity(l))).collect(),
                });
            } else {
                memory
                    .insert(EmbeddingRecord::from_truth(case.id(), "", vector, &truth))
                    .map_err(|e| e.to_string())?;
            }
        }
    }
    Ok((memory, queries))
}

pub fn check_k_sweep() -> Check {
    let (memory, queries) = sweep_setup()?;
    let index = HnswIndex::build(&memory, HnswParams::default()).map_err(|e| e.to_string())?;
    let rows = k_sweep(&index, &queries, &[1, 3, 5]).map_err(|e| e.to_string())?;
    for w in rows.windows(2) {
        ensure!(
            w[1].helpful_rate >= w[0].helpful_rate,
            "helpful rate fell from {:.3} at k={} to {:.3} at k={}",
            w[0].helpful_rate,
            w[0].k,
            w[1].helpful_rate,
            w[1].k
        );
    }
    let shown: Vec<String> = rows
        .iter()
        .map(|r| format!("k={} helpful {:.3} harmful {:.3}", r.k, r.helpful_rate, r.harmful_rate))
        .collect();
    Ok(shown.join(", "))
}

// ---------------------------------------------------------------- routing

pub fn mixed_queries() -> Result<Vec<(CaseStudy, String)>, String> {
    let single = generate_study(&random_params(77)).map_err(|e| e.to_string())?.to_case();
    let (prior, current) =
        generate_pair(&random_params(78), Progression::Worsening, FindingLabel::PleuralEffusion).map_err(|e| e.to_string())?;
    let paired = pair_case(&prior, &current);
    let mut out = Vec::new();
    for label in FindingLabel::QUERIED {
        out.push((single.clone(), ea_prompt(label)));
    }
    for label in FindingLabel::PROGRESSION {
        out.push((paired.clone(), cp_prompt(label)));
    }
    out.push((single.clone(), ea_prompt(FindingLabel::TrachealDeviation)));
    out.push((single.clone(), ea_prompt(FindingLabel::DiaphragmElevation)));
    out.push((single.clone(), report_prompt()));
    out.push((paired.clone(), report_prompt()));
    for q in [
        "Is there a rib fracture?",
        "Are support devices visible?",
        "Is the trachea midline?",
        "How does the heart look?",
        "What is the weather like today?",
    ] {
        out.push((single.clone(), q.to_string()));
    }
    Ok(out)
}

pub fn check_isolation_routing() -> Check {
    let runtime = AgentRuntime::new(default_registry(&CorruptionPolicy::none()));
    let queries = mixed_queries()?;
    ensure!(queries.len() == 20, "expected 20 queries, built {}", queries.len());
    let (mut pe, mut react) = (0, 0);
    for (case, text) in &queries {
        let q = classify_query(text, case);
        let plan = make_plan(&q, &runtime.tools, &runtime.templates).map_err(|e| format!("{text}: {e}"))?;
        if q.task_kind == TaskKind::Report {
            ensure!(plan.selected_agents() == AgentId::ALL.to_vec(), "{text}: report plan skips agents");
        }
        for a in &plan.assignments {
            let has_template = q.target_finding.and_then(|f| runtime.templates.find(a.agent, q.task_kind, f)).is_some();
            ensure!(
                (a.exec == ExecMode::React) == !has_template,
                "{text}: {} runs {:?} with template={has_template}",
                a.agent,
                a.exec
            );
            if a.exec == ExecMode::React {
                react += 1;
            } else {
                pe += 1;
            }
        }
        let reports = dispatch(&plan, case, &runtime);
        ensure!(isolation_holds(&reports), "{text}: shared observations between agents");
        for r in &reports {
            let planned = plan.assignment(r.agent).map(|a| a.exec);
            ensure!(planned == Some(r.exec), "{text}: {} ran {:?}, planned {planned:?}", r.agent, r.exec);
            let leaked = r.trace_fragment.iter().any(|s| s.agent_id != r.agent.as_str());
            ensure!(!leaked, "{text}: {} fragment carries another agent's step", r.agent);
        }
        let focus: Vec<BTreeSet<FindingLabel>> = plan
            .assignments
            .iter()
            .map(|a| a.task.focus(a.agent).into_iter().collect())
            .collect();
        if q.task_kind == TaskKind::Report {
            for (i, a) in focus.iter().enumerate() {
                for b in &focus[i + 1..] {
                    ensure!(a.is_disjoint(b), "{text}: overlapping agent scopes");
                }
            }
        }
        let engine = Engine::new(runtime.clone());
        let out = engine.run(case, text).map_err(|e| format!("{text}: {e}"))?;
        trace_ok(&out.answer.trace).map_err(|e| format!("{text}: {e}"))?;
    }
    Ok(format!("20 queries: {pe} plan-and-execute and {react} ReAct assignments, all template-consistent"))
}

pub fn check_trace_round_trip() -> Check {
    let engine = clean_engine();
    let mut n = 0;
    let ea = grid_cases(TaskKind::EaVqa, ea_grid(EA_GRID_SIZE).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let cp = grid_cases(TaskKind::CpVqa, cp_grid().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    for c in ea.iter().chain(&cp) {
        run_checked(&engine, c)?;
        n += 1;
    }
    for c in ea.iter().take(10) {
        let out = engine.run(&c.case, &report_prompt()).map_err(|e| e.to_string())?;
        trace_ok(&out.answer.trace)?;
        n += 1;
    }
    Ok(format!("{n} runs round-tripped and phase-monotone"))
}
