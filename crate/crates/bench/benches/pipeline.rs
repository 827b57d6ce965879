use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use radagents_core::agents::TaskKind;
use radagents_core::controller::{ea_prompt, report_prompt, AgentRuntime};
use radagents_core::eval::{ea_grid, grid_cases, run_eval, stacked_memory};
use radagents_core::geometry::{cardiothoracic_ratio, hemidiaphragm_comparison, tracheal_deviation};
use radagents_core::model::FindingLabel;
use radagents_core::phantom::{generate_study, PhantomParams};
use radagents_core::pipeline::{Engine, VragSetup};
use radagents_core::toolkit::{default_registry, CorruptionPolicy};
use radagents_core::vrag::{EmbeddingRecord, HnswIndex, HnswParams, Memory, PhantomEmbedder, VectorStore};

fn random_memory(n: usize, dim: usize, seed: u64) -> Memory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Memory::with_dim(dim);
    for i in 0..n {
        m.insert(EmbeddingRecord {
            study_id: format!("v{i:05}"),
            image: String::new(),
            vector: (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            report_text: String::new(),
            labels: Vec::new(),
        })
        .unwrap();
    }
    m
}

fn hnsw(c: &mut Criterion) {
    let mut g = c.benchmark_group("hnsw");
    g.sample_size(10);
    let small = random_memory(1000, 128, 1);
    g.bench_function("build 1000x128", |b| {
        b.iter(|| HnswIndex::build(black_box(&small), HnswParams::default()).unwrap())
    });

    let memory = random_memory(2000, 768, 2);
    let index = HnswIndex::build(&memory, HnswParams::default()).unwrap();
    let queries = random_memory(64, 768, 3);
    let mut i = 0;
    g.bench_function("knn k=10 ef=64 over 2000x768", |b| {
        b.iter(|| {
            i = (i + 1) % queries.len();
            index.knn(black_box(&queries.records()[i].vector), 10, 64).unwrap()
        })
    });
    g.finish();
}

fn geometry(c: &mut Criterion) {
    let study = generate_study(&PhantomParams::default()).unwrap();
    let m = &study.truth.masks;
    let projection = study.params.projection;
    c.bench_function("geometry/ctr 512x512", |b| {
        b.iter(|| cardiothoracic_ratio(&m.heart, &m.left_lung, &m.right_lung, black_box(projection)).unwrap())
    });
    c.bench_function("geometry/trachea 512x512", |b| {
        b.iter(|| tracheal_deviation(black_box(&m.trachea), &m.left_lung, &m.right_lung).unwrap())
    });
    c.bench_function("geometry/diaphragm 512x512", |b| {
        b.iter(|| hemidiaphragm_comparison(black_box(&m.left_hemidiaphragm), &m.right_hemidiaphragm).unwrap())
    });
    c.bench_function("phantom/generate 512x512", |b| {
        b.iter_batched(PhantomParams::default, |p| generate_study(&p).unwrap(), BatchSize::SmallInput)
    });
}

fn pipeline(c: &mut Criterion) {
    let case = generate_study(&PhantomParams::default()).unwrap().to_case();
    let engine = Engine::new(AgentRuntime::new(default_registry(&CorruptionPolicy::none())));
    let ea = ea_prompt(FindingLabel::Cardiomegaly);
    let report = report_prompt();
    c.bench_function("pipeline/existence question", |b| b.iter(|| engine.run(black_box(&case), &ea).unwrap()));
    c.bench_function("pipeline/report", |b| b.iter(|| engine.run(black_box(&case), &report).unwrap()));

    let grid = ea_grid(50).unwrap();
    let studies: Vec<_> = grid.iter().map(|(c, _)| c.clone()).collect();
    let cases = grid_cases(TaskKind::EaVqa, grid).unwrap();
    let memory = stacked_memory(&studies, &PhantomEmbedder).unwrap();
    let index = HnswIndex::build(&memory, HnswParams::default()).unwrap();
    let runtime = AgentRuntime::new(default_registry(&CorruptionPolicy::flip(0.3, 11)));
    let with_vrag = Engine::new(runtime).with_vrag(VragSetup {
        store: Arc::new(index) as Arc<dyn VectorStore>,
        embedder: Arc::new(PhantomEmbedder),
        k: 3,
    });
    let mut g = c.benchmark_group("eval");
    g.sample_size(10);
    g.bench_function("existence grid 50 cases", |b| {
        b.iter(|| run_eval(TaskKind::EaVqa, black_box(&cases), &engine, None).unwrap())
    });
    g.bench_function("existence grid 50 cases, corrupted, retrieval on", |b| {
        b.iter(|| run_eval(TaskKind::EaVqa, black_box(&cases), &with_vrag, None).unwrap())
    });
    g.finish();
}

criterion_group!(benches, hnsw, geometry, pipeline);
criterion_main!(benches);
