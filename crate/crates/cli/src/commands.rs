use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use radagents_core::agents::TaskKind;
use radagents_core::config::Config;
use radagents_core::eval::{cp_grid, ea_grid, run_eval, stacked_memory, EvalCase, EA_GRID_SIZE};
use radagents_core::model::{FindingLabel, Polarity};
use radagents_core::phantom::{generate_study, load_case, load_case_dir, write_case, CaseMeta, PhantomParams};
use radagents_core::pipeline::{Engine, VragSetup};
use radagents_core::trace::TrajectoryTrace;
use radagents_core::vrag::{read_index, write_index, EmbeddingRecord, HnswIndex, Memory, VectorStore};

use crate::{EvalArgs, RunArgs};

/// A command line that parsed but cannot be acted on.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    Usage(message.into()).into()
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    Config::resolve(path).context("loading config")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn run(config: Option<&Path>, args: RunArgs) -> Result<()> {
    let mut config = load_config(config)?;
    if args.vrag {
        config.vrag.enabled = true;
    }
    if let Some(k) = args.k {
        config.vrag.k = k;
    }
    if args.index.is_some() {
        config.vrag.index = args.index;
    }
    if config.vrag.enabled && config.vrag.index.is_none() {
        return Err(usage("--vrag needs an index: pass --index or set vrag.index in the config"));
    }
    config.validate().map_err(|e| usage(e.to_string()))?;

    let loaded = load_case(&args.study).with_context(|| format!("loading {}", args.study.display()))?;
    let engine = Engine::from_config(&config)?;
    let out = engine.run(&loaded.case, &args.query)?;
    if let Some(path) = &args.trace {
        write_file(path, &out.answer.trace.serialize())?;
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&out.answer)?);
        return Ok(());
    }
    println!("{}", out.answer.text);
    println!();
    println!("confidence: {}", out.answer.confidence);
    println!("agents: {}", agent_list(&out.plan.selected_agents()));
    for r in &out.answer.resolutions {
        println!(
            "conflict on {}: {:?} via {:?} (conf {})",
            r.label.as_snake(),
            r.verdict,
            r.method,
            r.confidence
        );
    }
    Ok(())
}

fn agent_list(agents: &[radagents_core::agents::AgentId]) -> String {
    agents.iter().map(|a| a.as_str()).collect::<Vec<_>>().join(", ")
}

fn traces_dir(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".traces");
    out.with_file_name(name)
}

pub fn eval(config: Option<&Path>, args: EvalArgs) -> Result<()> {
    let task: TaskKind = args.task.parse().map_err(|_| usage(format!("unknown task `{}`", args.task)))?;
    if task == TaskKind::Freeform {
        return Err(usage("freeform questions cannot be scored; use ea, cp or report"));
    }
    let mut config = load_config(config)?;
    if args.vrag {
        config.vrag.enabled = true;
    }
    if let Some(k) = args.k {
        config.vrag.k = k;
    }
    if args.index.is_some() {
        config.vrag.index = args.index;
    }
    if let Some(p) = args.corrupt {
        config.corruption.flip_label_prob = p;
    }
    if let Some(s) = args.seed {
        config.corruption.seed = s;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;

    let loaded = load_case_dir(&args.fixtures).with_context(|| format!("loading {}", args.fixtures.display()))?;
    let cases = loaded
        .iter()
        .map(|l| EvalCase::from_loaded(task, l))
        .collect::<Result<Vec<_>, _>>()?;

    let engine = if config.vrag.enabled && config.vrag.index.is_none() {
        let studies: Vec<_> = cases.iter().map(|c| c.case.clone()).collect();
        let embedder = config.embedder()?;
        let memory = stacked_memory(&studies, embedder.as_ref())?;
        eprintln!("retrieval memory: {} records built from the fixtures", memory.len());
        let mut index = HnswIndex::build(&memory, config.hnsw)?;
        index.set_ef_search(config.hnsw.ef_search);
        Engine::new(config.runtime()?).with_vrag(VragSetup {
            store: Arc::new(index),
            embedder,
            k: config.vrag.k,
        })
    } else {
        Engine::from_config(&config)?
    };

    let trace_dir = args.traces.unwrap_or_else(|| traces_dir(&args.out));
    fs::create_dir_all(&trace_dir).with_context(|| format!("creating {}", trace_dir.display()))?;
    let report = run_eval(task, &cases, &engine, Some(&trace_dir))?;
    write_file(&args.out, &serde_json::to_vec_pretty(&report)?)?;

    let score = match (report.metrics.macro_f1_14, report.metrics.accuracy) {
        (Some(f1), _) => format!("macro_f1_14 {f1:.4}"),
        (None, Some(acc)) => format!("accuracy {acc:.4}"),
        (None, None) => "no score".to_string(),
    };
    println!(
        "{}: {} cases, {} scored, {score}, {} failures, {:.0} ms",
        task.as_str(),
        report.n_cases,
        report.n_scored,
        report.failures.len(),
        report.runtime.total_ms
    );
    for f in &report.failures {
        println!("  failed {}: {}", f.case_id, f.message);
    }
    Ok(())
}

pub fn index_build(config: Option<&Path>, fixtures: &Path, out: &Path) -> Result<()> {
    let config = load_config(config)?;
    let embedder = config.embedder()?;
    let loaded = load_case_dir(fixtures).with_context(|| format!("loading {}", fixtures.display()))?;
    if loaded.is_empty() {
        return Err(usage(format!("no fixtures in {}", fixtures.display())));
    }
    let mut memory = Memory::new();
    for l in &loaded {
        memory.insert(EmbeddingRecord::for_case(&l.case, embedder.as_ref())?)?;
    }
    let index = HnswIndex::build(&memory, config.hnsw)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_index(&index, out)?;
    println!("indexed {} records of dimension {} into {}", memory.len(), memory.dim(), out.display());
    Ok(())
}

pub fn index_query(config: Option<&Path>, index: &Path, study: &Path, k: usize, json: bool) -> Result<()> {
    if k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let config = load_config(config)?;
    let mut index = read_index(index).with_context(|| format!("reading {}", index.display()))?;
    index.set_ef_search(config.hnsw.ef_search);
    let loaded = load_case(study).with_context(|| format!("loading {}", study.display()))?;
    let query = config.embedder()?.embed(&loaded.case)?;
    let hits = index.search(&query, k)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&hits)?);
        return Ok(());
    }
    for (rank, hit) in hits.iter().enumerate() {
        let positives: Vec<&str> = index
            .memory()
            .get(hit.index)
            .map(|r| {
                r.labels
                    .iter()
                    .filter(|f| f.polarity == Polarity::Present)
                    .map(|f| f.label.as_snake())
                    .collect()
            })
            .unwrap_or_default();
        let labels = if positives.is_empty() { "no positive labels".to_string() } else { positives.join(", ") };
        println!("{:>2}. {} sim {:.4}  {labels}", rank + 1, hit.study_id, hit.similarity);
    }
    Ok(())
}

fn read_params(path: &Path) -> Result<Vec<PhantomParams>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let params = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|p| vec![p])
    };
    params.with_context(|| format!("parsing {}", path.display()))
}

pub fn phantom_gen(grid: bool, params: Option<&Path>, finding: Option<&str>, out: &Path) -> Result<()> {
    if grid {
        for (sub, cases) in [("ea", ea_grid(EA_GRID_SIZE)?), ("cp", cp_grid()?)] {
            let dir = out.join(sub);
            for (case, meta) in &cases {
                write_case(&dir, case, meta)?;
            }
            println!("wrote {} studies to {}", cases.len(), dir.display());
        }
        return Ok(());
    }
    let path = params.ok_or_else(|| usage("pass --grid or --params"))?;
    let query_finding = finding
        .map(|f| f.parse::<FindingLabel>().map_err(|e| usage(e.to_string())))
        .transpose()?;
    let meta = CaseMeta {
        query_finding,
        progression: None,
    };
    let list = read_params(path)?;
    for (i, p) in list.iter().enumerate() {
        let mut p = p.clone();
        if list.len() > 1 && p.study_id.is_none() {
            p.study_id = Some(format!("phantom-{i:03}"));
        }
        let study = generate_study(&p)?;
        let written = write_case(out, &study.to_case(), &meta)?;
        println!("wrote {}", written.display());
    }
    Ok(())
}

pub fn trace_render(input: &Path) -> Result<()> {
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let trace = TrajectoryTrace::parse(&bytes).with_context(|| format!("parsing {}", input.display()))?;
    print!("{}", trace.render());
    Ok(())
}
