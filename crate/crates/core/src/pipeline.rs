//! One query end to end: route, dispatch, detect conflicts, resolve, and
//! synthesize.

use std::sync::Arc;

use thiserror::Error;

use crate::agents::AgentReport;
use crate::config::{Config, ConfigError};
use crate::controller::{classify_query, dispatch, make_plan, AgentRuntime, ControllerError, Plan, Query};
use crate::phantom::CaseStudy;
use crate::synth::{detect_conflicts, resolve, resolve_single_source, synthesize, FinalAnswer, Resolution};
use crate::vrag::{assemble_references, read_index, Embedder, ReferenceBundle, VectorStore, VragError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Vrag(#[from] VragError),
}

#[derive(Clone)]
pub struct VragSetup {
    pub store: Arc<dyn VectorStore>,
    pub embedder: Arc<dyn Embedder>,
    pub k: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub plan: Plan,
    pub reports: Vec<AgentReport>,
    pub answer: FinalAnswer,
    /// The reference prompt built from the first adjudicated conflict.
    pub references: Option<ReferenceBundle>,
}

#[derive(Clone)]
pub struct Engine {
    pub runtime: AgentRuntime,
    pub vrag: Option<VragSetup>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("runtime", &self.runtime)
            .field("vrag_k", &self.vrag.as_ref().map(|v| v.k))
            .finish()
    }
}

impl Engine {
    pub fn new(runtime: AgentRuntime) -> Self {
        Self { runtime, vrag: None }
    }

    pub fn with_vrag(mut self, setup: VragSetup) -> Self {
        self.vrag = Some(setup);
        self
    }

    /// Loads the index named by the config when retrieval is enabled.
    pub fn from_config(config: &Config) -> Result<Self, PipelineError> {
        let engine = Self::new(config.runtime()?);
        if !config.vrag.enabled {
            return Ok(engine);
        }
        let path = config
            .vrag
            .index
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("vrag is enabled but no index is configured".into()))?;
        let mut index = read_index(path)?;
        index.set_ef_search(config.hnsw.ef_search);
        Ok(engine.with_vrag(VragSetup {
            store: Arc::new(index),
            embedder: config.embedder()?,
            k: config.vrag.k,
        }))
    }

    pub fn run(&self, case: &CaseStudy, text: &str) -> Result<RunOutput, PipelineError> {
        self.run_query(case, &classify_query(text, case))
    }

    pub fn run_query(&self, case: &CaseStudy, query: &Query) -> Result<RunOutput, PipelineError> {
        query.validate()?;
        let plan = make_plan(query, &self.runtime.tools, &self.runtime.templates)?;
        let reports = dispatch(&plan, case, &self.runtime);
        let conflicts = detect_conflicts(&reports);
        let mut references = None;
        let resolutions: Vec<Resolution> = match (&self.vrag, conflicts.is_empty()) {
            (_, true) => Vec::new(),
            (None, false) => conflicts.iter().map(resolve_single_source).collect(),
            (Some(v), false) => match v.embedder.embed(case) {
                Ok(q) => {
                    let rs: Vec<Resolution> = conflicts
                        .iter()
                        .map(|c| resolve(c, &q, v.store.as_ref(), v.k, case.id()))
                        .collect();
                    references = rs
                        .iter()
                        .find(|r| !r.support.is_empty())
                        .and_then(|r| assemble_references(&r.support, v.store.memory(), &query.text).ok());
                    rs
                }
                Err(e) => conflicts
                    .iter()
                    .map(|c| Resolution::unresolved(c.label, Vec::new(), e.to_string()))
                    .collect(),
            },
        };
        let answer = synthesize(&plan, &reports, &conflicts, &resolutions);
        Ok(RunOutput {
            plan,
            reports,
            answer,
            references,
        })
    }
}
