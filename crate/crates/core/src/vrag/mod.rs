//! Visual retrieval: an embedding memory over studies, exact and HNSW
//! nearest-neighbor search, reference prompts, and the k-sensitivity sweep.

pub mod embed;
pub mod hnsw;
pub mod persist;
pub mod references;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{absent_sentence, extract_labels, finding_sentence, Mention};
use crate::model::{Confidence, Finding, FindingLabel, Laterality, Polarity};
use crate::phantom::{CaseStudy, GroundTruth};

pub use embed::{Embedder, PhantomEmbedder, RemoteEmbedder};
pub use hnsw::{HnswIndex, HnswParams};
pub use persist::{read_index, write_index};
pub use references::{assemble_references, k_sweep, Judgment, KSweepRow, ReferenceBundle, SweepQuery};

pub const DIM: usize = 768;

#[derive(Debug, Error)]
pub enum VragError {
    #[error("vector has {got} dimensions, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("the memory is empty")]
    EmptyMemory,
    #[error("the index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("ef_search {ef} is below k {k}")]
    EfBelowK { ef: usize, k: usize },
    #[error("vector has zero length")]
    ZeroVector,
    #[error("study `{0}` is already in the memory")]
    DuplicateStudy(String),
    #[error("no references to assemble")]
    NoHits,
    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(String),
    #[error("index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub study_id: String,
    /// Image path or handle, carried for reference prompts.
    pub image: String,
    pub vector: Vec<f32>,
    pub report_text: String,
    pub labels: Vec<Finding>,
}

impl EmbeddingRecord {
    /// The record's stated polarity for `label`, if it carries one.
    /// Unlabelled records are read through the label extractor.
    pub fn polarity(&self, label: FindingLabel) -> Option<Polarity> {
        if self.labels.is_empty() {
            return crate::labels::extract_labels(&self.report_text).get(label).polarity();
        }
        self.labels.iter().find(|f| f.label == label).map(|f| f.polarity)
    }

    /// A record whose labels and report come from ground truth. Every label
    /// is carried: present findings as annotated, the rest as absent.
    pub fn from_truth(study_id: impl Into<String>, image: impl Into<String>, vector: Vec<f32>, truth: &GroundTruth) -> Self {
        let labels: Vec<Finding> = FindingLabel::ALL
            .iter()
            .map(|&label| match truth.finding(label) {
                Some(f) => f.clone(),
                None => Finding::new(label, truth.polarity(label), Laterality::None, Confidence::ONE)
                    .expect("unsided absent or global finding"),
            })
            .collect();
        let mut sentences: Vec<String> = truth.labels.iter().map(finding_sentence).collect();
        sentences.extend(
            FindingLabel::QUERIED
                .into_iter()
                .filter(|l| truth.polarity(*l) == Polarity::Absent)
                .map(absent_sentence),
        );
        Self {
            study_id: study_id.into(),
            image: image.into(),
            vector,
            report_text: sentences.join(" "),
            labels,
        }
    }

    /// A record with only a report: labels come from the rule-based extractor.
    pub fn from_report(study_id: impl Into<String>, image: impl Into<String>, vector: Vec<f32>, report: &str) -> Self {
        let labels = extract_labels(report)
            .iter()
            .filter_map(|(label, m)| {
                let polarity = match m {
                    Mention::Positive => Polarity::Present,
                    Mention::Negative => Polarity::Absent,
                    _ => return None,
                };
                let side = if polarity == Polarity::Present && !label.is_global() {
                    Laterality::Bilateral
                } else {
                    Laterality::None
                };
                Finding::new(label, polarity, side, Confidence::ONE).ok()
            })
            .collect();
        Self {
            study_id: study_id.into(),
            image: image.into(),
            vector,
            report_text: report.to_string(),
            labels,
        }
    }

    /// A truth-backed record for a case, embedded with `embedder`.
    pub fn for_case(case: &CaseStudy, embedder: &dyn Embedder) -> Result<Self, VragError> {
        let vector = embedder.embed(case)?;
        let image = case.study.current_image.path.clone();
        Ok(match &case.truth {
            Some(truth) => Self::from_truth(case.id(), image, vector, truth),
            None => Self {
                study_id: case.id().to_string(),
                image,
                vector,
                report_text: String::new(),
                labels: Vec::new(),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub index: usize,
    pub study_id: String,
    pub similarity: f64,
}

/// Nonincreasing similarity, then study id.
pub(crate) fn hit_order(a: &RetrievalHit, b: &RetrievalHit) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.study_id.cmp(&b.study_id))
}

/// Unit-length copy of `v`.
pub fn normalize(v: &[f32]) -> Result<Vec<f32>, VragError> {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(VragError::ZeroVector);
    }
    Ok(v.iter().map(|x| (*x as f64 / norm) as f32).collect())
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    dot.clamp(-1.0, 1.0)
}

/// Flat record store. Stored vectors are unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct Memory {
    dim: usize,
    records: Vec<EmbeddingRecord>,
}

impl Default for Memory {
    fn default() -> Self {
        Self::new()
    }
}

impl Memory {
    pub fn new() -> Self {
        Self::with_dim(DIM)
    }

    pub fn with_dim(dim: usize) -> Self {
        Self { dim, records: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn get(&self, index: usize) -> Option<&EmbeddingRecord> {
        self.records.get(index)
    }

    pub(crate) fn check_dim(&self, v: &[f32]) -> Result<(), VragError> {
        if v.len() != self.dim {
            return Err(VragError::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Adds a record, normalizing its vector. Returns its index.
    pub fn insert(&mut self, mut record: EmbeddingRecord) -> Result<usize, VragError> {
        self.check_dim(&record.vector)?;
        if self.records.iter().any(|r| r.study_id == record.study_id) {
            return Err(VragError::DuplicateStudy(record.study_id));
        }
        record.vector = normalize(&record.vector)?;
        self.records.push(record);
        Ok(self.records.len() - 1)
    }

    /// Adds a record whose vector is already unit length, as read from disk.
    pub(crate) fn insert_stored(&mut self, record: EmbeddingRecord) -> Result<usize, VragError> {
        self.check_dim(&record.vector)?;
        if self.records.iter().any(|r| r.study_id == record.study_id) {
            return Err(VragError::DuplicateStudy(record.study_id));
        }
        self.records.push(record);
        Ok(self.records.len() - 1)
    }

    pub(crate) fn hit(&self, index: usize, query: &[f32]) -> RetrievalHit {
        let r = &self.records[index];
        RetrievalHit {
            index,
            study_id: r.study_id.clone(),
            similarity: cosine(&r.vector, query),
        }
    }

    pub(crate) fn prepare_query(&self, query: &[f32], k: usize) -> Result<Vec<f32>, VragError> {
        if k == 0 {
            return Err(VragError::ZeroK);
        }
        self.check_dim(query)?;
        normalize(query)
    }
}

/// Exact top-k by cosine similarity over the whole memory.
pub fn knn_exact(memory: &Memory, query: &[f32], k: usize) -> Result<Vec<RetrievalHit>, VragError> {
    let q = memory.prepare_query(query, k)?;
    if memory.is_empty() {
        return Err(VragError::EmptyMemory);
    }
    let mut hits: Vec<RetrievalHit> = (0..memory.len()).map(|i| memory.hit(i, &q)).collect();
    hits.sort_by(hit_order);
    hits.truncate(k);
    Ok(hits)
}

/// Anything that answers top-k queries over a memory.
pub trait VectorStore: Send + Sync {
    fn memory(&self) -> &Memory;
    fn search(&self, query: &[f32], k: usize) -> Result<Vec<RetrievalHit>, VragError>;

    /// Top-k with records failing `keep` removed.
    fn search_filtered(
        &self,
        query: &[f32],
        k: usize,
        keep: &dyn Fn(&EmbeddingRecord) -> bool,
    ) -> Result<Vec<RetrievalHit>, VragError> {
        let excluded = self.memory().records().iter().filter(|r| !keep(r)).count();
        let mut hits = self.search(query, k + excluded)?;
        hits.retain(|h| keep(&self.memory().records()[h.index]));
        hits.truncate(k);
        Ok(hits)
    }
}

impl VectorStore for Memory {
    fn memory(&self) -> &Memory {
        self
    }

    fn search(&self, query: &[f32], k: usize) -> Result<Vec<RetrievalHit>, VragError> {
        knn_exact(self, query, k)
    }
}
