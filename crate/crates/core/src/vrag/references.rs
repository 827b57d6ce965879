//! Reference prompts built from retrieved studies, and the k-sensitivity sweep.

use serde::{Deserialize, Serialize};

use super::{EmbeddingRecord, Memory, RetrievalHit, VectorStore, VragError};
use crate::model::{FindingLabel, Polarity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub study_id: String,
    pub image: String,
    pub report_text: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceBundle {
    pub references: Vec<Reference>,
    pub prompt: String,
}

pub fn ordinal(n: usize) -> String {
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

/// One block per hit in hit order, then the question.
pub fn assemble_references(hits: &[RetrievalHit], memory: &Memory, question: &str) -> Result<ReferenceBundle, VragError> {
    if hits.is_empty() {
        return Err(VragError::NoHits);
    }
    let mut references = Vec::with_capacity(hits.len());
    let mut prompt = String::new();
    for (i, hit) in hits.iter().enumerate() {
        let r = memory
            .get(hit.index)
            .ok_or_else(|| VragError::Format(format!("hit {} is not in the memory", hit.index)))?;
        prompt.push_str(&format!(
            "This is the {} similar image and its report for your reference.\n[Reference Image: {}]\n{}\n\n",
            ordinal(i + 1),
            r.image,
            r.report_text
        ));
        references.push(Reference {
            study_id: r.study_id.clone(),
            image: r.image.clone(),
            report_text: r.report_text.clone(),
            similarity: hit.similarity,
        });
    }
    prompt.push_str(&format!(
        "According to the query image and the references, {} [Query Image].",
        question.trim()
    ));
    Ok(ReferenceBundle { references, prompt })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Judgment {
    Helpful,
    Harmful,
    Neutral,
}

/// A sweep query: its vector, its own study id (never retrieved), and the
/// ground truth a retrieved study is judged against.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepQuery {
    pub vector: Vec<f32>,
    pub exclude: Option<String>,
    pub truth: Vec<(FindingLabel, Polarity)>,
}

impl SweepQuery {
    /// Helpful if the record agrees on every truth label, harmful if it
    /// contradicts any, neutral otherwise.
    pub fn judge(&self, record: &EmbeddingRecord) -> Judgment {
        let mut all_agree = true;
        for &(label, polarity) in &self.truth {
            match record.polarity(label) {
                Some(p) if p == polarity => {}
                Some(p) if p == polarity.opposite() && p != Polarity::Uncertain => return Judgment::Harmful,
                _ => all_agree = false,
            }
        }
        if all_agree {
            Judgment::Helpful
        } else {
            Judgment::Neutral
        }
    }
}

/// Helpful and harmful fractions of one query's judgments.
pub fn rates(judgments: &[Judgment]) -> (f64, f64) {
    if judgments.is_empty() {
        return (0.0, 0.0);
    }
    let n = judgments.len() as f64;
    let count = |j: Judgment| judgments.iter().filter(|x| **x == j).count() as f64 / n;
    (count(Judgment::Helpful), count(Judgment::Harmful))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k: usize,
    pub helpful_rate: f64,
    pub harmful_rate: f64,
}

/// Per k, the rates averaged over queries.
pub fn k_sweep(store: &dyn VectorStore, queries: &[SweepQuery], ks: &[usize]) -> Result<Vec<KSweepRow>, VragError> {
    let records = store.memory().records();
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let (mut helpful, mut harmful) = (0.0, 0.0);
        for q in queries {
            let keep = |r: &EmbeddingRecord| q.exclude.as_deref() != Some(r.study_id.as_str());
            let hits = store.search_filtered(&q.vector, k, &keep)?;
            let judgments: Vec<Judgment> = hits.iter().map(|h| q.judge(&records[h.index])).collect();
            let (h, x) = rates(&judgments);
            helpful += h;
            harmful += x;
        }
        let n = queries.len().max(1) as f64;
        rows.push(KSweepRow {
            k,
            helpful_rate: helpful / n,
            harmful_rate: harmful / n,
        });
    }
    Ok(rows)
}
