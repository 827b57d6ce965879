//! Hierarchical navigable small world graph over a [`Memory`].
//!
//! Node levels are drawn as floor(-ln U) with U uniform, so P(level >= l)
//! = e^-l. Each node keeps up to M links per upper layer and 2M on layer 0,
//! chosen with the diversity heuristic and topped up with pruned candidates.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{hit_order, EmbeddingRecord, Memory, RetrievalHit, VectorStore, VragError};

const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswParams {
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            ef_search: 64,
            seed: 0,
        }
    }
}

impl HnswParams {
    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.m
        } else {
            self.m
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    dist: f32,
    id: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Eight independent lanes so the loop vectorizes.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    lanes.iter().sum::<f32>() + tail
}

#[derive(Debug, Clone, PartialEq)]
pub struct HnswIndex {
    params: HnswParams,
    memory: Memory,
    /// Per node, per layer up to the node's level: neighbor ids.
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
}

impl HnswIndex {
    pub fn new(dim: usize, params: HnswParams) -> Self {
        Self {
            params,
            memory: Memory::with_dim(dim),
            links: Vec::new(),
            entry: None,
        }
    }

    /// Inserts every record of `memory` in order.
    pub fn build(memory: &Memory, params: HnswParams) -> Result<Self, VragError> {
        let mut index = Self::new(memory.dim(), params);
        for r in memory.records() {
            index.insert(r.clone())?;
        }
        Ok(index)
    }

    pub(crate) fn from_parts(
        params: HnswParams,
        memory: Memory,
        links: Vec<Vec<Vec<u32>>>,
        entry: Option<u32>,
    ) -> Result<Self, VragError> {
        if links.len() != memory.len() || entry.is_some_and(|e| e as usize >= memory.len()) {
            return Err(VragError::Format("graph does not match record count".into()));
        }
        if links.iter().flatten().flatten().any(|&n| n as usize >= memory.len()) {
            return Err(VragError::Format("link to a missing node".into()));
        }
        Ok(Self {
            params,
            memory,
            links,
            entry,
        })
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn set_ef_search(&mut self, ef: usize) {
        self.params.ef_search = ef;
    }

    pub fn len(&self) -> usize {
        self.memory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memory.is_empty()
    }

    pub fn entry(&self) -> Option<u32> {
        self.entry
    }

    pub(crate) fn links(&self) -> &[Vec<Vec<u32>>] {
        &self.links
    }

    pub fn level(&self, node: usize) -> usize {
        self.links[node].len() - 1
    }

    fn top_level(&self) -> usize {
        self.entry.map(|e| self.level(e as usize)).unwrap_or(0)
    }

    /// Number of nodes on each layer, bottom first.
    pub fn layer_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.top_level() + 1];
        for node in &self.links {
            for count in hist.iter_mut().take(node.len()) {
                *count += 1;
            }
        }
        hist
    }

    /// Nodes reachable on layer 0 from the entry point.
    pub fn reachable_count(&self) -> usize {
        let Some(entry) = self.entry else { return 0 };
        let mut seen = vec![false; self.len()];
        let mut stack = vec![entry];
        seen[entry as usize] = true;
        let mut count = 1;
        while let Some(n) = stack.pop() {
            for &m in &self.links[n as usize][0] {
                if !seen[m as usize] {
                    seen[m as usize] = true;
                    count += 1;
                    stack.push(m);
                }
            }
        }
        count
    }

    fn draw_level(&self, node: usize) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(self.params.seed);
        rng.set_stream(node as u64);
        let u: f64 = rng.random();
        ((-(1.0 - u).ln()).floor() as usize).min(MAX_LEVEL)
    }

    fn vector(&self, id: u32) -> &[f32] {
        &self.memory.records()[id as usize].vector
    }

    fn dist(&self, q: &[f32], id: u32) -> f32 {
        1.0 - dot(q, self.vector(id))
    }

    /// Best-first search on one layer. Returns up to `ef` nearest, closest first.
    fn search_layer(&self, q: &[f32], entries: &[Scored], ef: usize, layer: usize) -> Vec<Scored> {
        let mut visited = vec![false; self.links.len()];
        for s in entries {
            visited[s.id as usize] = true;
        }
        let mut candidates: BinaryHeap<Reverse<Scored>> = entries.iter().copied().map(Reverse).collect();
        let mut results: BinaryHeap<Scored> = entries.iter().copied().collect();
        while let Some(Reverse(c)) = candidates.pop() {
            let worst = results.peek().map(|s| s.dist).unwrap_or(f32::INFINITY);
            if c.dist > worst && results.len() >= ef {
                break;
            }
            for &n in &self.links[c.id as usize][layer] {
                if std::mem::replace(&mut visited[n as usize], true) {
                    continue;
                }
                let d = self.dist(q, n);
                let worst = results.peek().map(|s| s.dist).unwrap_or(f32::INFINITY);
                if results.len() < ef || d < worst {
                    let s = Scored { dist: d, id: n };
                    candidates.push(Reverse(s));
                    results.push(s);
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        results.into_sorted_vec()
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the base
    /// than to every neighbor already kept; fill up with the rest.
    fn select_neighbors(&self, candidates: &[Scored], m: usize) -> Vec<u32> {
        let mut kept: Vec<Scored> = Vec::with_capacity(m);
        let mut pruned: Vec<Scored> = Vec::new();
        for &c in candidates {
            if kept.len() >= m {
                break;
            }
            let cv = self.vector(c.id);
            if kept.iter().all(|k| 1.0 - dot(cv, self.vector(k.id)) > c.dist) {
                kept.push(c);
            } else {
                pruned.push(c);
            }
        }
        for p in pruned {
            if kept.len() >= m {
                break;
            }
            kept.push(p);
        }
        kept.into_iter().map(|s| s.id).collect()
    }

    /// Adds a record and links it into the graph.
    pub fn insert(&mut self, record: EmbeddingRecord) -> Result<usize, VragError> {
        let id = self.memory.insert(record)?;
        let node = id as u32;
        let level = self.draw_level(id);
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(entry) = self.entry else {
            self.entry = Some(node);
            return Ok(id);
        };
        let q = self.vector(node).to_vec();
        let top = self.top_level();
        let mut eps = vec![Scored {
            dist: self.dist(&q, entry),
            id: entry,
        }];
        for layer in (level + 1..=top).rev() {
            eps = self.search_layer(&q, &eps, 1, layer);
        }
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(&q, &eps, self.params.ef_construction, layer);
            let neighbors = self.select_neighbors(&found, self.params.max_links(layer));
            for &n in &neighbors {
                self.connect(n, node, layer);
            }
            self.links[id][layer] = neighbors;
            eps = found;
        }
        if level > top {
            self.entry = Some(node);
        }
        Ok(id)
    }

    /// Adds `to` to `from`'s list on `layer`, pruning if over capacity.
    fn connect(&mut self, from: u32, to: u32, layer: usize) {
        let cap = self.params.max_links(layer);
        let list = &mut self.links[from as usize][layer];
        list.push(to);
        if list.len() <= cap {
            return;
        }
        let base = self.vector(from).to_vec();
        let mut scored: Vec<Scored> = self.links[from as usize][layer]
            .iter()
            .map(|&n| Scored {
                dist: self.dist(&base, n),
                id: n,
            })
            .collect();
        scored.sort();
        self.links[from as usize][layer] = self.select_neighbors(&scored, cap);
    }

    /// Approximate top-k with an explicit beam width.
    pub fn knn(&self, query: &[f32], k: usize, ef_search: usize) -> Result<Vec<RetrievalHit>, VragError> {
        let q = self.memory.prepare_query(query, k)?;
        if ef_search < k {
            return Err(VragError::EfBelowK { ef: ef_search, k });
        }
        let Some(entry) = self.entry else {
            return Err(VragError::EmptyIndex);
        };
        let mut eps = vec![Scored {
            dist: self.dist(&q, entry),
            id: entry,
        }];
        for layer in (1..=self.top_level()).rev() {
            eps = self.search_layer(&q, &eps, 1, layer);
        }
        let found = self.search_layer(&q, &eps, ef_search, 0);
        let mut hits: Vec<RetrievalHit> = found.iter().map(|s| self.memory.hit(s.id as usize, &q)).collect();
        hits.sort_by(hit_order);
        hits.truncate(k);
        Ok(hits)
    }
}

impl VectorStore for HnswIndex {
    fn memory(&self) -> &Memory {
        &self.memory
    }

    fn search(&self, query: &[f32], k: usize) -> Result<Vec<RetrievalHit>, VragError> {
        self.knn(query, k, self.params.ef_search.max(k))
    }
}
