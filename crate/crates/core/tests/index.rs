mod common;

use radagents_core::vrag::{read_index, write_index, HnswIndex, HnswParams, VectorStore};

#[test]
fn layer_sizes_decay_geometrically() {
    let memory = common::random_memory(4000, 16, 7);
    let index = HnswIndex::build(&memory, HnswParams::default()).unwrap();
    let hist = index.layer_histogram();
    assert_eq!(hist[0], 4000);
    let ratio = hist[1] as f64 / hist[0] as f64;
    assert!((ratio - (-1.0f64).exp()).abs() <= 0.1, "layer 1 / layer 0 = {ratio:.3}");
    assert!(hist.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(index.reachable_count(), 4000);
}

#[test]
fn index_survives_a_file_round_trip() {
    let memory = common::random_memory(500, 32, 9);
    let index = HnswIndex::build(&memory, HnswParams::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("memory.idx");
    write_index(&index, &path).unwrap();
    let back = read_index(&path).unwrap();
    assert_eq!(back.len(), index.len());
    assert_eq!(back.layer_histogram(), index.layer_histogram());
    let queries = common::random_memory(20, 32, 10);
    for q in queries.records() {
        let a = index.search(&q.vector, 5).unwrap();
        let b = back.search(&q.vector, 5).unwrap();
        let ids = |h: &[radagents_core::vrag::RetrievalHit]| h.iter().map(|x| x.index).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
    }
}

#[test]
fn interleaved_inserts_keep_recall() {
    let memory = common::random_memory(600, 24, 12);
    let mut index = HnswIndex::new(24, HnswParams::default());
    for r in memory.records() {
        index.insert(r.clone()).unwrap();
    }
    let queries: Vec<Vec<f32>> = common::random_memory(30, 24, 13).records().iter().map(|r| r.vector.clone()).collect();
    let r = common::recall(&index, &memory, &queries, 10, 64);
    assert!(r >= 0.95, "recall {r:.3}");
}
