//! Retrieval against an independent naive full-scan oracle.

mod common;

use cdfcut_core::model::EmbeddingVector;
use cdfcut_core::retrieval::{retrieve, ItemIndex, RetrievalPolicy};
use cdfcut_core::verify::{naive_threshold, naive_topk};
use common::unit_rows;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_index(m: usize, n: usize, seed: u64) -> (ItemIndex, Vec<(String, Vec<f64>)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embeddings: Array2<f64> = unit_rows(m, n, &mut rng);
    let ids: Vec<String> = (0..m).map(|i| format!("item{i:06}")).collect();
    let raw: Vec<(String, Vec<f64>)> = ids
        .iter()
        .cloned()
        .zip(embeddings.rows().into_iter().map(|r| r.to_vec()))
        .collect();
    (ItemIndex::new(ids, embeddings).unwrap(), raw)
}

#[test]
fn retrieval_matches_naive_oracle_on_random_queries() {
    let (index, raw) = random_index(2000, 16, 0xd1ce);
    let mut rng = ChaCha8Rng::seed_from_u64(0xbeef);
    for case in 0..300 {
        let q = unit_rows(1, 16, &mut rng).row(0).to_owned();
        let v = EmbeddingVector::new(q.clone()).unwrap();
        if case % 2 == 0 {
            let k = rng.gen_range(1..50);
            let got = retrieve(&index, &v, None, &RetrievalPolicy::TopK { k }).unwrap();
            let expected = naive_topk(&raw, q.as_slice().unwrap(), k);
            assert_eq!(got.items.len(), expected.len());
            for (g, e) in got.items.iter().zip(&expected) {
                assert_eq!(g.id, e.id, "case {case}");
                // Summation order differs between the two paths; scores may
                // legitimately be a few ulps apart.
                assert!((g.score - e.score).abs() < 1e-12, "case {case}");
            }
        } else {
            let t = rng.gen_range(-0.2..0.6);
            let got = retrieve(&index, &v, None, &RetrievalPolicy::ScoreThreshold { t }).unwrap();
            let expected = naive_threshold(&raw, q.as_slice().unwrap(), t);
            assert_eq!(got.items.len(), expected.len(), "case {case}");
            for (g, e) in got.items.iter().zip(&expected) {
                assert_eq!(g.id, e.id, "case {case}");
            }
        }
    }
}

// With ties present, top-k and the k-th-score threshold still agree because
// both order by (score desc, id asc).
#[test]
fn topk_equals_threshold_at_kth_score_with_ties() {
    let mut rows: Array2<f64> = Array2::zeros((6, 2));
    for (i, v) in [
        [1.0, 0.0],
        [0.8, 0.6],
        [0.8, -0.6],
        [0.6, 0.8],
        [0.0, 1.0],
        [0.0, -1.0],
    ]
    .iter()
    .enumerate()
    {
        rows[(i, 0)] = v[0];
        rows[(i, 1)] = v[1];
    }
    // Two items share score 0.8 against [1, 0].
    let ids: Vec<String> = ["e", "b", "a", "c", "d", "f"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let index = ItemIndex::new(ids, rows).unwrap();
    let q = EmbeddingVector::new(ndarray::array![1.0, 0.0]).unwrap();
    let topk = retrieve(&index, &q, None, &RetrievalPolicy::TopK { k: 3 }).unwrap();
    let ids_topk: Vec<&str> = topk.items.iter().map(|i| i.id.as_str()).collect();
    // Ties at 0.8 resolve as "a" before "b".
    assert_eq!(ids_topk, vec!["e", "a", "b"]);
    let thr = retrieve(
        &index,
        &q,
        None,
        &RetrievalPolicy::ScoreThreshold {
            t: topk.items.last().unwrap().score,
        },
    )
    .unwrap();
    let ids_thr: Vec<&str> = thr.items.iter().map(|i| i.id.as_str()).collect();
    assert_eq!(ids_topk, ids_thr);
}
