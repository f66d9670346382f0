//! Brute-force oracles and random fixture builders shared by the test targets.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use mergebench::retrieval::{IrMetrics, Qrels, Ranking};
use mergebench::tensor_store::{DType, Tensor, TensorMap};
use rand::Rng;

/// Pairwise Mann-Whitney count.
pub fn auroc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    total += 1.0;
                } else if si == sj {
                    total += 0.5;
                }
            }
        }
    }
    total / pairs
}

/// Step-wise AP: each distinct threshold, highest first, adds
/// `precision(t) * (recall(t) - recall(previous t))`.
pub fn ap_threshold_walk(scores: &[f64], labels: &[u8]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup_by(|a, b| a == b);
    let positives = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| labels[i] == 1).count() as f64;
        let recall = tp / positives;
        let precision = tp / selected.len() as f64;
        ap += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    ap
}

/// Random scores drawn from a small grid so ties are frequent, with both classes present.
pub fn tied_instance<R: Rng>(rng: &mut R, max_n: usize) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=max_n);
    let levels = rng.random_range(1..=8);
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
    labels[0] = 1;
    labels[1] = 0;
    let scores = (0..n)
        .map(|_| {
            if rng.random_bool(0.7) {
                rng.random_range(0..levels) as f64 / levels as f64
            } else {
                rng.random::<f64>()
            }
        })
        .collect();
    (scores, labels)
}

pub fn random_values<R: Rng>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-4.0f32..4.0)).collect()
}

pub fn random_shape<R: Rng>(rng: &mut R) -> Vec<usize> {
    match rng.random_range(0..4) {
        0 => vec![],
        1 => vec![rng.random_range(1..64)],
        2 => vec![rng.random_range(1..16), rng.random_range(1..16)],
        _ => vec![rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5)],
    }
}

/// A pair of layout-compatible checkpoints with random names, shapes and dtypes.
pub fn random_pair<R: Rng>(rng: &mut R) -> (TensorMap, TensorMap) {
    let mut a = TensorMap::new();
    let mut b = TensorMap::new();
    for t in 0..rng.random_range(1..6) {
        let shape = random_shape(rng);
        let n: usize = shape.iter().product();
        let dtype = [DType::F32, DType::F16, DType::BF16][rng.random_range(0..3)];
        let name = format!("layers.{t}.w{}", rng.random_range(0..100));
        a.insert(
            &name,
            Tensor::from_f32_as(dtype, shape.clone(), &random_values(rng, n)).unwrap(),
        );
        b.insert(
            &name,
            Tensor::from_f32_as(dtype, shape, &random_values(rng, n)).unwrap(),
        );
    }
    (a, b)
}

fn relevant_set(qrels: &Qrels, query: &str) -> BTreeSet<String> {
    qrels[query]
        .iter()
        .filter(|(_, &g)| g > 0)
        .map(|(d, _)| d.clone())
        .collect()
}

/// Metrics recomputed from per-cutoff counts.
pub fn ir_oracle(ranking: &Ranking, qrels: &Qrels) -> IrMetrics {
    let rel = relevant_set(qrels, &ranking.query_id);
    let docs: Vec<&str> = ranking.entries.iter().map(|e| e.0.as_str()).collect();
    let is_rel = |i: usize| rel.contains(docs[i]);
    let count = |k: usize| (0..k.min(docs.len())).filter(|&i| is_rel(i)).count() as f64;
    let r = rel.len() as f64;

    let mut mrr = 0.0;
    for i in 0..docs.len().min(1000) {
        if is_rel(i) {
            mrr = 1.0 / (i as f64 + 1.0);
            break;
        }
    }
    let mut dcg = 0.0;
    for i in 0..docs.len().min(10) {
        if is_rel(i) {
            dcg += 1.0 / (i as f64 + 2.0).log2();
        }
    }
    let mut idcg = 0.0;
    for i in 0..rel.len().min(10) {
        idcg += 1.0 / (i as f64 + 2.0).log2();
    }
    let mut ap = 0.0;
    for i in 0..docs.len().min(100) {
        if is_rel(i) {
            ap += count(i + 1) / (i as f64 + 1.0);
        }
    }
    IrMetrics {
        mrr_1000: mrr,
        p_10: count(10) / 10.0,
        ndcg_10: if idcg > 0.0 { dcg / idcg } else { 0.0 },
        recall_1000: if r > 0.0 { count(1000) / r } else { 0.0 },
        map_100: if r > 0.0 { ap / r } else { 0.0 },
    }
}

/// Random ranking over at most `max_docs` documents plus graded judgments.
pub fn random_run<R: Rng>(rng: &mut R, max_docs: usize) -> (Ranking, Qrels) {
    let n = rng.random_range(1..=max_docs);
    let mut docs: Vec<String> = (0..n).map(|i| format!("d{i:02}")).collect();
    for i in (1..docs.len()).rev() {
        docs.swap(i, rng.random_range(0..=i));
    }
    let retrieved = rng.random_range(0..=n);
    let entries = docs[..retrieved]
        .iter()
        .enumerate()
        .map(|(i, d)| (d.clone(), (n - i) as f64))
        .collect();
    let mut judged: BTreeMap<String, u32> = BTreeMap::new();
    for d in &docs {
        if rng.random_bool(0.6) {
            judged.insert(d.clone(), rng.random_range(0..3));
        }
    }
    let mut qrels = Qrels::new();
    qrels.insert("q".into(), judged);
    (
        Ranking {
            query_id: "q".into(),
            entries,
        },
        qrels,
    )
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}
