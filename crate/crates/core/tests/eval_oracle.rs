mod common;

use rand::seq::SliceRandom;
use rand::Rng;
use relkd_core::autodiff::Tensor;
use relkd_core::encoders::{EmbeddingBatch, Modality, Network};
use relkd_core::eval::{
    class_prototypes, recall_at, retrieval_from_similarity, zero_shot_classify,
};
use relkd_core::seed;

/// Sorts candidate indices by (score descending, index ascending) and
/// reports where the true match landed.
fn brute_force_recall(sim: &[Vec<f64>], k: usize) -> f64 {
    let n = sim.len();
    let mut hits = 0;
    for (i, row) in sim.iter().enumerate() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        if order.iter().position(|&j| j == i).unwrap() < k {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

fn transpose(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..m[0].len())
        .map(|j| m.iter().map(|r| r[j]).collect())
        .collect()
}

#[test]
fn retrieval_matches_exhaustive_sort() {
    for s in 0..200 {
        let mut rng = seed::rng(s);
        let sim: Vec<Vec<f64>> = (0..6)
            .map(|_| {
                (0..6)
                    .map(|_| (rng.random_range(0..5) as f64) / 4.0)
                    .collect()
            })
            .collect();
        let t = Tensor::from_rows(&sim).unwrap();
        let r = retrieval_from_similarity(&t).unwrap();
        assert_eq!(r.i2t_r1, brute_force_recall(&sim, 1));
        assert_eq!(r.i2t_r5, brute_force_recall(&sim, 5));
        assert_eq!(r.t2i_r1, brute_force_recall(&transpose(&sim), 1));
        assert_eq!(r.t2i_r5, brute_force_recall(&transpose(&sim), 5));
        for k in 1..=6 {
            assert_eq!(recall_at(&t, k).unwrap(), brute_force_recall(&sim, k));
        }
    }
}

#[test]
fn permuted_labels_score_at_chance() {
    let classes = 8;
    let per_class = 5;
    let n = classes * per_class;
    let mut rng = seed::rng(7);
    let protos = EmbeddingBatch::new(
        Tensor::from_rows(&common::unit_rows(&mut rng, classes, 6)).unwrap(),
        Network::Student,
        Modality::Text,
    )
    .unwrap();
    let samples = EmbeddingBatch::new(
        Tensor::from_rows(&common::unit_rows(&mut rng, n, 6)).unwrap(),
        Network::Student,
        Modality::Image,
    )
    .unwrap();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let trials = 4000;
    let mut sum = 0.0;
    for _ in 0..trials {
        labels.shuffle(&mut rng);
        sum += zero_shot_classify(&samples, &protos, &labels).unwrap();
    }
    let mean = sum / trials as f64;
    let p = 1.0 / classes as f64;
    let sigma = (p * (1.0 - p) / n as f64 / trials as f64).sqrt();
    assert!((mean - p).abs() < 3.0 * sigma, "{mean} vs {p} ± {sigma}");
}

#[test]
fn prototypes_of_separated_clusters_classify_perfectly() {
    let rows = vec![
        vec![1.0, 0.1, 0.0],
        vec![0.9, -0.1, 0.0],
        vec![0.0, 1.0, 0.1],
        vec![0.1, 0.9, 0.0],
        vec![0.0, 0.0, 1.0],
    ];
    let texts = EmbeddingBatch::normalized(
        Tensor::from_rows(&rows).unwrap(),
        Network::Student,
        Modality::Text,
    )
    .unwrap();
    let labels = [0, 0, 1, 1, 2];
    let protos = class_prototypes(&texts, &labels, 3).unwrap();
    let imgs = EmbeddingBatch::normalized(
        Tensor::from_rows(&rows).unwrap(),
        Network::Student,
        Modality::Image,
    )
    .unwrap();
    assert_eq!(zero_shot_classify(&imgs, &protos, &labels).unwrap(), 1.0);
}
