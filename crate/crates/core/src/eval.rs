//! Held-out evaluation: cross-modal retrieval recall and prototype
//! classification.

use crate::autodiff::{dot, Tensor};
use crate::data::PairedDataset;
use crate::encoders::{DualEncoder, EmbeddingBatch, Modality, Network};
use crate::error::{Error, Result};
use crate::losses::TemperatureSet;
use crate::metrics::{mi_lower_bound, pair_similarity_stats};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalResult {
    pub i2t_r1: f64,
    pub i2t_r5: f64,
    pub t2i_r1: f64,
    pub t2i_r5: f64,
    pub n_queries: usize,
}

/// Position of the true match `i` among row `i`'s candidates, sorted by
/// descending score with ties going to the lower index.
fn rank_of_match(scores: &[f64], i: usize) -> usize {
    let s = scores[i];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < i))
        .count()
}

/// Fraction of rows whose diagonal entry ranks within the top `k`.
pub fn recall_at(similarity: &Tensor, k: usize) -> Result<f64> {
    let b = similarity.rows();
    if similarity.rank() != 2 || similarity.cols() != b {
        return Err(Error::shape(
            "recall_at",
            format!("{:?}", similarity.shape()),
        ));
    }
    if k == 0 || b < k {
        return Err(Error::Config(format!(
            "recall@{k} needs at least {k} candidates, got {b}"
        )));
    }
    let hits = (0..b)
        .filter(|&i| rank_of_match(similarity.row(i), i) < k)
        .count();
    Ok(hits as f64 / b as f64)
}

/// R@1 and R@5 in both directions from an image×text similarity matrix.
pub fn retrieval_from_similarity(similarity: &Tensor) -> Result<RetrievalResult> {
    let t2i = similarity.transpose()?;
    Ok(RetrievalResult {
        i2t_r1: recall_at(similarity, 1)?,
        i2t_r5: recall_at(similarity, 5)?,
        t2i_r1: recall_at(&t2i, 1)?,
        t2i_r5: recall_at(&t2i, 5)?,
        n_queries: similarity.rows(),
    })
}

/// Retrieval with row `i` of `images` matched to row `i` of `texts`.
pub fn retrieval_recall(
    images: &EmbeddingBatch,
    texts: &EmbeddingBatch,
) -> Result<RetrievalResult> {
    if images.len() != texts.len() {
        return Err(Error::shape(
            "retrieval_recall",
            format!("{} images vs {} texts", images.len(), texts.len()),
        ));
    }
    let sim = images.matrix().matmul_t(texts.matrix())?;
    retrieval_from_similarity(&sim)
}

fn argmax_lowest(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in scores.enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Predicted class per sample: most similar prototype, lowest index on ties.
pub fn predict(samples: &EmbeddingBatch, prototypes: &EmbeddingBatch) -> Vec<usize> {
    (0..samples.len())
        .map(|i| {
            let v = samples.row(i);
            argmax_lowest((0..prototypes.len()).map(|c| dot(v, prototypes.row(c))))
        })
        .collect()
}

/// Top-1 accuracy against one prototype per class.
pub fn zero_shot_classify(
    samples: &EmbeddingBatch,
    prototypes: &EmbeddingBatch,
    labels: &[usize],
) -> Result<f64> {
    if labels.len() != samples.len() {
        return Err(Error::Data(format!(
            "{} labels for {} samples",
            labels.len(),
            samples.len()
        )));
    }
    if let Some((i, &l)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l >= prototypes.len())
    {
        return Err(Error::Data(format!(
            "label {l} at row {i} out of range for {} classes",
            prototypes.len()
        )));
    }
    if samples.is_empty() {
        return Err(Error::Data("no samples to classify".into()));
    }
    let correct = predict(samples, prototypes)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

/// L2-normalized mean text embedding per class.
pub fn class_prototypes(
    texts: &EmbeddingBatch,
    labels: &[usize],
    n_classes: usize,
) -> Result<EmbeddingBatch> {
    let d = texts.dim();
    let mut sums = vec![0.0; n_classes * d];
    let mut counts = vec![0usize; n_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::Data(format!(
                "label {l} out of range for {n_classes} classes"
            )));
        }
        counts[l] += 1;
        for (s, x) in sums[l * d..(l + 1) * d].iter_mut().zip(texts.row(i)) {
            *s += x;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class {c} has no text samples")));
    }
    EmbeddingBatch::normalized(
        Tensor::matrix(n_classes, d, sums)?,
        texts.network,
        Modality::Text,
    )
}

/// Held-out diagnostics of a student checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub retrieval: RetrievalResult,
    pub zs_acc: f64,
    pub pos_mean: f64,
    pub neg_mean: f64,
    pub gap: f64,
    pub mi_bound_image: f64,
    pub mi_bound_text: f64,
}

/// Teacher embeddings of a split, computed once.
#[derive(Clone, Debug)]
pub struct TeacherView {
    pub images: EmbeddingBatch,
    pub texts: EmbeddingBatch,
}

impl TeacherView {
    pub fn new(teacher: &DualEncoder, data: &PairedDataset) -> Result<Self> {
        Ok(Self {
            images: teacher.encode_images(&data.image_features)?,
            texts: teacher.encode_texts(&data.text_features)?,
        })
    }
}

/// Mean bound over consecutive blocks of `batch_size` rows; a trailing
/// block with fewer than 2 rows is skipped.
fn blocked_mi_bound(
    teacher: &EmbeddingBatch,
    student: &EmbeddingBatch,
    batch_size: usize,
    tau: f64,
) -> Result<f64> {
    let n = teacher.len();
    let mut total = 0.0;
    let mut blocks = 0;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        if end - start >= 2 {
            let idx: Vec<usize> = (start..end).collect();
            total += mi_lower_bound(&teacher.select(&idx), &student.select(&idx), tau)?.bound;
            blocks += 1;
        }
        start = end;
    }
    if blocks == 0 {
        return Err(Error::Data(
            "no block with at least 2 rows for the mutual information bound".into(),
        ));
    }
    Ok(total / blocks as f64)
}

/// Retrieval, prototype accuracy, pair statistics and mutual information
/// bounds of `student` on `eval_split`. Prototypes come from the student's
/// text embeddings of `train`.
pub fn evaluate_student(
    student: &DualEncoder,
    temps: &TemperatureSet,
    teacher_view: &TeacherView,
    train: &PairedDataset,
    eval_split: &PairedDataset,
    batch_size: usize,
) -> Result<EvalMetrics> {
    let images = student.encode_images(&eval_split.image_features)?;
    let texts = student.encode_texts(&eval_split.text_features)?;
    let retrieval = retrieval_recall(&images, &texts)?;

    let n_classes = train.n_concepts().max(eval_split.n_concepts());
    let train_texts = student.encode_texts(&train.text_features)?;
    let protos = class_prototypes(&train_texts, &train.labels, n_classes)?;
    let zs_acc = zero_shot_classify(&images, &protos, &eval_split.labels)?;

    let stats = pair_similarity_stats(&images, &texts)?;
    let mi_bound_image = blocked_mi_bound(
        &teacher_view.images,
        &images,
        batch_size,
        TemperatureSet::tau_of(temps.image),
    )?;
    let mi_bound_text = blocked_mi_bound(
        &teacher_view.texts,
        &texts,
        batch_size,
        TemperatureSet::tau_of(temps.text),
    )?;

    Ok(EvalMetrics {
        retrieval,
        zs_acc,
        pos_mean: stats.pos_mean,
        neg_mean: stats.neg_mean,
        gap: stats.gap,
        mi_bound_image,
        mi_bound_text,
    })
}

/// Student tag check used by callers that accept arbitrary checkpoints.
pub fn expect_network(enc: &DualEncoder, network: Network) -> Result<()> {
    if enc.network != network {
        return Err(Error::Config(format!(
            "expected a {network} checkpoint, got {}",
            enc.network
        )));
    }
    Ok(())
}
