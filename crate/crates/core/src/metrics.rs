//! Embedding-space diagnostics: positive/negative pair similarity, their
//! histograms, and the InfoNCE lower bound on teacher–student mutual
//! information. Nothing here is differentiable.

use crate::autodiff::{dot, log_sum_exp, Tensor};
use crate::encoders::EmbeddingBatch;
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 50;

const RANGE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct PairSimilarityStats {
    pub pos_mean: f64,
    pub neg_mean: f64,
    pub gap: f64,
    pub pos_values: Vec<f64>,
    pub neg_values: Vec<f64>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Cosine similarities of aligned pairs (diagonal) and of every misaligned
/// pair (off-diagonal) between `images` and `texts`.
pub fn pair_similarity_stats(
    images: &EmbeddingBatch,
    texts: &EmbeddingBatch,
) -> Result<PairSimilarityStats> {
    let b = images.len();
    if texts.len() != b || images.dim() != texts.dim() {
        return Err(Error::shape(
            "pair_similarity_stats",
            format!(
                "[{b}, {}] vs [{}, {}]",
                images.dim(),
                texts.len(),
                texts.dim()
            ),
        ));
    }
    if b < 2 {
        return Err(Error::Data(format!(
            "pair statistics need at least 2 pairs for negatives, got {b}"
        )));
    }
    let mut pos_values = Vec::with_capacity(b);
    let mut neg_values = Vec::with_capacity(b * (b - 1));
    for i in 0..b {
        let v = images.row(i);
        for j in 0..b {
            let s = dot(v, texts.row(j));
            if i == j {
                pos_values.push(s);
            } else {
                neg_values.push(s);
            }
        }
    }
    let pos_mean = mean(&pos_values);
    let neg_mean = mean(&neg_values);
    Ok(PairSimilarityStats {
        pos_mean,
        neg_mean,
        gap: pos_mean - neg_mean,
        pos_values,
        neg_values,
    })
}

/// Equal-width bin counts over `[lo, hi]`; every bin is right-open except
/// the last. Values within 1e-9 outside the range are clamped in.
pub fn similarity_histogram(values: &[f64], bins: usize, range: (f64, f64)) -> Result<Vec<usize>> {
    let (lo, hi) = range;
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if !(hi > lo) {
        return Err(Error::Config(format!("empty histogram range [{lo}, {hi}]")));
    }
    let mut counts = vec![0usize; bins];
    let width = (hi - lo) / bins as f64;
    for (i, &v) in values.iter().enumerate() {
        if !(v >= lo - RANGE_TOLERANCE && v <= hi + RANGE_TOLERANCE) {
            return Err(Error::domain(
                "similarity_histogram",
                format!("value {v} at index {i} outside [{lo}, {hi}]"),
            ));
        }
        let idx = ((v - lo) / width).floor();
        let idx = if idx < 0.0 {
            0
        } else {
            (idx as usize).min(bins - 1)
        };
        counts[idx] += 1;
    }
    Ok(counts)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiBound {
    pub n_negatives: usize,
    /// InfoNCE with teacher anchors against student targets.
    pub infonce_teacher_to_student: f64,
    pub infonce_student_to_teacher: f64,
    pub bound: f64,
}

/// Mean over anchors of `-log softmax(anchor·targets/τ)[own index]`.
pub(crate) fn info_nce_value(anchors: &Tensor, targets: &Tensor, tau: f64) -> f64 {
    let b = anchors.rows();
    let mut total = 0.0;
    let mut logits = vec![0.0; b];
    for k in 0..b {
        let a = anchors.row(k);
        for (j, l) in logits.iter_mut().enumerate() {
            *l = dot(a, targets.row(j)) / tau;
        }
        total += log_sum_exp(&logits) - logits[k];
    }
    total / b as f64
}

/// `log(B-1) - ½(InfoNCE(T→S) + InfoNCE(S→T))` over same-modality
/// teacher/student embeddings.
pub fn mi_lower_bound(
    teacher: &EmbeddingBatch,
    student: &EmbeddingBatch,
    tau: f64,
) -> Result<MiBound> {
    if teacher.modality != student.modality {
        return Err(Error::Data(format!(
            "mutual information bound needs one modality, got {} and {}",
            teacher.modality, student.modality
        )));
    }
    let b = teacher.len();
    if student.len() != b || teacher.dim() != student.dim() {
        return Err(Error::shape(
            "mi_lower_bound",
            format!(
                "[{b}, {}] vs [{}, {}]",
                teacher.dim(),
                student.len(),
                student.dim()
            ),
        ));
    }
    if b < 2 {
        return Err(Error::Data(format!(
            "bound needs N = B-1 ≥ 1 negatives, got B = {b}"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::domain("mi_lower_bound", format!("τ = {tau}")));
    }
    let t2s = info_nce_value(teacher.matrix(), student.matrix(), tau);
    let s2t = info_nce_value(student.matrix(), teacher.matrix(), tau);
    let n = b - 1;
    Ok(MiBound {
        n_negatives: n,
        infonce_teacher_to_student: t2s,
        infonce_student_to_teacher: s2t,
        bound: (n as f64).ln() - 0.5 * (t2s + s2t),
    })
}
