//! Batch-all triplet loss (active-term average) and classification loss.

use trigait_tensor::nn::{cross_entropy, pairwise_distance};
use trigait_tensor::Tensor;

use crate::error::{Error, Result};

pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_tri: f64,
    pub l_ce: f64,
    pub l: f64,
    pub active_triplet_fraction: f64,
}

/// Mask `[B, B, B]` of valid (anchor, positive, negative) triples.
fn triplet_mask(labels: &[usize]) -> (Vec<f64>, usize) {
    let n = labels.len();
    let mut mask = vec![0.0; n * n * n];
    let mut count = 0;
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] != labels[a] {
                    mask[(a * n + p) * n + q] = 1.0;
                    count += 1;
                }
            }
        }
    }
    (mask, count)
}

/// BA+ triplet loss over `embeddings [B, D, P]`: per part, the hinge
/// `max(0, m + d_ap - d_an)` over every valid triple averaged over the
/// non-zero terms, then the mean over parts. Also returns the fraction of
/// active terms across all parts.
pub fn triplet_ba_loss(embeddings: &Tensor, labels: &[usize], margin: f64) -> Result<(Tensor, f64)> {
    if embeddings.rank() != 3 || embeddings.shape()[0] != labels.len() {
        return Err(Error::Invalid(format!(
            "embeddings {:?} do not match {} labels",
            embeddings.shape(),
            labels.len()
        )));
    }
    let (mask, valid) = triplet_mask(labels);
    if valid == 0 {
        return Err(Error::Invalid("batch has no valid triplet".into()));
    }
    let n = labels.len();
    let parts = embeddings.shape()[2];
    let d = pairwise_distance(&embeddings.permute(&[2, 0, 1])?)?;
    let ap = d.reshape(&[parts, n, n, 1])?;
    let an = d.reshape(&[parts, n, 1, n])?;
    let hinge = ap.sub(&an)?.add_scalar(margin).relu();
    let terms = hinge.mul(&Tensor::new(mask, &[1, n, n, n])?)?;
    let mut scale = Vec::with_capacity(parts);
    let mut active = 0usize;
    for chunk in terms.data().chunks(n * n * n) {
        let k = chunk.iter().filter(|&&v| v > 0.0).count();
        active += k;
        scale.push(if k > 0 { 1.0 / (k as f64 * parts as f64) } else { 0.0 });
    }
    let per_part = terms.sum_axes(&[1, 2, 3], false)?;
    let loss = per_part.mul(&Tensor::new(scale, &[parts])?)?.sum_all();
    Ok((loss, active as f64 / (valid * parts) as f64))
}

/// Cross-entropy of `classifier(mean over parts)`.
pub fn ce_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    Ok(cross_entropy(logits, labels)?)
}

/// For each anchor, the hardest positive and hardest negative index under a
/// `[B, B]` distance matrix (first index on ties).
pub fn hardest_pairs(distances: &[f64], labels: &[usize]) -> Vec<(Option<usize>, Option<usize>)> {
    let n = labels.len();
    (0..n)
        .map(|a| {
            let row = &distances[a * n..(a + 1) * n];
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..n {
                if j != a && labels[j] == labels[a] {
                    if pos.is_none_or(|p| row[j] > row[p]) {
                        pos = Some(j);
                    }
                } else if labels[j] != labels[a] && neg.is_none_or(|q| row[j] < row[q]) {
                    neg = Some(j);
                }
            }
            (pos, neg)
        })
        .collect()
}
