//! Normalization, softmax and loss kernels.

use crate::error::{Result, TensorError};
use crate::layout::check_axis;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
        }
    }
}

fn channel_view(t: &Tensor, rank: usize) -> Result<Tensor> {
    let mut shape = vec![1; rank];
    shape[1] = t.numel();
    t.reshape(&shape)
}

/// Batch normalization over axis 1 of `input [B, C, ...]`.
///
/// Train mode normalizes with the biased batch variance and folds the batch
/// statistics into `stats`; eval mode normalizes with `stats`.
pub fn batch_norm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    mode: NormMode,
    stats: &mut RunningStats,
) -> Result<Tensor> {
    if input.rank() < 2 {
        return Err(TensorError::invalid(
            "batch_norm",
            format!("expected [batch, channels, ...], got {:?}", input.shape()),
        ));
    }
    let c = input.shape()[1];
    if gamma.numel() != c || beta.numel() != c || stats.mean.len() != c {
        return Err(TensorError::mismatch("batch_norm", input.shape(), gamma.shape()));
    }
    let rank = input.rank();
    let axes: Vec<usize> = (0..rank).filter(|&a| a != 1).collect();
    let g = channel_view(gamma, rank)?;
    let b = channel_view(beta, rank)?;
    let normalized = match mode {
        NormMode::Train => {
            let count = input.numel() / c;
            if count < 2 {
                return Err(TensorError::invalid(
                    "batch_norm",
                    format!("train mode needs at least 2 values per channel, got shape {:?}", input.shape()),
                ));
            }
            let mean = input.mean_axes(&axes, true)?;
            let centered = input.sub(&mean)?;
            let var = centered.square().mean_axes(&axes, true)?;
            let unbias = count as f64 / (count - 1) as f64;
            let m = stats.momentum;
            for ch in 0..c {
                stats.mean[ch] = (1.0 - m) * stats.mean[ch] + m * mean.data()[ch];
                stats.var[ch] = (1.0 - m) * stats.var[ch] + m * var.data()[ch] * unbias;
            }
            centered.mul(&var.add_scalar(eps).powf(-0.5))?
        }
        NormMode::Eval => {
            let mut shape = vec![1; rank];
            shape[1] = c;
            let mean = Tensor::new(stats.mean.clone(), &shape)?;
            let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            input.sub(&mean)?.mul(&Tensor::new(inv_std, &shape)?)?
        }
    };
    normalized.mul(&g)?.add(&b)
}

/// Layer normalization over the last axis.
pub fn layer_norm(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let last = input
        .rank()
        .checked_sub(1)
        .ok_or_else(|| TensorError::invalid("layer_norm", "scalar input"))?;
    let d = input.shape()[last];
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(TensorError::mismatch("layer_norm", input.shape(), gamma.shape()));
    }
    let mean = input.mean_axes(&[last], true)?;
    let centered = input.sub(&mean)?;
    let var = centered.square().mean_axes(&[last], true)?;
    centered
        .mul(&var.add_scalar(eps).powf(-0.5))?
        .mul(gamma)?
        .add(beta)
}

impl Tensor {
    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", axis, self.rank())?;
        let n = self.shape()[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..n {
                    let e = (x[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    out[at(i)] /= total;
                }
            }
        }
        Ok(Tensor::from_op(
            "softmax",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |y, g| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        let dot: f64 = (0..n).map(|i| y[at(i)] * g[at(i)]).sum();
                        for i in 0..n {
                            gx[at(i)] = y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

/// Mean softmax cross-entropy of `logits [N, S]` against class indices.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(TensorError::invalid(
            "cross_entropy",
            format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        ));
    }
    let (n, s) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= s) {
        return Err(TensorError::invalid(
            "cross_entropy",
            format!("label {bad} out of range for {s} classes"),
        ));
    }
    let x = logits.data();
    let mut probs = vec![0.0; n * s];
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &x[r * s..(r + 1) * s];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + total.ln();
        loss += lse - row[label];
        for (p, v) in probs[r * s..(r + 1) * s].iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
    }
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        "cross_entropy",
        vec![loss / n as f64],
        vec![],
        vec![logits.clone()],
        Box::new(move |_, g| {
            let scale = g[0] / n as f64;
            let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (r, &label) in labels.iter().enumerate() {
                gx[r * s + label] -= scale;
            }
            vec![Some(gx)]
        }),
    ))
}

/// Euclidean distances within each group: `x [G, N, D] -> [G, N, N]`.
///
/// Computed from explicit differences (not the Gram expansion) so coincident
/// points give exactly zero; the gradient at zero distance is zero.
pub fn pairwise_distance(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(TensorError::invalid(
            "pairwise_distance",
            format!("expected [groups, n, dim], got {:?}", x.shape()),
        ));
    }
    let (groups, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let v = x.data();
    let mut out = vec![0.0; groups * n * n];
    for gi in 0..groups {
        let base = gi * n * d;
        for i in 0..n {
            for j in (i + 1)..n {
                let a = &v[base + i * d..base + (i + 1) * d];
                let b = &v[base + j * d..base + (j + 1) * d];
                let dist = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                out[(gi * n + i) * n + j] = dist;
                out[(gi * n + j) * n + i] = dist;
            }
        }
    }
    let xt = x.clone();
    Ok(Tensor::from_op(
        "pairwise_distance",
        out,
        vec![groups, n, n],
        vec![x.clone()],
        Box::new(move |dist, g| {
            let v = xt.data();
            let mut gx = vec![0.0; v.len()];
            for gi in 0..groups {
                let base = gi * n * d;
                for i in 0..n {
                    for j in 0..n {
                        let k = (gi * n + i) * n + j;
                        if i == j || dist[k] == 0.0 {
                            continue;
                        }
                        // d(d_ij)/dx_i = (x_i - x_j) / d_ij; the (j, i) entry
                        // is visited separately and covers x_j.
                        let coef = g[k] / dist[k];
                        for c in 0..d {
                            let diff = v[base + i * d + c] - v[base + j * d + c];
                            gx[base + i * d + c] += coef * diff;
                            gx[base + j * d + c] -= coef * diff;
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], s: &[usize]) -> Tensor {
        Tensor::new(v.to_vec(), s).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(t(&[1.0, 1.0], &[2]).softmax(0).unwrap().data(), &[0.5, 0.5]);
        assert_eq!(t(&[-4.0], &[1]).softmax(0).unwrap().data(), &[1.0]);
        let y = t(&[0.0, 3f64.ln()], &[2]).softmax(0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
        assert!(t(&[0.0], &[1]).softmax(1).is_err());
    }

    #[test]
    fn batch_norm_examples() {
        let mut stats = RunningStats::new(1);
        let ones = Tensor::ones(&[1]);
        let zeros = Tensor::zeros(&[1]);
        let y = batch_norm(&t(&[3.0; 4], &[4, 1]), &ones, &zeros, BN_EPS, NormMode::Train, &mut stats).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let y = batch_norm(&t(&[0.0, 2.0], &[2, 1]), &ones, &zeros, 0.0, NormMode::Train, &mut stats).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);

        let y = batch_norm(&t(&[0.0, 2.0, 9.0], &[3, 1]), &zeros, &t(&[4.0], &[1]), BN_EPS, NormMode::Train, &mut stats)
            .unwrap();
        assert_eq!(y.data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn batch_norm_updates_and_uses_running_stats() {
        let mut stats = RunningStats::new(1);
        let x = t(&[0.0, 2.0], &[2, 1]);
        batch_norm(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), BN_EPS, NormMode::Train, &mut stats).unwrap();
        // mean 1, unbiased var 2
        assert!((stats.mean[0] - 0.1).abs() < 1e-15);
        assert!((stats.var[0] - (0.9 + 0.2)).abs() < 1e-15);
        let y = batch_norm(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), BN_EPS, NormMode::Eval, &mut stats).unwrap();
        let expect = (2.0 - 0.1) / (1.1f64 + BN_EPS).sqrt();
        assert!((y.data()[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_rejects_single_value_in_train() {
        let mut stats = RunningStats::new(2);
        let r = batch_norm(&Tensor::zeros(&[1, 2]), &Tensor::ones(&[2]), &Tensor::zeros(&[2]), BN_EPS, NormMode::Train, &mut stats);
        assert!(r.is_err());
        let r = batch_norm(&Tensor::zeros(&[4, 3]), &Tensor::ones(&[2]), &Tensor::zeros(&[2]), BN_EPS, NormMode::Train, &mut stats);
        assert!(r.is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let s = 5;
        let l = cross_entropy(&Tensor::zeros(&[3, s]), &[0, 4, 2]).unwrap();
        assert!((l.item() - (s as f64).ln()).abs() < 1e-14);

        let l = cross_entropy(&t(&[30.0, 0.0], &[1, 2]), &[0]).unwrap();
        assert!(l.item() < 1e-12);

        // -ln(e / (e + 1))
        let l = cross_entropy(&t(&[1.0, 0.0], &[1, 2]), &[0]).unwrap();
        assert!((l.item() - 0.313_261_687_518_222_8).abs() < 1e-15);

        assert!(cross_entropy(&Tensor::zeros(&[1, 2]), &[2]).is_err());
    }

    #[test]
    fn pairwise_distance_basics() {
        let x = t(&[0.0, 0.0, 3.0, 4.0, 0.0, 0.0], &[1, 3, 2]);
        let d = pairwise_distance(&x).unwrap();
        assert_eq!(d.data(), &[0.0, 5.0, 0.0, 5.0, 0.0, 5.0, 0.0, 5.0, 0.0]);
    }
}
