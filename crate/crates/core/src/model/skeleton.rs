//! Joint self-attention + temporal convolution stack over skeleton clips.
//!
//! Skeleton tensors are `[B, C, T, K]` with K = 17 joints.

use trigait_tensor::nn::NormMode;
use trigait_tensor::Tensor;

use super::config::ModelConfig;
use super::layers::{attention, module, BatchNorm, Conv, Init, LEAKY_SLOPE};
use crate::data::{NUM_JOINTS, PARENT};
use crate::error::{Error, Result};

pub const INPUT_CHANNELS: usize = 10;

/// Ten per-joint channels from `T × 17 × 2` coordinates, laid out
/// `[10, T, 17]`: position (2), one-frame motion (2), two-frame motion (2),
/// bone vector to the parent (2), unit bone direction (2). Motion entries
/// without a later frame and bone entries of the root are zero.
pub fn multi_input_values(joints: &[f64], frames: usize) -> Result<Vec<f64>> {
    let k = NUM_JOINTS;
    if frames < 3 {
        return Err(Error::Invalid(format!("multi-input needs at least 3 frames, got {frames}")));
    }
    if joints.len() != frames * k * 2 {
        return Err(Error::Invalid(format!(
            "expected {} coordinates for {frames} frames, got {}",
            frames * k * 2,
            joints.len()
        )));
    }
    let at = |t: usize, j: usize, d: usize| joints[(t * k + j) * 2 + d];
    let mut out = vec![0.0; INPUT_CHANNELS * frames * k];
    let mut put = |c: usize, t: usize, j: usize, v: f64| out[(c * frames + t) * k + j] = v;
    for t in 0..frames {
        for j in 0..k {
            for d in 0..2 {
                put(d, t, j, at(t, j, d));
                if t + 1 < frames {
                    put(2 + d, t, j, at(t + 1, j, d) - at(t, j, d));
                }
                if t + 2 < frames {
                    put(4 + d, t, j, at(t + 2, j, d) - at(t, j, d));
                }
            }
            if let Some(p) = PARENT[j] {
                let bone = [at(t, j, 0) - at(t, p, 0), at(t, j, 1) - at(t, p, 1)];
                let len = bone[0].hypot(bone[1]);
                for d in 0..2 {
                    put(6 + d, t, j, bone[d]);
                    if len > 0.0 {
                        put(8 + d, t, j, bone[d] / len);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn multi_input(joints: &[f64], frames: usize) -> Result<Tensor> {
    Ok(Tensor::new(multi_input_values(joints, frames)?, &[INPUT_CHANNELS, frames, NUM_JOINTS])?)
}

/// Per-frame multi-head self-attention across joints.
#[derive(Debug, Clone)]
pub struct JointSelfAttention {
    pub q: Conv,
    pub k: Conv,
    pub v: Conv,
    heads: usize,
}
module!(JointSelfAttention { q, k, v });

impl JointSelfAttention {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !cout.is_multiple_of(heads) {
            return Err(Error::Invalid(format!("{cout} channels not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Conv::pointwise(init, &format!("{name}.q"), cin, cout, true)?,
            k: Conv::pointwise(init, &format!("{name}.k"), cin, cout, true)?,
            v: Conv::pointwise(init, &format!("{name}.v"), cin, cout, true)?,
            heads,
        })
    }

    /// `[B, C, T, K]` to `[B * T * heads, K, d_k]`.
    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let (b, c, t, k) = (s[0], s[1], s[2], s[3]);
        let dk = c / self.heads;
        Ok(x
            .reshape(&[b, self.heads, dk, t, k])?
            .permute(&[0, 3, 1, 4, 2])?
            .reshape(&[b * t * self.heads, k, dk])?)
    }

    /// Returns `Atte [B, Cout, T, K]` and weights `[B * T * heads, K, K]`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.rank() != 4 {
            return Err(Error::Invalid(format!("JSA input must be [B, C, T, K], got {:?}", x.shape())));
        }
        let q = self.q.forward(x)?;
        let (b, c, t, k) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
        let (out, w) = attention(&self.split(&q)?, &self.split(&self.k.forward(x)?)?, &self.split(&self.v.forward(x)?)?)?;
        let dk = c / self.heads;
        let atte = out
            .reshape(&[b, t, self.heads, k, dk])?
            .permute(&[0, 2, 4, 1, 3])?
            .reshape(&[b, c, t, k])?;
        Ok((atte, w))
    }

    pub fn zero(&mut self) -> Result<()> {
        self.q.zero()?;
        self.k.zero()?;
        self.v.zero()
    }
}

/// JSA, then a per-joint temporal conv, each followed by batch norm and
/// leaky-ReLU, plus a residual path.
#[derive(Debug, Clone)]
pub struct JsaTcBlock {
    pub jsa: JointSelfAttention,
    pub bn1: BatchNorm,
    pub tc: Conv,
    pub bn2: BatchNorm,
    pub residual: Option<Conv>,
}
module!(JsaTcBlock { jsa, bn1, tc, bn2, residual });

impl JsaTcBlock {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, heads: usize) -> Result<Self> {
        let residual = if cin == cout {
            None
        } else {
            Some(Conv::pointwise(init, &format!("{name}.residual"), cin, cout, false)?)
        };
        Ok(Self {
            jsa: JointSelfAttention::new(init, &format!("{name}.jsa"), cin, cout, heads)?,
            bn1: BatchNorm::new(init, &format!("{name}.bn1"), cout)?,
            tc: Conv::new(init, &format!("{name}.tc"), cout, cout, &[3, 1], &[1, 1], &[1, 0], true)?,
            bn2: BatchNorm::new(init, &format!("{name}.bn2"), cout)?,
            residual,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<(Tensor, Tensor)> {
        let (atte, w) = self.jsa.forward(x)?;
        let h = self.bn1.forward(&atte, mode)?.leaky_relu(LEAKY_SLOPE);
        let y = self.bn2.forward(&self.tc.forward(&h)?, mode)?.leaky_relu(LEAKY_SLOPE);
        let skip = match &self.residual {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((y.add(&skip)?, w))
    }
}

/// `[K, P]` averaging matrix of adaptive pooling from K to P bins: bin `i`
/// covers `floor(i·K/P) .. ceil((i+1)·K/P)`.
pub fn adaptive_pool_matrix(k: usize, p: usize) -> Vec<f64> {
    let mut m = vec![0.0; k * p];
    for i in 0..p {
        let start = i * k / p;
        let end = ((i + 1) * k).div_ceil(p);
        let w = 1.0 / (end - start) as f64;
        for j in start..end {
            m[j * p + i] = w;
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct SkeletonOutput {
    /// First block output `[B, C1, T, K]`.
    pub block1: Tensor,
    /// Last block output `[B, C, T, K]`.
    pub atte: Tensor,
    /// Attention weights of the first block.
    pub weights: Tensor,
    /// Temporal max `[B, C, K]`.
    pub f_ske: Tensor,
    /// `[B, C, P1]`.
    pub gait: Tensor,
}

#[derive(Debug, Clone)]
pub struct SkeletonBranch {
    pub blocks: Vec<JsaTcBlock>,
    pool: Tensor,
}
module!(SkeletonBranch { blocks });

impl SkeletonBranch {
    pub fn new(init: &mut Init, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let ch = cfg.skeleton_channels;
        let ins = [INPUT_CHANNELS, ch[0], ch[1], ch[2]];
        let blocks = (0..4)
            .map(|i| JsaTcBlock::new(init, &format!("{name}.block{i}"), ins[i], ch[i], cfg.heads))
            .collect::<Result<_>>()?;
        let p = cfg.unimodal_parts();
        Ok(Self {
            blocks,
            pool: Tensor::new(adaptive_pool_matrix(NUM_JOINTS, p), &[NUM_JOINTS, p])?,
        })
    }

    /// `x [B, 10, T, 17]` to `Gait_ske [B, C, P1]`.
    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<SkeletonOutput> {
        if x.rank() != 4 || x.shape()[1] != INPUT_CHANNELS || x.shape()[3] != NUM_JOINTS {
            return Err(Error::Invalid(format!(
                "skeleton input must be [B, 10, T, 17], got {:?}",
                x.shape()
            )));
        }
        let (block1, weights) = self.blocks[0].forward(x, mode)?;
        let mut h = block1.clone();
        for b in &self.blocks[1..] {
            h = b.forward(&h, mode)?.0;
        }
        let f_ske = h.max_axes(&[2], false)?;
        let (b, c) = (f_ske.shape()[0], f_ske.shape()[1]);
        let gait = f_ske
            .reshape(&[b * c, NUM_JOINTS])?
            .matmul(&self.pool)?
            .reshape(&[b, c, self.pool.shape()[1]])?;
        Ok(SkeletonOutput {
            block1,
            atte: h,
            weights,
            f_ske,
            gait,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    fn coords(frames: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..frames * NUM_JOINTS * 2).map(|_| rng.gen_range(0.0..64.0)).collect()
    }

    #[test]
    fn static_pose_has_no_motion() {
        let frame = coords(1, 1);
        let joints: Vec<f64> = frame.iter().cycle().take(frame.len() * 4).copied().collect();
        let x = multi_input_values(&joints, 4).unwrap();
        let plane = 4 * NUM_JOINTS;
        assert!(x[2 * plane..6 * plane].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn translation_only_moves_positions() {
        let a = coords(5, 2);
        let b: Vec<f64> = a.iter().map(|v| v + 3.25).collect();
        let (xa, xb) = (multi_input_values(&a, 5).unwrap(), multi_input_values(&b, 5).unwrap());
        let plane = 5 * NUM_JOINTS;
        for i in 2 * plane..10 * plane {
            assert!((xa[i] - xb[i]).abs() < 1e-12, "channel {}", i / plane);
        }
        assert_ne!(xa[..plane], xb[..plane]);
    }

    #[test]
    fn unit_directions_and_padding() {
        let joints = coords(4, 3);
        let x = multi_input_values(&joints, 4).unwrap();
        let at = |c: usize, t: usize, j: usize| x[(c * 4 + t) * NUM_JOINTS + j];
        for t in 0..4 {
            assert_eq!((at(8, t, 0), at(9, t, 0)), (0.0, 0.0));
            for j in 1..NUM_JOINTS {
                assert!((at(8, t, j).hypot(at(9, t, j)) - 1.0).abs() < 1e-9);
            }
        }
        for j in 0..NUM_JOINTS {
            assert_eq!(at(2, 3, j), 0.0);
            assert_eq!(at(4, 2, j), 0.0);
            assert_eq!(at(5, 3, j), 0.0);
        }
        let d1 = joints[(NUM_JOINTS + 5) * 2] - joints[5 * 2];
        assert_eq!(at(2, 0, 5), d1);
        assert!(multi_input_values(&coords(2, 0), 2).is_err());
    }

    #[test]
    fn single_joint_attention_is_the_value_map() {
        let jsa = JointSelfAttention::new(&mut Init::new(0), "j", 4, 8, 8).unwrap();
        let x = random(&[1, 4, 3, 1], 4);
        let (atte, w) = jsa.forward(&x).unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));
        let v = jsa.v.forward(&x).unwrap();
        assert_eq!(atte.data(), v.data());
    }

    #[test]
    fn identical_joints_attend_uniformly() {
        let jsa = JointSelfAttention::new(&mut Init::new(1), "j", 4, 8, 2).unwrap();
        let col = random(&[1, 4, 2, 1], 5);
        let x = Tensor::cat(&vec![col; 5], 3).unwrap();
        let (atte, w) = jsa.forward(&x).unwrap();
        assert!(w.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
        let v = jsa.v.forward(&x).unwrap();
        let mean = v.mean_axes(&[3], true).unwrap();
        let diff = atte.sub(&mean).unwrap();
        assert!(diff.data().iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn attention_rows_sum_to_one_and_are_frame_local() {
        let jsa = JointSelfAttention::new(&mut Init::new(2), "j", 10, 16, 8).unwrap();
        let x = random(&[2, 10, 4, NUM_JOINTS], 6);
        let (a1, w) = jsa.forward(&x).unwrap();
        for row in w.data().chunks(NUM_JOINTS) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mut data = x.to_vec();
        for c in 0..10 {
            for j in 0..NUM_JOINTS {
                data[((c * 4) + 2) * NUM_JOINTS + j] += 0.5;
            }
        }
        let (a2, _) = jsa.forward(&Tensor::new(data, x.shape()).unwrap()).unwrap();
        for b in 0..2 {
            for c in 0..16 {
                for t in [0, 1, 3] {
                    for j in 0..NUM_JOINTS {
                        let i = ((b * 16 + c) * 4 + t) * NUM_JOINTS + j;
                        assert_eq!(a1.data()[i], a2.data()[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn zeroed_block_is_the_residual() {
        let mut block = JsaTcBlock::new(&mut Init::new(3), "b", 16, 16, 8).unwrap();
        block.jsa.zero().unwrap();
        block.tc.zero().unwrap();
        let x = random(&[2, 16, 3, NUM_JOINTS], 7);
        let (y, _) = block.forward(&x, NormMode::Train).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn frame_permutation_commutes_without_tc() {
        let mut block = JsaTcBlock::new(&mut Init::new(4), "b", 10, 16, 8).unwrap();
        block.tc.zero().unwrap();
        let x = random(&[1, 10, 4, NUM_JOINTS], 8);
        let perm = [2, 0, 3, 1];
        let (y, _) = block.forward(&x, NormMode::Eval).unwrap();
        let (yp, _) = block.forward(&x.index_select(2, &perm).unwrap(), NormMode::Eval).unwrap();
        assert_eq!(y.index_select(2, &perm).unwrap().data(), yp.data());
    }

    #[test]
    fn pool_matrix_windows() {
        let m = adaptive_pool_matrix(17, 16);
        for i in 0..16 {
            let col: Vec<f64> = (0..17).map(|j| m[j * 16 + i]).collect();
            assert_eq!(col.iter().filter(|&&v| v == 0.5).count(), 2);
            assert_eq!((col[i], col[i + 1]), (0.5, 0.5));
        }
        let m = adaptive_pool_matrix(17, 4);
        let sums: Vec<f64> = (0..4).map(|i| (0..17).map(|j| m[j * 4 + i]).sum()).collect();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn branch_shapes_and_permutation_invariance() {
        let cfg = ModelConfig::miniature(2);
        let mut branch = SkeletonBranch::new(&mut Init::new(5), "ske", &cfg).unwrap();
        let x = random(&[2, 10, 5, NUM_JOINTS], 9);
        let out = branch.forward(&x, NormMode::Eval).unwrap();
        assert_eq!(out.block1.shape(), &[2, 16, 5, NUM_JOINTS]);
        assert_eq!(out.f_ske.shape(), &[2, 32, NUM_JOINTS]);
        assert_eq!(out.gait.shape(), &[2, 32, 4]);
        let zero = branch.forward(&Tensor::zeros(&[2, 10, 5, NUM_JOINTS]), NormMode::Train).unwrap();
        assert!(zero.gait.data().iter().all(|v| v.is_finite()));

        for b in &mut branch.blocks {
            b.tc.zero().unwrap();
        }
        let perm = [4, 1, 3, 0, 2];
        let a = branch.forward(&x, NormMode::Eval).unwrap().gait;
        let b = branch.forward(&x.index_select(2, &perm).unwrap(), NormMode::Eval).unwrap().gait;
        assert_eq!(a.data(), b.data());
    }
}
