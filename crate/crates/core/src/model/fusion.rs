//! Cross-modal part tokens and the single-layer transformer that fuses them.

use trigait_tensor::Tensor;

use super::config::{ModelConfig, PartitionMode};
use super::layers::{attention, module, Init, LayerNorm, Linear};
use crate::data::NUM_JOINTS;
use crate::error::{Error, Result};

pub const NUM_PARTS: usize = 7;

/// A body part and the COCO-17 joints it owns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartDef {
    pub name: &'static str,
    pub joints: Vec<usize>,
}

pub fn body_parts() -> Vec<PartDef> {
    let def = |name, joints: &[usize]| PartDef {
        name,
        joints: joints.to_vec(),
    };
    vec![
        def("head", &[0, 1, 2, 3, 4]),
        def("shoulder", &[5, 6]),
        def("elbow", &[7, 8]),
        def("wrist", &[9, 10]),
        def("hip", &[11, 12]),
        def("knee", &[13, 14]),
        def("ankle", &[15, 16]),
    ]
}

/// Vertical extent of a part and the feature rows it maps to (inclusive).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartRange {
    /// Flexion (minimum) normalized vertical position. For uniform bands,
    /// the band's top as a fraction of the feature height.
    pub h_f: f64,
    /// Extension (maximum) position, or the band's bottom fraction.
    pub h_e: f64,
    pub row_lo: usize,
    pub row_hi: usize,
}

/// Per frame: hip midpoint to the origin, then scale by `1 / |v_neck|` where
/// the neck is the shoulder midpoint. `joints` is `T × 17 × 2`.
pub fn neck_normalize(joints: &[f64]) -> Result<Vec<f64>> {
    let stride = NUM_JOINTS * 2;
    if joints.is_empty() || !joints.len().is_multiple_of(stride) {
        return Err(Error::Invalid(format!("{} values is not a whole number of frames", joints.len())));
    }
    let mut out = Vec::with_capacity(joints.len());
    for (t, f) in joints.chunks_exact(stride).enumerate() {
        let mid = |a: usize, b: usize, d: usize| (f[a * 2 + d] + f[b * 2 + d]) / 2.0;
        let origin = [mid(11, 12, 0), mid(11, 12, 1)];
        let neck = mid(5, 6, 1) - origin[1];
        if neck == 0.0 || !neck.is_finite() {
            return Err(Error::DegenerateFrame {
                frame: t,
                msg: "neck and hip midpoints share a vertical position".into(),
            });
        }
        let s = 1.0 / neck.abs();
        for j in 0..NUM_JOINTS {
            out.push((f[j * 2] - origin[0]) * s);
            out.push((f[j * 2 + 1] - origin[1]) * s);
        }
    }
    Ok(out)
}

/// Maps a normalized vertical position to a fractional feature row.
fn to_row(v: f64, lo: f64, hi: f64, rows: usize) -> f64 {
    if hi > lo {
        (v - lo) * (rows - 1) as f64 / (hi - lo)
    } else {
        0.0
    }
}

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// Flexion/extension range of each part over the whole clip, mapped to
/// `rows` feature rows through the clip's own vertical extent.
pub fn motion_ranges(normalized: &[f64], parts: &[PartDef], rows: usize) -> Result<Vec<PartRange>> {
    let stride = NUM_JOINTS * 2;
    if normalized.is_empty() || !normalized.len().is_multiple_of(stride) {
        return Err(Error::Invalid("motion ranges need at least one frame".into()));
    }
    if rows == 0 {
        return Err(Error::Invalid("feature map has no rows".into()));
    }
    let vertical = |t: usize, j: usize| normalized[t * stride + j * 2 + 1];
    let frames = normalized.len() / stride;
    let (mut gmin, mut gmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..frames {
        for j in 0..NUM_JOINTS {
            gmin = gmin.min(vertical(t, j));
            gmax = gmax.max(vertical(t, j));
        }
    }
    parts
        .iter()
        .map(|part| {
            if part.joints.is_empty() {
                return Err(Error::Invalid(format!("part {} has no joints", part.name)));
            }
            let (mut h_f, mut h_e) = (f64::INFINITY, f64::NEG_INFINITY);
            for t in 0..frames {
                for &j in &part.joints {
                    h_f = h_f.min(vertical(t, j));
                    h_e = h_e.max(vertical(t, j));
                }
            }
            let (row_lo, row_hi) = if gmax > gmin {
                let top = (rows - 1) as f64;
                let lo = snap(to_row(h_f, gmin, gmax, rows)).floor().clamp(0.0, top) as usize;
                let hi = snap(to_row(h_e, gmin, gmax, rows)).ceil().clamp(0.0, top) as usize;
                (lo, hi.max(lo))
            } else {
                (0, rows - 1)
            };
            Ok(PartRange {
                h_f,
                h_e,
                row_lo,
                row_hi,
            })
        })
        .collect()
}

/// Seven contiguous bands over `rows`, heights by largest remainder with
/// ties going to the upper bands. With fewer than seven rows, band `p`
/// covers row `floor(p · rows / 7)`.
pub fn uniform_partition_ranges(rows: usize) -> Vec<PartRange> {
    let n = NUM_PARTS;
    let heights: Vec<usize> = if rows >= n {
        let mut h = vec![rows / n; n];
        for x in h.iter_mut().take(rows % n) {
            *x += 1;
        }
        h
    } else {
        Vec::new()
    };
    let mut start = 0;
    (0..n)
        .map(|p| {
            let (lo, hi) = if rows >= n {
                let lo = start;
                start += heights[p];
                (lo, start - 1)
            } else {
                let r = p * rows / n;
                (r, r)
            };
            PartRange {
                h_f: lo as f64 / rows as f64,
                h_e: (hi + 1) as f64 / rows as f64,
                row_lo: lo,
                row_hi: hi,
            }
        })
        .collect()
}

/// Part ranges of one clip under `mode`. `joints` are raw `T × 17 × 2`.
pub fn partition(joints: &[f64], rows: usize, mode: PartitionMode) -> Result<Vec<PartRange>> {
    match mode {
        PartitionMode::Uniform => Ok(uniform_partition_ranges(rows)),
        PartitionMode::Motion => motion_ranges(&neck_normalize(joints)?, &body_parts(), rows),
    }
}

/// Max-plus-average pooling over `axes`.
fn max_plus_avg(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    Ok(x.max_axes(axes, false)?.add(&x.mean_axes(axes, false)?)?)
}

/// `PT_fuse [B, C1 + C2, T, 7]` from `f_X [B, C1, T, H, W]`, `f_Y [B, C2, T, K]`
/// and per-sample part ranges over the rows of `f_X`.
pub fn cross_modal_tokens(f_x: &Tensor, f_y: &Tensor, ranges: &[Vec<PartRange>], parts: &[PartDef]) -> Result<Tensor> {
    let (b, h) = (f_x.shape()[0], f_x.shape()[3]);
    if f_x.rank() != 5 || f_y.rank() != 4 || f_y.shape()[0] != b || f_y.shape()[2] != f_x.shape()[2] {
        return Err(Error::Invalid(format!(
            "token inputs disagree: f_X {:?}, f_Y {:?}",
            f_x.shape(),
            f_y.shape()
        )));
    }
    if ranges.len() != b || ranges.iter().any(|r| r.len() != parts.len()) {
        return Err(Error::Invalid(format!("need {} ranges for each of {b} samples", parts.len())));
    }
    let skeleton_tokens = parts
        .iter()
        .map(|p| max_plus_avg(&f_y.index_select(3, &p.joints)?, &[3]))
        .collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::with_capacity(b);
    for (i, sample_ranges) in ranges.iter().enumerate() {
        let x = f_x.narrow(0, i, 1)?;
        let mut tokens = Vec::with_capacity(parts.len());
        for (p, r) in sample_ranges.iter().enumerate() {
            if r.row_lo > r.row_hi || r.row_hi >= h {
                return Err(Error::Invalid(format!(
                    "part {} rows {}..={} outside 0..{h}",
                    parts[p].name, r.row_lo, r.row_hi
                )));
            }
            let sil = max_plus_avg(&x.narrow(3, r.row_lo, r.row_hi - r.row_lo + 1)?, &[3, 4])?;
            let ske = skeleton_tokens[p].narrow(0, i, 1)?;
            tokens.push(Tensor::cat(&[sil, ske], 1)?);
        }
        samples.push(Tensor::stack(&tokens, 3)?);
    }
    Ok(Tensor::cat(&samples, 0)?)
}

/// Multi-head self-attention over `[N, L, D]` with an output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    heads: usize,
}
module!(MultiHeadAttention { q, k, v, out });

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Invalid(format!("{dim} channels not divisible by {heads} heads")));
        }
        let lin = |init: &mut Init, n: &str| Linear::new(init, &format!("{name}.{n}"), dim, dim, 1.0);
        Ok(Self {
            q: lin(init, "q")?,
            k: lin(init, "k")?,
            v: lin(init, "v")?,
            out: lin(init, "out")?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (n, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let dk = d / self.heads;
        Ok(x.reshape(&[n, l, self.heads, dk])?.permute(&[0, 2, 1, 3])?.reshape(&[n * self.heads, l, dk])?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (o, _) = attention(
            &self.split(&self.q.forward(x)?)?,
            &self.split(&self.k.forward(x)?)?,
            &self.split(&self.v.forward(x)?)?,
        )?;
        let merged = o
            .reshape(&[n, self.heads, l, d / self.heads])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n, l, d])?;
        self.out.forward(&merged)
    }
}

/// Entry projection, one post-norm transformer encoder layer over the seven
/// part tokens of every frame, then a temporal max.
#[derive(Debug, Clone)]
pub struct FusionBranch {
    pub entry: Linear,
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}
module!(FusionBranch { entry, attn, norm1, ff1, ff2, norm2 });

impl FusionBranch {
    pub fn new(init: &mut Init, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let cin = cfg.stem_channels[0] + cfg.skeleton_channels[0];
        let d = cfg.embed_dim;
        Ok(Self {
            entry: Linear::new(init, &format!("{name}.entry"), cin, d, 1.0)?,
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), d, cfg.fusion_heads)?,
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), d)?,
            ff1: Linear::new(init, &format!("{name}.ff1"), d, 2 * d, std::f64::consts::SQRT_2)?,
            ff2: Linear::new(init, &format!("{name}.ff2"), 2 * d, d, 1.0)?,
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), d)?,
        })
    }

    /// Encoder layer over `[N, L, D]` token sets.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&x.add(&self.attn.forward(x)?)?)?;
        let ff = self.ff2.forward(&self.ff1.forward(&h)?.relu())?;
        self.norm2.forward(&h.add(&ff)?)
    }

    /// `PT_fuse [B, Cin, T, 7]` to `Gait_fuse [B, D, 7]`.
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let s = tokens.shape();
        if s.len() != 4 {
            return Err(Error::Invalid(format!("tokens must be [B, C, T, P], got {s:?}")));
        }
        let (b, t, p) = (s[0], s[2], s[3]);
        let x = self.entry.forward(&tokens.permute(&[0, 2, 3, 1])?)?;
        let d = x.shape()[3];
        let y = self.encode(&x.reshape(&[b * t, p, d])?)?;
        Ok(y.reshape(&[b, t, p, d])?.max_axes(&[1], false)?.permute(&[0, 2, 1])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::zero_param;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    /// One frame with shoulders at `v = shoulder_v` and hips at 0.
    fn posed(shoulder_v: f64) -> Vec<f64> {
        let mut f = vec![0.0; NUM_JOINTS * 2];
        for j in 0..NUM_JOINTS {
            f[j * 2] = j as f64 * 0.1 - 0.8;
            f[j * 2 + 1] = shoulder_v * (1.0 - j as f64 / 12.0);
        }
        for j in [5, 6] {
            f[j * 2 + 1] = shoulder_v;
        }
        for j in [11, 12] {
            f[j * 2 + 1] = 0.0;
        }
        f[22] = -0.3;
        f[24] = 0.3;
        f
    }

    #[test]
    fn parts_partition_the_joints() {
        let mut all: Vec<usize> = body_parts().into_iter().flat_map(|p| p.joints).collect();
        all.sort_unstable();
        assert_eq!(all, (0..NUM_JOINTS).collect::<Vec<_>>());
        assert_eq!(body_parts().len(), NUM_PARTS);
    }

    #[test]
    fn normalization_examples() {
        let unit = posed(1.0);
        assert_eq!(neck_normalize(&unit).unwrap(), unit);
        let two: Vec<f64> = [posed(-2.0), posed(-2.0)].concat();
        let n = neck_normalize(&two).unwrap();
        for (a, b) in n.iter().zip(&two) {
            assert_eq!(*a, b / 2.0);
        }
        let scaled: Vec<f64> = two.iter().map(|v| v * 2.0).collect();
        assert_eq!(neck_normalize(&scaled).unwrap(), n);
        let err = neck_normalize(&[posed(-1.0), posed(0.0)].concat()).unwrap_err();
        assert!(matches!(err, Error::DegenerateFrame { frame: 1, .. }));
    }

    #[test]
    fn ranges_follow_min_and_max() {
        let mut a = posed(-1.0);
        let mut b = posed(-1.0);
        a[15 * 2 + 1] = 0.9;
        b[15 * 2 + 1] = 1.1;
        a[16 * 2 + 1] = 0.95;
        b[16 * 2 + 1] = 1.0;
        let r = motion_ranges(&[a, b].concat(), &body_parts(), 16).unwrap();
        assert_eq!((r[6].h_f, r[6].h_e), (0.9, 1.1));
        assert_eq!(r[6].row_hi, 15);
        // The shoulders sit at the clip's minimum.
        assert_eq!(r[1].row_lo, 0);
        let static_clip = [posed(-1.0), posed(-1.0)].concat();
        let still = motion_ranges(&static_clip, &body_parts(), 16).unwrap();
        assert!(still.iter().all(|r| r.h_f <= r.h_e && r.row_lo <= r.row_hi));
        assert_eq!((still[1].h_f, still[1].h_e), (-1.0, -1.0));
        let empty = [PartDef { name: "none", joints: vec![] }];
        assert!(motion_ranges(&static_clip, &empty, 16).is_err());
    }

    #[test]
    fn uniform_bands() {
        let h: Vec<usize> = uniform_partition_ranges(16).iter().map(|r| r.row_hi - r.row_lo + 1).collect();
        assert_eq!(h, [3, 3, 2, 2, 2, 2, 2]);
        let r14 = uniform_partition_ranges(14);
        assert!(r14.iter().all(|r| r.row_hi - r.row_lo + 1 == 2));
        assert_eq!(r14[6].row_hi, 13);
        let r4 = uniform_partition_ranges(4);
        assert_eq!(r4.len(), 7);
        assert!(r4.iter().all(|r| r.row_hi < 4 && r.row_lo == r.row_hi));
    }

    #[test]
    fn token_arithmetic() {
        let parts = body_parts();
        let ranges = vec![uniform_partition_ranges(8); 2];
        let zero = cross_modal_tokens(&Tensor::zeros(&[2, 3, 4, 8, 8]), &Tensor::zeros(&[2, 5, 4, 17]), &ranges, &parts)
            .unwrap();
        assert_eq!(zero.shape(), &[2, 8, 4, 7]);
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let c = cross_modal_tokens(&Tensor::full(&[2, 3, 4, 8, 8], 1.5), &Tensor::full(&[2, 5, 4, 17], -2.0), &ranges, &parts)
            .unwrap();
        for (i, v) in c.data().iter().enumerate() {
            let channel = (i / (4 * 7)) % 8;
            assert_eq!(*v, if channel < 3 { 3.0 } else { -4.0 });
        }
    }

    #[test]
    fn fusion_shapes_and_single_frame() {
        let cfg = ModelConfig::miniature(2);
        let f = FusionBranch::new(&mut Init::new(0), "fuse", &cfg).unwrap();
        let cin = cfg.stem_channels[0] + cfg.skeleton_channels[0];
        let tokens = random(&[2, cin, 3, 7], 1);
        assert_eq!(f.forward(&tokens).unwrap().shape(), &[2, 32, 7]);
        let one = random(&[1, cin, 1, 7], 2);
        let y = f.forward(&one).unwrap();
        let x = f.entry.forward(&one.permute(&[0, 2, 3, 1]).unwrap()).unwrap().reshape(&[1, 7, 32]).unwrap();
        let direct = f.encode(&x).unwrap().permute(&[0, 2, 1]).unwrap();
        assert_eq!(y.data(), direct.data());
    }

    #[test]
    fn zero_attention_output_leaves_the_feed_forward_path() {
        let cfg = ModelConfig::miniature(2);
        let mut f = FusionBranch::new(&mut Init::new(1), "fuse", &cfg).unwrap();
        zero_param(&mut f.attn.out.weight).unwrap();
        let x = random(&[3, 7, 32], 3);
        let h = f.norm1.forward(&x).unwrap();
        let ff = f.ff2.forward(&f.ff1.forward(&h).unwrap().relu()).unwrap();
        let expected = f.norm2.forward(&h.add(&ff).unwrap()).unwrap();
        assert_eq!(f.encode(&x).unwrap().data(), expected.data());
    }

    #[test]
    fn encoder_is_token_permutation_equivariant() {
        let cfg = ModelConfig::miniature(2);
        let f = FusionBranch::new(&mut Init::new(2), "fuse", &cfg).unwrap();
        let x = random(&[2, 7, 32], 4);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let a = f.encode(&x).unwrap().index_select(1, &perm).unwrap();
        let b = f.encode(&x.index_select(1, &perm).unwrap()).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
