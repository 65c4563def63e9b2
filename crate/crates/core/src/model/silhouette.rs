//! Appearance and motion streams over silhouette clips.
//!
//! All tensors are batch-first: clips are `[B, 1, T, H, W]` and the stem
//! output `F` is `[B, C, T, H', W']`.

use trigait_tensor::nn::NormMode;
use trigait_tensor::{softplus_inv, Parameter, Tensor};

use super::config::ModelConfig;
use super::layers::{module, BatchNorm, Conv, Init, LEAKY_SLOPE};
use crate::error::{Error, Result};

/// Offset keeping the learned GeM exponent away from zero.
pub const GEM_P_FLOOR: f64 = 1e-3;

/// 3×3×3 conv, batch norm, leaky-ReLU and an optional 2×2 spatial max-pool.
#[derive(Debug, Clone)]
pub struct StemBlock {
    pub conv: Conv,
    pub bn: BatchNorm,
    pool: bool,
}
module!(StemBlock { conv, bn });

impl StemBlock {
    fn new(init: &mut Init, name: &str, cin: usize, cout: usize, pool: bool) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(init, &format!("{name}.conv"), cin, cout, &[3, 3, 3], &[1, 1, 1], &[1, 1, 1], false)?,
            bn: BatchNorm::new(init, &format!("{name}.bn"), cout)?,
            pool,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let y = self.bn.forward(&self.conv.forward(x)?, mode)?.leaky_relu(LEAKY_SLOPE);
        if self.pool {
            max_pool_2x2(&y)
        } else {
            Ok(y)
        }
    }
}

/// 2×2 max-pool over the last two axes of `[B, C, T, H, W]`.
pub fn max_pool_2x2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let (h, w) = (s[3], s[4]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Invalid(format!("2x2 pooling needs even extents, got {s:?}")));
    }
    Ok(x.reshape(&[s[0], s[1], s[2], h / 2, 2, w / 2, 2])?.max_axes(&[4, 6], false)?)
}

/// Learnable-exponent generalized mean with `p = softplus(p_raw) + 1e-3`.
#[derive(Debug, Clone)]
pub struct Gem {
    pub p_raw: Parameter,
}
module!(Gem { p_raw });

impl Gem {
    pub fn new(init: &mut Init, name: &str, p: f64) -> Result<Self> {
        Ok(Self {
            p_raw: init.constant(&format!("{name}.p_raw"), &[], softplus_inv(p - GEM_P_FLOOR))?,
        })
    }

    pub fn p(&self) -> Tensor {
        self.p_raw.value().softplus().add_scalar(GEM_P_FLOOR)
    }

    pub fn forward(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        gem_pool(x, &self.p(), axis)
    }
}

/// `(mean_axis x^p)^(1/p)`, dropping `axis`. `x` must be non-negative.
pub fn gem_pool(x: &Tensor, p: &Tensor, axis: usize) -> Result<Tensor> {
    if let Some(v) = x.data().iter().find(|v| **v < 0.0) {
        return Err(Error::Invalid(format!("gem_pool needs non-negative input, found {v}")));
    }
    if !(p.item() > 0.0) {
        return Err(Error::Invalid(format!("gem_pool needs p > 0, got {}", p.item())));
    }
    let m = x.pow(p)?.mean_axes(&[axis], false)?;
    Ok(m.pow(&p.powf(-1.0))?)
}

/// Spatial attention map over `[B, C, H, W]`: 1×1 reduce, two dilated 3×3
/// convs, 1×1 to one channel, batch norm, sigmoid.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub reduce: Conv,
    pub dilated: Vec<Conv>,
    pub expand: Conv,
    pub bn: BatchNorm,
}
module!(SpatialAttention { reduce, dilated, expand, bn });

impl SpatialAttention {
    pub fn new(init: &mut Init, name: &str, c: usize, r: usize) -> Result<Self> {
        if r == 0 || !c.is_multiple_of(r) {
            return Err(Error::Invalid(format!("channels {c} not divisible by reduction {r}")));
        }
        let cr = c / r;
        let dilated = (0..2)
            .map(|i| Conv::new(init, &format!("{name}.dilated{i}"), cr, cr, &[3, 3], &[2, 2], &[2, 2], true))
            .collect::<Result<_>>()?;
        Ok(Self {
            reduce: Conv::pointwise(init, &format!("{name}.reduce"), c, cr, true)?,
            dilated,
            expand: Conv::pointwise(init, &format!("{name}.expand"), cr, 1, true)?,
            bn: BatchNorm::new(init, &format!("{name}.bn"), 1)?,
        })
    }

    pub fn map(&self, fs: &Tensor, mode: NormMode) -> Result<Tensor> {
        let mut h = self.reduce.forward(fs)?;
        for c in &self.dilated {
            h = c.forward(&h)?;
        }
        Ok(self.bn.forward(&self.expand.forward(&h)?, mode)?.sigmoid())
    }

    /// Returns `(F_S', S_A)`.
    pub fn refine(&self, fs: &Tensor, mode: NormMode) -> Result<(Tensor, Tensor)> {
        let sa = self.map(fs, mode)?;
        Ok((apply_spatial_attention(fs, &sa)?, sa))
    }

    /// Zeroes every conv so the map becomes `sigmoid(BN(0))`.
    pub fn zero(&mut self) -> Result<()> {
        self.reduce.zero()?;
        for c in &mut self.dilated {
            c.zero()?;
        }
        self.expand.zero()
    }
}

/// `F_S + F_S ⊗ S_A`, with `S_A [B, 1, H, W]` broadcast over channels.
pub fn apply_spatial_attention(fs: &Tensor, sa: &Tensor) -> Result<Tensor> {
    Ok(fs.add(&fs.mul(sa)?)?)
}

#[derive(Debug, Clone)]
pub struct SilhouetteOutput {
    /// First stem block output, `[B, C1, T, H/2, W/2]`.
    pub block1: Tensor,
    /// Stem output `F`.
    pub f: Tensor,
    /// Temporal max of `F`, `[B, C, H', W']`.
    pub f_s: Tensor,
    /// Global spatial attention map `[B, 1, H', W']`.
    pub s_a: Tensor,
    /// Appearance feature `[B, C, H']`.
    pub a: Tensor,
    /// Multi-scale temporal feature `[B, C, T, H', 3]`.
    pub f_t: Tensor,
    pub s_t: Tensor,
    /// Motion feature `[B, C, H']`.
    pub m: Tensor,
    /// `concat(A, M)` on channels, `[B, 2C, H']`.
    pub gait: Tensor,
}

#[derive(Debug, Clone)]
pub struct SilhouetteBranch {
    pub stem: Vec<StemBlock>,
    pub global: SpatialAttention,
    pub local: Vec<SpatialAttention>,
    pub gem_appearance: Gem,
    pub gem_temporal: Gem,
    pub temporal: Vec<Conv>,
    pub st_reduce: Conv,
    pub st_expand: Conv,
    parts: usize,
}
module!(SilhouetteBranch {
    stem,
    global,
    local,
    gem_appearance,
    gem_temporal,
    temporal,
    st_reduce,
    st_expand
});

impl SilhouetteBranch {
    pub fn new(init: &mut Init, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let ch = cfg.stem_channels;
        let ins = [1, ch[0], ch[1], ch[2]];
        let stem = (0..4)
            .map(|i| StemBlock::new(init, &format!("{name}.stem{i}"), ins[i], ch[i], i < 2))
            .collect::<Result<_>>()?;
        let c = ch[3];
        let r = cfg.reduction;
        let global = SpatialAttention::new(init, &format!("{name}.attn_global"), c, r)?;
        let local = (0..cfg.parts)
            .map(|i| SpatialAttention::new(init, &format!("{name}.attn_local{i}"), c, r))
            .collect::<Result<_>>()?;
        let temporal = cfg
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| Conv::new(init, &format!("{name}.temporal{i}"), c, c, &[3, 1], &[d, 1], &[d, 0], false))
            .collect::<Result<_>>()?;
        Ok(Self {
            stem,
            global,
            local,
            gem_appearance: Gem::new(init, &format!("{name}.gem_appearance"), cfg.gem_p_init)?,
            gem_temporal: Gem::new(init, &format!("{name}.gem_temporal"), cfg.gem_p_init)?,
            temporal,
            st_reduce: Conv::new(init, &format!("{name}.st_reduce"), c, c / r, &[3, 3], &[1, 1], &[1, 1], true)?,
            st_expand: Conv::new(init, &format!("{name}.st_expand"), c / r, c, &[3, 3], &[1, 1], &[1, 1], true)?,
            parts: cfg.parts,
        })
    }

    /// Stem over `[B, 1, T, H, W]`; returns (block-1 output, `F`).
    pub fn stem_forward(&self, x: &Tensor, mode: NormMode) -> Result<(Tensor, Tensor)> {
        if x.rank() != 5 || x.shape()[1] != 1 {
            return Err(Error::Invalid(format!("silhouette input must be [B, 1, T, H, W], got {:?}", x.shape())));
        }
        if x.shape()[2] < 3 {
            return Err(Error::Invalid(format!("stem needs at least 3 frames, got {}", x.shape()[2])));
        }
        let block1 = self.stem[0].forward(x, mode)?;
        let mut f = block1.clone();
        for b in &self.stem[1..] {
            f = b.forward(&f, mode)?;
        }
        Ok((block1, f))
    }

    /// Appearance feature from `F_S [B, C, H', W']`; returns `(A, S_A)`.
    pub fn appearance_feature(&self, fs: &Tensor, mode: NormMode) -> Result<(Tensor, Tensor)> {
        let h = fs.shape()[2];
        if !h.is_multiple_of(self.parts) {
            return Err(Error::Invalid(format!("{} strips do not divide height {h}", self.parts)));
        }
        let (global, sa) = self.global.refine(fs, mode)?;
        let step = h / self.parts;
        let strips = self
            .local
            .iter()
            .enumerate()
            .map(|(i, attn)| Ok(attn.refine(&fs.narrow(2, i * step, step)?, mode)?.0))
            .collect::<Result<Vec<_>>>()?;
        let local = Tensor::cat(&strips, 2)?;
        let a = self.gem_appearance.forward(&global.add(&local)?.relu(), 3)?;
        Ok((a, sa))
    }

    /// Motion feature from `F [B, C, T, H', W']`; returns `(M, F_T, S_T)`.
    pub fn temporal_feature(&self, f: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let s = f.shape().to_vec();
        if s[2] < 5 {
            return Err(Error::Invalid(format!("temporal stream needs at least 5 frames, got {}", s[2])));
        }
        let g = self.gem_temporal.forward(&f.relu(), 4)?;
        let scales = self.temporal.iter().map(|c| c.forward(&g)).collect::<Result<Vec<_>>>()?;
        let f_t = Tensor::stack(&scales, 4)?;
        let (b, c, t, h) = (s[0], s[1], s[2], s[3]);
        let n = scales.len();
        let flat = f_t.reshape(&[b, c, t, h * n])?;
        let s_t = self.st_expand.forward(&self.st_reduce.forward(&flat)?)?.sigmoid().reshape(&[b, c, t, h, n])?;
        let m = f_t.mul(&s_t)?.max_axes(&[2, 4], false)?;
        Ok((m, f_t, s_t))
    }

    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<SilhouetteOutput> {
        let (block1, f) = self.stem_forward(x, mode)?;
        let f_s = f.max_axes(&[2], false)?;
        let (a, s_a) = self.appearance_feature(&f_s, mode)?;
        let (m, f_t, s_t) = self.temporal_feature(&f)?;
        let gait = Tensor::cat(&[a.clone(), m.clone()], 1)?;
        Ok(SilhouetteOutput {
            block1,
            f,
            f_s,
            s_a,
            a,
            f_t,
            s_t,
            m,
            gait,
        })
    }
}
