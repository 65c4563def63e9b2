//! The three-branch network and its assembly into part embeddings.

pub mod config;
pub mod fusion;
pub mod layers;
pub mod loss;
pub mod silhouette;
pub mod skeleton;

use trigait_tensor::nn::NormMode;
use trigait_tensor::{linear, Parameter, Tensor};

pub use config::{ModelConfig, PartitionMode};
use fusion::{body_parts, cross_modal_tokens, partition, FusionBranch, PartRange};
use layers::{module, Init, Linear};
use loss::{ce_loss, triplet_ba_loss, LossReport};
use silhouette::{SilhouetteBranch, SilhouetteOutput};
use skeleton::{multi_input_values, SkeletonBranch, SkeletonOutput, INPUT_CHANNELS};

use crate::data::{SequencePair, FRAME_SIZE, NUM_JOINTS};
use crate::error::{Error, Result};

/// Batched network input built from equally long clips.
#[derive(Debug, Clone)]
pub struct ModelInput {
    /// `[B, 1, T, S, S]` silhouettes, area-downsampled to the input size.
    pub silhouettes: Tensor,
    /// `[B, 10, T, 17]` multi-input channels of coordinates scaled by 1/64.
    pub skeleton: Tensor,
    /// Part row ranges over the first stem block's output, per sample.
    pub ranges: Vec<Vec<PartRange>>,
}

impl ModelInput {
    pub fn batch_size(&self) -> usize {
        self.silhouettes.shape()[0]
    }
}

/// Averages `factor × factor` blocks of one frame.
fn downsample(frame: &[f64], size: usize, factor: usize) -> Vec<f64> {
    let out = size / factor;
    let area = (factor * factor) as f64;
    let mut v = vec![0.0; out * out];
    for y in 0..size {
        for x in 0..size {
            v[(y / factor) * out + x / factor] += frame[y * size + x];
        }
    }
    v.iter_mut().for_each(|p| *p /= area);
    v
}

pub fn prepare_input(cfg: &ModelConfig, clips: &[&SequencePair]) -> Result<ModelInput> {
    let Some(first) = clips.first() else {
        return Err(Error::Invalid("empty batch".into()));
    };
    let t = first.frames();
    let s = cfg.input_size;
    let mut sil = Vec::with_capacity(clips.len() * t * s * s);
    let mut ske = Vec::with_capacity(clips.len() * INPUT_CHANNELS * t * NUM_JOINTS);
    let mut ranges = Vec::with_capacity(clips.len());
    for clip in clips {
        let silhouettes = &clip.silhouette;
        if clip.frames() != t {
            return Err(Error::Invalid(format!(
                "clip {} has {} frames, batch uses {t}",
                clip.meta().stem(),
                clip.frames()
            )));
        }
        if silhouettes.height != silhouettes.width || silhouettes.height % s != 0 {
            return Err(Error::Invalid(format!(
                "{}x{} frames cannot be reduced to {s}x{s}",
                silhouettes.height, silhouettes.width
            )));
        }
        let factor = silhouettes.height / s;
        for f in 0..t {
            sil.extend(downsample(&silhouettes.frame_values(f), silhouettes.height, factor));
        }
        let scaled: Vec<f64> = clip.skeleton.joints.iter().map(|v| v / FRAME_SIZE as f64).collect();
        ske.extend(multi_input_values(&scaled, t)?);
        ranges.push(partition(&clip.skeleton.joints, cfg.token_rows(), cfg.partition)?);
    }
    let b = clips.len();
    Ok(ModelInput {
        silhouettes: Tensor::new(sil, &[b, 1, t, s, s])?,
        skeleton: Tensor::new(ske, &[b, INPUT_CHANNELS, t, NUM_JOINTS])?,
        ranges,
    })
}

/// Balance factor and per-part maps of the unimodal fusion, plus the
/// classification head.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub alpha: Parameter,
    /// `[P1, C_sil + C_ske, D]`.
    pub fc_weight: Parameter,
    /// `[P1, 1, D]`.
    pub fc_bias: Parameter,
    pub classifier: Linear,
}
module!(Assembly { alpha, fc_weight, fc_bias, classifier });

impl Assembly {
    pub fn new(init: &mut Init, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let cin = 2 * cfg.stem_channels[3] + cfg.skeleton_channels[3];
        let p1 = cfg.unimodal_parts();
        let d = cfg.embed_dim;
        Ok(Self {
            alpha: init.constant(&format!("{name}.alpha"), &[], 1.0)?,
            fc_weight: init.uniform(&format!("{name}.fc.weight"), &[p1, cin, d], cin, 1.0)?,
            fc_bias: init.constant(&format!("{name}.fc.bias"), &[p1, 1, d], 0.0)?,
            classifier: Linear::new(init, &format!("{name}.classifier"), d, cfg.num_classes, 1.0)?,
        })
    }

    /// `Gait' [B, D, P1]` from `Gait_sil [B, Cs, P1]` and `Gait_ske [B, Ck, P1]`.
    pub fn unimodal(&self, gait_sil: &Tensor, gait_ske: &Tensor) -> Result<Tensor> {
        let (b, p1) = (gait_sil.shape()[0], gait_sil.shape()[2]);
        if gait_ske.shape()[0] != b || gait_ske.shape()[2] != p1 || self.fc_weight.shape()[0] != p1 {
            return Err(Error::Invalid(format!(
                "assembly inputs disagree: {:?} and {:?} for {p1} part maps",
                gait_sil.shape(),
                gait_ske.shape()
            )));
        }
        let x = Tensor::cat(&[gait_sil.clone(), gait_ske.mul(self.alpha.value())?], 1)?;
        if x.shape()[1] != self.fc_weight.shape()[1] {
            return Err(Error::Invalid(format!(
                "concatenated features have {} channels, part maps expect {}",
                x.shape()[1],
                self.fc_weight.shape()[1]
            )));
        }
        let y = x.permute(&[2, 0, 1])?.bmm(self.fc_weight.value())?.add(self.fc_bias.value())?;
        Ok(y.permute(&[1, 2, 0])?)
    }

    /// `Gait [B, D, P1 + 7]`.
    pub fn assemble(&self, gait_sil: &Tensor, gait_ske: &Tensor, gait_fuse: &Tensor) -> Result<Tensor> {
        Ok(Tensor::cat(&[self.unimodal(gait_sil, gait_ske)?, gait_fuse.clone()], 2)?)
    }

    pub fn logits(&self, embedding: &Tensor) -> Result<Tensor> {
        let pooled = embedding.mean_axes(&[2], false)?;
        Ok(linear(&pooled, self.classifier.weight.value(), self.classifier.bias.value())?)
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub silhouette: SilhouetteOutput,
    pub skeleton: SkeletonOutput,
    pub tokens: Tensor,
    pub gait_fuse: Tensor,
    pub gait_prime: Tensor,
    /// `[B, D, P1 + 7]`.
    pub embedding: Tensor,
}

#[derive(Debug, Clone)]
pub struct TriGait {
    pub config: ModelConfig,
    pub silhouette: SilhouetteBranch,
    pub skeleton: SkeletonBranch,
    pub fusion: FusionBranch,
    pub assembly: Assembly,
}
module!(TriGait { silhouette, skeleton, fusion, assembly });

impl TriGait {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.check()?;
        let mut init = Init::new(seed);
        Ok(Self {
            silhouette: SilhouetteBranch::new(&mut init, "sil", &config)?,
            skeleton: SkeletonBranch::new(&mut init, "ske", &config)?,
            fusion: FusionBranch::new(&mut init, "fuse", &config)?,
            assembly: Assembly::new(&mut init, "head", &config)?,
            config,
        })
    }

    pub fn forward(&self, input: &ModelInput, mode: NormMode) -> Result<ModelOutput> {
        let silhouette = self.silhouette.forward(&input.silhouettes, mode)?;
        let skeleton = self.skeleton.forward(&input.skeleton, mode)?;
        let tokens = cross_modal_tokens(&silhouette.block1, &skeleton.block1, &input.ranges, &body_parts())?;
        let gait_fuse = self.fusion.forward(&tokens)?;
        let gait_prime = self.assembly.unimodal(&silhouette.gait, &skeleton.gait)?;
        let embedding = Tensor::cat(&[gait_prime.clone(), gait_fuse.clone()], 2)?;
        Ok(ModelOutput {
            silhouette,
            skeleton,
            tokens,
            gait_fuse,
            gait_prime,
            embedding,
        })
    }

    /// `L = L_tri + L_ce` for a labelled batch; labels are class indices.
    pub fn loss(&self, embedding: &Tensor, labels: &[usize], margin: f64) -> Result<(Tensor, LossReport)> {
        let (tri, active) = triplet_ba_loss(embedding, labels, margin)?;
        let ce = ce_loss(&self.assembly.logits(embedding)?, labels)?;
        let total = tri.add(&ce)?;
        let report = LossReport {
            l_tri: tri.item(),
            l_ce: ce.item(),
            l: total.item(),
            active_triplet_fraction: active,
        };
        Ok((total, report))
    }
}
