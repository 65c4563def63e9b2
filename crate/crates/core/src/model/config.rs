use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How silhouette rows are assigned to the seven body-part tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartitionMode {
    /// Rows follow each part's flexion/extension range.
    Motion,
    /// Seven equal horizontal bands.
    Uniform,
}

impl fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartitionMode::Motion => "motion",
            PartitionMode::Uniform => "uniform",
        })
    }
}

impl FromStr for PartitionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "motion" => Ok(PartitionMode::Motion),
            "uniform" => Ok(PartitionMode::Uniform),
            other => Err(Error::Invalid(format!(
                "partition mode must be motion or uniform, got {other:?}"
            ))),
        }
    }
}

/// Architecture shape. `full` is the 256-channel network; `miniature` is the
/// desk-scale variant used for gradient checks and fast training runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Side of the (square) silhouette input.
    pub input_size: usize,
    /// Output channels of the four 3-D conv blocks (input has 1 channel).
    pub stem_channels: [usize; 4],
    /// Horizontal strips of the local spatial attention.
    pub parts: usize,
    pub reduction: usize,
    pub dilations: [usize; 3],
    pub gem_p_init: f64,
    /// Output channels of the four JSA-TC blocks (input has 10 channels).
    pub skeleton_channels: [usize; 4],
    pub heads: usize,
    pub fusion_heads: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub partition: PartitionMode,
}

impl ModelConfig {
    pub fn full(num_classes: usize) -> Self {
        Self {
            input_size: 64,
            stem_channels: [32, 64, 128, 128],
            parts: 8,
            reduction: 16,
            dilations: [1, 2, 3],
            gem_p_init: 3.0,
            skeleton_channels: [64, 64, 128, 256],
            heads: 8,
            fusion_heads: 8,
            embed_dim: 256,
            num_classes,
            partition: PartitionMode::Motion,
        }
    }

    pub fn miniature(num_classes: usize) -> Self {
        Self {
            input_size: 16,
            stem_channels: [8, 16, 16, 16],
            parts: 4,
            reduction: 4,
            skeleton_channels: [16, 16, 32, 32],
            embed_dim: 32,
            ..Self::full(num_classes)
        }
    }

    /// Height and width of the stem output (two 2×2 pools).
    pub fn feature_size(&self) -> usize {
        self.input_size / 4
    }

    /// Rows of the first stem block's output, where part tokens are cut.
    pub fn token_rows(&self) -> usize {
        self.input_size / 2
    }

    /// Unimodal part count P1.
    pub fn unimodal_parts(&self) -> usize {
        self.feature_size()
    }

    /// Total embedding parts P1 + 7.
    pub fn total_parts(&self) -> usize {
        self.unimodal_parts() + super::fusion::NUM_PARTS
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let c = self.stem_channels[3];
        if self.input_size == 0 || !self.input_size.is_multiple_of(4) {
            errs.push(format!("input_size {} must be a positive multiple of 4", self.input_size));
        }
        if self.parts == 0 || !self.feature_size().is_multiple_of(self.parts.max(1)) {
            errs.push(format!(
                "parts {} must divide the feature height {}",
                self.parts,
                self.feature_size()
            ));
        }
        if self.reduction == 0 || !c.is_multiple_of(self.reduction.max(1)) {
            errs.push(format!("reduction {} must divide the stem channels {c}", self.reduction));
        }
        if self.stem_channels.iter().chain(&self.skeleton_channels).any(|&x| x == 0) {
            errs.push("channel counts must be positive".into());
        }
        if self.heads == 0 || self.skeleton_channels.iter().any(|&x| x % self.heads.max(1) != 0) {
            errs.push(format!(
                "heads {} must divide every skeleton channel count {:?}",
                self.heads, self.skeleton_channels
            ));
        }
        if self.fusion_heads == 0 || !self.embed_dim.is_multiple_of(self.fusion_heads.max(1)) {
            errs.push(format!(
                "fusion heads {} must divide embed_dim {}",
                self.fusion_heads, self.embed_dim
            ));
        }
        if self.dilations.contains(&0) {
            errs.push("dilations must be positive".into());
        }
        if !(self.gem_p_init > 1e-3) || !self.gem_p_init.is_finite() {
            errs.push(format!("gem_p_init {} must exceed 1e-3", self.gem_p_init));
        }
        if self.num_classes == 0 {
            errs.push("num_classes must be positive".into());
        }
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Canonical text used for the configuration hash.
    pub fn canonical(&self) -> String {
        format!(
            "input_size={};stem={:?};parts={};reduction={};dilations={:?};gem_p_init={:?};skeleton={:?};heads={};fusion_heads={};embed_dim={};num_classes={};partition={}",
            self.input_size,
            self.stem_channels,
            self.parts,
            self.reduction,
            self.dilations,
            self.gem_p_init,
            self.skeleton_channels,
            self.heads,
            self.fusion_heads,
            self.embed_dim,
            self.num_classes,
            self.partition
        )
    }

    /// 64-bit FNV-1a of [`canonical`](Self::canonical).
    pub fn hash(&self) -> u64 {
        fnv1a(self.canonical().as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        assert!(ModelConfig::full(10).validate().is_empty());
        assert!(ModelConfig::miniature(4).validate().is_empty());
        let p = ModelConfig::full(1);
        assert_eq!((p.feature_size(), p.token_rows(), p.total_parts()), (16, 32, 23));
    }

    #[test]
    fn all_errors_are_reported() {
        let mut c = ModelConfig::full(0);
        c.parts = 5;
        c.reduction = 7;
        assert_eq!(c.validate().len(), 3);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_ne!(ModelConfig::full(2).hash(), ModelConfig::full(3).hash());
    }
}
