//! Paired gait sequences and their on-disk formats.
//!
//! `.tgkt` (keypoints): magic `TGKT`, `u32` version, `u32` frames, `u32`
//! joints, then `frames × joints × 2` little-endian `f64` as (u, v).
//!
//! `.tgsl` (silhouettes): magic `TGSL`, `u32` version, `u32` frames, `u32`
//! height, `u32` width, then each frame bit-packed row-major, least
//! significant bit first, padded to a whole byte per frame.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 17;
pub const FRAME_SIZE: usize = 64;
pub const FORMAT_VERSION: u32 = 1;

const SKELETON_MAGIC: &[u8; 4] = b"TGKT";
const SILHOUETTE_MAGIC: &[u8; 4] = b"TGSL";

/// COCO-17 keypoint names in index order.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Kinematic parent of each COCO-17 joint, rooted at the nose.
pub const PARENT: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(0),
    Some(0),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(5),
    Some(6),
    Some(11),
    Some(12),
    Some(13),
    Some(14),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Nm,
    Bg,
    Cl,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Nm, Condition::Bg, Condition::Cl];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Nm => "nm",
            Condition::Bg => "bg",
            Condition::Cl => "cl",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Condition::Nm => "NM",
            Condition::Bg => "BG",
            Condition::Cl => "CL",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nm" => Ok(Condition::Nm),
            "bg" => Ok(Condition::Bg),
            "cl" => Ok(Condition::Cl),
            other => Err(Error::Invalid(format!("unknown condition {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SequenceMeta {
    pub subject: u32,
    pub condition: Condition,
    /// Camera azimuth in degrees.
    pub view: u32,
    /// 1-based index within (subject, condition).
    pub seq_index: u32,
}

impl SequenceMeta {
    /// File stem in the `001-nm-01-090` style.
    pub fn stem(&self) -> String {
        format!(
            "{:03}-{}-{:02}-{:03}",
            self.subject, self.condition, self.seq_index, self.view
        )
    }
}

/// `T × 17 × 2` joint coordinates (u right, v down) in silhouette pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub meta: SequenceMeta,
    pub joints: Vec<f64>,
}

impl SkeletonSequence {
    pub fn new(meta: SequenceMeta, joints: Vec<f64>) -> Result<Self> {
        if joints.is_empty() || !joints.len().is_multiple_of(NUM_JOINTS * 2) {
            return Err(Error::Invalid(format!(
                "skeleton buffer of {} values is not a whole number of 17-joint frames",
                joints.len()
            )));
        }
        if joints.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("skeleton contains non-finite coordinates".into()));
        }
        Ok(Self { meta, joints })
    }

    pub fn frames(&self) -> usize {
        self.joints.len() / (NUM_JOINTS * 2)
    }

    pub fn joint(&self, t: usize, j: usize) -> [f64; 2] {
        let o = (t * NUM_JOINTS + j) * 2;
        [self.joints[o], self.joints[o + 1]]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.joints[t * NUM_JOINTS * 2..(t + 1) * NUM_JOINTS * 2]
    }

    /// Frames `start..start+len`, wrapping around when the sequence is shorter.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let n = self.frames();
        let mut joints = Vec::with_capacity(len * NUM_JOINTS * 2);
        for t in 0..len {
            joints.extend_from_slice(self.frame((start + t) % n));
        }
        Self {
            meta: self.meta,
            joints,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.joints.len() * 8);
        out.extend_from_slice(SKELETON_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames() as u32).to_le_bytes());
        out.extend_from_slice(&(NUM_JOINTS as u32).to_le_bytes());
        for v in &self.joints {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], meta: SequenceMeta, path: &Path) -> Result<Self> {
        let header = read_header(bytes, SKELETON_MAGIC, 2, path)?;
        let (frames, joints) = (header[0] as usize, header[1] as usize);
        if joints != NUM_JOINTS {
            return Err(Error::format(path, format!("expected 17 joints, file has {joints}")));
        }
        let payload = &bytes[16..];
        if payload.len() != frames * joints * 2 * 8 {
            return Err(Error::format(path, "payload length does not match header"));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::new(meta, data).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Binary `T × H × W` frames, bit-packed per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteSequence {
    pub meta: SequenceMeta,
    pub height: usize,
    pub width: usize,
    bits: Vec<u8>,
}

impl SilhouetteSequence {
    fn frame_bytes(height: usize, width: usize) -> usize {
        (height * width).div_ceil(8)
    }

    /// Packs `frames` (each `height × width`, nonzero = foreground).
    pub fn from_frames(meta: SequenceMeta, height: usize, width: usize, frames: &[Vec<u8>]) -> Result<Self> {
        let fb = Self::frame_bytes(height, width);
        let mut bits = vec![0u8; fb * frames.len()];
        for (t, frame) in frames.iter().enumerate() {
            if frame.len() != height * width {
                return Err(Error::Invalid(format!(
                    "frame {t} has {} pixels, expected {}",
                    frame.len(),
                    height * width
                )));
            }
            for (i, &px) in frame.iter().enumerate() {
                if px != 0 {
                    bits[t * fb + i / 8] |= 1 << (i % 8);
                }
            }
        }
        Self::from_packed(meta, height, width, bits)
    }

    fn from_packed(meta: SequenceMeta, height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || bits.is_empty() || !bits.len().is_multiple_of(Self::frame_bytes(height, width)) {
            return Err(Error::Invalid("empty or ragged silhouette sequence".into()));
        }
        Ok(Self {
            meta,
            height,
            width,
            bits,
        })
    }

    pub fn frames(&self) -> usize {
        self.bits.len() / Self::frame_bytes(self.height, self.width)
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> bool {
        let i = y * self.width + x;
        let byte = self.bits[t * Self::frame_bytes(self.height, self.width) + i / 8];
        byte >> (i % 8) & 1 == 1
    }

    pub fn foreground_count(&self, t: usize) -> usize {
        let fb = Self::frame_bytes(self.height, self.width);
        self.bits[t * fb..(t + 1) * fb].iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Frame `t` as `0.0 / 1.0` values, row-major.
    pub fn frame_values(&self, t: usize) -> Vec<f64> {
        (0..self.height * self.width)
            .map(|i| if self.pixel(t, i / self.width, i % self.width) { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn window(&self, start: usize, len: usize) -> Self {
        let n = self.frames();
        let fb = Self::frame_bytes(self.height, self.width);
        let mut bits = Vec::with_capacity(len * fb);
        for t in 0..len {
            let s = (start + t) % n;
            bits.extend_from_slice(&self.bits[s * fb..(s + 1) * fb]);
        }
        Self {
            meta: self.meta,
            height: self.height,
            width: self.width,
            bits,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.bits.len());
        out.extend_from_slice(SILHOUETTE_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames() as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.bits);
        out
    }

    pub fn from_bytes(bytes: &[u8], meta: SequenceMeta, path: &Path) -> Result<Self> {
        let header = read_header(bytes, SILHOUETTE_MAGIC, 3, path)?;
        let (frames, height, width) = (header[0] as usize, header[1] as usize, header[2] as usize);
        let payload = &bytes[20..];
        if height == 0 || width == 0 || payload.len() != frames * Self::frame_bytes(height, width) {
            return Err(Error::format(path, "payload length does not match header"));
        }
        Self::from_packed(meta, height, width, payload.to_vec()).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn read_header(bytes: &[u8], magic: &[u8; 4], fields: usize, path: &Path) -> Result<Vec<u32>> {
    let need = 8 + 4 * fields;
    if bytes.len() < need {
        return Err(Error::format(path, "file too short for header"));
    }
    if &bytes[..4] != magic {
        return Err(Error::format(
            path,
            format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        ));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    Ok((0..fields).map(|k| word(8 + 4 * k)).collect())
}
