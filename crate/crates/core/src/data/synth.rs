//! Articulated 3-D walker, orthographic projection and silhouette rasterizer.
//!
//! World axes: x lateral (subject's left positive), y up, z walking direction.
//! A camera at azimuth `view` degrees sees u = x·cos θ + z·sin θ, so 0° is a
//! frontal view and 90° a side view.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::sequence::{Condition, SequenceMeta, SilhouetteSequence, SkeletonSequence, FRAME_SIZE, NUM_JOINTS};
use crate::error::{Error, Result};

pub const BONE_NAMES: [&str; 9] = [
    "thigh",
    "shank",
    "upper_arm",
    "forearm",
    "torso",
    "hip_width",
    "shoulder_width",
    "neck",
    "head",
];
const BASE_LENGTHS: [f64; 9] = [0.45, 0.43, 0.30, 0.27, 0.52, 0.22, 0.38, 0.18, 0.10];

const THIGH: usize = 0;
const SHANK: usize = 1;
const UPPER_ARM: usize = 2;
const FOREARM: usize = 3;
const TORSO: usize = 4;
const HIP_WIDTH: usize = 5;
const SHOULDER_WIDTH: usize = 6;
const NECK: usize = 7;
const HEAD: usize = 8;

/// Rows the standing body spans, and the row of the ground line.
const BODY_PIXELS: f64 = 52.0;
const GROUND_ROW: f64 = 59.0;

pub const STANDARD_VIEWS: [u32; 11] = [0, 18, 36, 54, 72, 90, 108, 126, 144, 162, 180];

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectParams {
    /// Indexed as [`BONE_NAMES`].
    pub limb_lengths: Vec<f64>,
    /// Gait cycles per frame.
    pub gait_frequency: f64,
    /// Per-joint phase shift of the joint's angle trajectory.
    pub phase_offsets: Vec<f64>,
    /// Per-joint static angle offset. Joint 0 tilts the head, joint 1 leans
    /// the torso; limb joints bias their own angle.
    pub posture_bias: Vec<f64>,
    pub seed: u64,
}

impl SubjectParams {
    fn validate(&self) -> Result<()> {
        if self.limb_lengths.len() != BONE_NAMES.len() || self.limb_lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Invalid("limb lengths must be 9 positive values".into()));
        }
        if !(self.gait_frequency > 0.01 && self.gait_frequency < 0.5) {
            return Err(Error::Invalid(format!(
                "gait frequency {} outside (0.01, 0.5)",
                self.gait_frequency
            )));
        }
        if self.phase_offsets.len() != NUM_JOINTS || self.posture_bias.len() != NUM_JOINTS {
            return Err(Error::Invalid("phase offsets and posture bias need 17 entries".into()));
        }
        Ok(())
    }

    fn standing_height(&self) -> f64 {
        let l = &self.limb_lengths;
        l[THIGH] + l[SHANK] + l[TORSO] + l[NECK] + 1.6 * l[HEAD]
    }
}

/// SplitMix64 finalizer over a sequence of words.
pub fn mix_seed(words: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &w in words {
        h ^= w;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub fn synth_subject(seed: u64) -> SubjectParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limb_lengths = BASE_LENGTHS.iter().map(|b| b * rng.gen_range(0.8..1.2)).collect();
    let gait_frequency = rng.gen_range(0.026..0.046);
    let phase_offsets = (0..NUM_JOINTS).map(|_| rng.gen_range(-0.35..0.35)).collect();
    let posture_bias = (0..NUM_JOINTS).map(|_| rng.gen_range(-0.12..0.12)).collect();
    SubjectParams {
        limb_lengths,
        gait_frequency,
        phase_offsets,
        posture_bias,
        seed,
    }
}

type P3 = [f64; 3];

fn add(a: P3, b: P3) -> P3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Point at `len` along the downward direction rotated forward by `angle`.
fn swing(from: P3, len: f64, angle: f64, lateral: f64) -> P3 {
    add(from, [lateral, -len * angle.cos(), len * angle.sin()])
}

/// Per-sequence variation of the subject's walk.
struct Motion {
    phase0: f64,
    omega: f64,
    amp: f64,
    noise: Vec<[f64; 8]>,
}

impl Motion {
    fn new(subject: &SubjectParams, frames: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phase0 = rng.gen_range(0.0..2.0 * PI);
        let omega = 2.0 * PI * subject.gait_frequency * rng.gen_range(0.97..1.03);
        let amp = rng.gen_range(0.93..1.07);
        let noise = (0..frames)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-0.012..0.012)))
            .collect();
        Self {
            phase0,
            omega,
            amp,
            noise,
        }
    }
}

/// 3-D COCO-17 pose at frame `t`, ground at y = 0.
fn pose(s: &SubjectParams, m: &Motion, t: usize) -> [P3; NUM_JOINTS] {
    let l = &s.limb_lengths;
    let ph = &s.phase_offsets;
    let bias = &s.posture_bias;
    let n = &m.noise[t];
    let base = m.omega * t as f64 + m.phase0;

    let mut hip = [0.0; 2];
    let mut knee = [0.0; 2];
    let mut shoulder = [0.0; 2];
    let mut elbow = [0.0; 2];
    for side in 0..2 {
        let off = side as f64 * PI;
        let (jh, jk, js, je) = (11 + side, 13 + side, 5 + side, 7 + side);
        hip[side] = bias[jh] + m.amp * 0.45 * (base + off + ph[jh]).sin() + n[side];
        knee[side] = (bias[jk].abs() + m.amp * 0.55 * (1.0 - (base + off + ph[jk] + 0.7).cos())) + n[2 + side].abs();
        shoulder[side] = bias[js] - m.amp * 0.35 * (base + off + ph[js]).sin() + n[4 + side];
        elbow[side] = 0.25 + bias[je].abs() + m.amp * 0.2 * (1.0 + (base + off + ph[je]).sin()) + n[6 + side].abs();
    }

    let lean = 0.05 + bias[1];
    let leg = |side: usize| -> (f64, f64) {
        // Vertical drop from hip to knee and knee to ankle.
        let a = l[THIGH] * hip[side].cos();
        let b = l[SHANK] * (hip[side] - knee[side]).cos();
        (a, b)
    };
    let pelvis_y = (0..2).map(|s| leg(s).0 + leg(s).1).fold(f64::MIN, f64::max);
    let pelvis = [0.0, pelvis_y, 0.0];

    let mut p = [[0.0; 3]; NUM_JOINTS];
    for side in 0..2 {
        let sign = if side == 0 { 1.0 } else { -1.0 };
        let h = add(pelvis, [sign * l[HIP_WIDTH] / 2.0, 0.0, 0.0]);
        let k = swing(h, l[THIGH], hip[side], 0.0);
        let a = swing(k, l[SHANK], hip[side] - knee[side], 0.0);
        p[11 + side] = h;
        p[13 + side] = k;
        p[15 + side] = a;
    }
    let neck = add(pelvis, [0.0, l[TORSO] * lean.cos(), l[TORSO] * lean.sin()]);
    for side in 0..2 {
        let sign = if side == 0 { 1.0 } else { -1.0 };
        let sh = add(neck, [sign * l[SHOULDER_WIDTH] / 2.0, 0.0, 0.0]);
        let el = swing(sh, l[UPPER_ARM], shoulder[side], sign * 0.04);
        let wr = swing(el, l[FOREARM], shoulder[side] + elbow[side], sign * 0.03);
        p[5 + side] = sh;
        p[7 + side] = el;
        p[9 + side] = wr;
    }
    let tilt = bias[0];
    let hd = l[HEAD];
    let nose = add(neck, [0.0, l[NECK] + hd * tilt.cos(), hd * (0.9 + tilt.sin())]);
    p[0] = nose;
    p[1] = add(nose, [0.35 * hd, 0.3 * hd, -0.3 * hd]);
    p[2] = add(nose, [-0.35 * hd, 0.3 * hd, -0.3 * hd]);
    p[3] = add(nose, [0.8 * hd, 0.1 * hd, -0.95 * hd]);
    p[4] = add(nose, [-0.8 * hd, 0.1 * hd, -0.95 * hd]);
    p
}

struct Camera {
    cos: f64,
    sin: f64,
    scale: f64,
}

impl Camera {
    fn u(&self, p: P3) -> f64 {
        p[0] * self.cos + p[2] * self.sin
    }

    /// Half-width of an elliptic cross-section (semi-axes `ax` lateral,
    /// `az` sagittal) seen from this camera.
    fn half_width(&self, ax: f64, az: f64) -> f64 {
        ((ax * self.cos).powi(2) + (az * self.sin).powi(2)).sqrt()
    }
}

struct Canvas {
    size: usize,
    pix: Vec<u8>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self {
            size,
            pix: vec![0; size * size],
        }
    }

    fn fill_where(&mut self, bbox: [f64; 4], inside: impl Fn(f64, f64) -> bool) {
        let n = self.size as f64;
        let x0 = bbox[0].floor().clamp(0.0, n) as usize;
        let x1 = bbox[1].ceil().clamp(0.0, n) as usize;
        let y0 = bbox[2].floor().clamp(0.0, n) as usize;
        let y1 = bbox[3].ceil().clamp(0.0, n) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.pix[y * self.size + x] = 1;
                }
            }
        }
    }

    fn capsule(&mut self, a: [f64; 2], b: [f64; 2], r: f64) {
        let r = r.max(0.6);
        let bbox = [a[0].min(b[0]) - r, a[0].max(b[0]) + r, a[1].min(b[1]) - r, a[1].max(b[1]) + r];
        let d = [b[0] - a[0], b[1] - a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        self.fill_where(bbox, |x, y| {
            let t = if len2 > 0.0 {
                (((x - a[0]) * d[0] + (y - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cx, cy) = (a[0] + t * d[0], a[1] + t * d[1]);
            (x - cx).powi(2) + (y - cy).powi(2) <= r * r
        });
    }

    fn ellipse(&mut self, c: [f64; 2], rx: f64, ry: f64) {
        let (rx, ry) = (rx.max(0.6), ry.max(0.6));
        let bbox = [c[0] - rx, c[0] + rx, c[1] - ry, c[1] + ry];
        self.fill_where(bbox, |x, y| ((x - c[0]) / rx).powi(2) + ((y - c[1]) / ry).powi(2) <= 1.0);
    }
}

/// Appearance perturbations that depend on the condition only.
struct Appearance {
    torso_scale: f64,
    limb_scale: f64,
    coat: bool,
    bag: Option<usize>,
}

impl Appearance {
    fn new(condition: Condition, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match condition {
            Condition::Nm => Self {
                torso_scale: 1.0,
                limb_scale: 1.0,
                coat: false,
                bag: None,
            },
            Condition::Cl => Self {
                torso_scale: rng.gen_range(1.3..1.5),
                limb_scale: rng.gen_range(1.2..1.45),
                coat: true,
                bag: None,
            },
            Condition::Bg => Self {
                torso_scale: 1.0,
                limb_scale: 1.0,
                coat: false,
                bag: Some(if rng.gen_bool(0.5) { 9 } else { 10 }),
            },
        }
    }
}

/// Renders one paired sequence. `seed` drives the motion only, so every
/// condition and view of the same seed shares one walk.
pub fn render_sequence(
    subject: &SubjectParams,
    meta: SequenceMeta,
    frames: usize,
    seed: u64,
) -> Result<(SkeletonSequence, SilhouetteSequence)> {
    if frames < 2 {
        return Err(Error::Invalid(format!("need at least 2 frames, got {frames}")));
    }
    subject.validate()?;
    let motion = Motion::new(subject, frames, seed);
    let look = Appearance::new(meta.condition, mix_seed(&[seed, meta.condition as u64 + 1]));
    let theta = (meta.view as f64).to_radians();
    let cam = Camera {
        cos: theta.cos(),
        sin: theta.sin(),
        scale: BODY_PIXELS / subject.standing_height(),
    };
    let l = &subject.limb_lengths;
    let size = FRAME_SIZE;
    let centre = size as f64 / 2.0;

    let mut joints = Vec::with_capacity(frames * NUM_JOINTS * 2);
    let mut masks = Vec::with_capacity(frames);
    for t in 0..frames {
        let p3 = pose(subject, &motion, t);
        let pelvis_u = cam.u(add(p3[11], p3[12]).map(|v| v / 2.0));
        let px = |p: P3| -> [f64; 2] { [centre + cam.scale * (cam.u(p) - pelvis_u), GROUND_ROW - cam.scale * p[1]] };
        let p2: Vec<[f64; 2]> = p3.iter().map(|&p| px(p)).collect();

        let (top, bottom) = p2.iter().fold((f64::MAX, f64::MIN), |(lo, hi), q| (lo.min(q[1]), hi.max(q[1])));
        let finite = p2.iter().all(|q| q[0].is_finite() && q[1].is_finite());
        if !finite || !(bottom - top > 1e-9) {
            return Err(Error::DegenerateFrame {
                frame: t,
                msg: "projected body height is zero".into(),
            });
        }

        let s = cam.scale;
        let mut c = Canvas::new(size);
        let hip_mid = [(p2[11][0] + p2[12][0]) / 2.0, (p2[11][1] + p2[12][1]) / 2.0];
        let sho_mid = [(p2[5][0] + p2[6][0]) / 2.0, (p2[5][1] + p2[6][1]) / 2.0];
        let torso_r = s * cam.half_width(0.5 * (l[SHOULDER_WIDTH] + l[HIP_WIDTH]) / 2.0, 0.11) * look.torso_scale;
        c.capsule(hip_mid, sho_mid, torso_r);
        c.capsule(p2[11], p2[12], s * 0.08 * look.torso_scale);
        c.capsule(p2[5], p2[6], s * 0.06 * look.torso_scale);
        if look.coat {
            let hem = [hip_mid[0], hip_mid[1] + s * 0.55 * l[THIGH]];
            c.capsule(hip_mid, hem, torso_r * 1.05);
        }
        let neck_top = [sho_mid[0], sho_mid[1] - s * l[NECK]];
        c.capsule(sho_mid, neck_top, s * 0.05);
        let head: [f64; 2] = {
            let pts = &p2[0..5];
            let n = pts.len() as f64;
            [pts.iter().map(|q| q[0]).sum::<f64>() / n, pts.iter().map(|q| q[1]).sum::<f64>() / n]
        };
        c.ellipse(head, s * 1.1 * l[HEAD], s * 1.25 * l[HEAD]);

        let limb = look.limb_scale;
        for side in 0..2 {
            let coat_leg = if look.coat { 1.1 } else { 1.0 };
            c.capsule(p2[11 + side], p2[13 + side], s * 0.075 * coat_leg);
            c.capsule(p2[13 + side], p2[15 + side], s * 0.055);
            c.capsule(p2[5 + side], p2[7 + side], s * 0.05 * limb);
            c.capsule(p2[7 + side], p2[9 + side], s * 0.04 * limb);
        }
        if let Some(w) = look.bag {
            let centre = [p2[w][0], p2[w][1] + s * 0.08];
            c.ellipse(centre, s * 0.12, s * 0.15);
        }

        for q in &p2 {
            joints.extend_from_slice(q);
        }
        masks.push(c.pix);
    }
    let skeleton = SkeletonSequence::new(meta, joints)?;
    let silhouette = SilhouetteSequence::from_frames(meta, size, size, &masks)?;
    Ok((skeleton, silhouette))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub subjects: usize,
    pub views: Vec<u32>,
    pub seqs_per_view: usize,
    pub frames: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// 8 subjects over the 11-view grid, 10 sequences per view of 30 frames.
    fn default() -> Self {
        Self {
            subjects: 8,
            views: STANDARD_VIEWS.to_vec(),
            seqs_per_view: 10,
            frames: 30,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Evenly spaced views over [0°, 180°]; 11 gives the 18° grid.
    pub fn view_grid(count: usize) -> Vec<u32> {
        match count {
            0 => Vec::new(),
            1 => vec![90],
            _ => (0..count).map(|i| (i * 180 / (count - 1)) as u32).collect(),
        }
    }

    /// Sequence counts per view as (NM, BG, CL).
    pub fn condition_counts(&self) -> (usize, usize, usize) {
        let bg = self.seqs_per_view / 5;
        let cl = self.seqs_per_view / 5;
        (self.seqs_per_view - bg - cl, bg, cl)
    }
}

/// All sequences of a synthetic dataset, ordered by subject, condition,
/// sequence index and view.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<(SkeletonSequence, SilhouetteSequence)>> {
    if cfg.subjects < 2 {
        return Err(Error::Invalid(format!("need at least 2 subjects, got {}", cfg.subjects)));
    }
    if cfg.views.is_empty() || cfg.seqs_per_view == 0 {
        return Err(Error::Invalid("need at least one view and one sequence per view".into()));
    }
    let (nm, bg, cl) = cfg.condition_counts();
    let mut metas = Vec::new();
    for subject in 1..=cfg.subjects as u32 {
        for (condition, count) in [(Condition::Nm, nm), (Condition::Bg, bg), (Condition::Cl, cl)] {
            for seq_index in 1..=count as u32 {
                for &view in &cfg.views {
                    metas.push(SequenceMeta {
                        subject,
                        condition,
                        view,
                        seq_index,
                    });
                }
            }
        }
    }
    let subjects: Vec<SubjectParams> = (1..=cfg.subjects as u64)
        .map(|s| synth_subject(mix_seed(&[cfg.seed, s])))
        .collect();
    metas
        .par_iter()
        .map(|m| {
            let motion_seed = mix_seed(&[cfg.seed, m.subject as u64, m.seq_index as u64, 0x5EC]);
            render_sequence(&subjects[m.subject as usize - 1], *m, cfg.frames, motion_seed)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(condition: Condition, view: u32) -> SequenceMeta {
        SequenceMeta {
            subject: 1,
            condition,
            view,
            seq_index: 1,
        }
    }

    #[test]
    fn subjects_are_deterministic_and_distinct() {
        assert_eq!(synth_subject(1), synth_subject(1));
        let (a, b) = (synth_subject(1), synth_subject(2));
        assert_ne!(a.limb_lengths, b.limb_lengths);
        for s in [a, b] {
            assert!(s.limb_lengths.iter().all(|&l| l > 0.0));
            assert!(s.gait_frequency > 0.01 && s.gait_frequency < 0.5);
        }
    }

    #[test]
    fn conditions_share_the_skeleton() {
        let s = synth_subject(3);
        let (k_nm, s_nm) = render_sequence(&s, meta(Condition::Nm, 90), 30, 11).unwrap();
        let (k_cl, s_cl) = render_sequence(&s, meta(Condition::Cl, 90), 30, 11).unwrap();
        let (k_bg, s_bg) = render_sequence(&s, meta(Condition::Bg, 90), 30, 11).unwrap();
        assert_eq!(k_nm.joints, k_cl.joints);
        assert_eq!(k_nm.joints, k_bg.joints);
        let area = |x: &SilhouetteSequence| (0..x.frames()).map(|t| x.foreground_count(t)).sum::<usize>();
        assert!(area(&s_cl) > area(&s_nm));
        assert!(area(&s_bg) > area(&s_nm));
    }

    #[test]
    fn views_change_the_silhouette_area() {
        let s = synth_subject(4);
        let (_, front) = render_sequence(&s, meta(Condition::Nm, 0), 30, 5).unwrap();
        let (_, side) = render_sequence(&s, meta(Condition::Nm, 90), 30, 5).unwrap();
        let area = |x: &SilhouetteSequence| (0..x.frames()).map(|t| x.foreground_count(t)).sum::<usize>();
        assert_ne!(area(&front), area(&side));
    }

    #[test]
    fn frames_are_nonempty_and_joints_lie_on_the_body() {
        let s = synth_subject(9);
        for view in STANDARD_VIEWS {
            for cond in Condition::ALL {
                let (k, sil) = render_sequence(&s, meta(cond, view), 30, 77).unwrap();
                for t in 0..30 {
                    assert!(sil.foreground_count(t) >= 1);
                    let near = (0..NUM_JOINTS)
                        .filter(|&j| {
                            let [u, v] = k.joint(t, j);
                            let (x, y) = (u.floor() as i64, v.floor() as i64);
                            (-2..=2).any(|dy| {
                                (-2..=2).any(|dx| {
                                    let (xx, yy) = (x + dx, y + dy);
                                    (0..64).contains(&xx) && (0..64).contains(&yy) && sil.pixel(t, yy as usize, xx as usize)
                                })
                            })
                        })
                        .count();
                    assert!(near * 10 >= NUM_JOINTS * 9, "view {view} frame {t}: {near}/17");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut s = synth_subject(1);
        assert!(render_sequence(&s, meta(Condition::Nm, 0), 1, 0).is_err());
        s.limb_lengths[2] = 0.0;
        assert!(render_sequence(&s, meta(Condition::Nm, 0), 5, 0).is_err());
    }

    #[test]
    fn collapsed_body_is_degenerate() {
        let mut s = synth_subject(1);
        // Subnormal lengths overflow the pixel scale and collapse the projection.
        s.limb_lengths = vec![1e-320; 9];
        let err = render_sequence(&s, meta(Condition::Nm, 90), 5, 0).unwrap_err();
        assert!(matches!(err, Error::DegenerateFrame { frame: 0, .. }), "{err}");
    }

    #[test]
    fn dataset_layout() {
        let cfg = SynthConfig {
            subjects: 2,
            views: SynthConfig::view_grid(3),
            seqs_per_view: 10,
            frames: 30,
            seed: 1,
        };
        assert_eq!(cfg.views, vec![0, 90, 180]);
        assert_eq!(cfg.condition_counts(), (6, 2, 2));
        let d = synth_dataset(&cfg).unwrap();
        assert_eq!(d.len(), 2 * 3 * 10);
        assert_eq!(SynthConfig::view_grid(11), STANDARD_VIEWS.to_vec());
    }
}
