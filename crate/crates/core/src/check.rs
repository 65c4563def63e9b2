//! Runtime property suite behind `trigait check`.
//!
//! Each check returns a short detail string on success or the reason it
//! failed. Checks are grouped so a single family can be run in isolation.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trigait_tensor::gradcheck::{gradcheck, gradcheck_module, GradCheckOptions, GradCheckReport};
use trigait_tensor::nn::{self, NormMode, RunningStats};
use trigait_tensor::{conv, linear, Module, PoolKind, Tensor};

use crate::data::{Condition, SequenceMeta, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::eval::{rank1, Embedding};
use crate::model::fusion::{body_parts, motion_ranges, partition, FusionBranch};
use crate::model::layers::{attention, zero_param, Init};
use crate::model::loss::triplet_ba_loss;
use crate::model::silhouette::{apply_spatial_attention, gem_pool, SilhouetteBranch};
use crate::model::skeleton::{JsaTcBlock, SkeletonBranch, INPUT_CHANNELS};
use crate::model::{ModelConfig, ModelInput, TriGait};

/// Tolerance for single operations.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for whole branches and the full model.
pub const BRANCH_TOL: f64 = 1e-3;

pub type Outcome = std::result::Result<String, String>;

pub struct Check {
    pub group: &'static str,
    pub name: &'static str,
    run: fn() -> Outcome,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub group: &'static str,
    pub name: &'static str,
    pub outcome: Outcome,
    pub elapsed: Duration,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.outcome.is_ok()
    }

    pub fn line(&self) -> String {
        let (status, detail) = match &self.outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        format!("{status} {}/{} ({:.2}s) {detail}", self.group, self.name, self.elapsed.as_secs_f64())
    }
}

pub const GROUPS: &[&str] = &[
    "grad_ops",
    "grad_branches",
    "softmax",
    "sigmoid",
    "gem",
    "jsa",
    "attention_maps",
    "residual",
    "alignment",
    "triplet",
    "rank1",
    "shape",
];

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

pub fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape).expect("valid shape")
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    random(shape, -1.0, 1.0, seed)
}

fn graded(report: std::result::Result<GradCheckReport, impl std::fmt::Display>, tol: f64) -> Outcome {
    let r = report.map_err(err)?;
    ensure(r.coords_checked > 0, || "no coordinates checked".into())?;
    ensure(r.passes(tol), || format!("max rel err {:.3e} at {:?}", r.max_rel_err, r.worst))?;
    Ok(format!(
        "max rel err {:.2e} over {} coords ({} one-sided)",
        r.max_rel_err, r.coords_checked, r.one_sided
    ))
}

type OpFn = Box<dyn Fn(&[Tensor]) -> trigait_tensor::Result<Tensor>>;

/// Every differentiable operation used by the model, with inputs chosen
/// away from kinks and domain edges.
pub fn op_cases() -> Vec<(&'static str, OpFn, Vec<Tensor>)> {
    let x = rand(&[2, 3, 4], 1);
    let b = rand(&[3, 1], 2);
    let pos = random(&[3, 5], 0.2, 1.0, 3);
    let p = Tensor::new(vec![2.3], &[]).expect("scalar");
    let mut v: Vec<(&'static str, OpFn, Vec<Tensor>)> = vec![
        ("add", Box::new(|v| v[0].add(&v[1])), vec![x.clone(), b.clone()]),
        ("sub", Box::new(|v| v[0].sub(&v[1])), vec![x.clone(), b.clone()]),
        ("mul", Box::new(|v| v[0].mul(&v[1])), vec![x.clone(), b.clone()]),
        ("div", Box::new(|v| v[0].div(&v[1])), vec![x.clone(), random(&[3, 1], 0.5, 1.5, 4)]),
        ("neg", Box::new(|v| Ok(v[0].neg())), vec![x.clone()]),
        ("scale_shift", Box::new(|v| Ok(v[0].mul_scalar(-1.7).add_scalar(0.3))), vec![x.clone()]),
        ("square", Box::new(|v| Ok(v[0].square())), vec![x.clone()]),
        ("exp", Box::new(|v| Ok(v[0].exp())), vec![x.clone()]),
        ("ln", Box::new(|v| Ok(v[0].ln())), vec![pos.clone()]),
        ("sqrt", Box::new(|v| Ok(v[0].sqrt())), vec![pos.clone()]),
        ("powf", Box::new(|v| Ok(v[0].powf(-0.5))), vec![pos.clone()]),
        ("pow", Box::new(|v| v[0].pow(&v[1])), vec![pos.clone(), p.clone()]),
        ("sigmoid", Box::new(|v| Ok(v[0].sigmoid())), vec![x.clone()]),
        ("relu", Box::new(|v| Ok(v[0].relu())), vec![x.clone()]),
        ("leaky_relu", Box::new(|v| Ok(v[0].leaky_relu(0.01))), vec![x.clone()]),
        ("softplus", Box::new(|v| Ok(v[0].softplus())), vec![x.clone()]),
        ("sum_axes", Box::new(|v| v[0].sum_axes(&[0, 2], false)), vec![x.clone()]),
        ("mean_axes", Box::new(|v| v[0].mean_axes(&[1], true)), vec![x.clone()]),
        ("max_axes", Box::new(|v| v[0].max_axes(&[1, 2], false)), vec![x.clone()]),
        ("avg_pool", Box::new(|v| v[0].pool(&[2], PoolKind::Avg)), vec![x.clone()]),
        ("reshape", Box::new(|v| v[0].reshape(&[6, 4])), vec![x.clone()]),
        ("permute", Box::new(|v| v[0].permute(&[2, 0, 1])), vec![x.clone()]),
        ("narrow", Box::new(|v| v[0].narrow(1, 1, 2)), vec![x.clone()]),
        ("index_select", Box::new(|v| v[0].index_select(1, &[2, 0, 2])), vec![x.clone()]),
        ("cat", Box::new(|v| Tensor::cat(&[v[0].clone(), v[1].clone()], 1)), vec![x.clone(), rand(&[2, 2, 4], 5)]),
        ("stack", Box::new(|v| Tensor::stack(&[v[0].clone(), v[1].clone()], 3)), vec![x.clone(), rand(&[2, 3, 4], 6)]),
        ("matmul", Box::new(|v| v[0].matmul(&v[1])), vec![rand(&[3, 4], 7), rand(&[4, 2], 8)]),
        ("bmm", Box::new(|v| v[0].bmm(&v[1])), vec![rand(&[2, 3, 4], 9), rand(&[2, 4, 5], 10)]),
        ("linear", Box::new(|v| linear(&v[0], &v[1], &v[2])), vec![rand(&[3, 4], 11), rand(&[4, 2], 12), rand(&[2], 13)]),
        (
            "conv2d_dilated",
            Box::new(|v| conv(&v[0], &v[1], Some(&v[2]), &[1, 1], &[2, 2], &[2, 2])),
            vec![rand(&[1, 2, 5, 6], 14), rand(&[2, 2, 3, 3], 15), rand(&[2], 16)],
        ),
        (
            "conv3d",
            Box::new(|v| conv(&v[0], &v[1], None, &[1, 1, 1], &[1, 1, 1], &[1, 1, 1])),
            vec![rand(&[2, 2, 3, 4, 4], 17), rand(&[2, 2, 3, 3, 3], 18)],
        ),
        (
            "batch_norm",
            Box::new(|v| {
                let mut stats = RunningStats::new(2);
                nn::batch_norm(&v[0], &v[1], &v[2], nn::BN_EPS, NormMode::Train, &mut stats)
            }),
            vec![rand(&[3, 2, 4], 19), rand(&[2], 20), rand(&[2], 21)],
        ),
        ("layer_norm", Box::new(|v| nn::layer_norm(&v[0], &v[1], &v[2], 1e-5)), vec![x.clone(), rand(&[4], 22), rand(&[4], 23)]),
        ("softmax", Box::new(|v| v[0].softmax(1)), vec![x.clone()]),
        ("cross_entropy", Box::new(|v| nn::cross_entropy(&v[0], &[1, 0, 3])), vec![rand(&[3, 4], 24)]),
        ("pairwise_distance", Box::new(|v| nn::pairwise_distance(&v[0])), vec![rand(&[2, 4, 3], 25)]),
        (
            "attention",
            Box::new(|v| Ok(attention(&v[0], &v[1], &v[2]).map_err(tensor_err)?.0)),
            vec![rand(&[2, 5, 4], 26), rand(&[2, 5, 4], 27), rand(&[2, 5, 4], 28)],
        ),
    ];
    v.push((
        "gem_pool",
        Box::new(|v| gem_pool(&v[0], &v[1], 2).map_err(tensor_err)),
        vec![random(&[2, 3, 4], 0.1, 1.0, 29), Tensor::new(vec![3.0], &[]).expect("scalar")],
    ));
    v
}

fn grad_ops() -> Outcome {
    let mut worst: f64 = 0.0;
    let cases = op_cases();
    let n = cases.len();
    for (name, f, inputs) in cases {
        let r = gradcheck(f, &inputs, GradCheckOptions::default()).map_err(|e| format!("{name}: {e}"))?;
        ensure(r.passes(OP_TOL), || format!("{name}: max rel err {:.3e} at {:?}", r.max_rel_err, r.worst))?;
        worst = worst.max(r.max_rel_err);
    }
    Ok(format!("{n} ops, max rel err {worst:.2e}"))
}

fn branch_opts() -> GradCheckOptions {
    GradCheckOptions {
        max_coords: Some(4),
        ..GradCheckOptions::default()
    }
}

/// Miniature shapes: two clips of 5 frames, 16×16 silhouettes, 17 joints.
pub fn miniature_input(cfg: &ModelConfig, seed: u64) -> Result<ModelInput> {
    let (b, t, s) = (2, 5, cfg.input_size);
    let joints = crate::data::synth::render_sequence(
        &crate::data::synth_subject(seed),
        SequenceMeta {
            subject: 1,
            condition: Condition::Nm,
            view: 54,
            seq_index: 1,
        },
        t,
        seed,
    )?
    .0
    .joints;
    let ranges = partition(&joints, cfg.token_rows(), cfg.partition)?;
    Ok(ModelInput {
        silhouettes: random(&[b, 1, t, s, s], 0.0, 1.0, seed + 1),
        skeleton: rand(&[b, INPUT_CHANNELS, t, NUM_JOINTS], seed + 2),
        ranges: vec![ranges; b],
    })
}

pub fn silhouette_gradcheck() -> Result<GradCheckReport> {
    let cfg = ModelConfig::miniature(2);
    let mut branch = SilhouetteBranch::new(&mut Init::new(1), "sil", &cfg)?;
    let x = miniature_input(&cfg, 10)?.silhouettes;
    Ok(gradcheck_module(&mut branch, |m| Ok(m.forward(&x, NormMode::Train).map_err(tensor_err)?.gait), branch_opts())?)
}

pub fn skeleton_gradcheck() -> Result<GradCheckReport> {
    let cfg = ModelConfig::miniature(2);
    let mut branch = SkeletonBranch::new(&mut Init::new(2), "ske", &cfg)?;
    let x = miniature_input(&cfg, 20)?.skeleton;
    Ok(gradcheck_module(&mut branch, |m| Ok(m.forward(&x, NormMode::Train).map_err(tensor_err)?.gait), branch_opts())?)
}

pub fn fusion_gradcheck() -> Result<GradCheckReport> {
    let cfg = ModelConfig::miniature(2);
    let mut branch = FusionBranch::new(&mut Init::new(3), "fuse", &cfg)?;
    let tokens = rand(&[2, cfg.stem_channels[0] + cfg.skeleton_channels[0], 5, 7], 30);
    Ok(gradcheck_module(&mut branch, |m| m.forward(&tokens).map_err(tensor_err), branch_opts())?)
}

pub fn model_gradcheck() -> Result<GradCheckReport> {
    let cfg = ModelConfig::miniature(2);
    let mut model = TriGait::new(cfg.clone(), 4)?;
    let input = miniature_input(&cfg, 40)?;
    Ok(gradcheck_module(
        &mut model,
        |m| Ok(m.forward(&input, NormMode::Train).map_err(tensor_err)?.embedding),
        branch_opts(),
    )?)
}

fn tensor_err(e: Error) -> trigait_tensor::TensorError {
    match e {
        Error::Tensor(t) => t,
        other => trigait_tensor::TensorError::invalid("model", other.to_string()),
    }
}

fn grad_silhouette() -> Outcome {
    graded(silhouette_gradcheck(), BRANCH_TOL)
}
fn grad_skeleton() -> Outcome {
    graded(skeleton_gradcheck(), BRANCH_TOL)
}
fn grad_fusion() -> Outcome {
    graded(fusion_gradcheck(), BRANCH_TOL)
}
fn grad_model() -> Outcome {
    graded(model_gradcheck(), BRANCH_TOL)
}

fn softmax_props() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let x = random(&[4, 7], -30.0, 30.0, seed);
        let s = x.softmax(1).map_err(err)?;
        for row in s.data().chunks(7) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let shifted = x.add(&random(&[4, 1], -50.0, 50.0, seed + 100)).map_err(err)?.softmax(1).map_err(err)?;
        for (a, b) in s.data().iter().zip(shifted.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-12, || format!("deviation {worst:.3e}"))?;
    Ok(format!("max deviation {worst:.1e}"))
}

fn sigmoid_props() -> Outcome {
    let x = random(&[200], -30.0, 30.0, 7);
    let s = x.sigmoid();
    let n = x.neg().sigmoid();
    for ((v, a), b) in x.data().iter().zip(s.data()).zip(n.data()) {
        ensure(*a > 0.0 && *a < 1.0, || format!("sigmoid({v}) = {a}"))?;
        ensure((a + b - 1.0).abs() < 1e-12, || format!("sigmoid({v}) + sigmoid(-{v}) = {}", a + b))?;
    }
    ensure(Tensor::scalar(0.0).sigmoid().item() == 0.5, || "sigmoid(0) != 0.5".into())?;
    Ok("range (0, 1) and point symmetry".into())
}

fn gem_props() -> Outcome {
    let x = random(&[3, 4, 6], 0.0, 2.0, 8);
    let p = |v: f64| Tensor::scalar(v);
    let g1 = gem_pool(&x, &p(1.0), 2).map_err(err)?;
    let avg = x.mean_axes(&[2], false).map_err(err)?;
    let d = g1.data().iter().zip(avg.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(d < 1e-12, || format!("p = 1 differs from the mean by {d:.3e}"))?;
    let mut prev = g1.to_vec();
    for q in [1.5, 2.0, 3.0, 6.0, 16.0, 64.0] {
        let g = gem_pool(&x, &p(q), 2).map_err(err)?.to_vec();
        ensure(g.iter().zip(&prev).all(|(a, b)| *a >= b - 1e-12), || format!("not monotone at p = {q}"))?;
        prev = g;
    }
    let max = x.max_axes(&[2], false).map_err(err)?;
    ensure(prev.iter().zip(max.data()).all(|(a, m)| a <= &(m + 1e-12)), || "exceeds the max".into())?;
    let v = gem_pool(&Tensor::new(vec![1.0, 3.0], &[2]).map_err(err)?, &p(64.0), 0).map_err(err)?.item();
    let expect = 3.0 * 2f64.powf(-1.0 / 64.0);
    ensure((v - expect).abs() < 1e-12, || format!("p = 64 on [1, 3] gave {v}"))?;
    Ok("p = 1 mean, monotone in p, bounded by max".into())
}

fn jsa_props() -> Outcome {
    let mut init = Init::new(9);
    let block = JsaTcBlock::new(&mut init, "b", INPUT_CHANNELS, 16, 8).map_err(err)?;
    let x = rand(&[2, INPUT_CHANNELS, 4, NUM_JOINTS], 31);
    let (atte, w) = block.jsa.forward(&x).map_err(err)?;
    let rows = w.data().chunks(NUM_JOINTS).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    ensure(rows < 1e-12, || format!("attention rows deviate by {rows:.3e}"))?;
    // Identical joints attend uniformly and receive identical outputs.
    let same = Tensor::new(
        (0..2 * INPUT_CHANNELS * 4).flat_map(|i| std::iter::repeat_n((i as f64 * 0.37).sin(), NUM_JOINTS)).collect(),
        &[2, INPUT_CHANNELS, 4, NUM_JOINTS],
    )
    .map_err(err)?;
    let (a2, w2) = block.jsa.forward(&same).map_err(err)?;
    let u = 1.0 / NUM_JOINTS as f64;
    ensure(w2.data().iter().all(|v| (v - u).abs() < 1e-12), || "identical joints are not weighted uniformly".into())?;
    ensure(
        a2.data().chunks(NUM_JOINTS).all(|r| r.iter().all(|v| (v - r[0]).abs() < 1e-12)),
        || "identical joints give different outputs".into(),
    )?;
    // Permuting joints permutes the output.
    let perm: Vec<usize> = (0..NUM_JOINTS).map(|j| (j * 5 + 3) % NUM_JOINTS).collect();
    let (ap, _) = block.jsa.forward(&x.index_select(3, &perm).map_err(err)?).map_err(err)?;
    let expect = atte.index_select(3, &perm).map_err(err)?;
    let d = ap.data().iter().zip(expect.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(d < 1e-12, || format!("joint permutation deviates by {d:.3e}"))?;
    // Frame locality: editing frame 1 leaves the other frames unchanged.
    let mut edited = x.to_vec();
    for c in 0..INPUT_CHANNELS {
        for j in 0..NUM_JOINTS {
            edited[(c * 4 + 1) * NUM_JOINTS + j] += 0.5;
        }
    }
    let (ae, _) = block.jsa.forward(&Tensor::new(edited, x.shape()).map_err(err)?).map_err(err)?;
    let frame = |i: usize| (i / NUM_JOINTS) % 4;
    ensure(
        ae.data().iter().zip(atte.data()).enumerate().all(|(i, (a, b))| frame(i) == 1 || a == b),
        || "editing one frame changed another".into(),
    )?;
    Ok("rows sum to 1, uniform on identical joints, permutation equivariant, frame local".into())
}

fn attention_maps() -> Outcome {
    let cfg = ModelConfig::miniature(2);
    let branch = SilhouetteBranch::new(&mut Init::new(11), "sil", &cfg).map_err(err)?;
    let x = random(&[2, 1, 6, 16, 16], 0.0, 1.0, 32);
    let out = branch.forward(&x, NormMode::Train).map_err(err)?;
    for (name, map) in [("S_A", &out.s_a), ("S_T", &out.s_t)] {
        ensure(map.data().iter().all(|v| *v > 0.0 && *v < 1.0), || format!("{name} leaves (0, 1)"))?;
    }
    Ok(format!("S_A {:?}, S_T {:?} inside (0, 1)", out.s_a.shape(), out.s_t.shape()))
}

fn residual_bypass() -> Outcome {
    let fs = rand(&[2, 4, 3, 3], 33);
    let kept = apply_spatial_attention(&fs, &Tensor::zeros(&[2, 1, 3, 3])).map_err(err)?;
    ensure(kept.data() == fs.data(), || "zero spatial map altered F_S".into())?;

    let mut block = JsaTcBlock::new(&mut Init::new(12), "b", 16, 16, 8).map_err(err)?;
    block.tc.zero().map_err(err)?;
    let x = rand(&[2, 16, 5, NUM_JOINTS], 34);
    let (y, _) = block.forward(&x, NormMode::Train).map_err(err)?;
    ensure(y.data() == x.data(), || "zeroed temporal conv does not reduce the block to its identity path".into())?;

    let cfg = ModelConfig::miniature(2);
    let mut fusion = FusionBranch::new(&mut Init::new(13), "f", &cfg).map_err(err)?;
    zero_param(&mut fusion.attn.out.weight).map_err(err)?;
    let t = rand(&[3, 7, cfg.embed_dim], 35);
    let h = fusion.norm1.forward(&t).map_err(err)?;
    let ff = fusion.ff2.forward(&fusion.ff1.forward(&h).map_err(err)?.relu()).map_err(err)?;
    let expect = fusion.norm2.forward(&h.add(&ff).map_err(err)?).map_err(err)?;
    ensure(fusion.encode(&t).map_err(err)?.data() == expect.data(), || "zero attention does not bypass".into())?;
    Ok("spatial, JSA-TC and encoder bypasses exact".into())
}

/// Brute-force flexion/extension ranges: a plain double loop per part.
pub fn brute_force_ranges(normalized: &[f64], parts: &[Vec<usize>]) -> Vec<(f64, f64)> {
    let frames = normalized.len() / (NUM_JOINTS * 2);
    parts
        .iter()
        .map(|joints| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for t in 0..frames {
                for &j in joints {
                    let v = normalized[(t * NUM_JOINTS + j) * 2 + 1];
                    if v < lo {
                        lo = v;
                    }
                    if v > hi {
                        hi = v;
                    }
                }
            }
            (lo, hi)
        })
        .collect()
}

fn alignment() -> Outcome {
    let parts = body_parts();
    let joints: Vec<Vec<usize>> = parts.iter().map(|p| p.joints.clone()).collect();
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = rng.gen_range(1..12);
        let clip: Vec<f64> = (0..frames * NUM_JOINTS * 2).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let got = motion_ranges(&clip, &parts, 32).map_err(err)?;
        let want = brute_force_ranges(&clip, &joints);
        for (g, w) in got.iter().zip(&want) {
            ensure((g.h_f, g.h_e) == *w, || format!("seed {seed}: {:?} vs {w:?}", (g.h_f, g.h_e)))?;
            ensure(g.row_lo <= g.row_hi && g.row_hi < 32, || format!("seed {seed}: bad rows {g:?}"))?;
        }
    }
    Ok("50 random clips match the double loop exactly".into())
}

/// Exhaustive BA+ over all (anchor, positive, negative) index triples.
pub fn brute_force_triplet(emb: &[f64], n: usize, dim: usize, parts: usize, labels: &[usize], margin: f64) -> f64 {
    let at = |i: usize, d: usize, p: usize| emb[(i * dim + d) * parts + p];
    let dist = |a: usize, b: usize, p: usize| (0..dim).map(|d| (at(a, d, p) - at(b, d, p)).powi(2)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for p in 0..parts {
        let (mut sum, mut active) = (0.0, 0usize);
        for a in 0..n {
            for q in 0..n {
                for r in 0..n {
                    if a != q && labels[a] == labels[q] && labels[a] != labels[r] {
                        let h = (margin + dist(a, q, p) - dist(a, r, p)).max(0.0);
                        if h > 0.0 {
                            sum += h;
                            active += 1;
                        }
                    }
                }
            }
        }
        if active > 0 {
            total += sum / active as f64;
        }
    }
    total / parts as f64
}

fn triplet() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(3..=12);
        let classes = rng.gen_range(2..=3.min(n - 1));
        let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        labels.rotate_left(rng.gen_range(0..n));
        let (dim, parts) = (rng.gen_range(1..5), rng.gen_range(1..4));
        let emb: Vec<f64> = (0..n * dim * parts).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tensor::new(emb.clone(), &[n, dim, parts]).map_err(err)?;
        let (loss, _) = triplet_ba_loss(&t, &labels, 0.2).map_err(err)?;
        let want = brute_force_triplet(&emb, n, dim, parts, &labels, 0.2);
        worst = worst.max((loss.item() - want).abs());
    }
    ensure(worst < 1e-9, || format!("deviation {worst:.3e}"))?;
    Ok(format!("40 batches, max deviation {worst:.1e}"))
}

/// Exhaustive nearest-neighbour accuracy for one (condition, probe view,
/// gallery view) cell.
pub fn brute_force_cell(gallery: &[Embedding], probes: &[Embedding], cond: Condition, pv: u32, gv: u32) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for p in probes.iter().filter(|p| p.meta.condition == cond && p.meta.view == pv) {
        let mut best: Option<(f64, u32)> = None;
        for g in gallery.iter().filter(|g| g.meta.view == gv) {
            let d: f64 = (0..p.parts)
                .map(|k| (0..p.dim).map(|i| (p.values[i * p.parts + k] - g.values[i * p.parts + k]).powi(2)).sum::<f64>().sqrt())
                .sum();
            if best.is_none_or(|(b, _)| d < b) {
                best = Some((d, g.meta.subject));
            }
        }
        if let Some((_, s)) = best {
            total += 1;
            hit += (s == p.meta.subject) as usize;
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

pub fn random_embeddings(count: usize, seed: u64) -> Vec<Embedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let condition = Condition::ALL[rng.gen_range(0..3)];
            let seq_index = if condition == Condition::Nm { rng.gen_range(1..=6) } else { rng.gen_range(1..=2) };
            Embedding {
                meta: SequenceMeta {
                    subject: rng.gen_range(1..=4),
                    condition,
                    view: rng.gen_range(0..4) * 18,
                    seq_index,
                },
                dim: 3,
                parts: 2,
                values: (0..6).map(|_| rng.gen_range(-2i32..3) as f64 * 0.5).collect(),
            }
        })
        .collect()
}

fn rank1_oracle() -> Outcome {
    for seed in 0..10u64 {
        let all = random_embeddings(200, seed);
        let (gallery, probes): (Vec<_>, Vec<_>) = all.into_iter().partition(|e| crate::eval::is_gallery(&e.meta));
        let r = rank1(&gallery, &probes);
        for (c, cond) in r.conditions.iter().enumerate() {
            for (p, pv) in r.views.iter().enumerate() {
                for (g, gv) in r.views.iter().enumerate() {
                    let want = brute_force_cell(&gallery, &probes, *cond, *pv, *gv);
                    ensure(r.cells[c][p][g] == want, || format!("seed {seed} cell {cond}/{pv}/{gv}"))?;
                }
            }
        }
    }
    Ok("10 instances of 200 sequences match exactly".into())
}

fn shape_contract() -> Outcome {
    let cfg = ModelConfig::full(4);
    let mut model = TriGait::new(cfg.clone(), 5).map_err(err)?;
    let mut input = miniature_input(&cfg, 50).map_err(err)?;
    input.silhouettes = input.silhouettes.narrow(0, 0, 1).map_err(err)?;
    input.skeleton = input.skeleton.narrow(0, 0, 1).map_err(err)?;
    input.ranges.truncate(1);
    let out = trigait_tensor::no_grad(|| model.forward(&input, NormMode::Eval)).map_err(err)?;
    ensure(out.embedding.shape() == [1, 256, 23], || format!("embedding {:?}", out.embedding.shape()))?;
    zero_param(&mut model.assembly.alpha).map_err(err)?;
    let sil = &out.silhouette.gait;
    let a = model.assembly.unimodal(sil, &rand(&[1, 256, 16], 51)).map_err(err)?;
    let b = model.assembly.unimodal(sil, &rand(&[1, 256, 16], 52)).map_err(err)?;
    ensure(a.data() == b.data(), || "alpha = 0 leaves a skeleton contribution".into())?;
    Ok(format!("embedding 256x23, {} parameters", model.num_params()))
}

pub fn all() -> Vec<Check> {
    let c = |group, name, run| Check { group, name, run };
    vec![
        c("grad_ops", "operations", grad_ops as fn() -> Outcome),
        c("grad_branches", "silhouette", grad_silhouette),
        c("grad_branches", "skeleton", grad_skeleton),
        c("grad_branches", "fusion", grad_fusion),
        c("grad_branches", "full_model", grad_model),
        c("softmax", "normalization_and_shift", softmax_props),
        c("sigmoid", "range_and_symmetry", sigmoid_props),
        c("gem", "limits_and_monotonicity", gem_props),
        c("jsa", "symmetry_cases", jsa_props),
        c("attention_maps", "unit_interval", attention_maps),
        c("residual", "identity_bypass", residual_bypass),
        c("alignment", "brute_force_ranges", alignment),
        c("triplet", "exhaustive_ba_plus", triplet),
        c("rank1", "exhaustive_nearest_neighbour", rank1_oracle),
        c("shape", "full_embedding_and_alpha", shape_contract),
    ]
}

/// Runs every check, or one group. Unknown groups are rejected.
pub fn run(only: Option<&str>, mut on_result: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    if let Some(g) = only {
        if !GROUPS.contains(&g) {
            return Err(Error::Invalid(format!("unknown check group {g:?}; groups: {}", GROUPS.join(", "))));
        }
    }
    let mut results = Vec::new();
    for check in all().into_iter().filter(|c| only.is_none_or(|g| c.group == g)) {
        let start = Instant::now();
        let outcome = (check.run)();
        let r = CheckResult {
            group: check.group,
            name: check.name,
            outcome,
            elapsed: start.elapsed(),
        };
        on_result(&r);
        results.push(r);
    }
    Ok(results)
}

pub fn summary(results: &[CheckResult]) -> String {
    let passed = results.iter().filter(|r| r.passed()).count();
    format!("{passed} passed, {} failed, {} total", results.len() - passed, results.len())
}
