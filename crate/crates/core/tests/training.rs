use proptest::prelude::*;

use trigait::check::{model_gradcheck, BRANCH_TOL};
use trigait::data::{synth_dataset, Dataset, SequencePair, SynthConfig};
use trigait::model::loss::{hardest_pairs, triplet_ba_loss};
use trigait::model::{ModelConfig, TriGait};
use trigait::train::{read_log, TrainConfig, Trainer, LOG_FILE};
use trigait_tensor::Tensor;

fn dataset(subjects: usize, views: Vec<u32>, seed: u64) -> Dataset {
    let cfg = SynthConfig {
        subjects,
        views,
        seqs_per_view: 5,
        frames: 16,
        seed,
    };
    Dataset {
        sequences: synth_dataset(&cfg).unwrap().into_iter().map(|(k, s)| SequencePair::new(k, s).unwrap()).collect(),
    }
}

fn schedule(subjects: usize, iterations: usize) -> TrainConfig {
    let mut t = TrainConfig::miniature();
    t.batch.subjects = subjects;
    t.batch.frames = 8;
    t.iterations = iterations;
    t.lr_boundary = iterations;
    t.checkpoint_interval = 16;
    t
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let r = model_gradcheck().unwrap();
    assert!(r.coords_checked > 100);
    assert!(r.passes(BRANCH_TOL), "{r:?}");
}

#[test]
fn smoke_run_keeps_losses_finite() {
    let ds = dataset(3, vec![0, 90], 1);
    let model = TriGait::new(ModelConfig::miniature(3), 1).unwrap();
    let mut trainer = Trainer::new(model, &ds, schedule(3, 64)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let rows = trainer.run(dir.path(), |_| {}).unwrap();
    assert_eq!(rows.len(), 64);
    for r in &rows {
        let l = r.report;
        assert!(l.l_tri.is_finite() && l.l_ce.is_finite() && l.l.is_finite(), "{r:?}");
        assert!((0.0..=1.0).contains(&l.active_triplet_fraction));
    }
    let logged = read_log(&dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(logged, rows);
}

#[test]
fn overfits_four_subjects() {
    let ds = dataset(4, vec![90], 2);
    let model = TriGait::new(ModelConfig::miniature(4), 2).unwrap();
    let mut trainer = Trainer::new(model, &ds, schedule(4, 120)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let rows = trainer.run(dir.path(), |_| {}).unwrap();
    let mean = |r: &[trigait::train::LogRow]| r.iter().map(|x| x.report.l_tri).sum::<f64>() / r.len() as f64;
    let (start, end) = (mean(&rows[..20]), mean(&rows[100..]));
    assert!(end < start, "L_tri {start} -> {end}");
}

/// Direct enumeration of every valid triple for each part.
fn enumerate(values: &[f64], n: usize, dim: usize, parts: usize, labels: &[usize], margin: f64) -> f64 {
    let mut total = 0.0;
    for p in 0..parts {
        let d = |a: usize, b: usize| -> f64 {
            (0..dim).map(|k| (values[(a * dim + k) * parts + p] - values[(b * dim + k) * parts + p]).powi(2)).sum::<f64>().sqrt()
        };
        let mut active = Vec::new();
        for a in 0..n {
            for pos in (0..n).filter(|&j| j != a && labels[j] == labels[a]) {
                for neg in (0..n).filter(|&j| labels[j] != labels[a]) {
                    let h = margin + d(a, pos) - d(a, neg);
                    if h > 0.0 {
                        active.push(h);
                    }
                }
            }
        }
        if !active.is_empty() {
            total += active.iter().sum::<f64>() / active.len() as f64;
        }
    }
    total / parts as f64
}

fn batch() -> impl Strategy<Value = (Vec<usize>, usize, usize, Vec<f64>)> {
    (2usize..=4, 2usize..=3, 1usize..=4, 1usize..=3).prop_flat_map(|(classes, per, dim, parts)| {
        let labels: Vec<usize> = (0..classes * per).map(|i| i % classes).collect();
        let n = labels.len();
        (Just(labels), Just(dim), Just(parts), proptest::collection::vec(-2.0f64..2.0, n * dim * parts))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn triplet_loss_matches_enumeration((labels, dim, parts, values) in batch(), margin in 0.05f64..0.5) {
        let n = labels.len();
        let t = Tensor::new(values.clone(), &[n, dim, parts]).unwrap();
        let (loss, frac) = triplet_ba_loss(&t, &labels, margin).unwrap();
        prop_assert!((loss.item() - enumerate(&values, n, dim, parts, &labels, margin)).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&frac));
    }

    #[test]
    fn hardest_pairs_ignore_positive_scaling(
        (labels, dim, _parts, values) in batch(),
        scale in 0.01f64..100.0,
    ) {
        let n = labels.len();
        let d: Vec<f64> = (0..n * n)
            .map(|i| {
                let (a, b) = (i / n, i % n);
                (0..dim).map(|k| (values[a * dim + k] - values[b * dim + k]).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        let scaled: Vec<f64> = d.iter().map(|v| v * scale).collect();
        let base = hardest_pairs(&d, &labels);
        prop_assert_eq!(&base, &hardest_pairs(&scaled, &labels));
        for (a, (pos, neg)) in base.iter().enumerate() {
            let (pos, neg) = (pos.unwrap(), neg.unwrap());
            prop_assert!(labels[pos] == labels[a] && pos != a && labels[neg] != labels[a]);
            for j in 0..n {
                if j != a && labels[j] == labels[a] {
                    prop_assert!(d[a * n + j] <= d[a * n + pos]);
                } else if labels[j] != labels[a] {
                    prop_assert!(d[a * n + j] >= d[a * n + neg]);
                }
            }
        }
    }

    #[test]
    fn triplet_loss_is_scale_covariant_without_margin((labels, dim, parts, values) in batch(), scale in 0.1f64..10.0) {
        let n = labels.len();
        let t = Tensor::new(values.clone(), &[n, dim, parts]).unwrap();
        let s = Tensor::new(values.iter().map(|v| v * scale).collect(), &[n, dim, parts]).unwrap();
        let (a, _) = triplet_ba_loss(&t, &labels, 0.0).unwrap();
        let (b, _) = triplet_ba_loss(&s, &labels, 0.0).unwrap();
        prop_assert!((b.item() - scale * a.item()).abs() < 1e-9 * (1.0 + b.item()));
    }
}
