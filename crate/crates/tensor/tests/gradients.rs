//! Every differentiable op against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trigait_tensor::gradcheck::{gradcheck, GradCheckOptions};
use trigait_tensor::nn::{self, NormMode, RunningStats};
use trigait_tensor::{conv, linear, PoolKind, Result, Tensor};

const TOL: f64 = 1e-4;

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape).unwrap()
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, -1.0, 1.0, seed)
}

fn check<F>(name: &str, f: F, inputs: &[Tensor])
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let report = gradcheck(f, inputs, GradCheckOptions::default()).unwrap();
    assert!(report.passes(TOL), "{name}: {report:?}");
    assert!(report.coords_checked > 0);
}

#[test]
fn binary_broadcast_ops() {
    let a = rand(&[2, 3, 4], 1);
    let b = rand(&[3, 1], 2);
    check("add", |v| v[0].add(&v[1]), &[a.clone(), b.clone()]);
    check("sub", |v| v[0].sub(&v[1]), &[a.clone(), b.clone()]);
    check("mul", |v| v[0].mul(&v[1]), &[a.clone(), b.clone()]);
    let denom = uniform(&[3, 1], 0.5, 1.5, 3);
    check("div", |v| v[0].div(&v[1]), &[a, denom]);
}

#[test]
fn pointwise_ops() {
    let x = rand(&[3, 5], 4);
    let pos = uniform(&[3, 5], 0.2, 1.0, 5);
    check("neg", |v| Ok(v[0].neg()), std::slice::from_ref(&x));
    check("scalar", |v| Ok(v[0].mul_scalar(-1.7).add_scalar(0.3)), std::slice::from_ref(&x));
    check("square", |v| Ok(v[0].square()), std::slice::from_ref(&x));
    check("exp", |v| Ok(v[0].exp()), std::slice::from_ref(&x));
    check("ln", |v| Ok(v[0].ln()), std::slice::from_ref(&pos));
    check("sqrt", |v| Ok(v[0].sqrt()), std::slice::from_ref(&pos));
    check("powf", |v| Ok(v[0].powf(-0.5)), std::slice::from_ref(&pos));
    check("sigmoid", |v| Ok(v[0].sigmoid()), std::slice::from_ref(&x));
    check("relu", |v| Ok(v[0].relu()), std::slice::from_ref(&x));
    check("leaky_relu", |v| Ok(v[0].leaky_relu(0.01)), std::slice::from_ref(&x));
    check("softplus", |v| Ok(v[0].softplus()), &[x]);
    check("pow", |v| v[0].pow(&v[1]), &[pos, Tensor::new(vec![2.3], &[]).unwrap()]);
}

#[test]
fn reductions() {
    let x = rand(&[2, 3, 4], 6);
    check("sum", |v| v[0].sum_axes(&[0, 2], false), std::slice::from_ref(&x));
    check("mean", |v| v[0].mean_axes(&[1], true), std::slice::from_ref(&x));
    check("max", |v| v[0].max_axes(&[1, 2], false), std::slice::from_ref(&x));
    check("pool avg", |v| v[0].pool(&[2], PoolKind::Avg), std::slice::from_ref(&x));
    check("sum_all", |v| Ok(v[0].sum_all()), &[x]);
}

#[test]
fn shape_ops() {
    let x = rand(&[2, 3, 4], 7);
    let y = rand(&[2, 2, 4], 8);
    check("reshape", |v| v[0].reshape(&[6, 4]), std::slice::from_ref(&x));
    check("permute", |v| v[0].permute(&[2, 0, 1]), std::slice::from_ref(&x));
    check("narrow", |v| v[0].narrow(1, 1, 2), std::slice::from_ref(&x));
    check("index_select", |v| v[0].index_select(1, &[2, 0, 2]), std::slice::from_ref(&x));
    check("cat", |v| Tensor::cat(&[v[0].clone(), v[1].clone()], 1), &[x, y]);
}

#[test]
fn matrix_products() {
    check("matmul", |v| v[0].matmul(&v[1]), &[rand(&[3, 4], 9), rand(&[4, 2], 10)]);
    check("bmm", |v| v[0].bmm(&v[1]), &[rand(&[2, 3, 4], 11), rand(&[2, 4, 5], 12)]);
    check(
        "linear",
        |v| linear(&v[0], &v[1], &v[2]),
        &[rand(&[3, 4], 13), rand(&[4, 2], 14), rand(&[2], 15)],
    );
}

#[test]
fn convolutions() {
    check(
        "conv1d",
        |v| conv(&v[0], &v[1], Some(&v[2]), &[2], &[1], &[1]),
        &[rand(&[2, 2, 7], 16), rand(&[3, 2, 3], 17), rand(&[3], 18)],
    );
    check(
        "conv2d dilated",
        |v| conv(&v[0], &v[1], None, &[1, 1], &[2, 2], &[2, 2]),
        &[rand(&[1, 2, 5, 6], 19), rand(&[2, 2, 3, 3], 20)],
    );
    check(
        "conv2d pointwise",
        |v| conv(&v[0], &v[1], Some(&v[2]), &[1, 1], &[1, 1], &[0, 0]),
        &[rand(&[2, 3, 2, 3], 21), rand(&[4, 3, 1, 1], 22), rand(&[4], 23)],
    );
    check(
        "conv3d",
        |v| conv(&v[0], &v[1], Some(&v[2]), &[1, 1, 1], &[1, 1, 1], &[1, 1, 1]),
        &[rand(&[2, 2, 3, 4, 4], 24), rand(&[2, 2, 3, 3, 3], 25), rand(&[2], 26)],
    );
}

#[test]
fn normalization_and_softmax() {
    let x = rand(&[3, 2, 4], 27);
    check(
        "batch_norm train",
        |v| {
            let mut stats = RunningStats::new(2);
            nn::batch_norm(&v[0], &v[1], &v[2], nn::BN_EPS, NormMode::Train, &mut stats)
        },
        &[x.clone(), rand(&[2], 28), rand(&[2], 29)],
    );
    check(
        "batch_norm eval",
        |v| {
            let mut stats = RunningStats {
                mean: vec![0.1, -0.2],
                var: vec![0.5, 2.0],
                momentum: 0.1,
            };
            nn::batch_norm(&v[0], &v[1], &v[2], nn::BN_EPS, NormMode::Eval, &mut stats)
        },
        &[x.clone(), rand(&[2], 30), rand(&[2], 31)],
    );
    check(
        "layer_norm",
        |v| nn::layer_norm(&v[0], &v[1], &v[2], 1e-5),
        &[x.clone(), rand(&[4], 32), rand(&[4], 33)],
    );
    check("softmax", |v| v[0].softmax(1), std::slice::from_ref(&x));
    check("softmax last", |v| v[0].softmax(2), &[x]);
}

#[test]
fn losses_and_distances() {
    check("cross_entropy", |v| nn::cross_entropy(&v[0], &[1, 0, 3]), &[rand(&[3, 4], 34)]);
    check("pairwise_distance", |v| nn::pairwise_distance(&v[0]), &[rand(&[2, 4, 3], 35)]);
}

#[test]
fn composed_graph() {
    // A small MLP with a shared weight used twice.
    check(
        "composition",
        |v| {
            let h = v[0].matmul(&v[1])?.sigmoid();
            let o = h.matmul(&v[1].transpose(0, 1)?)?.leaky_relu(0.01);
            o.softmax(1)?.mul(&v[0])?.sum_axes(&[1], false)
        },
        &[rand(&[3, 4], 36), rand(&[4, 4], 37)],
    );
}
