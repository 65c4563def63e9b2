//! Reverse-mode vs central-finite-difference comparison.
//!
//! The scalar probed is `sum(f(inputs) * R)` for a fixed random `R`, so every
//! output element contributes. Finite differences use only forward values
//! and never touch the backward closures they are checking.
//!
//! Networks with ReLU or max are only piecewise smooth. When a kink lies
//! within one step of the point, the central difference mixes both sides;
//! the two one-sided differences then disagree and the one closer to the
//! analytic value is used. On smooth coordinates all three estimates agree
//! to O(step), so this never rescues a wrong derivative there.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::optim::Module;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor for the relative error, so exact zeros compare
    /// against finite-difference round-off rather than against zero. It is
    /// multiplied by `max(1, sum |f * R|)`, the scale that sets the round-off.
    pub abs_floor: f64,
    /// Checks at most this many coordinates per tensor (all when `None`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            abs_floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Coordinates scored with a one-sided difference because of a kink.
    pub one_sided: usize,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            coords_checked: 0,
            one_sided: 0,
            worst: None,
        }
    }

    fn record(&mut self, tensor: &str, index: usize, analytic: f64, d: Differences, floor: f64) {
        self.coords_checked += 1;
        let (numeric, err, one_sided) = d.best(analytic, floor);
        self.one_sided += usize::from(one_sided);
        if err > self.max_rel_err || err.is_nan() {
            self.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
            self.worst = Some(Mismatch {
                tensor: tensor.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Objective values at `x - h`, `x`, `x + h`.
#[derive(Debug, Clone, Copy)]
struct Differences {
    minus: f64,
    base: f64,
    plus: f64,
    step: f64,
}

impl Differences {
    /// `(estimate, relative error, used a one-sided difference)`.
    fn best(&self, analytic: f64, floor: f64) -> (f64, f64, bool) {
        let h = self.step;
        let central = (self.plus - self.minus) / (2.0 * h);
        let forward = (self.plus - self.base) / h;
        let backward = (self.base - self.minus) / h;
        let err = rel_err(analytic, central, floor);
        // A kink shows up as one-sided slopes disagreeing well beyond the
        // O(h) curvature term.
        let kink = rel_err(forward, backward, floor) > 1e-4;
        if !kink {
            return (central, err, false);
        }
        let (side, side_err) = [forward, backward]
            .into_iter()
            .map(|d| (d, rel_err(analytic, d, floor)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("two candidates");
        if side_err < err {
            (side, side_err, true)
        } else {
            (central, err, false)
        }
    }
}

fn scaled_floor(out: &[f64], r: &[f64], floor: f64) -> f64 {
    let scale: f64 = out.iter().zip(r).map(|(y, w)| (y * w).abs()).sum();
    floor * scale.max(1.0)
}

fn projection(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn coords(len: usize, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match opts.max_coords {
        Some(k) if k < len => {
            let mut v = sample(rng, len, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Checks `f` with respect to every input tensor.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let vars = inputs
        .iter()
        .map(|t| Tensor::variable(t.to_vec(), t.shape()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&vars)?;
    let r = projection(out.numel(), &mut rng);
    let loss = out.mul(&Tensor::new(r.clone(), out.shape())?)?.sum_all();
    loss.backward()?;
    let base = dot(out.data(), &r);
    let floor = scaled_floor(out.data(), &r, opts.abs_floor);

    let mut report = GradCheckReport::new();
    for (k, var) in vars.iter().enumerate() {
        let analytic = var.grad().unwrap_or_else(|| vec![0.0; var.numel()]);
        for i in coords(var.numel(), &opts, &mut rng) {
            let eval = |delta: f64| -> Result<f64> {
                let mut shifted: Vec<Tensor> = vars.iter().map(Tensor::detach).collect();
                let mut data = var.to_vec();
                data[i] += delta;
                shifted[k] = Tensor::new(data, var.shape())?;
                let y = no_grad(|| f(&shifted))?;
                Ok(dot(y.data(), &r))
            };
            let d = Differences {
                minus: eval(-opts.step)?,
                base,
                plus: eval(opts.step)?,
                step: opts.step,
            };
            report.record(&format!("input{k}"), i, analytic[i], d, floor);
        }
    }
    Ok(report)
}

/// Checks `forward` with respect to the parameters of `module` (and nothing
/// else). Parameters are perturbed in place and restored afterwards.
pub fn gradcheck_module<M, F>(module: &mut M, forward: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    M: Module,
    F: Fn(&M) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    module.zero_grad();
    let out = forward(module)?;
    let r = projection(out.numel(), &mut rng);
    let loss = out.mul(&Tensor::new(r.clone(), out.shape())?)?.sum_all();
    loss.backward()?;
    let base = dot(out.data(), &r);
    let floor = scaled_floor(out.data(), &r, opts.abs_floor);

    let mut targets: Vec<(String, Vec<f64>, Vec<usize>)> = Vec::new();
    module.visit_params(&mut |p| {
        let g = p.grad().unwrap_or_else(|| vec![0.0; p.value().numel()]);
        let picks = coords(p.value().numel(), &opts, &mut rng);
        targets.push((p.name.clone(), g, picks));
    });

    let mut report = GradCheckReport::new();
    for (name, analytic, picks) in targets {
        for i in picks {
            let mut values = [0.0; 2];
            for (slot, delta) in [opts.step, -opts.step].into_iter().enumerate() {
                perturb(module, &name, i, delta)?;
                let y = no_grad(|| forward(module));
                perturb(module, &name, i, -delta)?;
                values[slot] = dot(y?.data(), &r);
            }
            let d = Differences {
                minus: values[1],
                base,
                plus: values[0],
                step: opts.step,
            };
            report.record(&name, i, analytic[i], d, floor);
        }
    }
    module.zero_grad();
    Ok(report)
}

fn perturb<M: Module>(module: &mut M, name: &str, index: usize, delta: f64) -> Result<()> {
    let mut res = Ok(());
    module.visit_params_mut(&mut |p| {
        if p.name == name {
            let mut data = p.value().to_vec();
            data[index] += delta;
            res = p.set_data(data);
        }
    });
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_derivative() {
        // `sqrt` uses 0.5/y; feeding y = x^2 through `powf(0.5)` and comparing
        // with the true derivative of |x| must agree, while an intentionally
        // scaled function must not.
        let x = Tensor::new(vec![0.3, -0.8, 1.7], &[3]).unwrap();
        let ok = gradcheck(|v| Ok(v[0].square().sqrt()), std::slice::from_ref(&x), GradCheckOptions::default()).unwrap();
        assert!(ok.passes(1e-6), "{ok:?}");
        let bad = gradcheck(
            |v| {
                // Value of x, gradient of 2x: detach half the path.
                let d = v[0].detach();
                v[0].mul_scalar(2.0).sub(&d)
            },
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!bad.passes(1e-2));
    }

    #[test]
    fn kink_inside_the_stencil_uses_the_smooth_side() {
        let x = Tensor::new(vec![3e-6, -0.5, 0.9], &[3]).unwrap();
        let r = gradcheck(|v| Ok(v[0].relu()), std::slice::from_ref(&x), GradCheckOptions::default()).unwrap();
        assert!(r.passes(1e-6), "{r:?}");
        assert_eq!(r.one_sided, 1);
        // A wrong slope at the kink coordinate still fails.
        let bad = gradcheck(
            |v| {
                let d = v[0].detach();
                v[0].relu().mul_scalar(3.0).sub(&d.relu().mul_scalar(2.0))
            },
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!bad.passes(1e-2));
    }

    #[test]
    fn exact_zero_gradients_tolerate_round_off_of_large_objectives() {
        // The second input does not influence the output at all.
        let a = Tensor::new((0..400).map(|i| 50.0 + i as f64).collect(), &[400]).unwrap();
        let b = Tensor::new(vec![0.25], &[1]).unwrap();
        let r = gradcheck(|v| v[0].square().add(&v[1].sub(&v[1])?), &[a, b], GradCheckOptions::default()).unwrap();
        assert!(r.passes(1e-3), "{r:?}");
    }
}
