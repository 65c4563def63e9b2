//! Broadcasting binary arithmetic and pointwise maps.

use crate::error::{Result, TensorError};
use crate::layout::{broadcast_shape, broadcast_strides, walk2};
use crate::tensor::Tensor;

type Partial = fn(f64, f64, f64) -> f64;

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        f: fn(f64, f64) -> f64,
        da: Partial,
        db: Partial,
    ) -> Result<Tensor> {
        let out_shape = broadcast_shape(name, self.shape(), other.shape())?;
        let sa = broadcast_strides(self.shape(), &out_shape);
        let sb = broadcast_strides(other.shape(), &out_shape);
        let n: usize = out_shape.iter().product();
        let mut out = vec![0.0; n];
        let (xa, xb) = (self.data(), other.data());
        if self.shape() == other.shape() {
            for ((o, &a), &b) in out.iter_mut().zip(xa).zip(xb) {
                *o = f(a, b);
            }
        } else {
            walk2(&out_shape, &sa, &sb, |i, oa, ob| out[i] = f(xa[oa], xb[ob]));
        }
        let (a, b) = (self.clone(), other.clone());
        let shape = out_shape.clone();
        Ok(Tensor::from_op(
            name,
            out,
            out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |y, g| {
                let (xa, xb) = (a.data(), b.data());
                let mut ga = a.requires_grad().then(|| vec![0.0; a.numel()]);
                let mut gb = b.requires_grad().then(|| vec![0.0; b.numel()]);
                walk2(&shape, &sa, &sb, |i, oa, ob| {
                    let (va, vb) = (xa[oa], xb[ob]);
                    if let Some(ga) = ga.as_mut() {
                        ga[oa] += g[i] * da(va, vb, y[i]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ob] += g[i] * db(va, vb, y[i]);
                    }
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |_, b, _| 1.0 / b,
            |a, b, _| -a / (b * b),
        )
    }

    /// Pointwise map with derivative `df(x, y)`.
    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        Tensor::from_op(
            name,
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |y, g| {
                let gx = x
                    .data()
                    .iter()
                    .zip(y)
                    .zip(g)
                    .map(|((&xv, &yv), &gv)| gv * df(xv, yv))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary("mul_scalar", move |x| x * c, move |_, _| c)
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    /// Square root whose derivative at exactly zero is taken as zero, so
    /// zero distances stay finite under backprop.
    pub fn sqrt(&self) -> Tensor {
        self.unary("sqrt", f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    /// `x^c` for a constant exponent.
    pub fn powf(&self, c: f64) -> Tensor {
        self.unary(
            "powf",
            move |x| x.powf(c),
            move |x, _| {
                if x == 0.0 && c < 1.0 {
                    0.0
                } else {
                    c * x.powf(c - 1.0)
                }
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Tensor {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(
            "leaky_relu",
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    /// `x^p` for a non-negative base and a scalar tensor exponent; both
    /// arguments are differentiable. At `x == 0` both partials are taken as
    /// zero (their limits for `p > 1`).
    pub fn pow(&self, p: &Tensor) -> Result<Tensor> {
        if p.numel() != 1 {
            return Err(TensorError::invalid(
                "pow",
                format!("exponent must be a scalar, got shape {:?}", p.shape()),
            ));
        }
        if let Some(bad) = self.data().iter().find(|v| **v < 0.0) {
            return Err(TensorError::invalid(
                "pow",
                format!("base must be non-negative, found {bad}"),
            ));
        }
        let pv = p.item();
        let out: Vec<f64> = self.data().iter().map(|&x| x.powf(pv)).collect();
        let (x, pt) = (self.clone(), p.clone());
        Ok(Tensor::from_op(
            "pow",
            out,
            self.shape().to_vec(),
            vec![self.clone(), p.clone()],
            Box::new(move |y, g| {
                let pv = pt.item();
                let gx = x.requires_grad().then(|| {
                    x.data()
                        .iter()
                        .zip(g)
                        .map(|(&xv, &gv)| {
                            if xv > 0.0 {
                                gv * pv * xv.powf(pv - 1.0)
                            } else {
                                0.0
                            }
                        })
                        .collect()
                });
                let gp = pt.requires_grad().then(|| {
                    let s: f64 = x
                        .data()
                        .iter()
                        .zip(y)
                        .zip(g)
                        .filter(|((&xv, _), _)| xv > 0.0)
                        .map(|((&xv, &yv), &gv)| gv * yv * xv.ln())
                        .sum();
                    vec![s]
                });
                vec![gx, gp]
            }),
        ))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}
