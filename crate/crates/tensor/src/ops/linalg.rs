//! Matrix products.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// `C (m×n) += A (m×k) · B (k×n)` with explicit element strides, so
/// transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the extents and strides above address only elements inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(TensorError::mismatch("matmul", self.shape(), other.shape()));
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), (k, 1), other.data(), (n, 1), &mut out, false);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "matmul",
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![0.0; m * k];
                    // g (m×n) · Bᵀ (n×k)
                    gemm(m, n, k, g, (n, 1), b.data(), (1, n), &mut ga, false);
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![0.0; k * n];
                    // Aᵀ (k×m) · g (m×n)
                    gemm(k, m, n, a.data(), (1, k), g, (n, 1), &mut gb, false);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Batched product `[b, m, k] · [b, k, n] -> [b, m, n]`.
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 3
            || other.rank() != 3
            || self.shape()[0] != other.shape()[0]
            || self.shape()[2] != other.shape()[1]
        {
            return Err(TensorError::mismatch("bmm", self.shape(), other.shape()));
        }
        let (bs, m, k, n) = (self.shape()[0], self.shape()[1], self.shape()[2], other.shape()[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &self.data()[i * m * k..],
                (k, 1),
                &other.data()[i * k * n..],
                (n, 1),
                &mut out[i * m * n..],
                false,
            );
        }
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "bmm",
            out,
            vec![bs, m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            (n, 1),
                            &b.data()[i * k * n..],
                            (1, n),
                            &mut ga[i * m * k..],
                            false,
                        );
                    }
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &a.data()[i * m * k..],
                            (1, k),
                            &g[i * m * n..],
                            (n, 1),
                            &mut gb[i * k * n..],
                            false,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }
}

/// Affine map `x [n, din] · w [din, dout] + b [dout]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if input.rank() != 2 || weight.rank() != 2 || input.shape()[1] != weight.shape()[0] {
        return Err(TensorError::mismatch("linear", input.shape(), weight.shape()));
    }
    if bias.shape() != [weight.shape()[1]] {
        return Err(TensorError::mismatch("linear", weight.shape(), bias.shape()));
    }
    input.matmul(weight)?.add(bias)
}
