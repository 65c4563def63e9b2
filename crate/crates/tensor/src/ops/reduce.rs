//! Reductions over sets of axes.

use crate::error::{Result, TensorError};
use crate::layout::{check_axis, strides, walk2};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

struct Reduction {
    /// Output shape with reduced axes kept as 1.
    kept: Vec<usize>,
    /// Output shape with reduced axes removed.
    dropped: Vec<usize>,
    /// Input-shaped strides into the output buffer (0 on reduced axes).
    out_strides: Vec<usize>,
    count: usize,
}

fn plan(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<Reduction> {
    let mut reduce = vec![false; shape.len()];
    for &a in axes {
        check_axis(op, a, shape.len())?;
        if reduce[a] {
            return Err(TensorError::invalid(op, format!("axis {a} listed twice")));
        }
        reduce[a] = true;
    }
    let kept: Vec<usize> = shape
        .iter()
        .zip(&reduce)
        .map(|(&d, &r)| if r { 1 } else { d })
        .collect();
    let dropped: Vec<usize> = shape
        .iter()
        .zip(&reduce)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    let ks = strides(&kept);
    let out_strides = ks
        .iter()
        .zip(&reduce)
        .map(|(&s, &r)| if r { 0 } else { s })
        .collect();
    let count = shape
        .iter()
        .zip(&reduce)
        .filter(|(_, &r)| r)
        .map(|(&d, _)| d)
        .product();
    Ok(Reduction {
        kept,
        dropped,
        out_strides,
        count,
    })
}

impl Tensor {
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let r = plan("sum", self.shape(), axes)?;
        let in_strides = strides(self.shape());
        let mut out = vec![0.0; r.kept.iter().product()];
        let x = self.data();
        walk2(self.shape(), &in_strides, &r.out_strides, |_, i, o| out[o] += x[i]);
        let shape = if keepdim { r.kept.clone() } else { r.dropped.clone() };
        let (in_shape, os) = (self.shape().to_vec(), r.out_strides);
        Ok(Tensor::from_op(
            "sum",
            out,
            shape,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; in_shape.iter().product()];
                walk2(&in_shape, &in_strides, &os, |_, i, o| gx[i] = g[o]);
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let count = plan("mean", self.shape(), axes)?.count;
        Ok(self.sum_axes(axes, keepdim)?.mul_scalar(1.0 / count as f64))
    }

    /// Max over `axes`. The gradient goes to the first maximal element in
    /// row-major order of the input.
    pub fn max_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let r = plan("max", self.shape(), axes)?;
        let in_strides = strides(self.shape());
        let n_out: usize = r.kept.iter().product();
        let mut best = vec![f64::NEG_INFINITY; n_out];
        let mut arg = vec![usize::MAX; n_out];
        let x = self.data();
        walk2(self.shape(), &in_strides, &r.out_strides, |_, i, o| {
            if arg[o] == usize::MAX || x[i] > best[o] {
                best[o] = x[i];
                arg[o] = i;
            }
        });
        let shape = if keepdim { r.kept } else { r.dropped };
        let n_in = self.numel();
        Ok(Tensor::from_op(
            "max",
            best,
            shape,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; n_in];
                for (o, &i) in arg.iter().enumerate() {
                    gx[i] += g[o];
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Reduces (and removes) `axes` with max or average pooling.
    pub fn pool(&self, axes: &[usize], kind: PoolKind) -> Result<Tensor> {
        match kind {
            PoolKind::Max => self.max_axes(axes, false),
            PoolKind::Avg => self.mean_axes(axes, false),
        }
    }

    pub fn sum_all(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.sum_axes(&axes, false).expect("all axes are valid")
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().mul_scalar(1.0 / self.numel() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_definitions() {
        let x = Tensor::new(vec![1.0, 3.0, 2.0], &[3]).unwrap();
        assert_eq!(x.pool(&[0], PoolKind::Max).unwrap().item(), 3.0);
        let y = Tensor::new(vec![1.0, 3.0], &[2]).unwrap();
        assert_eq!(y.pool(&[0], PoolKind::Avg).unwrap().item(), 2.0);
    }

    #[test]
    fn max_tie_routes_to_first() {
        let x = Tensor::variable(vec![1.0, 3.0, 3.0], &[3]).unwrap();
        x.pool(&[0], PoolKind::Max).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn reduce_middle_axis() {
        let x = Tensor::new((0..24).map(f64::from).collect(), &[2, 3, 4]).unwrap();
        let s = x.sum_axes(&[1], false).unwrap();
        assert_eq!(s.shape(), &[2, 4]);
        assert_eq!(s.data()[0], 0.0 + 4.0 + 8.0);
        let m = x.max_axes(&[0, 2], true).unwrap();
        assert_eq!(m.shape(), &[1, 3, 1]);
        assert_eq!(m.data(), &[15.0, 19.0, 23.0]);
    }

    #[test]
    fn duplicate_axis_rejected() {
        let x = Tensor::zeros(&[2, 2]);
        assert!(x.sum_axes(&[1, 1], false).is_err());
        assert!(x.sum_axes(&[2], false).is_err());
    }
}
