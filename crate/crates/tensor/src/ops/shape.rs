//! Reshape, permute, slicing and concatenation.

use crate::error::{Result, TensorError};
use crate::layout::{check_axis, strides, walk2};
use crate::tensor::{numel_of, Tensor};

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() || shape.contains(&0) {
            return Err(TensorError::mismatch("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.to_vec())]),
        ))
    }

    /// Inserts a unit axis at `axis`.
    pub fn unsqueeze(&self, axis: usize) -> Result<Tensor> {
        if axis > self.rank() {
            return Err(TensorError::invalid(
                "unsqueeze",
                format!("axis {axis} out of range for rank {}", self.rank()),
            ));
        }
        let mut shape = self.shape().to_vec();
        shape.insert(axis, 1);
        self.reshape(&shape)
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid(
                "permute",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let out_strides = strides(&out_shape);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        walk2(&out_shape, &out_strides, &gather, |_, o, i| out[o] = x[i]);
        let n = x.len();
        let shape = out_shape.clone();
        Ok(Tensor::from_op(
            "permute",
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; n];
                walk2(&shape, &out_strides, &gather, |_, o, i| gx[i] = g[o]);
                vec![Some(gx)]
            }),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        check_axis("transpose", a, self.rank())?;
        check_axis("transpose", b, self.rank())?;
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis("narrow", axis, self.rank())?;
        let extent = self.shape()[axis];
        if len == 0 || start + len > extent {
            return Err(TensorError::invalid(
                "narrow",
                format!("range {start}..{} out of bounds for extent {extent}", start + len),
            ));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op(
            "narrow",
            out,
            shape,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; n];
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Picks entries along `axis` (repeats allowed).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        check_axis("index_select", axis, self.rank())?;
        let extent = self.shape()[axis];
        if indices.is_empty() {
            return Err(TensorError::invalid("index_select", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(TensorError::invalid(
                "index_select",
                format!("index {bad} out of bounds for extent {extent}"),
            ));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let x = self.data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * extent + i) * inner;
                out.extend_from_slice(&x[base..base + inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = indices.len();
        let n = self.numel();
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            "index_select",
            out,
            shape,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; n];
                let mut src = 0;
                for o in 0..outer {
                    for &i in &idx {
                        let base = (o * extent + i) * inner;
                        for (d, s) in gx[base..base + inner].iter_mut().zip(&g[src..src + inner]) {
                            *d += s;
                        }
                        src += inner;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn cat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| TensorError::invalid("cat", "no tensors given"))?;
        check_axis("cat", axis, first.rank())?;
        for t in &tensors[1..] {
            let compatible = t.rank() == first.rank()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::mismatch("cat", first.shape(), t.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let extents: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &e) in tensors.iter().zip(&extents) {
                out.extend_from_slice(&t.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            "cat",
            out,
            shape,
            tensors.to_vec(),
            Box::new(move |_, g| {
                let mut grads: Vec<Vec<f64>> = extents
                    .iter()
                    .map(|&e| Vec::with_capacity(outer * e * inner))
                    .collect();
                let mut src = 0;
                for _ in 0..outer {
                    for (gt, &e) in grads.iter_mut().zip(&extents) {
                        gt.extend_from_slice(&g[src..src + e * inner]);
                        src += e * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let expanded = tensors
            .iter()
            .map(|t| t.unsqueeze(axis))
            .collect::<Result<Vec<_>>>()?;
        Tensor::cat(&expanded, axis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::variable((0..n).map(|v| v as f64).collect(), shape).unwrap()
    }

    #[test]
    fn permute_moves_axes() {
        let x = iota(&[2, 3, 4]);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        // y[k][i][j] = x[i][j][k]
        assert_eq!(y.data()[(2 + 1) * 3 + 2], x.data()[(3 + 2) * 4 + 1]);
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn narrow_and_cat_roundtrip() {
        let x = iota(&[2, 5]);
        let a = x.narrow(1, 0, 2).unwrap();
        let b = x.narrow(1, 2, 3).unwrap();
        let y = Tensor::cat(&[a, b], 1).unwrap();
        assert_eq!(y.data(), x.data());
        y.mul_scalar(2.0).sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 10]);
    }

    #[test]
    fn index_select_accumulates_repeats() {
        let x = iota(&[3, 2]);
        let y = x.index_select(0, &[2, 0, 2]).unwrap();
        assert_eq!(y.data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn cat_rejects_mismatch() {
        let err = Tensor::cat(&[Tensor::zeros(&[2, 3]), Tensor::zeros(&[3, 3])], 1).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"));
    }
}
