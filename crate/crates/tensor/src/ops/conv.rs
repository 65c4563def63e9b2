//! N-d (1, 2 or 3 spatial axes) cross-correlation via im2col + GEMM.
//!
//! Every case is lifted to three spatial axes by prepending unit axes, so a
//! single pair of im2col/col2im kernels serves all ranks.

use crate::error::{Result, TensorError};
use crate::ops::linalg::gemm;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geom {
    input: [usize; 3],
    kernel: [usize; 3],
    out: [usize; 3],
    stride: [usize; 3],
    dilation: [usize; 3],
    padding: [usize; 3],
}

impl Geom {
    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }
    fn k_vol(&self) -> usize {
        self.kernel.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }
    fn is_pointwise(&self) -> bool {
        self.k_vol() == 1 && self.stride == [1; 3] && self.padding == [0; 3]
    }
}

fn lift(v: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    out[3 - v.len()..].copy_from_slice(v);
    out
}

#[inline]
fn source_index(o: usize, k: usize, stride: usize, dil: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + k * dil) as isize - pad as isize;
    (i >= 0 && (i as usize) < extent).then_some(i as usize)
}

fn im2col(x: &[f64], cin: usize, g: &Geom, cols: &mut [f64]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.out;
    let ovol = g.out_vol();
    let mut row = 0;
    for c in 0..cin {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * ovol..(row + 1) * ovol];
                    for z in 0..od {
                        let zi = source_index(z, a, g.stride[0], g.dilation[0], g.padding[0], id);
                        for y in 0..oh {
                            let yi = source_index(y, b, g.stride[1], g.dilation[1], g.padding[1], ih);
                            let drow = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            let (Some(zi), Some(yi)) = (zi, yi) else {
                                drow.fill(0.0);
                                continue;
                            };
                            let src = &xc[(zi * ih + yi) * iw..(zi * ih + yi + 1) * iw];
                            for (xo, d) in drow.iter_mut().enumerate() {
                                *d = match source_index(xo, e, g.stride[2], g.dilation[2], g.padding[2], iw) {
                                    Some(xi) => src[xi],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im(cols: &[f64], cin: usize, g: &Geom, gx: &mut [f64]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.out;
    let ovol = g.out_vol();
    let mut row = 0;
    for c in 0..cin {
        let gc = &mut gx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * ovol..(row + 1) * ovol];
                    for z in 0..od {
                        let Some(zi) = source_index(z, a, g.stride[0], g.dilation[0], g.padding[0], id) else {
                            continue;
                        };
                        for y in 0..oh {
                            let Some(yi) = source_index(y, b, g.stride[1], g.dilation[1], g.padding[1], ih) else {
                                continue;
                            };
                            let srow = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            let drow = &mut gc[(zi * ih + yi) * iw..(zi * ih + yi + 1) * iw];
                            for (xo, &v) in srow.iter().enumerate() {
                                if let Some(xi) = source_index(xo, e, g.stride[2], g.dilation[2], g.padding[2], iw) {
                                    drow[xi] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Cross-correlation of `input [B, Cin, *S]` with `kernel [Cout, Cin, *K]`
/// (1 to 3 spatial axes), optional `bias [Cout]`.
///
/// `stride`, `dilation` and `padding` carry one entry per spatial axis;
/// padding is symmetric zero padding.
pub fn conv(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: &[usize],
    dilation: &[usize],
    padding: &[usize],
) -> Result<Tensor> {
    let nd = input.rank().saturating_sub(2);
    if !(1..=3).contains(&nd) || kernel.rank() != input.rank() || kernel.shape()[1] != input.shape()[1] {
        return Err(TensorError::mismatch("conv", input.shape(), kernel.shape()));
    }
    if stride.len() != nd || dilation.len() != nd || padding.len() != nd {
        return Err(TensorError::invalid(
            "conv",
            format!("expected {nd} stride/dilation/padding entries"),
        ));
    }
    if stride.iter().chain(dilation).any(|&v| v == 0) {
        return Err(TensorError::invalid("conv", "stride and dilation must be positive"));
    }
    let (batch, cin, cout) = (input.shape()[0], input.shape()[1], kernel.shape()[0]);
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::mismatch("conv", kernel.shape(), b.shape()));
        }
    }
    let mut out_sp = Vec::with_capacity(nd);
    for i in 0..nd {
        let span = dilation[i] * (kernel.shape()[2 + i] - 1) + 1;
        let padded = input.shape()[2 + i] + 2 * padding[i];
        if padded < span {
            return Err(TensorError::ShapeMismatch {
                op: "conv",
                lhs: input.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        out_sp.push((padded - span) / stride[i] + 1);
    }
    let g = Geom {
        input: lift(&input.shape()[2..], 1),
        kernel: lift(&kernel.shape()[2..], 1),
        out: lift(&out_sp, 1),
        stride: lift(stride, 1),
        dilation: lift(dilation, 1),
        padding: lift(padding, 0),
    };
    let (ivol, ovol, ckk) = (g.in_vol(), g.out_vol(), cin * g.k_vol());
    let x = input.data();
    let w = kernel.data();
    let mut out = vec![0.0; batch * cout * ovol];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; ckk * ovol] };
    for b in 0..batch {
        let xb = &x[b * cin * ivol..(b + 1) * cin * ivol];
        let src: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, cin, &g, &mut cols);
            &cols
        };
        let ob = &mut out[b * cout * ovol..(b + 1) * cout * ovol];
        gemm(cout, ckk, ovol, w, (ckk, 1), src, (ovol, 1), ob, false);
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                ob[co * ovol..(co + 1) * ovol].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    let mut shape = vec![batch, cout];
    shape.extend_from_slice(&out_sp);

    let mut parents = vec![input.clone(), kernel.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let (xt, kt, bt) = (input.clone(), kernel.clone(), bias.cloned());
    Ok(Tensor::from_op(
        "conv",
        out,
        shape,
        parents,
        Box::new(move |_, grad| {
            let x = xt.data();
            let w = kt.data();
            let mut gx = xt.requires_grad().then(|| vec![0.0; x.len()]);
            let mut gw = kt.requires_grad().then(|| vec![0.0; w.len()]);
            let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; ckk * ovol] };
            let mut gcols = vec![0.0; if gx.is_some() && !g.is_pointwise() { ckk * ovol } else { 0 }];
            for b in 0..batch {
                let gb = &grad[b * cout * ovol..(b + 1) * cout * ovol];
                let xb = &x[b * cin * ivol..(b + 1) * cin * ivol];
                if let Some(gw) = gw.as_mut() {
                    let src: &[f64] = if g.is_pointwise() {
                        xb
                    } else {
                        im2col(xb, cin, &g, &mut cols);
                        &cols
                    };
                    // gW (cout×ckk) += g_b (cout×ovol) · colsᵀ (ovol×ckk)
                    gemm(cout, ovol, ckk, gb, (ovol, 1), src, (1, ovol), gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    let gxb = &mut gx[b * cin * ivol..(b + 1) * cin * ivol];
                    if g.is_pointwise() {
                        gemm(ckk, cout, ovol, w, (1, ckk), gb, (ovol, 1), gxb, true);
                    } else {
                        // gcols (ckk×ovol) = Wᵀ (ckk×cout) · g_b (cout×ovol)
                        gemm(ckk, cout, ovol, w, (1, ckk), gb, (ovol, 1), &mut gcols, false);
                        col2im(&gcols, cin, &g, gxb);
                    }
                }
            }
            let gbias = bt.as_ref().filter(|b| b.requires_grad()).map(|_| {
                let mut gbias = vec![0.0; cout];
                for b in 0..batch {
                    for (co, acc) in gbias.iter_mut().enumerate() {
                        let off = (b * cout + co) * ovol;
                        *acc += grad[off..off + ovol].iter().sum::<f64>();
                    }
                }
                gbias
            });
            let mut grads = vec![gx, gw];
            if bt.is_some() {
                grads.push(gbias);
            }
            grads
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], s: &[usize]) -> Tensor {
        Tensor::new(v.to_vec(), s).unwrap()
    }

    #[test]
    fn one_d_sliding_sum() {
        let y = conv(&t(&[1.0, 2.0, 3.0], &[1, 1, 3]), &t(&[1.0, 1.0], &[1, 1, 2]), None, &[1], &[1], &[0]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2]);
        assert_eq!(y.data(), &[3.0, 5.0]);
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let x = t(&[0.3, -1.0, 2.0, 5.0, 1.0, 1.0, 0.0, 4.0, -2.0], &[1, 1, 3, 3]);
        let y = conv(&x, &Tensor::zeros(&[2, 1, 2, 2]), None, &[1, 1], &[1, 1], &[1, 1]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[1, 2, 4, 4]);
    }

    #[test]
    fn unit_kernel_is_identity_bit_for_bit() {
        let x = t(&[0.1, -0.7, 1e-300, 3.3, 2.0, -5.5, 0.25, 1.0 / 3.0], &[1, 1, 2, 2, 2]);
        let y = conv(&x, &Tensor::ones(&[1, 1, 1, 1, 1]), None, &[1, 1, 1], &[1, 1, 1], &[0, 0, 0]).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dilation_and_stride_arithmetic() {
        // length 7, kernel 3, dilation 2, padding 2, stride 2 -> (7+4-5)/2+1 = 4
        let x = t(&[1.0; 7], &[1, 1, 7]);
        let y = conv(&x, &Tensor::ones(&[1, 1, 3]), None, &[2], &[2], &[2]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4]);
        assert_eq!(y.data(), &[2.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn bias_is_added_per_channel() {
        let y = conv(
            &Tensor::zeros(&[2, 1, 3]),
            &Tensor::zeros(&[2, 1, 1]),
            Some(&t(&[1.5, -2.0], &[2])),
            &[1],
            &[1],
            &[0],
        )
        .unwrap();
        assert_eq!(y.data(), &[1.5, 1.5, 1.5, -2.0, -2.0, -2.0, 1.5, 1.5, 1.5, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let err = conv(&Tensor::zeros(&[1, 2, 5]), &Tensor::zeros(&[1, 3, 3]), None, &[1], &[1], &[0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 5]") && msg.contains("[1, 3, 3]"), "{msg}");
    }

    #[test]
    fn too_small_input_rejected() {
        assert!(conv(&Tensor::zeros(&[1, 1, 2]), &Tensor::zeros(&[1, 1, 3]), None, &[1], &[1], &[0]).is_err());
    }
}
