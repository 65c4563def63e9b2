//! Parameterized layers and the field-visitor plumbing behind `Module`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trigait_tensor::nn::{self, NormMode};
use trigait_tensor::{conv, linear, Buffer, Parameter, Tensor};

use crate::error::Result;

pub const LEAKY_SLOPE: f64 = 0.01;

/// Field-wise traversal used to derive `Module` for composite layers.
pub trait Visit {
    fn visit(&self, f: &mut dyn FnMut(&Parameter));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));
    fn visit_buf(&self, _f: &mut dyn FnMut(&Buffer)) {}
}

impl Visit for Parameter {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(self)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(self)
    }
}

impl Visit for Buffer {
    fn visit(&self, _f: &mut dyn FnMut(&Parameter)) {}
    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Parameter)) {}
    fn visit_buf(&self, f: &mut dyn FnMut(&Buffer)) {
        f(self)
    }
}

impl<T: Visit> Visit for Vec<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.iter().for_each(|x| x.visit(f))
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.iter_mut().for_each(|x| x.visit_mut(f))
    }
    fn visit_buf(&self, f: &mut dyn FnMut(&Buffer)) {
        self.iter().for_each(|x| x.visit_buf(f))
    }
}

impl<T: Visit> Visit for Option<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.iter().for_each(|x| x.visit(f))
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.iter_mut().for_each(|x| x.visit_mut(f))
    }
    fn visit_buf(&self, f: &mut dyn FnMut(&Buffer)) {
        self.iter().for_each(|x| x.visit_buf(f))
    }
}

/// Implements `Visit` and `Module` by visiting the listed fields in order.
macro_rules! module {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::model::layers::Visit for $ty {
            fn visit(&self, f: &mut dyn FnMut(&trigait_tensor::Parameter)) {
                $( $crate::model::layers::Visit::visit(&self.$field, f); )*
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut trigait_tensor::Parameter)) {
                $( $crate::model::layers::Visit::visit_mut(&mut self.$field, f); )*
            }
            fn visit_buf(&self, f: &mut dyn FnMut(&trigait_tensor::Buffer)) {
                $( $crate::model::layers::Visit::visit_buf(&self.$field, f); )*
            }
        }
        impl trigait_tensor::Module for $ty {
            fn visit_params(&self, f: &mut dyn FnMut(&trigait_tensor::Parameter)) {
                $crate::model::layers::Visit::visit(self, f)
            }
            fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut trigait_tensor::Parameter)) {
                $crate::model::layers::Visit::visit_mut(self, f)
            }
            fn visit_buffers(&self, f: &mut dyn FnMut(&trigait_tensor::Buffer)) {
                $crate::model::layers::Visit::visit_buf(self, f)
            }
        }
    };
}
pub(crate) use module;

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `[-b, b]` with `b = gain · sqrt(3 / fan_in)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> Result<Parameter> {
        let n: usize = shape.iter().product();
        let b = gain * (3.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..n).map(|_| self.rng.gen_range(-b..=b)).collect();
        Ok(Parameter::new(name, data, shape)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Parameter> {
        let n: usize = shape.iter().product();
        Ok(Parameter::new(name, vec![value; n], shape)?)
    }
}

/// Gain for weights feeding a leaky-ReLU.
pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Sets every value of a parameter to zero.
pub fn zero_param(p: &mut Parameter) -> Result<()> {
    let n = p.value().numel();
    Ok(p.set_data(vec![0.0; n])?)
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    stride: Vec<usize>,
    dilation: Vec<usize>,
    padding: Vec<usize>,
}
module!(Conv { weight, bias });

impl Conv {
    /// Unit-stride convolution with kernel extents `kernel`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: &[usize],
        dilation: &[usize],
        padding: &[usize],
        bias: bool,
    ) -> Result<Self> {
        let mut shape = vec![cout, cin];
        shape.extend_from_slice(kernel);
        let fan_in = cin * kernel.iter().product::<usize>();
        let weight = init.uniform(&format!("{name}.weight"), &shape, fan_in, RELU_GAIN)?;
        let bias = if bias {
            Some(init.constant(&format!("{name}.bias"), &[cout], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: vec![1; kernel.len()],
            dilation: dilation.to_vec(),
            padding: padding.to_vec(),
        })
    }

    /// 1×1 convolution over a 2-D plane.
    pub fn pointwise(init: &mut Init, name: &str, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        Self::new(init, name, cin, cout, &[1, 1], &[1, 1], &[0, 0], bias)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(conv(
            x,
            self.weight.value(),
            self.bias.as_ref().map(Parameter::value),
            &self.stride,
            &self.dilation,
            &self.padding,
        )?)
    }

    pub fn zero(&mut self) -> Result<()> {
        zero_param(&mut self.weight)?;
        if let Some(b) = &mut self.bias {
            zero_param(b)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub stats: Buffer,
}
module!(BatchNorm { gamma, beta, stats });

impl BatchNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: init.constant(&format!("{name}.beta"), &[channels], 0.0)?,
            stats: Buffer::new(name, channels),
        })
    }

    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let run = |stats: &mut nn::RunningStats| {
            nn::batch_norm(x, self.gamma.value(), self.beta.value(), nn::BN_EPS, mode, stats)
        };
        let lock = || self.stats.stats.lock().expect("running stats lock");
        match mode {
            NormMode::Train => Ok(run(&mut lock())?),
            // Eval reads the statistics only; copy them so concurrent
            // forwards do not serialize on the lock.
            NormMode::Eval => {
                let mut stats = lock().clone();
                Ok(run(&mut stats)?)
            }
        }
    }
}

/// `x [..., din] · W [din, dout] + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}
module!(Linear { weight, bias });

impl Linear {
    pub fn new(init: &mut Init, name: &str, din: usize, dout: usize, gain: f64) -> Result<Self> {
        Ok(Self {
            weight: init.uniform(&format!("{name}.weight"), &[din, dout], din, gain)?,
            bias: init.constant(&format!("{name}.bias"), &[dout], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let din = *x.shape().last().unwrap_or(&0);
        let lead: Vec<usize> = x.shape()[..x.rank().saturating_sub(1)].to_vec();
        let rows = lead.iter().product::<usize>();
        let y = linear(&x.reshape(&[rows, din])?, self.weight.value(), self.bias.value())?;
        let mut shape = lead;
        shape.push(self.weight.shape()[1]);
        Ok(y.reshape(&shape)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
}
module!(LayerNorm { gamma, beta });

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: init.constant(&format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(nn::layer_norm(x, self.gamma.value(), self.beta.value(), Self::EPS)?)
    }
}

/// Scaled dot-product attention over `[N, L, d]` queries, keys and values.
/// Returns the output and the row-stochastic weights `[N, L, L]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let dk = q.shape()[2] as f64;
    let scores = q.bmm(&k.transpose(1, 2)?)?.mul_scalar(1.0 / dk.sqrt());
    let weights = scores.softmax(2)?;
    Ok((weights.bmm(v)?, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use trigait_tensor::Module;

    #[test]
    fn module_macro_visits_in_declaration_order() {
        let mut init = Init::new(0);
        let bn = BatchNorm::new(&mut init, "bn", 3).unwrap();
        let mut names = Vec::new();
        bn.visit_params(&mut |p| names.push(p.name.clone()));
        assert_eq!(names, ["bn.gamma", "bn.beta"]);
        let mut bufs = 0;
        bn.visit_buffers(&mut |_| bufs += 1);
        assert_eq!(bufs, 1);
        assert_eq!(bn.num_params(), 6);
    }

    #[test]
    fn init_is_seeded() {
        let a = Init::new(4).uniform("w", &[3, 3], 3, 1.0).unwrap();
        let b = Init::new(4).uniform("w", &[3, 3], 3, 1.0).unwrap();
        assert_eq!(a.value().data(), b.value().data());
        assert!(a.value().data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn linear_keeps_leading_axes() {
        let mut init = Init::new(1);
        let l = Linear::new(&mut init, "fc", 4, 6, 1.0).unwrap();
        let y = l.forward(&Tensor::zeros(&[2, 3, 4])).unwrap();
        assert_eq!(y.shape(), &[2, 3, 6]);
    }

    #[test]
    fn attention_oracle() {
        // K = 2, d_k = 1: softmax(1, 0) · [2, 4].
        let q = Tensor::new(vec![1.0, 0.0], &[1, 2, 1]).unwrap();
        let k = Tensor::new(vec![1.0, 0.0], &[1, 2, 1]).unwrap();
        let v = Tensor::new(vec![2.0, 4.0], &[1, 2, 1]).unwrap();
        let (out, w) = attention(&q, &k, &v).unwrap();
        let s = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((out.data()[0] - (s * 2.0 + (1.0 - s) * 4.0)).abs() < 1e-12);
        assert!((out.data()[0] - 2.5378828427399904).abs() < 1e-12);
        assert!((w.data()[0] + w.data()[1] - 1.0).abs() < 1e-12);
    }
}
