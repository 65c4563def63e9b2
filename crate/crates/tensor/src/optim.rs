//! Trainable parameters and SGD with momentum and weight decay.

use std::sync::Mutex;

use crate::error::{Result, TensorError};
use crate::nn::RunningStats;
use crate::tensor::Tensor;

/// A named trainable tensor.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    value: Tensor,
    pub momentum_buffer: Option<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            value: Tensor::variable(data, shape)?,
            momentum_buffer: None,
        })
    }

    /// The current value as a graph leaf; gradients from `backward` land here.
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.value.grad()
    }

    pub fn zero_grad(&self) {
        self.value.zero_grad();
    }

    /// Replaces the value, keeping shape and the accumulated gradient.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.value.numel() {
            return Err(TensorError::invalid(
                "parameter",
                format!("{}: expected {} values, got {}", self.name, self.value.numel(), data.len()),
            ));
        }
        self.value = self.value.replace_value(data);
        Ok(())
    }
}

/// Non-trainable per-layer state that still belongs in a checkpoint.
#[derive(Debug)]
pub struct Buffer {
    pub name: String,
    pub stats: Mutex<RunningStats>,
}

impl Buffer {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            stats: Mutex::new(RunningStats::new(channels)),
        }
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            stats: Mutex::new(self.stats.lock().expect("stats lock").clone()),
        }
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));
    fn visit_buffers(&self, _f: &mut dyn FnMut(&Buffer)) {}

    fn zero_grad(&self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value().numel());
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One SGD step: `v <- momentum * v + (g + wd * w)`, `w <- w - lr * v`.
///
/// Gradients are left in place. Parameters without a gradient are skipped
/// and their names returned.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Parameter>, cfg: SgdConfig) -> Vec<String> {
    let mut skipped = Vec::new();
    for p in params {
        let Some(g) = p.grad() else {
            skipped.push(p.name.clone());
            continue;
        };
        let w = p.value.data();
        let prev = p.momentum_buffer.as_ref().map(|b| b.data());
        let v: Vec<f64> = (0..w.len())
            .map(|i| {
                let d = g[i] + cfg.weight_decay * w[i];
                cfg.momentum * prev.map_or(0.0, |b| b[i]) + d
            })
            .collect();
        let next: Vec<f64> = w.iter().zip(&v).map(|(w, v)| w - cfg.lr * v).collect();
        p.momentum_buffer = Some(Tensor::raw(v, p.value.shape().to_vec()));
        p.value = p.value.replace_value(next);
    }
    skipped
}

/// Steps every parameter of a module.
pub fn sgd_step_module(module: &mut dyn Module, cfg: SgdConfig) -> Vec<String> {
    let mut skipped = Vec::new();
    module.visit_params_mut(&mut |p| skipped.extend(sgd_step(std::iter::once(p), cfg)));
    skipped
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param_with_grad(w: f64, g: f64) -> Parameter {
        let p = Parameter::new("w", vec![w], &[1]).unwrap();
        p.value().set_grad(Some(vec![g]));
        p
    }

    #[test]
    fn plain_descent() {
        let mut p = param_with_grad(1.0, 1.0);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        sgd_step([&mut p], cfg);
        assert!((p.value().item() - 0.9).abs() < 1e-15);
        assert_eq!(p.grad(), Some(vec![1.0]));
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = param_with_grad(0.7, 0.0);
        sgd_step([&mut p], SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 });
        assert_eq!(p.value().item(), 0.7);
    }

    #[test]
    fn two_momentum_steps() {
        let mut p = param_with_grad(0.0, 1.0);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        sgd_step([&mut p], cfg);
        assert!((p.value().item() + 0.1).abs() < 1e-15);
        sgd_step([&mut p], cfg);
        assert!((p.value().item() + 0.29).abs() < 1e-15);
        assert!((p.momentum_buffer.as_ref().unwrap().item() - 1.9).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_reported() {
        let mut p = Parameter::new("enc.w", vec![1.0], &[1]).unwrap();
        let skipped = sgd_step([&mut p], SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 5e-4 });
        assert_eq!(skipped, vec!["enc.w".to_string()]);
        assert_eq!(p.value().item(), 1.0);
    }

    #[test]
    fn weight_decay_enters_velocity() {
        let mut p = param_with_grad(2.0, 0.0);
        sgd_step([&mut p], SgdConfig { lr: 1.0, momentum: 0.0, weight_decay: 0.5 });
        assert_eq!(p.value().item(), 1.0);
    }
}
