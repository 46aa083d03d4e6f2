use std::collections::BTreeMap;

use crate::autograd::ParamStore;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// SGD with momentum and L2 weight decay:
/// `v = mu * v + (g + wd * w)`, `w -= lr * v`.
///
/// Only parameters present in the gradient map move; the rest keep their
/// values and velocities.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr_for: impl Fn(&str) -> f64,
    ) -> Result<()> {
        let (mu, wd) = (self.momentum as f32, self.weight_decay as f32);
        for (name, grad) in grads {
            let w = params.get_mut(name)?;
            if w.shape() != grad.shape() {
                return Err(shape_err!(
                    "gradient {:?} does not match parameter `{name}` {:?}",
                    grad.shape(),
                    w.shape()
                ));
            }
            let lr = lr_for(name) as f32;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.numel()]);
            for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                *vi = mu * *vi + (gi + wd * *wi);
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient map.
pub fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}
