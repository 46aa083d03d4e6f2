//! Gradient reversal.
//!
//! The forward pass copies its input unchanged. The backward pass hands the
//! upstream gradient back multiplied by `-lambda`, so a domain classifier placed
//! after the layer learns to separate domains while everything before the layer
//! learns to make them inseparable.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{CustomUnaryOp, Graph, Var};
use crate::error::{validation_err, Result};
use crate::tensor::Tensor;

/// How the reversal strength evolves over training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GrlSchedule {
    Constant,
    /// `lambda * (2 / (1 + exp(-gamma * p)) - 1)` with `p = step / total_steps` capped at 1.
    Ramp {
        gamma: f64,
        total_steps: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrlConfig {
    pub lambda_grl: f64,
    pub schedule: GrlSchedule,
}

impl Default for GrlConfig {
    fn default() -> Self {
        Self {
            lambda_grl: 1.0,
            schedule: GrlSchedule::Constant,
        }
    }
}

impl GrlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_grl >= 0.0) || !self.lambda_grl.is_finite() {
            return Err(validation_err!(
                "lambda_grl must be a finite value >= 0, got {}",
                self.lambda_grl
            ));
        }
        if let GrlSchedule::Ramp { gamma, total_steps } = self.schedule {
            if !(gamma > 0.0) || total_steps == 0 {
                return Err(validation_err!(
                    "ramp schedule needs gamma > 0 and total_steps > 0"
                ));
            }
        }
        Ok(())
    }

    /// Reversal strength at `step`; always in `[0, lambda_grl]`.
    pub fn lambda_at(&self, step: usize) -> f64 {
        match self.schedule {
            GrlSchedule::Constant => self.lambda_grl,
            GrlSchedule::Ramp { gamma, total_steps } => {
                let p = (step as f64 / total_steps.max(1) as f64).min(1.0);
                let factor = 2.0 / (1.0 + (-gamma * p).exp()) - 1.0;
                self.lambda_grl * factor.clamp(0.0, 1.0)
            }
        }
    }
}

/// Identity forward, `-lambda`-scaled gradient backward.
#[derive(Clone, Copy, Debug)]
pub struct GradientReversal {
    lambda: f32,
}

impl GradientReversal {
    pub fn new(lambda: f32) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(validation_err!(
                "gradient reversal strength must be finite and >= 0, got {lambda}"
            ));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f32 {
        self.lambda
    }
}

impl CustomUnaryOp for GradientReversal {
    fn name(&self) -> &str {
        "gradient_reversal"
    }

    fn forward(&self, input: &Tensor) -> Tensor {
        input.clone()
    }

    fn backward(&self, _input: &Tensor, _output: &Tensor, grad_output: &Tensor) -> Tensor {
        let neg = -self.lambda;
        grad_output.map(|g| neg * g)
    }
}

/// Insert a gradient reversal node after `x`.
pub fn grl_apply(graph: &mut Graph, x: Var, lambda: f32) -> Result<Var> {
    let op = GradientReversal::new(lambda)?;
    graph.custom(x, Arc::new(op))
}
