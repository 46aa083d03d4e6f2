//! Adversarial alignment objectives and the consensus regularizer.
//!
//! Labels follow the fixed convention source = 0, target = 1; classifier
//! outputs are target-domain probabilities. Log terms clamp their argument to
//! `[EPS, 1 - EPS]`. Image and instance terms are summed over locations /
//! instances and scales, then divided by the number of images in the batch.

use serde::{Deserialize, Serialize};

use super::classifier::{DomainProbMap, InstanceProbs};
use crate::autograd::{Graph, Var};
use crate::error::{shape_err, validation_err, Result};
use crate::model::NUM_SCALES;
use crate::sample::DomainLabel;
use crate::tensor::Tensor;

pub const EPS: f32 = 1e-7;

/// Per-scale loss weights, finest (stride 8) first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScaleWeights(pub [f64; NUM_SCALES]);

impl Default for ScaleWeights {
    /// Regressive defaults: strongest alignment on the shallowest map.
    fn default() -> Self {
        ScaleWeights([1.0, 0.5, 0.1])
    }
}

impl ScaleWeights {
    /// Non-increasing weights (regressive image alignment).
    pub fn regressive(w: [f64; NUM_SCALES]) -> Result<Self> {
        let s = ScaleWeights(w);
        s.check_nonnegative()?;
        if !s.is_regressive() {
            return Err(validation_err!(
                "regressive weights must be non-increasing with depth, got {w:?}"
            ));
        }
        Ok(s)
    }

    /// The same weight at every scale (equal image alignment).
    pub fn equal(w: f64) -> Result<Self> {
        let s = ScaleWeights([w; NUM_SCALES]);
        s.check_nonnegative()?;
        Ok(s)
    }

    fn check_nonnegative(&self) -> Result<()> {
        if self.0.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(validation_err!(
                "scale weights must be finite and >= 0, got {:?}",
                self.0
            ));
        }
        Ok(())
    }

    pub fn is_regressive(&self) -> bool {
        self.0.windows(2).all(|p| p[0] >= p[1])
    }

    pub fn is_equal(&self) -> bool {
        self.0.windows(2).all(|p| p[0] == p[1])
    }

    pub fn get(&self, scale: usize) -> f64 {
        self.0[scale]
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// `-sum w * [D ln p + (1 - D) ln(1 - p)]` where `pos[i] = w_i D_i` and `neg[i] = w_i (1 - D_i)`.
fn weighted_bce(
    g: &mut Graph,
    probs: Var,
    logit: Option<Var>,
    pos: Vec<f32>,
    neg: Vec<f32>,
) -> Result<Var> {
    let n = pos.len();
    let (ln_p, ln_q) = match logit {
        Some(z) => (g.ln_sigmoid(z, EPS, false), g.ln_sigmoid(z, EPS, true)),
        None => {
            let one_minus = g.affine(probs, -1.0, 1.0);
            (g.ln_clamped(probs, EPS), g.ln_clamped(one_minus, EPS))
        }
    };
    let a = g.mul_const(ln_p, Tensor::new(g.shape(probs).to_vec(), pos)?)?;
    let b = g.mul_const(
        ln_q,
        Tensor::new(vec![n], neg)?.reshape(g.shape(probs).to_vec())?,
    )?;
    let s = g.add(a, b)?;
    let s = g.sum(s);
    Ok(g.scale(s, -1.0))
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// Regressive (or equal) image-level alignment loss.
///
/// `maps` holds one `[B, 1, H_k, W_k]` map per scale; `labels[i]` is the domain of image `i`.
pub fn ria_loss(
    g: &mut Graph,
    maps: &[DomainProbMap],
    labels: &[DomainLabel],
    weights: &ScaleWeights,
) -> Result<Var> {
    if labels.is_empty() {
        return Ok(zero(g));
    }
    let inv_b = 1.0 / labels.len() as f64;
    let mut terms = Vec::with_capacity(maps.len());
    for map in maps {
        let (b, c, h, w) = g.value(map.var).dims4()?;
        if b != labels.len() || c != 1 {
            return Err(shape_err!(
                "probability map {:?} does not match {} labels",
                g.shape(map.var),
                labels.len()
            ));
        }
        let lam = weights.get(map.scale) * inv_b;
        let mut pos = Vec::with_capacity(b * h * w);
        let mut neg = Vec::with_capacity(b * h * w);
        for label in labels {
            let d = label.as_f32() as f64;
            pos.extend(std::iter::repeat_n((lam * d) as f32, h * w));
            neg.extend(std::iter::repeat_n((lam * (1.0 - d)) as f32, h * w));
        }
        terms.push(weighted_bce(g, map.var, map.logit, pos, neg)?);
    }
    if terms.is_empty() {
        return Ok(zero(g));
    }
    g.add_all(&terms)
}

/// Multi-scale instance alignment loss; empty instance sets contribute nothing.
pub fn msia_loss(
    g: &mut Graph,
    probs: &[InstanceProbs],
    labels: &[DomainLabel],
    weights: &ScaleWeights,
) -> Result<Var> {
    if labels.is_empty() {
        return Ok(zero(g));
    }
    let inv_b = 1.0 / labels.len() as f64;
    let mut terms = Vec::new();
    for p in probs.iter().filter(|p| !p.is_empty()) {
        if g.shape(p.var) != [p.len()] {
            return Err(shape_err!(
                "instance probabilities {:?} do not match {} instances",
                g.shape(p.var),
                p.len()
            ));
        }
        let lam = weights.get(p.scale) * inv_b;
        let mut pos = Vec::with_capacity(p.len());
        let mut neg = Vec::with_capacity(p.len());
        for &i in &p.images {
            let d = labels
                .get(i)
                .ok_or_else(|| shape_err!("instance refers to image {i} beyond the batch"))?
                .as_f32() as f64;
            pos.push((lam * d) as f32);
            neg.push((lam * (1.0 - d)) as f32);
        }
        terms.push(weighted_bce(g, p.var, p.logit, pos, neg)?);
    }
    if terms.is_empty() {
        return Ok(zero(g));
    }
    g.add_all(&terms)
}

/// Multi-level consensus: `sum |mean(map_{i,k}) - p_{i,j,k}|` over instances, divided by batch size.
///
/// Each instance is compared with the averaged image-level probability map of its own image and scale.
pub fn mlcr_loss(
    g: &mut Graph,
    maps: &[DomainProbMap],
    probs: &[InstanceProbs],
    batch_size: usize,
) -> Result<Var> {
    if batch_size == 0 {
        return Ok(zero(g));
    }
    let mut terms = Vec::new();
    for p in probs.iter().filter(|p| !p.is_empty()) {
        let map = maps
            .iter()
            .find(|m| m.scale == p.scale)
            .ok_or_else(|| shape_err!("no probability map for scale {}", p.scale))?;
        let (b, _, h, w) = g.value(map.var).dims4()?;
        if let Some(&bad) = p.images.iter().find(|&&i| i >= b) {
            return Err(shape_err!(
                "instance refers to image {bad} beyond the batch of {b}"
            ));
        }
        let means = g.mean_rows(map.var, h * w)?;
        let paired = g.gather(means, p.images.clone(), vec![p.len()])?;
        let diff = g.sub(paired, p.var)?;
        let dist = g.abs(diff);
        terms.push(g.sum(dist));
    }
    if terms.is_empty() {
        return Ok(zero(g));
    }
    let total = g.add_all(&terms)?;
    Ok(g.scale(total, 1.0 / batch_size as f32))
}
