//! Image-level and instance-level domain classifiers.
//!
//! Both start with a gradient reversal node, so minimizing their
//! classification loss trains the classifier while pushing everything
//! upstream toward domain confusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::roi::InstanceFeatures;
use crate::autograd::{Conv2dSpec, Graph, ParamStore, Var};
use crate::error::{shape_err, validation_err, Result};
use crate::grl::grl_apply;
use crate::model::{ModelConfig, NUM_SCALES, STRIDES};
use crate::tensor::Tensor;

pub const ADAPTATION_PREFIX: &str = "adaptation.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    /// Hidden width of the per-location image classifiers.
    pub image_hidden: usize,
    /// Hidden width of the instance classifiers.
    pub instance_hidden: usize,
    /// ROI pooling output size `P`.
    pub pool_size: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            image_hidden: 64,
            instance_hidden: 128,
            pool_size: 3,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_hidden == 0 || self.instance_hidden == 0 || self.pool_size == 0 {
            return Err(validation_err!(
                "adaptation hidden widths and pool size must be positive"
            ));
        }
        Ok(())
    }
}

/// Per-location domain probability at one scale, `[B, 1, H_k, W_k]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainProbMap {
    pub scale: usize,
    pub var: Var,
    /// Pre-sigmoid values of `var`, when known; the losses then use the
    /// non-saturating log-sigmoid gradient.
    pub logit: Option<Var>,
}

/// Target-domain probability of each pooled instance at one scale, `[N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceProbs {
    pub scale: usize,
    pub var: Var,
    /// Pre-sigmoid values of `var`, same shape.
    pub logit: Option<Var>,
    /// Batch index of the image each instance came from.
    pub images: Vec<usize>,
}

impl InstanceProbs {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// The six domain classifiers (image and instance level, one per scale).
#[derive(Clone, Debug)]
pub struct DomainClassifiers {
    channels: [usize; NUM_SCALES],
    config: AdaptationConfig,
}

fn kaiming(fan_in: usize) -> f32 {
    (2.0 / fan_in as f32).sqrt()
}

impl DomainClassifiers {
    pub fn new(model: &ModelConfig, config: AdaptationConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            channels: [
                model.tap_channels(0),
                model.tap_channels(1),
                model.tap_channels(2),
            ],
            config,
        })
    }

    pub fn config(&self) -> &AdaptationConfig {
        &self.config
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        let hid = self.config.image_hidden;
        let ihid = self.config.instance_hidden;
        let p2 = self.config.pool_size * self.config.pool_size;
        for k in 0..NUM_SCALES {
            let c = self.channels[k];
            let pre = format!("{ADAPTATION_PREFIX}image{k}");
            store.insert(
                format!("{pre}.conv1.weight"),
                Tensor::randn(vec![hid, c, 1, 1], kaiming(c), rng),
            );
            store.insert(format!("{pre}.conv1.bias"), Tensor::zeros(vec![hid]));
            store.insert(
                format!("{pre}.conv2.weight"),
                Tensor::randn(vec![1, hid, 1, 1], 0.01, rng),
            );
            store.insert(format!("{pre}.conv2.bias"), Tensor::zeros(vec![1]));

            let pre = format!("{ADAPTATION_PREFIX}instance{k}");
            let d = c * p2;
            store.insert(
                format!("{pre}.fc1.weight"),
                Tensor::randn(vec![ihid, d], kaiming(d), rng),
            );
            store.insert(format!("{pre}.fc1.bias"), Tensor::zeros(vec![ihid]));
            store.insert(
                format!("{pre}.fc2.weight"),
                Tensor::randn(vec![1, ihid], 0.01, rng),
            );
            store.insert(format!("{pre}.fc2.bias"), Tensor::zeros(vec![1]));
        }
        store
    }

    /// Per-location domain probabilities for the map at `scale`.
    pub fn image_classifier(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        scale: usize,
        map: Var,
        grl_lambda: f32,
    ) -> Result<DomainProbMap> {
        if scale >= NUM_SCALES {
            return Err(shape_err!("scale index {scale} out of range"));
        }
        let (_, c, _, _) = g.value(map).dims4()?;
        if c != self.channels[scale] {
            return Err(shape_err!(
                "image classifier for stride {} expects {} channels, got {c}",
                STRIDES[scale],
                self.channels[scale]
            ));
        }
        let pre = format!("{ADAPTATION_PREFIX}image{scale}");
        let pw = Conv2dSpec {
            stride: 1,
            padding: 0,
        };
        let x = grl_apply(g, map, grl_lambda)?;
        let (w1, b1) = (
            g.param(params, &format!("{pre}.conv1.weight"))?,
            g.param(params, &format!("{pre}.conv1.bias"))?,
        );
        let h = g.conv2d(x, w1, b1, pw)?;
        let h = g.relu(h);
        let (w2, b2) = (
            g.param(params, &format!("{pre}.conv2.weight"))?,
            g.param(params, &format!("{pre}.conv2.bias"))?,
        );
        let logit = g.conv2d(h, w2, b2, pw)?;
        let var = g.sigmoid(logit);
        Ok(DomainProbMap {
            scale,
            var,
            logit: Some(logit),
        })
    }

    /// Target-domain probability of every pooled instance, in input order.
    pub fn instance_classifier(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        feats: &InstanceFeatures,
        grl_lambda: f32,
    ) -> Result<InstanceProbs> {
        let k = feats.scale;
        if k >= NUM_SCALES {
            return Err(shape_err!("scale index {k} out of range"));
        }
        let (n, c, p, p2) = g.value(feats.var).dims4()?;
        if c != self.channels[k] || p != self.config.pool_size || p2 != p {
            return Err(shape_err!(
                "instance classifier for stride {} expects [N, {}, {}, {}], got {:?}",
                STRIDES[k],
                self.channels[k],
                self.config.pool_size,
                self.config.pool_size,
                g.shape(feats.var)
            ));
        }
        let images = feats.rois.iter().map(|r| r.image).collect();
        if n == 0 {
            let var = g.constant(Tensor::zeros(vec![0]));
            return Ok(InstanceProbs {
                scale: k,
                var,
                logit: None,
                images,
            });
        }
        let pre = format!("{ADAPTATION_PREFIX}instance{k}");
        let x = grl_apply(g, feats.var, grl_lambda)?;
        let x = g.reshape(x, vec![n, c * p * p])?;
        let (w1, b1) = (
            g.param(params, &format!("{pre}.fc1.weight"))?,
            g.param(params, &format!("{pre}.fc1.bias"))?,
        );
        let h = g.linear(x, w1, b1)?;
        let h = g.relu(h);
        let (w2, b2) = (
            g.param(params, &format!("{pre}.fc2.weight"))?,
            g.param(params, &format!("{pre}.fc2.bias"))?,
        );
        let logit = g.linear(h, w2, b2)?;
        let logit = g.reshape(logit, vec![n])?;
        let var = g.sigmoid(logit);
        Ok(InstanceProbs {
            scale: k,
            var,
            logit: Some(logit),
            images,
        })
    }
}
