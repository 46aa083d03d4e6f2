//! Backbone with three taps and one detection head per tap.
//!
//! Grid channel layout: for anchor `a`, channels `a*(5+M) .. (a+1)*(5+M)` hold
//! `tx, ty, tw, th, objectness, class_0 .. class_{M-1}`. All values are raw:
//! `tx`, `ty`, objectness and class scores are logits, `tw` and `th` are log
//! scale factors relative to the anchor.

use rand::Rng;

use super::config::{ModelConfig, NUM_SCALES, STRIDES};
use crate::autograd::{Conv2dSpec, Graph, ParamStore, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Prefix of every parameter trained at the backbone learning rate.
pub const BACKBONE_PREFIX: &str = "detector.backbone.";
pub const DETECTOR_PREFIX: &str = "detector.";

/// Initial objectness bias; sigmoid(-4) is about 0.018.
const OBJECTNESS_PRIOR_LOGIT: f32 = -4.0;

/// A backbone activation at one scale, `[B, C_k, H/stride, W/stride]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureMap {
    pub scale: usize,
    pub stride: usize,
    pub var: Var,
}

/// Raw head output at one scale, `[B, A*(5+M), H_k, W_k]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionGrid {
    pub scale: usize,
    pub var: Var,
}

#[derive(Clone, Debug)]
pub struct Detector {
    config: ModelConfig,
}

fn conv_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.weight"), format!("{prefix}.bias"))
}

fn kaiming(fan_in: usize, slope: f32) -> f32 {
    (2.0 / ((1.0 + slope * slope) * fan_in as f32)).sqrt()
}

impl Detector {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn block_convs(&self) -> Vec<(String, usize, usize, usize)> {
        // (name, cin, cout, stride)
        let mut out = Vec::new();
        let mut cin = 3;
        for (b, &w) in self.config.backbone_widths.iter().enumerate() {
            out.push((format!("{BACKBONE_PREFIX}block{b}.down"), cin, w, 2));
            for e in 0..self.config.extra_convs_per_block {
                out.push((format!("{BACKBONE_PREFIX}block{b}.conv{e}"), w, w, 1));
            }
            cin = w;
        }
        out
    }

    /// Fresh detector weights.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let slope = self.config.leaky_slope;
        let mut store = ParamStore::new();
        for (name, cin, cout, _) in self.block_convs() {
            let (w, b) = conv_names(&name);
            store.insert(
                w,
                Tensor::randn(vec![cout, cin, 3, 3], kaiming(cin * 9, slope), rng),
            );
            store.insert(b, Tensor::zeros(vec![cout]));
        }
        let stride = self.config.anchor_stride();
        for k in 0..NUM_SCALES {
            let mut cin = self.config.tap_channels(k);
            if self.config.head_hidden > 0 {
                let (w, b) = conv_names(&format!("detector.head{k}.hidden"));
                let hid = self.config.head_hidden;
                store.insert(
                    w,
                    Tensor::randn(vec![hid, cin, 3, 3], kaiming(cin * 9, slope), rng),
                );
                store.insert(b, Tensor::zeros(vec![hid]));
                cin = hid;
            }
            let (w, b) = conv_names(&format!("detector.head{k}.out"));
            let cout = self.config.head_channels();
            store.insert(w, Tensor::randn(vec![cout, cin, 1, 1], 0.01, rng));
            let mut bias = Tensor::zeros(vec![cout]);
            for a in 0..self.config.anchors_per_scale() {
                bias.data_mut()[a * stride + 4] = OBJECTNESS_PRIOR_LOGIT;
            }
            store.insert(b, bias);
        }
        store
    }

    fn conv(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        x: Var,
        name: &str,
        spec: Conv2dSpec,
        activate: bool,
    ) -> Result<Var> {
        let (w, b) = conv_names(name);
        let (w, b) = (g.param(params, &w)?, g.param(params, &b)?);
        let y = g.conv2d(x, w, b, spec)?;
        Ok(if activate {
            g.leaky_relu(y, self.config.leaky_slope)
        } else {
            y
        })
    }

    /// Run the backbone on `[B, 3, H, W]` images and return the stride 8/16/32 taps.
    pub fn backbone_forward(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        images: Var,
    ) -> Result<[FeatureMap; NUM_SCALES]> {
        let shape = g.shape(images).to_vec();
        let (_, c, h, w) = g.value(images).dims4()?;
        if c != 3 {
            return Err(shape_err!(
                "expected 3 input channels, got {c} (shape {shape:?})"
            ));
        }
        for (dim, size) in [("height", h), ("width", w)] {
            if size == 0 || size % 32 != 0 {
                return Err(shape_err!(
                    "image {dim} {size} is not a positive multiple of 32"
                ));
            }
        }
        let mut x = images;
        let mut taps = Vec::with_capacity(NUM_SCALES);
        let extra = self.config.extra_convs_per_block;
        for b in 0..self.config.backbone_widths.len() {
            let down = format!("{BACKBONE_PREFIX}block{b}.down");
            x = self.conv(
                g,
                params,
                x,
                &down,
                Conv2dSpec {
                    stride: 2,
                    padding: 1,
                },
                true,
            )?;
            for e in 0..extra {
                let name = format!("{BACKBONE_PREFIX}block{b}.conv{e}");
                x = self.conv(
                    g,
                    params,
                    x,
                    &name,
                    Conv2dSpec {
                        stride: 1,
                        padding: 1,
                    },
                    true,
                )?;
            }
            if b >= 2 {
                let scale = b - 2;
                taps.push(FeatureMap {
                    scale,
                    stride: STRIDES[scale],
                    var: x,
                });
            }
        }
        Ok([taps[0], taps[1], taps[2]])
    }

    /// Apply the head that belongs to `map.scale`.
    pub fn head_forward(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        map: &FeatureMap,
    ) -> Result<DetectionGrid> {
        let k = map.scale;
        if k >= NUM_SCALES {
            return Err(shape_err!("scale index {k} out of range"));
        }
        let (_, c, _, _) = g.value(map.var).dims4()?;
        let expected = self.config.tap_channels(k);
        if c != expected {
            return Err(shape_err!(
                "head for scale {k} (stride {}) expects {expected} channels, got {c}",
                STRIDES[k]
            ));
        }
        let mut x = map.var;
        if self.config.head_hidden > 0 {
            let name = format!("detector.head{k}.hidden");
            x = self.conv(
                g,
                params,
                x,
                &name,
                Conv2dSpec {
                    stride: 1,
                    padding: 1,
                },
                true,
            )?;
        }
        let name = format!("detector.head{k}.out");
        let var = self.conv(
            g,
            params,
            x,
            &name,
            Conv2dSpec {
                stride: 1,
                padding: 0,
            },
            false,
        )?;
        Ok(DetectionGrid { scale: k, var })
    }

    /// Backbone followed by all three heads.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        images: Var,
    ) -> Result<([FeatureMap; NUM_SCALES], [DetectionGrid; NUM_SCALES])> {
        let maps = self.backbone_forward(g, params, images)?;
        let grids = [
            self.head_forward(g, params, &maps[0])?,
            self.head_forward(g, params, &maps[1])?,
            self.head_forward(g, params, &maps[2])?,
        ];
        Ok((maps, grids))
    }
}
