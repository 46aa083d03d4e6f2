//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough context to propagate gradients. Graphs are built fresh for each
//! forward pass and dropped afterwards; persistent weights live in a
//! [`ParamStore`] and are bound into a graph by name.
//!
//! Besides the fixed operation set, a graph accepts user-defined unary nodes
//! through [`CustomUnaryOp`], which supply their own backward rule. The
//! gradient reversal layer is built on that hook.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{shape_err, validation_err, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// A unary operation with a caller-supplied gradient rule.
pub trait CustomUnaryOp: Send + Sync {
    fn name(&self) -> &str;

    fn forward(&self, input: &Tensor) -> Tensor;

    /// Gradient with respect to `input`, given the gradient with respect to the output.
    fn backward(&self, input: &Tensor, output: &Tensor, grad_output: &Tensor) -> Tensor;
}

/// Named persistent weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| validation_err!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| validation_err!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        /// im2col buffers for every batch item, kept for the weight gradient.
        cols: Vec<f32>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    LeakyRelu {
        input: Var,
        slope: f32,
    },
    Sigmoid(Var),
    Exp(Var),
    LnClamped {
        input: Var,
        eps: f32,
    },
    LnSigmoid {
        input: Var,
        complement: bool,
    },
    Clamp {
        input: Var,
        lo: f32,
        hi: f32,
    },
    Affine {
        input: Var,
        scale: f32,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst {
        input: Var,
        factor: Tensor,
    },
    Sqr(Var),
    Abs(Var),
    Sum(Var),
    MeanRows {
        input: Var,
        cols: usize,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
    Custom {
        input: Var,
        op: Arc<dyn CustomUnaryOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape.
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    grad_enabled: bool,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("params", &self.params.len())
            .field("grad_enabled", &self.grad_enabled)
            .finish()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (when the tape records gradients).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a named parameter; repeated binds of the same name share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.variable(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// 2-D convolution of `[B, Cin, H, W]` with `[Cout, Cin, k, k]` weights and `[Cout]` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: Conv2dSpec) -> Result<Var> {
        let (batch, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, k, k2) = self.value(weight).dims4()?;
        if wcin != cin || k != k2 {
            return Err(shape_err!(
                "conv weight {:?} does not fit input {:?}",
                self.shape(weight),
                self.shape(input)
            ));
        }
        if self.shape(bias) != [cout] {
            return Err(shape_err!(
                "conv bias {:?} expected [{cout}]",
                self.shape(bias)
            ));
        }
        if spec.stride == 0 || h + 2 * spec.padding < k || w + 2 * spec.padding < k {
            return Err(shape_err!("conv kernel {k} does not fit input {h}x{w}"));
        }
        let ho = (h + 2 * spec.padding - k) / spec.stride + 1;
        let wo = (w + 2 * spec.padding - k) / spec.stride + 1;
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            k,
            stride: spec.stride,
            pad: spec.padding,
            ho,
            wo,
        };
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let b = self.value(bias).data();
        let keep_cols = self.grad_enabled && (self.rg(weight)) && !geom.is_pointwise();
        let plen = geom.patch_len();
        let npix = geom.out_pixels();
        let mut out = vec![0.0f32; batch * cout * npix];
        let mut cols_all = if keep_cols {
            vec![0.0f32; batch * plen * npix]
        } else {
            Vec::new()
        };
        let mut scratch = if !keep_cols && !geom.is_pointwise() {
            vec![0.0f32; plen * npix]
        } else {
            Vec::new()
        };
        for bi in 0..batch {
            let xb = &x[bi * cin * h * w..(bi + 1) * cin * h * w];
            let cols: &[f32] = if geom.is_pointwise() {
                xb
            } else {
                let buf = if keep_cols {
                    &mut cols_all[bi * plen * npix..(bi + 1) * plen * npix]
                } else {
                    &mut scratch[..]
                };
                im2col(xb, &geom, buf);
                buf
            };
            let ob = &mut out[bi * cout * npix..(bi + 1) * cout * npix];
            for (co, row) in ob.chunks_mut(npix).enumerate() {
                row.fill(b[co]);
            }
            gemm(cout, plen, npix, wt, false, cols, false, ob, 1.0);
        }
        let value = Tensor::new(vec![batch, cout, ho, wo], out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols: cols_all,
            },
            rg,
        ))
    }

    /// Fully connected layer: `[N, D]` input, `[O, D]` weight, `[O]` bias.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weight);
        let (n, d) = match *x.shape() {
            [n, d] => (n, d),
            _ => {
                return Err(shape_err!(
                    "linear input must be [N, D], got {:?}",
                    x.shape()
                ))
            }
        };
        let o = match *wt.shape() {
            [o, wd] if wd == d => o,
            _ => {
                return Err(shape_err!(
                    "linear weight {:?} does not fit input {:?}",
                    wt.shape(),
                    x.shape()
                ))
            }
        };
        if self.shape(bias) != [o] {
            return Err(shape_err!(
                "linear bias {:?} expected [{o}]",
                self.shape(bias)
            ));
        }
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(b);
        }
        gemm(n, d, o, x.data(), false, wt.data(), true, &mut out, 1.0);
        let value = Tensor::new(vec![n, o], out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let value = self.value(input).map(f);
        let rg = self.rg(input);
        self.push(value, op, rg)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f32) -> Var {
        self.unary(
            input,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu { input, slope },
        )
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.leaky_relu(input, 0.0)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, sigmoid, Op::Sigmoid(input))
    }

    pub fn exp(&mut self, input: Var) -> Var {
        self.unary(input, f32::exp, Op::Exp(input))
    }

    /// `ln(clamp(x, eps, 1 - eps))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, input: Var, eps: f32) -> Var {
        self.unary(
            input,
            |v| v.clamp(eps, 1.0 - eps).ln(),
            Op::LnClamped { input, eps },
        )
    }

    /// `ln(clamp(q, eps, 1 - eps))` with `q = sigmoid(z)`, or `1 - sigmoid(z)` when
    /// `complement` is set. The gradient is that of the unclamped log-sigmoid,
    /// so it stays nonzero when the sigmoid saturates.
    pub fn ln_sigmoid(&mut self, logit: Var, eps: f32, complement: bool) -> Var {
        self.unary(
            logit,
            |z| {
                let q = sigmoid(if complement { -z } else { z });
                q.clamp(eps, 1.0 - eps).ln()
            },
            Op::LnSigmoid {
                input: logit,
                complement,
            },
        )
    }

    /// `clamp(x, lo, hi)`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, input: Var, lo: f32, hi: f32) -> Var {
        self.unary(input, |v| v.clamp(lo, hi), Op::Clamp { input, lo, hi })
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: f32, shift: f32) -> Var {
        self.unary(input, |v| scale * v + shift, Op::Affine { input, scale })
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        self.affine(input, factor, 0.0)
    }

    pub fn sqr(&mut self, input: Var) -> Var {
        self.unary(input, |v| v * v, Op::Sqr(input))
    }

    pub fn abs(&mut self, input: Var) -> Var {
        self.unary(input, f32::abs, Op::Abs(input))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err!(
                "elementwise operands differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise product with a constant array (masks, per-element weights).
    pub fn mul_const(&mut self, input: Var, factor: Tensor) -> Result<Var> {
        let v = self.value(input);
        if v.shape() != factor.shape() {
            return Err(shape_err!(
                "mask {:?} does not match {:?}",
                factor.shape(),
                v.shape()
            ));
        }
        let data = v
            .data()
            .iter()
            .zip(factor.data())
            .map(|(&x, &m)| x * m)
            .collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::MulConst { input, factor }, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let total: f32 = self.value(input).data().iter().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(total), Op::Sum(input), rg)
    }

    /// Sum of several scalars (or equally shaped arrays).
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| shape_err!("add_all needs at least one term"))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Treat the input as `[rows, cols]` and average each row.
    pub fn mean_rows(&mut self, input: Var, cols: usize) -> Result<Var> {
        let v = self.value(input);
        if cols == 0 || !v.numel().is_multiple_of(cols) {
            return Err(shape_err!(
                "cannot split {:?} into rows of {cols}",
                v.shape()
            ));
        }
        let rows = v.numel() / cols;
        let data = v
            .data()
            .chunks(cols)
            .map(|r| r.iter().sum::<f32>() / cols as f32)
            .collect();
        let value = Tensor::new(vec![rows], data)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::MeanRows { input, cols }, rg))
    }

    /// Pick elements by flat index; the result has shape `shape`.
    pub fn gather(&mut self, input: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(input);
        let n = v.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(shape_err!(
                "gather index {bad} out of range for {n} elements"
            ));
        }
        let data = indices.iter().map(|&i| v.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Gather { input, indices }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    pub fn custom(&mut self, input: Var, op: Arc<dyn CustomUnaryOp>) -> Result<Var> {
        let value = op.forward(self.value(input));
        if value.shape() != self.shape(input) {
            return Err(shape_err!(
                "custom op `{}` changed shape {:?} -> {:?}",
                op.name(),
                self.shape(input),
                value.shape()
            ));
        }
        let rg = self.rg(input);
        Ok(self.push(value, Op::Custom { input, op }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn elementwise_grad(&self, input: Var, g: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .zip(g.data())
            .map(|(&x, &g)| f(x, g))
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => self.conv2d_backward(*input, *weight, *bias, geom, cols, g, grads)?,
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let o = wt.shape()[0];
                if self.rg(*input) {
                    let mut dx = vec![0.0; n * d];
                    gemm(n, o, d, g.data(), false, wt.data(), false, &mut dx, 0.0);
                    self.accumulate(grads, *input, Tensor::new(vec![n, d], dx)?);
                }
                if self.rg(*weight) {
                    let mut dw = vec![0.0; o * d];
                    gemm(o, n, d, g.data(), true, x.data(), false, &mut dw, 0.0);
                    self.accumulate(grads, *weight, Tensor::new(vec![o, d], dw)?);
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; o];
                    for row in g.data().chunks(o) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(vec![o], db)?);
                }
            }
            Op::LeakyRelu { input, slope } => {
                let s = *slope;
                let dx = self.elementwise_grad(*input, g, |x, g| if x > 0.0 { g } else { s * g });
                self.accumulate(grads, *input, dx);
            }
            Op::Sigmoid(input) => {
                let out = &node.value;
                let data = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *input, Tensor::new(out.shape().to_vec(), data)?);
            }
            Op::Exp(input) => {
                let out = &node.value;
                let data = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &g)| g * y)
                    .collect();
                self.accumulate(grads, *input, Tensor::new(out.shape().to_vec(), data)?);
            }
            Op::LnClamped { input, eps } => {
                let e = *eps;
                let dx = self.elementwise_grad(*input, g, |x, g| {
                    if x < e || x > 1.0 - e {
                        0.0
                    } else {
                        g / x
                    }
                });
                self.accumulate(grads, *input, dx);
            }
            Op::LnSigmoid { input, complement } => {
                let dx = if *complement {
                    self.elementwise_grad(*input, g, |z, g| -g * sigmoid(z))
                } else {
                    self.elementwise_grad(*input, g, |z, g| g * sigmoid(-z))
                };
                self.accumulate(grads, *input, dx);
            }
            Op::Clamp { input, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let dx =
                    self.elementwise_grad(*input, g, |x, g| if x < lo || x > hi { 0.0 } else { g });
                self.accumulate(grads, *input, dx);
            }
            Op::Affine { input, scale } => {
                self.accumulate(grads, *input, g.map(|v| v * scale));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = vb.data().iter().zip(g.data()).map(|(y, g)| y * g).collect();
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), d)?);
                }
                if self.rg(*b) {
                    let d = va.data().iter().zip(g.data()).map(|(x, g)| x * g).collect();
                    self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), d)?);
                }
            }
            Op::MulConst { input, factor } => {
                let d = factor
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(m, g)| m * g)
                    .collect();
                self.accumulate(grads, *input, Tensor::new(factor.shape().to_vec(), d)?);
            }
            Op::Sqr(input) => {
                let dx = self.elementwise_grad(*input, g, |x, g| 2.0 * x * g);
                self.accumulate(grads, *input, dx);
            }
            Op::Abs(input) => {
                let dx = self.elementwise_grad(*input, g, |x, g| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *input, dx);
            }
            Op::Sum(input) => {
                let g0 = g.data()[0];
                self.accumulate(grads, *input, Tensor::full(self.shape(*input).to_vec(), g0));
            }
            Op::MeanRows { input, cols } => {
                let c = *cols;
                let mut d = Vec::with_capacity(self.value(*input).numel());
                for &gr in g.data() {
                    d.extend(std::iter::repeat_n(gr / c as f32, c));
                }
                self.accumulate(grads, *input, Tensor::new(self.shape(*input).to_vec(), d)?);
            }
            Op::Gather { input, indices } => {
                let mut d = Tensor::zeros(self.shape(*input).to_vec());
                let dd = d.data_mut();
                for (&i, &gv) in indices.iter().zip(g.data()) {
                    dd[i] += gv;
                }
                self.accumulate(grads, *input, d);
            }
            Op::Reshape(input) => {
                let d = g.clone().reshape(self.shape(*input).to_vec())?;
                self.accumulate(grads, *input, d);
            }
            Op::Custom { input, op } => {
                let d = op.backward(self.value(*input), &node.value, g);
                if d.shape() != self.shape(*input) {
                    return Err(shape_err!(
                        "custom op `{}` returned gradient of shape {:?}",
                        op.name(),
                        d.shape()
                    ));
                }
                self.accumulate(grads, *input, d);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        geom: &ConvGeom,
        cols: &[f32],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let plen = geom.patch_len();
        let npix = geom.out_pixels();
        let in_len = geom.cin * geom.h * geom.w;
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let gd = g.data();

        if self.rg(weight) {
            let mut dw = vec![0.0f32; geom.cout * plen];
            let mut scratch = Vec::new();
            for bi in 0..geom.batch {
                let gb = &gd[bi * geom.cout * npix..(bi + 1) * geom.cout * npix];
                let cb: &[f32] = if geom.is_pointwise() {
                    &x[bi * in_len..(bi + 1) * in_len]
                } else if !cols.is_empty() {
                    &cols[bi * plen * npix..(bi + 1) * plen * npix]
                } else {
                    scratch.resize(plen * npix, 0.0);
                    im2col(&x[bi * in_len..(bi + 1) * in_len], geom, &mut scratch);
                    &scratch
                };
                gemm(geom.cout, npix, plen, gb, false, cb, true, &mut dw, 1.0);
            }
            self.accumulate(grads, weight, Tensor::new(self.shape(weight).to_vec(), dw)?);
        }
        if self.rg(bias) {
            let mut db = vec![0.0f32; geom.cout];
            for bi in 0..geom.batch {
                for (co, acc) in db.iter_mut().enumerate() {
                    let off = (bi * geom.cout + co) * npix;
                    *acc += gd[off..off + npix].iter().sum::<f32>();
                }
            }
            self.accumulate(grads, bias, Tensor::new(vec![geom.cout], db)?);
        }
        if self.rg(input) {
            let mut dx = vec![0.0f32; geom.batch * in_len];
            let mut dcols = vec![0.0f32; plen * npix];
            for bi in 0..geom.batch {
                let gb = &gd[bi * geom.cout * npix..(bi + 1) * geom.cout * npix];
                let dxb = &mut dx[bi * in_len..(bi + 1) * in_len];
                if geom.is_pointwise() {
                    gemm(plen, geom.cout, npix, wt, true, gb, false, dxb, 0.0);
                } else {
                    gemm(plen, geom.cout, npix, wt, true, gb, false, &mut dcols, 0.0);
                    col2im(&dcols, geom, dxb);
                }
            }
            self.accumulate(grads, input, Tensor::new(self.shape(input).to_vec(), dx)?);
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of every parameter bound into `graph`, keyed by name.
    /// Parameters the loss does not depend on get an all-zero entry.
    pub fn params(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        graph
            .bound_params()
            .map(|(name, v)| {
                let g = self
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.shape(v).to_vec()));
                (name.to_string(), g)
            })
            .collect()
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let npix = g.out_pixels();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * npix..][..npix];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let npix = g.out_pixels();
    x.fill(0.0);
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * npix..][..npix];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in row[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `C = A·B + beta·C` with `A` logically `[m, k]` and `B` logically `[k, n]`.
/// A `*_t` flag means the operand is stored transposed (row-major `[k, m]` / `[n, k]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every access made with these strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
