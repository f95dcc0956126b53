//! Layer definitions with forward and backward passes.
//!
//! Activations are batch-leading. Spatial layers read their input as
//! `[batch, height, width, channels]` (row-major NHWC); fully-connected layers
//! flatten everything after the batch extent.

mod conv;
mod fc;
mod pool;

use std::fmt;
use std::str::FromStr;

use crate::error::{cfg_err, dim_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{ElementwiseFn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    Identity,
}

impl Activation {
    pub fn forward_fn(self) -> ElementwiseFn {
        match self {
            Activation::Sigmoid => ElementwiseFn::Sigmoid,
            Activation::Relu => ElementwiseFn::Relu,
            Activation::Identity => ElementwiseFn::Identity,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(cfg_err!("unknown activation `{other}`")),
        }
    }
}

/// Receptive-field geometry shared by convolutional and locally-connected layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub filter_h: usize,
    pub filter_w: usize,
    pub stride: usize,
    pub channels_out: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Fc,
    Conv2d(Window),
    Local2d(Window),
    MaxPool2d {
        window_h: usize,
        window_w: usize,
        stride: usize,
    },
    Activation,
}

impl LayerKind {
    fn tag(&self) -> &'static str {
        match self {
            LayerKind::Fc => "fc",
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::Local2d(_) => "local2d",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::Activation => "activation",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Per-sample input shape (no batch extent).
    pub in_shape: Vec<usize>,
    /// Per-sample output shape, derived from `in_shape` and the kind.
    pub out_shape: Vec<usize>,
    pub activation: Activation,
    /// Index of the fc layer whose weight block is this layer's transpose.
    pub tied_to: Option<usize>,
}

/// Output extent and leading padding for "same" padding at a given stride.
pub(crate) fn same_padding(input: usize, filter: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + filter).saturating_sub(input);
    (out, total / 2)
}

/// Pooling output extent; windows hanging over the edge are kept (ceil mode),
/// but every window starts inside the input.
pub(crate) fn pool_extent(input: usize, window: usize, stride: usize) -> usize {
    let covering = if input <= window { 1 } else { (input - window).div_ceil(stride) + 1 };
    covering.min((input - 1) / stride + 1)
}

fn spatial(in_shape: &[usize], name: &str) -> Result<(usize, usize, usize)> {
    match *in_shape {
        [h, w, c] if h > 0 && w > 0 && c > 0 => Ok((h, w, c)),
        _ => Err(dim_err!(
            "layer `{name}` needs an [height, width, channels] input, got {in_shape:?}"
        )),
    }
}

impl LayerSpec {
    pub fn fc(name: &str, in_shape: &[usize], outputs: usize, activation: Activation) -> Result<Self> {
        if outputs == 0 || in_shape.is_empty() || in_shape.contains(&0) {
            return Err(dim_err!("fc layer `{name}`: bad sizes {in_shape:?} -> {outputs}"));
        }
        Ok(LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Fc,
            in_shape: in_shape.to_vec(),
            out_shape: vec![outputs],
            activation,
            tied_to: None,
        })
    }

    fn windowed(name: &str, in_shape: &[usize], window: Window, local: bool, activation: Activation) -> Result<Self> {
        let (h, w, _) = spatial(in_shape, name)?;
        if window.filter_h == 0 || window.filter_w == 0 || window.stride == 0 || window.channels_out == 0 {
            return Err(cfg_err!("layer `{name}`: filter, stride and channels must be positive"));
        }
        let (oh, _) = same_padding(h, window.filter_h, window.stride);
        let (ow, _) = same_padding(w, window.filter_w, window.stride);
        Ok(LayerSpec {
            name: name.to_string(),
            kind: if local {
                LayerKind::Local2d(window)
            } else {
                LayerKind::Conv2d(window)
            },
            in_shape: in_shape.to_vec(),
            out_shape: vec![oh, ow, window.channels_out],
            activation,
            tied_to: None,
        })
    }

    pub fn conv2d(name: &str, in_shape: &[usize], window: Window, activation: Activation) -> Result<Self> {
        Self::windowed(name, in_shape, window, false, activation)
    }

    pub fn local2d(name: &str, in_shape: &[usize], window: Window, activation: Activation) -> Result<Self> {
        Self::windowed(name, in_shape, window, true, activation)
    }

    pub fn maxpool2d(name: &str, in_shape: &[usize], window_h: usize, window_w: usize, stride: usize) -> Result<Self> {
        let (h, w, c) = spatial(in_shape, name)?;
        if window_h == 0 || window_w == 0 || stride == 0 {
            return Err(cfg_err!("pool `{name}`: window and stride must be positive"));
        }
        Ok(LayerSpec {
            name: name.to_string(),
            kind: LayerKind::MaxPool2d {
                window_h,
                window_w,
                stride,
            },
            in_shape: in_shape.to_vec(),
            out_shape: vec![pool_extent(h, window_h, stride), pool_extent(w, window_w, stride), c],
            activation: Activation::Identity,
            tied_to: None,
        })
    }

    pub fn activation(name: &str, in_shape: &[usize], activation: Activation) -> Result<Self> {
        if in_shape.is_empty() || in_shape.contains(&0) {
            return Err(dim_err!("activation `{name}`: bad shape {in_shape:?}"));
        }
        Ok(LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Activation,
            in_shape: in_shape.to_vec(),
            out_shape: in_shape.to_vec(),
            activation,
            tied_to: None,
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_shape.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Fc | LayerKind::Conv2d(_) | LayerKind::Local2d(_)
        )
    }

    /// Shapes of (weights, optional bias) for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Option<Vec<usize>>)> {
        match self.kind {
            LayerKind::Fc => Some((vec![self.out_len(), self.in_len() + 1], None)),
            LayerKind::Conv2d(w) => Some((
                vec![w.channels_out, self.in_shape[2], w.filter_h, w.filter_w],
                Some(vec![w.channels_out]),
            )),
            LayerKind::Local2d(w) => {
                let positions = self.out_shape[0] * self.out_shape[1];
                Some((
                    vec![positions, w.channels_out, self.in_shape[2], w.filter_h, w.filter_w],
                    Some(vec![positions, w.channels_out]),
                ))
            }
            _ => None,
        }
    }

    /// Uniform `[-r, r]` weights with `r = sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init_params(&self, rng: &mut Rng) -> Option<LayerParams> {
        let (wshape, bshape) = self.param_shapes()?;
        let (fan_in, fan_out) = match self.kind {
            LayerKind::Fc => (self.in_len(), self.out_len()),
            LayerKind::Conv2d(w) | LayerKind::Local2d(w) => {
                let area = w.filter_h * w.filter_w;
                (self.in_shape[2] * area, w.channels_out * area)
            }
            _ => unreachable!(),
        };
        let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut weights = Tensor::zeros(&wshape);
        match self.kind {
            LayerKind::Fc => {
                let cols = self.in_len() + 1;
                for (i, v) in weights.data_mut().iter_mut().enumerate() {
                    if i % cols != cols - 1 {
                        *v = rng.uniform_range(-r, r);
                    }
                }
            }
            _ => {
                for v in weights.data_mut() {
                    *v = rng.uniform_range(-r, r);
                }
            }
        }
        Some(LayerParams {
            weights,
            bias: bshape.map(|s| Tensor::zeros(&s)),
        })
    }
}

/// Trainable parameters of one layer. Fully-connected layers keep their bias as
/// the last weight column and have `bias == None`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

impl LayerParams {
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        std::iter::once(&self.weights).chain(self.bias.as_ref())
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        std::iter::once(&mut self.weights).chain(self.bias.as_mut())
    }

    pub fn zeros_like(&self) -> LayerParams {
        LayerParams {
            weights: Tensor::zeros(self.weights.shape()),
            bias: self.bias.as_ref().map(|b| Tensor::zeros(b.shape())),
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn check_against(&self, spec: &LayerSpec) -> Result<()> {
        let Some((wshape, bshape)) = spec.param_shapes() else {
            return Err(dim_err!("layer `{}` takes no parameters", spec.name));
        };
        let bias_ok = match (&self.bias, &bshape) {
            (None, None) => true,
            (Some(b), Some(s)) => b.shape() == s.as_slice(),
            _ => false,
        };
        if self.weights.shape() != wshape.as_slice() || !bias_ok {
            return Err(dim_err!(
                "parameters for layer `{}` have shape {:?}, expected {:?}",
                spec.name,
                self.weights.shape(),
                wshape
            ));
        }
        Ok(())
    }
}

/// Intermediate values saved by [`forward`] for the matching [`backward`] call.
#[derive(Clone, Debug)]
pub struct Cache {
    layer: String,
    kind: &'static str,
    input: Option<Tensor>,
    input_shape: Vec<usize>,
    pre_activation: Option<Tensor>,
    output: Tensor,
    winners: Vec<usize>,
}

impl Cache {
    /// The layer's (post-activation) output.
    pub fn output(&self) -> &Tensor {
        &self.output
    }

    pub fn into_output(self) -> Tensor {
        self.output
    }
}

/// Gradients produced by [`backward`].
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub input: Option<Tensor>,
    pub params: Option<LayerParams>,
}

fn check_input(spec: &LayerSpec, input: &Tensor) -> Result<usize> {
    if input.rank() < 2 || input.row_len() != spec.in_len() {
        return Err(dim_err!(
            "layer `{}` expects [batch, {:?}], got {:?}",
            spec.name,
            spec.in_shape,
            input.shape()
        ));
    }
    Ok(input.rows())
}

fn batched(batch: usize, shape: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(shape.len() + 1);
    s.push(batch);
    s.extend_from_slice(shape);
    s
}

fn apply_activation(act: Activation, pre: &[f64]) -> Vec<f64> {
    let f = act.forward_fn();
    pre.iter().map(|&x| f.eval(x)).collect()
}

/// Runs one layer on a batch.
pub fn forward(spec: &LayerSpec, params: Option<&LayerParams>, input: &Tensor) -> Result<(Tensor, Cache)> {
    let batch = check_input(spec, input)?;
    let out_shape = batched(batch, &spec.out_shape);
    let mut winners = Vec::new();
    let pre: Vec<f64> = match spec.kind {
        LayerKind::Fc | LayerKind::Conv2d(_) | LayerKind::Local2d(_) => {
            let p = params.ok_or_else(|| dim_err!("layer `{}` is missing parameters", spec.name))?;
            p.check_against(spec)?;
            match spec.kind {
                LayerKind::Fc => fc::forward(spec.in_len(), spec.out_len(), &p.weights, input.data(), batch),
                LayerKind::Conv2d(w) => conv::forward(spec, w, false, p, input.data(), batch),
                LayerKind::Local2d(w) => conv::forward(spec, w, true, p, input.data(), batch),
                _ => unreachable!(),
            }
        }
        LayerKind::MaxPool2d {
            window_h,
            window_w,
            stride,
        } => {
            let (out, win) = pool::forward(spec, window_h, window_w, stride, input.data(), batch);
            winners = win;
            out
        }
        LayerKind::Activation => input.data().to_vec(),
    };
    let keep_pre = spec.activation == Activation::Relu;
    let output = match spec.activation {
        Activation::Identity => pre.clone(),
        act => apply_activation(act, &pre),
    };
    let output = Tensor::checked(&spec.name, out_shape.clone(), output)?;
    let pre_activation = if keep_pre {
        Some(Tensor::checked(&spec.name, out_shape, pre)?)
    } else {
        None
    };
    let input_kept = match spec.kind {
        LayerKind::Fc | LayerKind::Conv2d(_) | LayerKind::Local2d(_) => Some(input.clone()),
        _ => None,
    };
    let cache = Cache {
        layer: spec.name.clone(),
        kind: spec.kind.tag(),
        input: input_kept,
        input_shape: input.shape().to_vec(),
        pre_activation,
        output: output.clone(),
        winners,
    };
    Ok((output, cache))
}

/// Back-propagates `grad_out` through one layer.
pub fn backward(spec: &LayerSpec, params: Option<&LayerParams>, cache: &Cache, grad_out: &Tensor) -> Result<LayerGrads> {
    backward_impl(spec, params, cache, grad_out, true)
}

pub(crate) fn backward_impl(
    spec: &LayerSpec,
    params: Option<&LayerParams>,
    cache: &Cache,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<LayerGrads> {
    if cache.layer != spec.name || cache.kind != spec.kind.tag() {
        return Err(Error::Usage(format!(
            "cache from layer `{}` ({}) used for layer `{}` ({})",
            cache.layer,
            cache.kind,
            spec.name,
            spec.kind.tag()
        )));
    }
    if grad_out.shape() != cache.output.shape() {
        return Err(Error::Usage(format!(
            "layer `{}`: gradient shape {:?} does not match cached output {:?}",
            spec.name,
            grad_out.shape(),
            cache.output.shape()
        )));
    }
    let batch = cache.input_shape[0];
    let dz: Vec<f64> = match spec.activation {
        Activation::Identity => grad_out.data().to_vec(),
        Activation::Sigmoid => grad_out
            .data()
            .iter()
            .zip(cache.output.data())
            .map(|(g, &y)| g * ElementwiseFn::SigmoidDerivFromOutput.eval(y))
            .collect(),
        Activation::Relu => {
            let pre = cache
                .pre_activation
                .as_ref()
                .ok_or_else(|| Error::Usage(format!("layer `{}`: cache lacks pre-activations", spec.name)))?;
            grad_out
                .data()
                .iter()
                .zip(pre.data())
                .map(|(g, &z)| g * ElementwiseFn::ReluDerivFromInput.eval(z))
                .collect()
        }
    };
    let (input_grad, param_grads) = match spec.kind {
        LayerKind::Fc | LayerKind::Conv2d(_) | LayerKind::Local2d(_) => {
            let p = params.ok_or_else(|| dim_err!("layer `{}` is missing parameters", spec.name))?;
            p.check_against(spec)?;
            let input = cache
                .input
                .as_ref()
                .ok_or_else(|| Error::Usage(format!("layer `{}`: cache lacks input", spec.name)))?;
            match spec.kind {
                LayerKind::Fc => {
                    let (dx, dw) = fc::backward(spec.in_len(), spec.out_len(), &p.weights, input.data(), &dz, batch, need_input_grad);
                    (dx, Some(LayerParams { weights: dw, bias: None }))
                }
                LayerKind::Conv2d(w) | LayerKind::Local2d(w) => {
                    let local = matches!(spec.kind, LayerKind::Local2d(_));
                    let (dx, grads) = conv::backward(spec, w, local, p, input.data(), &dz, batch, need_input_grad);
                    (dx, Some(grads))
                }
                _ => unreachable!(),
            }
        }
        LayerKind::MaxPool2d { .. } => (Some(pool::backward(spec.in_len(), &cache.winners, &dz, batch)), None),
        LayerKind::Activation => (Some(dz), None),
    };
    let input = match input_grad {
        Some(d) if need_input_grad => Some(Tensor::checked(&spec.name, cache.input_shape.clone(), d)?),
        _ => None,
    };
    if let Some(g) = &param_grads {
        for t in g.tensors() {
            Tensor::checked(&spec.name, t.shape().to_vec(), t.data().to_vec())?;
        }
    }
    Ok(LayerGrads {
        input,
        params: param_grads,
    })
}

/// Symmetrizes a tied pair of weight blocks: the shared block is the mean of `a` and
/// `bᵀ`, returned as `(shared, sharedᵀ)`.
pub fn enforce_tie(a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, n) = match (a.shape(), b.shape()) {
        (&[m, n], &[n2, m2]) if m == m2 && n == n2 => (m, n),
        (sa, sb) => return Err(dim_err!("cannot tie blocks of shapes {sa:?} and {sb:?}")),
    };
    let mut shared = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            shared[i * n + j] = 0.5 * (a.data()[i * n + j] + b.data()[j * m + i]);
        }
    }
    let shared_t = crate::tensor::transpose_block(m, n, &shared, n);
    Ok((
        Tensor::checked("enforce_tie", vec![m, n], shared)?,
        Tensor::checked("enforce_tie", vec![n, m], shared_t)?,
    ))
}

/// Extracts the weight block (bias column dropped) of an fc weight matrix.
pub fn fc_block(weights: &Tensor) -> Tensor {
    let (rows, cols) = (weights.shape()[0], weights.shape()[1]);
    let mut data = Vec::with_capacity(rows * (cols - 1));
    for r in 0..rows {
        data.extend_from_slice(&weights.data()[r * cols..r * cols + cols - 1]);
    }
    Tensor::from_parts(vec![rows, cols - 1], data)
}

pub(crate) fn set_fc_block(weights: &mut Tensor, block: &Tensor) {
    let (rows, cols) = (weights.shape()[0], weights.shape()[1]);
    debug_assert_eq!(block.shape(), &[rows, cols - 1]);
    for r in 0..rows {
        weights.data_mut()[r * cols..r * cols + cols - 1]
            .copy_from_slice(&block.data()[r * (cols - 1)..(r + 1) * (cols - 1)]);
    }
}

/// Applies [`enforce_tie`] to two fc layers, leaving both bias columns alone.
pub fn tie_fc_params(a: &mut LayerParams, b: &mut LayerParams) -> Result<()> {
    let (sa, sb) = enforce_tie(&fc_block(&a.weights), &fc_block(&b.weights))?;
    set_fc_block(&mut a.weights, &sa);
    set_fc_block(&mut b.weights, &sb);
    Ok(())
}
