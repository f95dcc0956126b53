//! Network assembly for the class-encoder, the CEC, its softmax-only baseline
//! and the DCEC, with the paired forward/backward pass and layer-wise
//! pre-training.

mod arch;
mod pretrain;

pub use arch::{
    build_cec, build_class_encoder, build_classifier, build_dcec, dcec_layout, dcec_shape_audit, Architecture, CnnLayer,
    ModelKind,
};
pub(crate) use arch::parse_bool;
pub use pretrain::{pretrain_layerwise, PretrainMethod, PretrainOptions, PretrainReport};

use std::ops::Range;
use std::str::FromStr;

use crate::data::PairBatch;
use crate::error::{cfg_err, dim_err, Error, Result};
use crate::layers::{self, fc_block, set_fc_block, tie_fc_params, Cache, LayerKind, LayerParams, LayerSpec};
use crate::objectives::{class_encoder_cost, softmax, softmax_cross_entropy, Components, CostValue};
use crate::rng::Rng;
use crate::tensor::{argmax_rows, transpose_block, Tensor};

/// Rows per chunk for inference over whole datasets.
const INFERENCE_CHUNK: usize = 256;

/// Where the heads sit in the layer list. Layers `0..encoder_end` form the
/// encoder; the softmax head and the decoder both read the encoder output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Heads {
    pub encoder_end: usize,
    pub softmax: Option<usize>,
    pub decoder: Option<Range<usize>>,
    /// Encoder layer whose output is the reconstruction target (DCEC `h1`);
    /// `None` means the raw input is the target.
    pub target: Option<usize>,
}

/// Which pair members feed the softmax cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxMembers {
    /// Both members, cross-entropies averaged.
    Both,
    /// Only `x′`.
    First,
}

impl FromStr for SoftmaxMembers {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(SoftmaxMembers::Both),
            "first" => Ok(SoftmaxMembers::First),
            other => Err(cfg_err!("softmax_members must be `both` or `first`, got `{other}`")),
        }
    }
}

impl SoftmaxMembers {
    pub fn name(self) -> &'static str {
        match self {
            SoftmaxMembers::Both => "both",
            SoftmaxMembers::First => "first",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    /// Weight of the reconstruction term. A pure class-encoder ignores it and
    /// uses the reconstruction cost alone.
    pub lambda: f64,
    pub softmax_members: SoftmaxMembers,
    /// Treat the reconstruction target as a constant (no gradient into `x″`'s path).
    pub detach_target: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            lambda: 0.1,
            softmax_members: SoftmaxMembers::Both,
            detach_target: false,
        }
    }
}

/// Per-layer parameter gradients, aligned with [`Network::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<LayerParams>>,
}

/// Head outputs of one paired forward pass.
#[derive(Clone, Debug)]
pub struct PairOutputs {
    /// Decoder output from `x′`.
    pub recon: Option<Tensor>,
    /// Reconstruction target from `x″` (raw input, or `h1″` for a DCEC).
    pub target: Option<Tensor>,
    /// Softmax-head logits from `x′`.
    pub logits: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Architecture,
    specs: Vec<LayerSpec>,
    params: Vec<Option<LayerParams>>,
    heads: Heads,
    ties: Vec<(usize, usize)>,
}

type Trace = Vec<Option<Cache>>;

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn scaled(mut t: Tensor, factor: f64) -> Tensor {
    if factor != 1.0 {
        t.scale_in_place(factor);
    }
    t
}

impl Network {
    pub(crate) fn initialize(
        arch: Architecture,
        specs: Vec<LayerSpec>,
        heads: Heads,
        ties: Vec<(usize, usize)>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let params: Vec<Option<LayerParams>> = specs.iter().map(|s| s.init_params(rng)).collect();
        let mut specs = specs;
        for &(a, b) in &ties {
            specs[b].tied_to = Some(a);
        }
        let mut net = Network {
            arch,
            specs,
            params,
            heads,
            ties,
        };
        net.mirror_ties();
        Ok(net)
    }

    /// Overwrites the second layer of every tied pair with the transpose of the
    /// first (bias columns untouched).
    pub(crate) fn mirror_ties(&mut self) {
        for &(a, b) in &self.ties {
            let block = fc_block(&self.params[a].as_ref().expect("tied layer has params").weights);
            let (m, n) = (block.shape()[0], block.shape()[1]);
            let mirrored = Tensor::from_parts(vec![n, m], transpose_block(m, n, block.data(), n));
            set_fc_block(&mut self.params[b].as_mut().expect("tied layer has params").weights, &mirrored);
        }
    }

    /// Rebuilds a network from its architecture and a full parameter list.
    pub fn from_parts(arch: Architecture, params: Vec<Option<LayerParams>>) -> Result<Self> {
        let (specs, heads, ties) = arch.layout()?;
        if params.len() != specs.len() {
            return Err(dim_err!("{} parameter slots for {} layers", params.len(), specs.len()));
        }
        for (spec, p) in specs.iter().zip(&params) {
            match (spec.has_params(), p) {
                (true, Some(p)) => p.check_against(spec)?,
                (false, None) => {}
                _ => return Err(dim_err!("parameter presence does not match layer `{}`", spec.name)),
            }
        }
        let mut specs = specs;
        for &(a, b) in &ties {
            specs[b].tied_to = Some(a);
        }
        Ok(Network {
            arch,
            specs,
            params,
            heads,
            ties,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn kind(&self) -> ModelKind {
        self.arch.kind()
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn heads(&self) -> &Heads {
        &self.heads
    }

    pub fn ties(&self) -> &[(usize, usize)] {
        &self.ties
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    /// Direct parameter access. Callers that touch a tied layer should call
    /// [`Network::enforce_ties`] afterwards.
    pub fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().flatten().map(LayerParams::num_values).sum()
    }

    pub fn input_len(&self) -> usize {
        self.specs[0].in_len()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.arch.num_classes()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.specs.iter().map(|s| s.name.as_str()).collect()
    }

    /// Name of the encoder output layer (the code layer).
    pub fn code_layer(&self) -> &str {
        &self.specs[self.heads.encoder_end - 1].name
    }

    /// Re-symmetrizes every tied pair.
    pub fn enforce_ties(&mut self) -> Result<()> {
        for &(a, b) in &self.ties {
            let (lo, hi) = self.params.split_at_mut(b);
            tie_fc_params(lo[a].as_mut().expect("tied"), hi[0].as_mut().expect("tied"))?;
        }
        Ok(())
    }

    /// Layers on the path from the input to `layer`, in execution order.
    fn path_to(&self, layer: usize) -> Vec<usize> {
        let e = self.heads.encoder_end;
        if layer < e {
            return (0..=layer).collect();
        }
        let mut path: Vec<usize> = (0..e).collect();
        if Some(layer) == self.heads.softmax {
            path.push(layer);
        } else if let Some(dec) = &self.heads.decoder {
            path.extend(dec.start..=layer);
        }
        path
    }

    fn parent(&self, layer: usize) -> Option<usize> {
        let e = self.heads.encoder_end;
        if layer == 0 {
            None
        } else if layer < e || self.heads.decoder.as_ref().is_some_and(|d| layer > d.start) {
            Some(layer - 1)
        } else {
            Some(e - 1)
        }
    }

    fn run(&self, layers: &[usize], input: &Tensor, mut trace: Option<&mut Trace>) -> Result<Tensor> {
        let mut x: Option<Tensor> = None;
        for &i in layers {
            let (out, cache) = layers::forward(&self.specs[i], self.params[i].as_ref(), x.as_ref().unwrap_or(input))?;
            if let Some(t) = trace.as_deref_mut() {
                t[i] = Some(cache);
            }
            x = Some(out);
        }
        Ok(x.unwrap_or_else(|| input.clone()))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() < 2 || x.row_len() != self.input_len() {
            return Err(dim_err!(
                "network expects [batch, {:?}] input, got {:?}",
                self.specs[0].in_shape,
                x.shape()
            ));
        }
        Ok(())
    }

    fn run_chunked(&self, x: &Tensor, layer: usize) -> Result<Tensor> {
        self.check_input(x)?;
        let path = self.path_to(layer);
        let n = x.rows();
        let width = self.specs[layer].out_len();
        let mut data = Vec::with_capacity(n * width);
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let idx: Vec<usize> = (start..(start + INFERENCE_CHUNK).min(n)).collect();
            let out = self.run(&path, &x.select_rows(&idx)?, None)?;
            data.extend_from_slice(out.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.specs[layer].out_shape);
        Tensor::new(shape, data)
    }

    /// Activations of the named layer for every row of `x`.
    pub fn features(&self, x: &Tensor, layer: &str) -> Result<Tensor> {
        let idx = self.layer_index(layer).ok_or_else(|| {
            cfg_err!("unknown layer `{layer}`; valid layers: {}", self.layer_names().join(", "))
        })?;
        self.run_chunked(x, idx)
    }

    /// Class probabilities and predicted labels from the softmax head only.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let s = self
            .heads
            .softmax
            .ok_or_else(|| cfg_err!("a {} network has no softmax head", self.kind()))?;
        let probs = softmax(&self.run_chunked(x, s)?)?;
        let labels = argmax_rows(&probs)?;
        Ok((probs, labels))
    }

    /// Decoder outputs of `x` together with `x`'s own reconstruction targets.
    pub fn self_reconstruction(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let dec = self
            .heads
            .decoder
            .clone()
            .ok_or_else(|| cfg_err!("a {} network has no decoder", self.kind()))?;
        let recon = self.run_chunked(x, dec.end - 1)?;
        let target = match self.heads.target {
            Some(t) => self.run_chunked(x, t)?,
            None => x.flatten_rows(),
        };
        Ok((recon, target))
    }

    /// `z′` from `x′`'s full path, the target from `x″`'s path truncated at the
    /// target layer, and logits from `x′`.
    pub fn forward_pair(&self, x1: &Tensor, x2: &Tensor) -> Result<PairOutputs> {
        self.check_input(x1)?;
        self.check_input(x2)?;
        if x1.rows() != x2.rows() {
            return Err(dim_err!("pair members have {} and {} rows", x1.rows(), x2.rows()));
        }
        let e = self.heads.encoder_end;
        let encoder: Vec<usize> = (0..e).collect();
        let code = self.run(&encoder, x1, None)?;
        let logits = match self.heads.softmax {
            Some(s) => Some(self.run(&[s], &code, None)?),
            None => None,
        };
        let (recon, target) = match &self.heads.decoder {
            Some(dec) => {
                let dec: Vec<usize> = dec.clone().collect();
                let recon = self.run(&dec, &code, None)?;
                let target = match self.heads.target {
                    Some(t) => self.run(&self.path_to(t), x2, None)?,
                    None => x2.flatten_rows(),
                };
                (Some(recon), Some(target))
            }
            None => (None, None),
        };
        Ok(PairOutputs { recon, target, logits })
    }

    /// Reconstruction targets of `x` under the current parameters (used to
    /// freeze a detached target for gradient checking).
    pub fn targets(&self, x: &Tensor) -> Result<Tensor> {
        match self.heads.target {
            Some(t) => self.run(&self.path_to(t), x, None),
            None => Ok(x.flatten_rows()),
        }
    }

    /// Paired cost without gradients.
    pub fn loss(&self, batch: &PairBatch, opts: &LossOptions, fixed_target: Option<&Tensor>) -> Result<CostValue> {
        Ok(self.compute(batch, opts, fixed_target, false)?.0)
    }

    /// Paired cost and its gradient with respect to every parameter. Tied pairs
    /// receive the summed gradient `g_a + g_bᵀ` on both sides.
    ///
    /// `fixed_target` replaces the target computed from `x″`; it is only
    /// meaningful together with `detach_target`.
    pub fn loss_and_grad(
        &self,
        batch: &PairBatch,
        opts: &LossOptions,
        fixed_target: Option<&Tensor>,
    ) -> Result<(CostValue, Gradients)> {
        let (cost, grads) = self.compute(batch, opts, fixed_target, true)?;
        Ok((cost, grads.expect("gradients requested")))
    }

    fn compute(
        &self,
        batch: &PairBatch,
        opts: &LossOptions,
        fixed_target: Option<&Tensor>,
        want_grads: bool,
    ) -> Result<(CostValue, Option<Gradients>)> {
        self.check_input(&batch.x1)?;
        self.check_input(&batch.x2)?;
        if batch.x1.rows() != batch.labels.len() || batch.x2.rows() != batch.labels.len() {
            return Err(dim_err!("pair batch rows do not match its {} labels", batch.labels.len()));
        }
        if opts.lambda.is_nan() || opts.lambda < 0.0 {
            return Err(cfg_err!("lambda must be >= 0, got {}", opts.lambda));
        }
        let n = self.specs.len();
        let e = self.heads.encoder_end;
        let pure_class_encoder = self.kind() == ModelKind::ClassEncoder;
        let lambda = if pure_class_encoder { 1.0 } else { opts.lambda };
        let use_recon = self.heads.decoder.is_some() && lambda != 0.0;
        let sm_first = self.heads.softmax;
        let sm_second = sm_first.filter(|_| opts.softmax_members == SoftmaxMembers::Both);
        let propagate_target = use_recon && !opts.detach_target && fixed_target.is_none();

        let encoder: Vec<usize> = (0..e).collect();
        let mut t1: Trace = vec![None; n];
        let code1 = self.run(&encoder, &batch.x1, want_grads.then_some(&mut t1))?;

        let depth2 = if sm_second.is_some() {
            e
        } else if use_recon && fixed_target.is_none() {
            self.heads.target.map_or(0, |t| t + 1)
        } else {
            0
        };
        let mut t2: Trace = vec![None; n];
        let code2 = if depth2 > 0 {
            let path: Vec<usize> = (0..depth2).collect();
            Some(self.run(&path, &batch.x2, Some(&mut t2))?)
        } else {
            None
        };
        let target = if use_recon {
            Some(match (fixed_target, self.heads.target) {
                (Some(t), _) => t.clone(),
                (None, Some(t)) => t2[t].as_ref().expect("target layer was run").output().clone(),
                (None, None) => batch.x2.flatten_rows(),
            })
        } else {
            None
        };

        let mut comps = Components {
            lambda,
            ..Components::default()
        };
        let mut g1: Vec<Option<Tensor>> = vec![None; n];
        let mut g2: Vec<Option<Tensor>> = vec![None; n];

        if let Some(s) = sm_first {
            let logits = self.run(&[s], &code1, want_grads.then_some(&mut t1))?;
            let ce1 = softmax_cross_entropy(&logits, &batch.labels)?;
            match sm_second {
                Some(_) => {
                    let code2 = code2.as_ref().expect("second member encoded");
                    let logits2 = self.run(&[s], code2, want_grads.then_some(&mut t2))?;
                    let ce2 = softmax_cross_entropy(&logits2, &batch.labels)?;
                    comps.softmax = 0.5 * (ce1.cost.total + ce2.cost.total);
                    g1[s] = Some(scaled(ce1.grad_logits, 0.5));
                    g2[s] = Some(scaled(ce2.grad_logits, 0.5));
                }
                None => {
                    comps.softmax = ce1.cost.total;
                    g1[s] = Some(ce1.grad_logits);
                }
            }
        }

        if use_recon {
            let dec: Vec<usize> = self.heads.decoder.clone().expect("decoder").collect();
            let recon = self.run(&dec, &code1, want_grads.then_some(&mut t1))?;
            let rc = class_encoder_cost(&recon, target.as_ref().expect("target computed"))?;
            comps.reconstruction = rc.cost.components.reconstruction;
            if want_grads {
                g1[dec[dec.len() - 1]] = Some(scaled(rc.grad_recon, lambda));
                if propagate_target {
                    if let Some(t) = self.heads.target {
                        accumulate(&mut g2[t], scaled(rc.grad_target, lambda));
                    }
                }
            }
        }

        let cost = CostValue::from_components(comps);
        if !cost.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite cost {}", cost.total)));
        }
        if !want_grads {
            return Ok((cost, None));
        }

        let mut grads: Vec<Option<LayerParams>> = vec![None; n];
        // Heads first (softmax then decoder, deepest first), then the encoder.
        let mut order: Vec<usize> = Vec::with_capacity(n);
        order.extend(sm_first);
        if let Some(dec) = &self.heads.decoder {
            order.extend(dec.clone().rev());
        }
        order.extend((0..e).rev());
        self.backprop(&order, &t1, &mut g1, &mut grads)?;
        self.backprop(&order, &t2, &mut g2, &mut grads)?;
        self.combine_tied(&mut grads)?;
        Ok((cost, Some(Gradients { layers: grads })))
    }

    fn backprop(
        &self,
        order: &[usize],
        trace: &Trace,
        g: &mut [Option<Tensor>],
        grads: &mut [Option<LayerParams>],
    ) -> Result<()> {
        for &i in order {
            let Some(grad_out) = g[i].take() else { continue };
            let cache = trace[i]
                .as_ref()
                .ok_or_else(|| Error::Usage(format!("layer `{}` has gradient but no cache", self.specs[i].name)))?;
            let parent = self.parent(i);
            let lg = layers::backward_impl(&self.specs[i], self.params[i].as_ref(), cache, &grad_out, parent.is_some())?;
            if let Some(pg) = lg.params {
                match &mut grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.tensors_mut().zip(pg.tensors()) {
                            a.add_assign(b);
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
            if let (Some(p), Some(dx)) = (parent, lg.input) {
                accumulate(&mut g[p], dx);
            }
        }
        Ok(())
    }

    fn combine_tied(&self, grads: &mut [Option<LayerParams>]) -> Result<()> {
        for &(a, b) in &self.ties {
            let (ga, gb) = match (&grads[a], &grads[b]) {
                (Some(ga), Some(gb)) => (fc_block(&ga.weights), fc_block(&gb.weights)),
                (Some(ga), None) => {
                    let block = fc_block(&ga.weights);
                    let zero = Tensor::zeros(&[block.shape()[1], block.shape()[0]]);
                    (block, zero)
                }
                (None, Some(gb)) => {
                    let block = fc_block(&gb.weights);
                    (Tensor::zeros(&[block.shape()[1], block.shape()[0]]), block)
                }
                (None, None) => continue,
            };
            let (m, k) = (ga.shape()[0], ga.shape()[1]);
            let gbt = transpose_block(k, m, gb.data(), m);
            let shared: Vec<f64> = ga.data().iter().zip(&gbt).map(|(x, y)| x + y).collect();
            let shared_t = transpose_block(m, k, &shared, k);
            for (idx, block) in [(a, Tensor::from_parts(vec![m, k], shared)), (b, Tensor::from_parts(vec![k, m], shared_t))] {
                let slot = grads[idx].get_or_insert_with(|| self.params[idx].as_ref().expect("tied").zeros_like());
                set_fc_block(&mut slot.weights, &block);
            }
        }
        Ok(())
    }

    /// Every layer's parameter tensors in a fixed order: `(layer, tensor slot)`.
    pub fn param_slots(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            if let Some(p) = p {
                for k in 0..p.tensors().count() {
                    out.push((i, k));
                }
            }
        }
        out
    }

    pub fn is_spatial(&self) -> bool {
        self.specs.iter().any(|s| !matches!(s.kind, LayerKind::Fc | LayerKind::Activation))
    }
}

#[cfg(test)]
mod tests;
