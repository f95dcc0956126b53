use std::str::FromStr;

use super::Network;
use crate::error::{cfg_err, Error, Result};
use crate::layers::{self, fc_block, Activation, LayerKind, LayerParams, LayerSpec};
use crate::objectives::{cae_penalty, class_encoder_cost, dae_corrupt};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::sgd_step;

/// Auto-encoder variant used to pre-train one encoder layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PretrainMethod {
    Ae,
    /// Masking noise with the given per-entry drop probability.
    Dae { mask_prob: f64 },
    /// Contractive penalty weight.
    Cae { coefficient: f64 },
}

impl PretrainMethod {
    /// `kind` is `ae`, `dae` or `cae`; `coefficient` is the mask probability or
    /// the contraction weight (ignored for `ae`).
    pub fn parse(kind: &str, coefficient: f64) -> Result<Self> {
        let m = match kind {
            "ae" => PretrainMethod::Ae,
            "dae" => PretrainMethod::Dae { mask_prob: coefficient },
            "cae" => PretrainMethod::Cae { coefficient },
            other => return Err(cfg_err!("unknown pre-training method `{other}`")),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn name(self) -> &'static str {
        match self {
            PretrainMethod::Ae => "ae",
            PretrainMethod::Dae { .. } => "dae",
            PretrainMethod::Cae { .. } => "cae",
        }
    }

    pub fn coefficient(self) -> f64 {
        match self {
            PretrainMethod::Ae => 0.0,
            PretrainMethod::Dae { mask_prob } => mask_prob,
            PretrainMethod::Cae { coefficient } => coefficient,
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            PretrainMethod::Ae => Ok(()),
            PretrainMethod::Dae { mask_prob } if (0.0..1.0).contains(&mask_prob) => Ok(()),
            PretrainMethod::Cae { coefficient } if coefficient >= 0.0 && coefficient.is_finite() => Ok(()),
            m => Err(cfg_err!("{} coefficient {} out of range", m.name(), m.coefficient())),
        }
    }
}

impl FromStr for PretrainMethod {
    type Err = Error;

    /// `ae`, `dae` (mask probability 0.25) or `cae` (weight 0.1).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dae" => Self::parse(s, 0.25),
            "cae" => Self::parse(s, 0.1),
            _ => Self::parse(s, 0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainOptions {
    pub method: PretrainMethod,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

/// Clean auto-reconstruction cost of each encoder layer before and after its
/// pre-training, measured on the full layer input.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub layers: Vec<(String, f64, f64)>,
}

struct LayerAe {
    enc: LayerSpec,
    dec: LayerSpec,
}

impl LayerAe {
    fn clean_cost(&self, enc: &LayerParams, dec: &LayerParams, x: &Tensor) -> Result<f64> {
        let (h, _) = layers::forward(&self.enc, Some(enc), x)?;
        let (r, _) = layers::forward(&self.dec, Some(dec), &h)?;
        Ok(class_encoder_cost(&r, x)?.cost.total)
    }

    fn grads(
        &self,
        method: PretrainMethod,
        enc: &LayerParams,
        dec: &LayerParams,
        x: &Tensor,
        rng: &mut Rng,
    ) -> Result<(f64, LayerParams, LayerParams)> {
        let input = match method {
            PretrainMethod::Dae { mask_prob } => dae_corrupt(x, mask_prob, rng)?,
            _ => x.clone(),
        };
        let (h, hc) = layers::forward(&self.enc, Some(enc), &input)?;
        let (r, rcache) = layers::forward(&self.dec, Some(dec), &h)?;
        let rc = class_encoder_cost(&r, x)?;
        let mut cost = rc.cost.total;
        let dg = layers::backward(&self.dec, Some(dec), &rcache, &rc.grad_recon)?;
        let mut dh = dg.input.expect("decoder input gradient");
        let mut penalty_w = None;
        if let PretrainMethod::Cae { coefficient } = method {
            if coefficient > 0.0 {
                let pen = cae_penalty(&fc_block(&enc.weights), &h, self.enc.activation)?;
                cost += coefficient * pen.cost.total;
                let mut gh = pen.grad_hidden;
                gh.scale_in_place(coefficient);
                dh.add_assign(&gh);
                let mut gw = pen.grad_weights;
                gw.scale_in_place(coefficient);
                penalty_w = Some(gw);
            }
        }
        let eg = layers::backward_impl(&self.enc, Some(enc), &hc, &dh, false)?;
        let mut enc_grad = eg.params.expect("encoder gradient");
        if let Some(gw) = penalty_w {
            let cols = enc_grad.weights.shape()[1];
            let inner = cols - 1;
            let data = enc_grad.weights.data_mut();
            for (k, g) in gw.data().iter().enumerate() {
                data[(k / inner) * cols + k % inner] += g;
            }
        }
        if !cost.is_finite() {
            return Err(Error::Numeric(format!("pre-training cost of `{}` is {cost}", self.enc.name)));
        }
        Ok((cost, enc_grad, dg.params.expect("decoder gradient")))
    }
}

/// Greedy layer-wise auto-encoder training of the encoder layers. Each layer
/// gets a throw-away decoder and is trained on the previous layer's codes;
/// the network's heads keep their random initialization.
pub fn pretrain_layerwise(net: &Network, data: &Tensor, opts: &PretrainOptions, rng: &mut Rng) -> Result<(Network, PretrainReport)> {
    opts.method.validate()?;
    if opts.batch_size == 0 || opts.lr.is_nan() || opts.lr <= 0.0 || !(0.0..1.0).contains(&opts.momentum) {
        return Err(cfg_err!("pre-training needs lr > 0, momentum in [0, 1) and batch_size >= 1"));
    }
    let e = net.heads().encoder_end;
    if let Some(s) = net.specs()[..e].iter().find(|s| s.kind != LayerKind::Fc) {
        return Err(cfg_err!("layer-wise pre-training needs fc encoder layers; `{}` is not", s.name));
    }
    let mut out = net.clone();
    let mut report = PretrainReport { layers: Vec::new() };
    if opts.epochs == 0 {
        return Ok((out, report));
    }
    let mut x = data.flatten_rows();
    let n = x.rows();
    for l in 0..e {
        let enc = out.specs()[l].clone();
        let dec_act = if l == 0 || enc.activation == Activation::Sigmoid {
            Activation::Sigmoid
        } else {
            Activation::Identity
        };
        let ae = LayerAe {
            dec: LayerSpec::fc(&format!("{}_dec", enc.name), &enc.out_shape, enc.in_len(), dec_act)?,
            enc,
        };
        let mut enc_p = out.params()[l].clone().expect("fc layer has params");
        let mut dec_p = ae.dec.init_params(rng).expect("fc layer has params");
        let mut enc_v = enc_p.zeros_like();
        let mut dec_v = dec_p.zeros_like();
        let before = ae.clean_cost(&enc_p, &dec_p, &x)?;
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..opts.epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(opts.batch_size) {
                let xb = x.select_rows(chunk)?;
                let (_, ge, gd) = ae.grads(opts.method, &enc_p, &dec_p, &xb, rng)?;
                sgd_step(&mut enc_p, &ge, &mut enc_v, opts.lr, opts.momentum)?;
                sgd_step(&mut dec_p, &gd, &mut dec_v, opts.lr, opts.momentum)?;
            }
        }
        let after = ae.clean_cost(&enc_p, &dec_p, &x)?;
        report.layers.push((ae.enc.name.clone(), before, after));
        x = layers::forward(&ae.enc, Some(&enc_p), &x)?.0;
        out.params_mut()[l] = Some(enc_p);
    }
    out.mirror_ties();
    Ok((out, report))
}
