use crate::data::PairBatch;
use crate::error::Result;
use crate::models::{LossOptions, Network};

/// Outcome of a finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Layer name, tensor (`weights` or `bias`) and flat index of the worst entry.
    pub worst: (String, &'static str, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Denominator floor of the relative error used by [`gradient_check`].
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares the analytic joint-cost gradient with central differences for
/// every parameter. Tied pairs are perturbed together and checked once.
/// With `detach_target` the target is frozen at the unperturbed parameters so
/// the numeric side matches the detached gradient.
///
/// `sabotage` flips the sign of the first layer's analytic weight gradient; it
/// exists to prove the check can fail.
pub fn gradient_check(net: &Network, batch: &PairBatch, opts: &LossOptions, epsilon: f64, sabotage: bool) -> Result<GradCheckReport> {
    gradient_check_with_floor(net, batch, opts, epsilon, RELATIVE_ERROR_FLOOR, sabotage)
}

/// [`gradient_check`] with a chosen denominator floor. A central difference
/// carries roundoff of roughly `1e-16 * |cost| / epsilon`, so entries far
/// below the floor are compared in absolute terms instead.
pub fn gradient_check_with_floor(
    net: &Network,
    batch: &PairBatch,
    opts: &LossOptions,
    epsilon: f64,
    floor: f64,
    sabotage: bool,
) -> Result<GradCheckReport> {
    let frozen = if opts.detach_target { Some(net.targets(&batch.x2)?) } else { None };
    let (_, mut grads) = net.loss_and_grad(batch, opts, frozen.as_ref())?;
    if sabotage {
        if let Some(g) = grads.layers.iter_mut().flatten().next() {
            g.weights.scale_in_place(-1.0);
        }
    }
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (String::new(), "weights", 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mirror_of = |layer: usize| net.ties().iter().find(|&&(a, _)| a == layer).map(|&(_, b)| b);
    let is_mirror = |layer: usize| net.ties().iter().any(|&(_, b)| b == layer);

    for layer in 0..net.params().len() {
        let Some(p) = &net.params()[layer] else { continue };
        let g = grads.layers[layer].as_ref();
        let tensors: Vec<_> = p.tensors().map(|t| t.shape().to_vec()).collect();
        for (slot, shape) in tensors.iter().enumerate() {
            let len: usize = shape.iter().product();
            let cols = shape.get(1).copied().unwrap_or(1);
            for idx in 0..len {
                let in_block = slot == 0 && shape.len() == 2 && idx % cols != cols - 1;
                if is_mirror(layer) && in_block {
                    continue;
                }
                let partner = if in_block {
                    mirror_of(layer).map(|b| {
                        let (r, c) = (idx / cols, idx % cols);
                        let b_cols = net.params()[b].as_ref().expect("tied").weights.shape()[1];
                        (b, c * b_cols + r)
                    })
                } else {
                    None
                };
                let orig = value(net, layer, slot, idx);
                let partner_orig = partner.map(|(b, j)| value(net, b, 0, j));
                let mut eval = |delta: f64| -> Result<f64> {
                    set(&mut probe, layer, slot, idx, orig + delta);
                    if let (Some((b, j)), Some(v)) = (partner, partner_orig) {
                        set(&mut probe, b, 0, j, v + delta);
                    }
                    let c = probe.loss(batch, opts, frozen.as_ref())?.total;
                    set(&mut probe, layer, slot, idx, orig);
                    if let (Some((b, j)), Some(v)) = (partner, partner_orig) {
                        set(&mut probe, b, 0, j, v);
                    }
                    Ok(c)
                };
                let plus = eval(epsilon)?;
                let minus = eval(-epsilon)?;
                let numeric = (plus - minus) / ((orig + epsilon) - (orig - epsilon));
                let analytic = g.map_or(0.0, |g| g.tensors().nth(slot).expect("slot").data()[idx]);
                let err = relative_error(analytic, numeric, floor);
                report.checked += 1;
                if err > report.max_relative_error || report.checked == 1 {
                    report.max_relative_error = err;
                    report.worst = (net.specs()[layer].name.clone(), if slot == 0 { "weights" } else { "bias" }, idx);
                    report.analytic = analytic;
                    report.numeric = numeric;
                }
            }
        }
    }
    Ok(report)
}

fn value(net: &Network, layer: usize, slot: usize, idx: usize) -> f64 {
    net.params()[layer].as_ref().expect("params").tensors().nth(slot).expect("slot").data()[idx]
}

fn set(net: &mut Network, layer: usize, slot: usize, idx: usize, v: f64) {
    let p = net.params_mut()[layer].as_mut().expect("params");
    p.tensors_mut().nth(slot).expect("slot").data_mut()[idx] = v;
}
