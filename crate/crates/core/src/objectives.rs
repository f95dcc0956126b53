//! Cost functions and their gradients.
//!
//! All batch costs are per-pair (or per-sample) means, so learning rates do not
//! depend on the batch size.

use std::collections::BTreeMap;

use crate::error::{cfg_err, data_err, dim_err, Result};
use crate::layers::Activation;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Named parts of a cost. `total = softmax + lambda * reconstruction + penalty`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Components {
    pub softmax: f64,
    pub reconstruction: f64,
    pub lambda: f64,
    pub penalty: f64,
}

impl Components {
    pub fn total(&self) -> f64 {
        self.softmax + self.lambda * self.reconstruction + self.penalty
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostValue {
    pub total: f64,
    pub components: Components,
}

impl CostValue {
    pub fn from_components(components: Components) -> Self {
        CostValue {
            total: components.total(),
            components,
        }
    }

    pub fn reconstruction(value: f64) -> Self {
        Self::from_components(Components {
            reconstruction: value,
            lambda: 1.0,
            ..Components::default()
        })
    }

    pub fn softmax(value: f64) -> Self {
        Self::from_components(Components {
            softmax: value,
            ..Components::default()
        })
    }

    pub fn penalty(value: f64) -> Self {
        Self::from_components(Components {
            penalty: value,
            ..Components::default()
        })
    }
}

#[derive(Clone, Debug)]
pub struct ReconstructionCost {
    pub cost: CostValue,
    /// Gradient with respect to the reconstructions, `(recon - target) / B`.
    pub grad_recon: Tensor,
    /// Gradient with respect to the targets, `-(recon - target) / B`.
    pub grad_target: Tensor,
}

/// Intra-class reconstruction cost `1/(2B) Σ_i ‖recon_i − target_i‖²`.
///
/// Row `i` of `recon` is the reconstruction produced from one pair member and
/// row `i` of `target` is the other member (raw data or features).
pub fn class_encoder_cost(recon: &Tensor, target: &Tensor) -> Result<ReconstructionCost> {
    if recon.rows() != target.rows() || recon.row_len() != target.row_len() || recon.rank() < 2 || target.rank() < 2 {
        return Err(dim_err!(
            "reconstruction {:?} and target {:?} do not pair up",
            recon.shape(),
            target.shape()
        ));
    }
    let batch = recon.rows() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(recon.len());
    for (r, t) in recon.data().iter().zip(target.data()) {
        let e = r - t;
        sum += e * e;
        grad.push(e / batch);
    }
    let value = sum / (2.0 * batch);
    let grad_target = grad.iter().map(|g| -g).collect();
    Ok(ReconstructionCost {
        cost: CostValue::reconstruction(value),
        grad_recon: Tensor::checked("class_encoder_cost", recon.shape().to_vec(), grad)?,
        grad_target: Tensor::checked("class_encoder_cost", target.shape().to_vec(), grad_target)?,
    })
}

#[derive(Clone, Debug)]
pub struct SoftmaxCost {
    pub cost: CostValue,
    pub probs: Tensor,
    /// `(p − onehot) / B`.
    pub grad_logits: Tensor,
}

/// Row-wise softmax with the row maximum subtracted before exponentiation.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (rows, classes) = match logits.shape() {
        &[r, c] => (r, c),
        s => return Err(dim_err!("softmax needs [batch, classes], got {s:?}")),
    };
    let mut probs = Vec::with_capacity(rows * classes);
    for i in 0..rows {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        probs.extend(exps.iter().map(|e| e / sum));
    }
    Tensor::checked("softmax", vec![rows, classes], probs)
}

/// Mean cross-entropy `−(1/B) Σ log p(label_i)`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<SoftmaxCost> {
    let (rows, classes) = match logits.shape() {
        &[r, c] => (r, c),
        s => return Err(dim_err!("softmax_cross_entropy needs [batch, classes], got {s:?}")),
    };
    if labels.len() != rows {
        return Err(dim_err!("{} labels for {rows} logit rows", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(data_err!("label {bad} out of range for {classes} classes"));
    }
    let batch = rows as f64;
    let mut nll = 0.0;
    let mut probs = Vec::with_capacity(rows * classes);
    let mut grad = Vec::with_capacity(rows * classes);
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        nll -= (row[label] - max) - sum.ln();
        for (j, e) in exps.iter().enumerate() {
            let p = e / sum;
            probs.push(p);
            grad.push((p - if j == label { 1.0 } else { 0.0 }) / batch);
        }
    }
    Ok(SoftmaxCost {
        cost: CostValue::softmax(nll / batch),
        probs: Tensor::checked("softmax", vec![rows, classes], probs)?,
        grad_logits: Tensor::checked("softmax_cross_entropy", vec![rows, classes], grad)?,
    })
}

/// `softmax + λ · reconstruction`, keeping both parts for logging.
pub fn joint_cost(softmax: &CostValue, recon: &CostValue, lambda: f64) -> Result<CostValue> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(cfg_err!("lambda must be a finite value >= 0, got {lambda}"));
    }
    Ok(CostValue::from_components(Components {
        softmax: softmax.total,
        reconstruction: recon.total,
        lambda,
        penalty: 0.0,
    }))
}

/// The three summands of the per-class expansion of the reconstruction cost:
/// `cost = magnitude + constant − alignment` where, with `m_c` the mean target of
/// class `c` and `N_c` its number of targets,
///
/// * `magnitude = ½ Σ_c Σ_{x∈S_c} ‖x̃‖²`
/// * `constant  = ½ Σ_c Σ_{x∈S_c} (1/N_c) Σ_{x̂∈S_c} ‖x̂‖²`
/// * `alignment = Σ_c Σ_{x∈S_c} x̃ᵀ m_c`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostDecomposition {
    pub magnitude_term: f64,
    pub constant_term: f64,
    pub alignment_term: f64,
}

impl CostDecomposition {
    /// Equals `½ Σ_c (1/N_c) Σ_{x∈S_c} Σ_{x̂∈S_c} ‖x̃ − x̂‖²`.
    pub fn recombined(&self) -> f64 {
        self.magnitude_term + self.constant_term - self.alignment_term
    }
}

/// Splits the per-class-normalized reconstruction cost into its magnitude,
/// constant and class-mean alignment terms.
pub fn decompose_class_cost(
    recons: &Tensor,
    recon_labels: &[usize],
    targets: &Tensor,
    target_labels: &[usize],
) -> Result<CostDecomposition> {
    if recons.rows() != recon_labels.len() || targets.rows() != target_labels.len() {
        return Err(dim_err!("label counts do not match row counts"));
    }
    if recons.row_len() != targets.row_len() {
        return Err(dim_err!(
            "reconstructions {:?} and targets {:?} differ in width",
            recons.shape(),
            targets.shape()
        ));
    }
    let d = targets.row_len();
    // class -> (count, sum of targets, sum of squared target norms)
    let mut groups: BTreeMap<usize, (usize, Vec<f64>, f64)> = BTreeMap::new();
    for (i, &c) in target_labels.iter().enumerate() {
        let g = groups.entry(c).or_insert_with(|| (0, vec![0.0; d], 0.0));
        g.0 += 1;
        let row = targets.row(i);
        for (s, v) in g.1.iter_mut().zip(row) {
            *s += v;
        }
        g.2 += row.iter().map(|v| v * v).sum::<f64>();
    }
    let mut magnitude = 0.0;
    let mut constant = 0.0;
    let mut alignment = 0.0;
    for (i, &c) in recon_labels.iter().enumerate() {
        let Some((n, sum, sq)) = groups.get(&c) else {
            return Err(data_err!("class {c} has reconstructions but no targets"));
        };
        let n = *n as f64;
        let row = recons.row(i);
        magnitude += 0.5 * row.iter().map(|v| v * v).sum::<f64>();
        constant += 0.5 * sq / n;
        alignment += row.iter().zip(sum).map(|(r, s)| r * (s / n)).sum::<f64>();
    }
    Ok(CostDecomposition {
        magnitude_term: magnitude,
        constant_term: constant,
        alignment_term: alignment,
    })
}

/// Masking noise: each entry is zeroed independently with probability `mask_prob`.
pub fn dae_corrupt(input: &Tensor, mask_prob: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&mask_prob) {
        return Err(cfg_err!("mask probability must lie in [0, 1), got {mask_prob}"));
    }
    if mask_prob == 0.0 {
        return Ok(input.clone());
    }
    let data = input
        .data()
        .iter()
        .map(|&v| if rng.bernoulli(mask_prob) { 0.0 } else { v })
        .collect();
    Ok(Tensor::from_parts(input.shape().to_vec(), data))
}

#[derive(Clone, Debug)]
pub struct ContractionPenalty {
    pub cost: CostValue,
    pub grad_weights: Tensor,
    pub grad_hidden: Tensor,
}

/// Batch-averaged squared Frobenius norm of a sigmoid encoder's Jacobian,
/// `(1/B) Σ_b Σ_j (h_bj (1 − h_bj))² Σ_i W_ji²`. `weights` is the encoder's
/// `[hidden, inputs]` block without the bias column.
pub fn cae_penalty(weights: &Tensor, hidden: &Tensor, activation: Activation) -> Result<ContractionPenalty> {
    if activation != Activation::Sigmoid {
        return Err(cfg_err!("contractive penalty needs sigmoid hidden units, got {activation}"));
    }
    let (d_h, d_in) = match weights.shape() {
        &[h, i] => (h, i),
        s => return Err(dim_err!("cae_penalty weights must be rank 2, got {s:?}")),
    };
    if hidden.rank() != 2 || hidden.shape()[1] != d_h {
        return Err(dim_err!(
            "hidden activations {:?} do not match weights {:?}",
            hidden.shape(),
            weights.shape()
        ));
    }
    let batch = hidden.rows();
    let b = batch as f64;
    let row_sq: Vec<f64> = (0..d_h)
        .map(|j| weights.data()[j * d_in..(j + 1) * d_in].iter().map(|w| w * w).sum())
        .collect();
    let mut total = 0.0;
    let mut col_factor = vec![0.0; d_h];
    let mut grad_h = Vec::with_capacity(hidden.len());
    for bi in 0..batch {
        for (j, &h) in hidden.row(bi).iter().enumerate() {
            let s = h * (1.0 - h);
            total += s * s * row_sq[j];
            col_factor[j] += s * s;
            grad_h.push(2.0 * s * (1.0 - 2.0 * h) * row_sq[j] / b);
        }
    }
    let grad_w = weights
        .data()
        .iter()
        .enumerate()
        .map(|(k, &w)| 2.0 * w * col_factor[k / d_in] / b)
        .collect();
    Ok(ContractionPenalty {
        cost: CostValue::penalty(total / b),
        grad_weights: Tensor::checked("cae_penalty", weights.shape().to_vec(), grad_w)?,
        grad_hidden: Tensor::checked("cae_penalty", hidden.shape().to_vec(), grad_h)?,
    })
}
