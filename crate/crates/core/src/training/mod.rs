//! SGD over intra-class pair batches, gradient checking and checkpoints.

mod checkpoint;
mod gradcheck;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, gradient_check_with_floor, GradCheckReport, RELATIVE_ERROR_FLOOR};

use std::collections::BTreeMap;

use crate::data::{sample_intra_class_pairs, Dataset, Pair, PairBatch};
use crate::error::{cfg_err, dim_err, Error, Result};
use crate::layers::LayerParams;
use crate::models::{parse_bool, Gradients, LossOptions, ModelKind, Network, PretrainMethod, SoftmaxMembers};
use crate::rng::{streams, Rng};

/// Optimizer and objective settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
    pub pretrain: Option<PretrainMethod>,
    pub pretrain_epochs: usize,
    pub detach_target: bool,
    pub tie_weights: bool,
    pub softmax_members: SoftmaxMembers,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 10,
            lambda: 0.1,
            seed: 0,
            pretrain: None,
            pretrain_epochs: 1,
            detach_target: false,
            tie_weights: false,
            softmax_members: SoftmaxMembers::Both,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| cfg_err!("bad value `{v}` for `{key}`"))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(cfg_err!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(cfg_err!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return Err(cfg_err!("batch_size must be >= 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(cfg_err!("lambda must be >= 0, got {}", self.lambda));
        }
        if let Some(m) = self.pretrain {
            m.validate()?;
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            lambda: self.lambda,
            softmax_members: self.softmax_members,
            detach_target: self.detach_target,
        }
    }

    /// Reads the `[train]` keys, removing them from `map`; absent keys keep
    /// their defaults.
    pub fn from_map(map: &mut BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut pretrain_kind: Option<String> = None;
        let mut coefficient: Option<f64> = None;
        for (k, v) in std::mem::take(map) {
            match k.as_str() {
                "lr" => cfg.lr = num(&k, &v)?,
                "momentum" => cfg.momentum = num(&k, &v)?,
                "batch_size" => cfg.batch_size = num(&k, &v)?,
                "epochs" => cfg.epochs = num(&k, &v)?,
                "lambda" => cfg.lambda = num(&k, &v)?,
                "seed" => cfg.seed = num(&k, &v)?,
                "pretrain" => pretrain_kind = Some(v.trim().to_string()),
                "pretrain_coefficient" => coefficient = Some(num(&k, &v)?),
                "pretrain_epochs" => cfg.pretrain_epochs = num(&k, &v)?,
                "detach_target" => cfg.detach_target = parse_bool(&k, &v)?,
                "tie_weights" => cfg.tie_weights = parse_bool(&k, &v)?,
                "softmax_members" => cfg.softmax_members = v.trim().parse()?,
                _ => {
                    map.insert(k, v);
                }
            }
        }
        cfg.pretrain = match pretrain_kind.as_deref() {
            None | Some("none") => None,
            Some(kind) => Some(match coefficient {
                Some(c) => PretrainMethod::parse(kind, c)?,
                None => kind.parse()?,
            }),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field as `key=value`, in a fixed order; reals use the shortest
    /// representation that parses back to the same value.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lambda", self.lambda.to_string()),
            ("seed", self.seed.to_string()),
            ("pretrain", self.pretrain.map_or("none", |m| m.name()).to_string()),
            ("pretrain_coefficient", self.pretrain.map_or(0.0, |m| m.coefficient()).to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("detach_target", self.detach_target.to_string()),
            ("tie_weights", self.tie_weights.to_string()),
            ("softmax_members", self.softmax_members.name().to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| cfg_err!("bad config line `{line}`"))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let cfg = Self::from_map(&mut map)?;
        if let Some(k) = map.keys().next() {
            return Err(cfg_err!("unknown train key `{k}`"));
        }
        Ok(cfg)
    }
}

/// One momentum step: `v ← momentum·v − lr·g`, `p ← p + v`.
pub fn sgd_step(params: &mut LayerParams, grads: &LayerParams, velocity: &mut LayerParams, lr: f64, momentum: f64) -> Result<()> {
    let n = params.tensors().count();
    if grads.tensors().count() != n || velocity.tensors().count() != n {
        return Err(dim_err!("sgd_step: parameter, gradient and velocity tensor counts differ"));
    }
    for ((p, g), v) in params.tensors().zip(grads.tensors()).zip(velocity.tensors()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(dim_err!(
                "sgd_step: shapes {:?}, {:?}, {:?} differ",
                p.shape(),
                g.shape(),
                v.shape()
            ));
        }
    }
    for ((p, g), v) in params.tensors_mut().zip(grads.tensors()).zip(velocity.tensors_mut()) {
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi - lr * gi;
            *pi += *vi;
        }
    }
    Ok(())
}

/// Applies [`sgd_step`] to every layer that received a gradient, then
/// re-symmetrizes tied pairs (a bitwise no-op after a shared update).
pub fn apply_gradients(
    net: &mut Network,
    grads: &Gradients,
    velocity: &mut [Option<LayerParams>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grads.layers.len() != net.params().len() || velocity.len() != net.params().len() {
        return Err(dim_err!("gradient list does not match the network's layers"));
    }
    for (i, g) in grads.layers.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = net.params_mut()[i]
            .as_mut()
            .ok_or_else(|| dim_err!("gradient for parameter-free layer {i}"))?;
        let v = velocity[i].get_or_insert_with(|| p.zeros_like());
        sgd_step(p, g, v, lr, momentum)?;
    }
    net.enforce_ties()
}

/// Pair-weighted epoch means of the batch cost components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochCost {
    pub total: f64,
    pub softmax: f64,
    pub reconstruction: f64,
}

/// Training state: network, momentum buffers, the fixed pair list and the
/// shuffling stream.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: Network,
    pub cfg: TrainConfig,
    velocity: Vec<Option<LayerParams>>,
    pairs: Vec<Pair>,
    shuffle: Rng,
    epoch: usize,
}

/// The pair list for a training set; drawn once from the seed's pair stream.
pub fn training_pairs(train: &Dataset, seed: u64, pairs_per_class: usize, allow_self: bool) -> Result<Vec<Pair>> {
    let mut rng = Rng::stream(seed, streams::PAIRS);
    sample_intra_class_pairs(train, pairs_per_class, allow_self, &mut rng)
}

impl Trainer {
    pub fn new(net: Network, cfg: TrainConfig, pairs: Vec<Pair>) -> Result<Self> {
        cfg.validate()?;
        check_heads(&net, &cfg)?;
        let velocity = vec![None; net.params().len()];
        Ok(Trainer {
            velocity,
            pairs,
            shuffle: Rng::stream(cfg.seed, streams::SHUFFLE),
            epoch: 0,
            net,
            cfg,
        })
    }

    /// Restores a trainer from a checkpoint and the regenerated pair list.
    pub fn resume(ckpt: Checkpoint, pairs: Vec<Pair>) -> Result<Self> {
        check_heads(&ckpt.net, &ckpt.cfg)?;
        let velocity = match ckpt.velocity {
            Some(v) => v,
            None => vec![None; ckpt.net.params().len()],
        };
        Ok(Trainer {
            velocity,
            pairs,
            shuffle: Rng::from_state(ckpt.rng),
            epoch: ckpt.epoch,
            net: ckpt.net,
            cfg: ckpt.cfg,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            cfg: self.cfg.clone(),
            net: self.net.clone(),
            epoch: self.epoch,
            rng: self.shuffle.state(),
            velocity: Some(self.velocity.clone()),
        }
    }

    /// Forward-only cost over the whole pair list, in list order.
    pub fn evaluate_cost(&self, ds: &Dataset) -> Result<EpochCost> {
        let opts = self.cfg.loss_options();
        let mut acc = EpochCost::default();
        for chunk in self.pairs.chunks(self.cfg.batch_size.max(256)) {
            let batch = PairBatch::gather(ds, chunk)?;
            let cost = self.net.loss(&batch, &opts, None)?;
            add_weighted(&mut acc, &cost, chunk.len());
        }
        Ok(finish(acc, self.pairs.len()))
    }

    /// One shuffled pass over the pair list with an SGD step per batch.
    pub fn train_epoch(&mut self, ds: &Dataset) -> Result<EpochCost> {
        let opts = self.cfg.loss_options();
        let mut order = self.pairs.clone();
        self.shuffle.shuffle(&mut order);
        let mut acc = EpochCost::default();
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch = PairBatch::gather(ds, chunk)?;
            let (cost, grads) = self.net.loss_and_grad(&batch, &opts, None).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {} batch {b}: {m}", self.epoch + 1)),
                other => other,
            })?;
            apply_gradients(&mut self.net, &grads, &mut self.velocity, self.cfg.lr, self.cfg.momentum)?;
            add_weighted(&mut acc, &cost, chunk.len());
        }
        self.epoch += 1;
        Ok(finish(acc, self.pairs.len()))
    }
}

fn check_heads(net: &Network, cfg: &TrainConfig) -> Result<()> {
    if net.kind() == ModelKind::Classifier && cfg.lambda > 0.0 {
        return Err(cfg_err!("lambda = {} needs a decoder; a classifier has none (set lambda = 0)", cfg.lambda));
    }
    if cfg.tie_weights != net.ties().iter().next().is_some() {
        return Err(cfg_err!(
            "tie_weights = {} does not match the network ({} tied pairs)",
            cfg.tie_weights,
            net.ties().len()
        ));
    }
    Ok(())
}

fn add_weighted(acc: &mut EpochCost, cost: &crate::objectives::CostValue, n: usize) {
    let w = n as f64;
    acc.total += cost.total * w;
    acc.softmax += cost.components.softmax * w;
    acc.reconstruction += cost.components.reconstruction * w;
}

fn finish(acc: EpochCost, n: usize) -> EpochCost {
    let n = n.max(1) as f64;
    EpochCost {
        total: acc.total / n,
        softmax: acc.softmax / n,
        reconstruction: acc.reconstruction / n,
    }
}
