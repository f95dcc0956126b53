use super::Dataset;
use crate::error::{data_err, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Two sample indices of the same class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub first: usize,
    pub second: usize,
    pub class: usize,
}

/// Draws `pairs_per_class` pairs per class, each member uniformly and
/// independently from that class (with replacement). Classes are visited in
/// ascending order. With `allow_self == false` the second member is redrawn
/// until it differs from the first.
pub fn sample_intra_class_pairs(
    ds: &Dataset,
    pairs_per_class: usize,
    allow_self: bool,
    rng: &mut Rng,
) -> Result<Vec<Pair>> {
    let mut pairs = Vec::with_capacity(pairs_per_class * ds.num_classes());
    for class in 0..ds.num_classes() {
        let members = ds.class_members(class);
        if members.is_empty() {
            return Err(data_err!("class {class} has no samples"));
        }
        if !allow_self && members.len() < 2 && pairs_per_class > 0 {
            return Err(data_err!(
                "class {class} has a single sample; self-pairs are disabled"
            ));
        }
        for _ in 0..pairs_per_class {
            let first = members[rng.below(members.len())];
            let mut second = members[rng.below(members.len())];
            while !allow_self && second == first {
                second = members[rng.below(members.len())];
            }
            pairs.push(Pair {
                first,
                second,
                class,
            });
        }
    }
    Ok(pairs)
}

/// A minibatch of intra-class pairs `(x′, x″)` with their shared labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub x1: Tensor,
    pub x2: Tensor,
    pub labels: Vec<usize>,
}

impl PairBatch {
    pub fn gather(ds: &Dataset, pairs: &[Pair]) -> Result<PairBatch> {
        let firsts: Vec<usize> = pairs.iter().map(|p| p.first).collect();
        let seconds: Vec<usize> = pairs.iter().map(|p| p.second).collect();
        for p in pairs {
            if ds.labels()[p.first] != p.class || ds.labels()[p.second] != p.class {
                return Err(data_err!("pair ({}, {}) is not intra-class {}", p.first, p.second, p.class));
            }
        }
        Ok(PairBatch {
            x1: ds.samples().select_rows(&firsts)?,
            x2: ds.samples().select_rows(&seconds)?,
            labels: pairs.iter().map(|p| p.class).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The same pairs with members swapped.
    pub fn swapped(&self) -> PairBatch {
        PairBatch {
            x1: self.x2.clone(),
            x2: self.x1.clone(),
            labels: self.labels.clone(),
        }
    }
}
