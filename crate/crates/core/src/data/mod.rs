//! Datasets, MNIST IDX I/O, synthetic blobs, augmentation and intra-class pairs.

mod idx;
mod pairs;
mod synthetic;

pub use idx::{load_mnist_idx, write_idx, IMAGES_MAGIC, LABELS_MAGIC};
pub use pairs::{sample_intra_class_pairs, Pair, PairBatch};
pub use synthetic::{synthetic_blobs, SyntheticBlobs};

use crate::error::{data_err, dim_err, Result};
use crate::tensor::Tensor;

/// Number of leading MNIST training images used for training; the rest of the
/// 60k file is the validation split.
pub const MNIST_TRAIN_SPLIT: usize = 50_000;

/// Labelled samples with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    class_index: Vec<Vec<usize>>,
}

impl Dataset {
    /// `samples` is batch-leading (`[N, d]` or `[N, H, W, C]`).
    pub fn new(samples: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if samples.rank() < 2 || samples.rows() != labels.len() {
            return Err(dim_err!(
                "{} labels for samples of shape {:?}",
                labels.len(),
                samples.shape()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(data_err!("label {bad} >= number of classes {num_classes}"));
        }
        if let Some(v) = samples.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(data_err!("sample value {v} outside [0, 1]"));
        }
        let mut class_index = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            class_index[l].push(i);
        }
        Ok(Dataset {
            samples,
            labels,
            num_classes,
            class_index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-sample shape (without the batch extent).
    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.samples.row_len()
    }

    /// Sample indices of one class, ascending.
    pub fn class_members(&self, class: usize) -> &[usize] {
        &self.class_index[class]
    }

    /// Rows `range` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Dataset> {
        if start >= end || end > self.len() {
            return Err(data_err!("slice {start}..{end} of a {}-sample dataset", self.len()));
        }
        let idx: Vec<usize> = (start..end).collect();
        self.select(&idx)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let samples = self.samples.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(samples, labels, self.num_classes)
    }

    /// First `n` samples (or all of them if fewer).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        self.slice(0, n.min(self.len()))
    }
}

/// Reverses the width axis of `[N, H, W, C]` images.
pub fn hflip(images: &Tensor) -> Result<Tensor> {
    let &[n, h, w, c] = images.shape() else {
        return Err(dim_err!("hflip needs [N, H, W, C] images, got {:?}", images.shape()));
    };
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..n {
        for y in 0..h {
            for x in (0..w).rev() {
                let base = ((b * h + y) * w + x) * c;
                out.extend_from_slice(&src[base..base + c]);
            }
        }
    }
    Tensor::new(images.shape().to_vec(), out)
}
