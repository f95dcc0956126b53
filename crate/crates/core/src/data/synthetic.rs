use super::Dataset;
use crate::error::{cfg_err, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Isotropic Gaussian classes around seeded random centers.
///
/// Centers are uniform in `[0.25, 0.75]^dim`; samples are clamped to `[0, 1]`
/// so the result obeys the same value range as image data.
#[derive(Clone, Debug)]
pub struct SyntheticBlobs {
    centers: Vec<Vec<f64>>,
    spread: f64,
}

impl SyntheticBlobs {
    pub fn new(num_classes: usize, dim: usize, spread: f64, rng: &mut Rng) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(cfg_err!("synthetic blobs need positive class count and dimension"));
        }
        if !(spread > 0.0 && spread.is_finite()) {
            return Err(cfg_err!("synthetic spread must be > 0, got {spread}"));
        }
        let centers = (0..num_classes)
            .map(|_| (0..dim).map(|_| rng.uniform_range(0.25, 0.75)).collect())
            .collect();
        Ok(SyntheticBlobs { centers, spread })
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// `per_class` samples of every class, class-major order.
    pub fn sample(&self, per_class: usize, rng: &mut Rng) -> Result<Dataset> {
        if per_class == 0 {
            return Err(cfg_err!("synthetic blobs need at least one sample per class"));
        }
        let dim = self.centers[0].len();
        let n = per_class * self.centers.len();
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for (class, center) in self.centers.iter().enumerate() {
            for _ in 0..per_class {
                data.extend(center.iter().map(|&c| (c + self.spread * rng.normal()).clamp(0.0, 1.0)));
                labels.push(class);
            }
        }
        Dataset::new(Tensor::new(vec![n, dim], data)?, labels, self.centers.len())
    }
}

pub fn synthetic_blobs(num_classes: usize, per_class: usize, dim: usize, spread: f64, rng: &mut Rng) -> Result<Dataset> {
    SyntheticBlobs::new(num_classes, dim, spread, rng)?.sample(per_class, rng)
}
