//! Classification error, intra-class variance, cosine-to-class-mean, PCA and
//! CSV export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{data_err, dim_err, fmt_err, Error, Result};
use crate::models::{ModelKind, Network};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::{EpochCost, TrainConfig};

/// First line of every metrics CSV. Adding columns requires bumping the version.
pub const METRICS_SCHEMA: &str = "# cecr metrics schema v1";
pub const METRICS_HEADER: &str = "epoch,cost_total,cost_softmax,cost_recon,test_error_pct,intra_var,cosine_mean";

/// Percentage of misclassified samples using the softmax head.
pub fn classification_error(net: &Network, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(data_err!("classification error of an empty dataset"));
    }
    let (_, predicted) = net.predict(ds.samples())?;
    let wrong = predicted.iter().zip(ds.labels()).filter(|(p, l)| p != l).count();
    Ok(100.0 * wrong as f64 / ds.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntraClassVariance {
    pub per_class: Vec<f64>,
    /// Unweighted mean over classes.
    pub mean: f64,
}

/// Per class `c`: `(1/N_c) Σ_{i∈S_c} ‖f_i − mean_c‖²`.
pub fn intra_class_variance(features: &Tensor, labels: &[usize], num_classes: usize) -> Result<IntraClassVariance> {
    if features.rank() < 2 || features.rows() != labels.len() {
        return Err(dim_err!("{} labels for features {:?}", labels.len(), features.shape()));
    }
    let d = features.row_len();
    let mut sums = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(data_err!("label {l} >= {num_classes} classes"));
        }
        counts[l] += 1;
        for (s, &v) in sums[l].iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(data_err!("class {c} is empty"));
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|v| v / n as f64).collect())
        .collect();
    let mut per_class = vec![0.0; num_classes];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l] += features.row(i).iter().zip(&means[l]).map(|(v, m)| (v - m) * (v - m)).sum::<f64>();
    }
    for (v, &n) in per_class.iter_mut().zip(&counts) {
        *v /= n as f64;
    }
    let mean = per_class.iter().sum::<f64>() / num_classes as f64;
    Ok(IntraClassVariance { per_class, mean })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSummary {
    pub mean: f64,
    /// Terms skipped because a reconstruction or class mean had zero norm.
    pub skipped: usize,
}

/// Mean over samples of `cos(recon_i, mean of the targets of i's class)`.
pub fn cosine_to_class_mean(recons: &Tensor, targets: &Tensor, labels: &[usize], num_classes: usize) -> Result<CosineSummary> {
    if recons.rank() < 2 || targets.rank() < 2 || recons.rows() != labels.len() || targets.rows() != labels.len() || recons.row_len() != targets.row_len() {
        return Err(dim_err!(
            "cosine_to_class_mean: recons {:?}, targets {:?}, {} labels",
            recons.shape(),
            targets.shape(),
            labels.len()
        ));
    }
    let d = targets.row_len();
    let mut means = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(data_err!("label {l} >= {num_classes} classes"));
        }
        counts[l] += 1;
        for (m, &v) in means[l].iter_mut().zip(targets.row(i)) {
            *m += v;
        }
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        if n > 0 {
            m.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let norms: Vec<f64> = means.iter().map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let (mut sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for (i, &l) in labels.iter().enumerate() {
        let r = recons.row(i);
        let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rn == 0.0 || norms[l] == 0.0 {
            skipped += 1;
            continue;
        }
        let dot: f64 = r.iter().zip(&means[l]).map(|(a, b)| a * b).sum();
        sum += dot / (rn * norms[l]);
        used += 1;
    }
    if used == 0 {
        return Err(data_err!("every cosine term had a zero-norm vector"));
    }
    Ok(CosineSummary {
        mean: sum / used as f64,
        skipped,
    })
}

/// Principal axes of a feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` unit directions, one per row.
    pub components: Tensor,
    /// Variance along each direction.
    pub variances: Vec<f64>,
}

const PCA_TOL: f64 = 1e-9;
const PCA_MAX_ITER: usize = 1000;
/// Each iteration multiplies by `C^(2^PCA_SQUARINGS)`, which separates close
/// eigenvalues much faster than plain `C`.
const PCA_SQUARINGS: usize = 4;

fn sym_matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut c = vec![0.0; d * d];
    crate::tensor::gemm_acc(d, d, d, a, d, b, d, &mut c, d);
    c
}

fn matvec(a: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    (0..d).map(|i| a[i * d..(i + 1) * d].iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Mean-centred PCA by power iteration with deflation. Each component's sign
/// is fixed so its largest-magnitude entry is positive.
pub fn pca(features: &Tensor, k: usize) -> Result<Pca> {
    if features.rank() != 2 {
        return Err(dim_err!("pca needs [N, d] features, got {:?}", features.shape()));
    }
    let (n, d) = (features.rows(), features.row_len());
    if k == 0 || n <= k || k > d {
        return Err(dim_err!("pca needs N > k >= 1 and k <= d (N={n}, d={d}, k={k})"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let c: Vec<f64> = features.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect();
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += c[a] * c[b];
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= (n - 1) as f64);

    let mut start = Rng::new(0);
    let mut comps = Vec::with_capacity(k * d);
    let mut variances = Vec::with_capacity(k);
    let mut deflated = cov.clone();
    for comp in 0..k {
        let mut power = deflated.clone();
        for _ in 0..PCA_SQUARINGS {
            power = sym_matmul(&power, &power, d);
            let scale = power.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if scale > 0.0 {
                power.iter_mut().for_each(|v| *v /= scale);
            }
        }
        let mut v: Vec<f64> = (0..d).map(|_| start.normal()).collect();
        normalize(&mut v);
        let mut converged = false;
        let mut delta = f64::INFINITY;
        for _ in 0..PCA_MAX_ITER {
            let mut w = matvec(&power, &v, d);
            if normalize(&mut w) == 0.0 {
                // Remaining variance is zero; any orthogonal direction will do.
                converged = true;
                break;
            }
            let dot: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
            let s = if dot < 0.0 { -1.0 } else { 1.0 };
            delta = w.iter().zip(&v).map(|(a, b)| (a - s * b).powi(2)).sum::<f64>().sqrt();
            v = w;
            if delta < PCA_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Numeric(format!(
                "pca component {comp} did not converge: step {delta:e} after {PCA_MAX_ITER} iterations (tolerance {PCA_TOL:e})"
            )));
        }
        let lambda: f64 = matvec(&deflated, &v, d).iter().zip(&v).map(|(a, b)| a * b).sum();
        let pivot = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for a in 0..d {
            for b in 0..d {
                deflated[a * d + b] -= lambda * v[a] * v[b];
            }
        }
        variances.push(lambda);
        comps.extend_from_slice(&v);
    }
    Ok(Pca {
        mean,
        components: Tensor::new(vec![k, d], comps)?,
        variances,
    })
}

impl Pca {
    pub fn project(&self, features: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if features.rank() != 2 || features.row_len() != d {
            return Err(dim_err!("projection needs [N, {d}] features, got {:?}", features.shape()));
        }
        let k = self.components.rows();
        let mut out = Vec::with_capacity(features.rows() * k);
        for i in 0..features.rows() {
            let c: Vec<f64> = features.row(i).iter().zip(&self.mean).map(|(v, m)| v - m).collect();
            for j in 0..k {
                out.push(self.components.row(j).iter().zip(&c).map(|(a, b)| a * b).sum());
            }
        }
        Tensor::new(vec![features.rows(), k], out)
    }
}

/// `[N, k]` coordinates on the top-`k` principal directions of `features`.
pub fn pca_project(features: &Tensor, k: usize) -> Result<Tensor> {
    let flat = features.flatten_rows();
    pca(&flat, k)?.project(&flat)
}

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Scatter CSV text: header `label,c1,...,ck`, reals with 17 significant digits.
pub fn scatter_csv(coords: &Tensor, labels: &[usize]) -> Result<String> {
    if coords.rank() != 2 || coords.rows() != labels.len() {
        return Err(dim_err!("{} labels for coordinates {:?}", labels.len(), coords.shape()));
    }
    let mut s = String::from("label");
    for j in 1..=coords.row_len() {
        write!(s, ",c{j}").expect("write to string");
    }
    s.push('\n');
    for (i, l) in labels.iter().enumerate() {
        s.push_str(&l.to_string());
        for &v in coords.row(i) {
            s.push(',');
            s.push_str(&real(v));
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn export_scatter_csv(coords: &Tensor, labels: &[usize], path: &Path) -> Result<()> {
    fs::write(path, scatter_csv(coords, labels)?)?;
    Ok(())
}

/// Inverse of [`scatter_csv`].
pub fn parse_scatter_csv(text: &str) -> Result<(Tensor, Vec<usize>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| fmt_err!("empty scatter CSV"))?;
    let k = header.split(',').count() - 1;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for line in lines {
        let mut cells = line.split(',');
        let label = cells.next().unwrap_or_default();
        labels.push(label.parse().map_err(|_| fmt_err!("bad label `{label}`"))?);
        let row: Vec<f64> = cells
            .map(|c| c.parse().map_err(|_| fmt_err!("bad real `{c}`")))
            .collect::<Result<_>>()?;
        if row.len() != k {
            return Err(fmt_err!("row has {} coordinates, header has {k}", row.len()));
        }
        data.extend(row);
    }
    Ok((Tensor::new(vec![labels.len(), k], data)?, labels))
}

/// One row of the metrics CSV. Metrics that do not apply are NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub cost_total: f64,
    pub cost_softmax: f64,
    pub cost_recon: f64,
    pub test_error_pct: f64,
    pub intra_var: f64,
    pub cosine_mean: f64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            real(self.cost_total),
            real(self.cost_softmax),
            real(self.cost_recon),
            real(self.test_error_pct),
            real(self.intra_var),
            real(self.cosine_mean)
        )
    }

    /// `key=value` lines as printed by the `eval` command.
    pub fn key_values(&self) -> String {
        format!(
            "epoch={}\ncost_total={}\ncost_softmax={}\ncost_recon={}\ntest_error_pct={}\nintra_var={}\ncosine_mean={}\n",
            self.epoch,
            real(self.cost_total),
            real(self.cost_softmax),
            real(self.cost_recon),
            real(self.test_error_pct),
            real(self.intra_var),
            real(self.cosine_mean)
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRecord]) -> String {
    let mut s = format!("{METRICS_SCHEMA}\n{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Whether the decoder takes part in the objective (and so whether the
/// cosine metric is reported).
pub fn reconstruction_active(net: &Network, cfg: &TrainConfig) -> bool {
    net.heads().decoder.is_some() && (net.kind() == ModelKind::ClassEncoder || cfg.lambda > 0.0)
}

/// Metrics of `net` on an evaluation set, combined with the epoch's costs.
pub fn evaluate(net: &Network, cfg: &TrainConfig, ds: &Dataset, epoch: usize, cost: EpochCost) -> Result<MetricsRecord> {
    let test_error_pct = match net.heads().softmax {
        Some(_) => {
            if net.num_classes() != Some(ds.num_classes()) {
                return Err(dim_err!(
                    "network has {:?} classes, data has {}",
                    net.num_classes(),
                    ds.num_classes()
                ));
            }
            classification_error(net, ds)?
        }
        None => f64::NAN,
    };
    let code = net.features(ds.samples(), net.code_layer())?;
    let intra_var = intra_class_variance(&code, ds.labels(), ds.num_classes())?.mean;
    let cosine_mean = if reconstruction_active(net, cfg) {
        let (recon, targets) = net.self_reconstruction(ds.samples())?;
        cosine_to_class_mean(&recon, &targets, ds.labels(), ds.num_classes())?.mean
    } else {
        f64::NAN
    };
    Ok(MetricsRecord {
        epoch,
        cost_total: cost.total,
        cost_softmax: cost.softmax,
        cost_recon: cost.reconstruction,
        test_error_pct,
        intra_var,
        cosine_mean,
    })
}
