//! Dense row-major `f64` tensors and the deterministic kernels built on them.
//!
//! Every reduction accumulates in ascending index order, so repeated calls on
//! the same inputs are bitwise identical. Public operations refuse to return
//! non-finite values.

use std::fmt;
use std::str::FromStr;

use crate::error::{cfg_err, dim_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numeric(format!(
            "{op} produced non-finite value {} at flat index {i}",
            data[i]
        ))),
    }
}

impl Tensor {
    /// Builds a tensor, validating extents, length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(dim_err!("shape {shape:?} has a zero extent"));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(dim_err!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            ));
        }
        check_finite("Tensor::new", &data)?;
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for buffers that are finite by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    /// Internal constructor that still rejects non-finite results.
    pub(crate) fn checked(op: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_finite(op, &data)?;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite());
        let len = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; len])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![], vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(dim_err!("from_rows needs at least one row"));
        };
        let cols = first.len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err!("from_rows: ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading extent (batch size for batched tensors).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of values per leading index.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.rows()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &e)| {
                assert!(i < e, "index {index:?} out of bounds for {:?}", self.shape);
                acc * e + i
            })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.contains(&0) {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Flattens everything after the leading extent: `[B, ...] -> [B, prod(...)]`.
    pub fn flatten_rows(&self) -> Tensor {
        Tensor::from_parts(vec![self.rows(), self.row_len()], self.data.clone())
    }

    /// Gathers rows (leading-index slices) in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(dim_err!("select_rows with no indices"));
        }
        let w = self.row_len();
        let n = self.rows();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= n {
                return Err(dim_err!("row {i} out of range for {:?}", self.shape));
            }
            data.extend_from_slice(&self.data[i * w..(i + 1) * w]);
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = indices.len();
        Ok(Tensor::from_parts(shape, data))
    }

    /// `self += other`, shapes must match element counts.
    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn scale_in_place(&mut self, factor: f64) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn expect_matrix(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            s => Err(dim_err!("{op} needs a rank-2 tensor, got shape {s:?}")),
        }
    }
}

/// `c[i][..] += Σ_t a[i][t] · b[t][..]` over row-major blocks with explicit row strides.
///
/// Each output entry accumulates its products in ascending `t`. Zero entries of `a`
/// are skipped; since accumulators start at `+0.0` this never changes a result bit.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
) {
    for i in 0..m {
        let a_row = &a[i * lda..i * lda + k];
        let c_row = &mut c[i * ldc..i * ldc + n];
        for (t, &a_it) in a_row.iter().enumerate() {
            if a_it == 0.0 {
                continue;
            }
            let b_row = &b[t * ldb..t * ldb + n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += a_it * bj;
            }
        }
    }
}

/// Row-major transpose of an `m × n` block into a fresh `n × m` buffer.
pub(crate) fn transpose_block(m: usize, n: usize, a: &[f64], lda: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * lda + j];
        }
    }
    out
}

/// Matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_matrix("matmul")?;
    let (k2, n) = b.expect_matrix("matmul")?;
    if k != k2 {
        return Err(dim_err!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape,
            b.shape
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(m, k, n, &a.data, k, &b.data, n, &mut out, n);
    Tensor::checked("matmul", vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.expect_matrix("transpose")?;
    Ok(Tensor::from_parts(vec![n, m], transpose_block(m, n, &a.data, n)))
}

/// Scalar functions that can be mapped over a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseFn {
    Sigmoid,
    Relu,
    /// `y (1 - y)` evaluated on a sigmoid output `y`.
    SigmoidDerivFromOutput,
    /// `1` for positive inputs, else `0` (the derivative at exactly zero is `0`).
    ReluDerivFromInput,
    Identity,
}

impl ElementwiseFn {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            ElementwiseFn::Sigmoid => sigmoid(x),
            ElementwiseFn::Relu => x.max(0.0),
            ElementwiseFn::SigmoidDerivFromOutput => x * (1.0 - x),
            ElementwiseFn::ReluDerivFromInput => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ElementwiseFn::Identity => x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementwiseFn::Sigmoid => "sigmoid",
            ElementwiseFn::Relu => "relu",
            ElementwiseFn::SigmoidDerivFromOutput => "sigmoid_deriv_from_output",
            ElementwiseFn::ReluDerivFromInput => "relu_deriv_from_input",
            ElementwiseFn::Identity => "identity",
        }
    }
}

impl FromStr for ElementwiseFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sigmoid" => ElementwiseFn::Sigmoid,
            "relu" => ElementwiseFn::Relu,
            "sigmoid_deriv_from_output" => ElementwiseFn::SigmoidDerivFromOutput,
            "relu_deriv_from_input" => ElementwiseFn::ReluDerivFromInput,
            "identity" => ElementwiseFn::Identity,
            other => return Err(cfg_err!("unknown elementwise function `{other}`")),
        })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn map_elementwise(a: &Tensor, f: ElementwiseFn) -> Result<Tensor> {
    let data = a.data.iter().map(|&x| f.eval(x)).collect();
    Tensor::checked(f.name(), a.shape.clone(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceAxis {
    All,
    Axis(usize),
}

fn fold(op: ReduceOp, values: impl Iterator<Item = f64>) -> f64 {
    let mut count = 0usize;
    let mut acc = match op {
        ReduceOp::Max => f64::NEG_INFINITY,
        _ => 0.0,
    };
    for v in values {
        count += 1;
        acc = match op {
            ReduceOp::Max => acc.max(v),
            _ => acc + v,
        };
    }
    match op {
        ReduceOp::Mean => acc / count as f64,
        _ => acc,
    }
}

/// Sum, mean or max over one axis (removed from the result) or over everything
/// (rank-0 result).
pub fn reduce(a: &Tensor, op: ReduceOp, axis: ReduceAxis) -> Result<Tensor> {
    match axis {
        ReduceAxis::All => Tensor::checked("reduce", vec![], vec![fold(op, a.data.iter().copied())]),
        ReduceAxis::Axis(ax) => {
            if ax >= a.rank() {
                return Err(dim_err!(
                    "reduce axis {ax} out of range for shape {:?}",
                    a.shape
                ));
            }
            let outer: usize = a.shape[..ax].iter().product();
            let extent = a.shape[ax];
            let inner: usize = a.shape[ax + 1..].iter().product();
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * extent * inner + i;
                    out.push(fold(op, (0..extent).map(|t| a.data[base + t * inner])));
                }
            }
            let mut shape = a.shape.clone();
            shape.remove(ax);
            Tensor::checked("reduce", shape, out)
        }
    }
}

/// Per-row index of the maximum; ties go to the smallest index.
pub fn argmax_rows(a: &Tensor) -> Result<Vec<usize>> {
    let (m, n) = a.expect_matrix("argmax_rows")?;
    Ok((0..m).map(|i| argmax(&a.data[i * n..(i + 1) * n])).collect())
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
            .unwrap()
    }

    #[test]
    fn matmul_identity_and_column() {
        let a = Tensor::from_rows(&[vec![3.0, 5.0], vec![7.0, 9.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&b, &c).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let mut rng = Rng::new(7);
        let a = random(&[7, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut acc = 0.0;
                for t in 0..5 {
                    acc += a.get(&[i, t]) * b.get(&[t, j]);
                }
                assert_eq!(c.get(&[i, j]).to_bits(), acc.to_bits());
            }
        }
        assert_eq!(matmul(&a, &Tensor::identity(5)).unwrap(), a);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn transpose_cases() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(transpose(&a).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
        let row = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(transpose(&row).unwrap().shape(), &[4, 1]);
        let mut rng = Rng::new(3);
        let r = random(&[4, 6], &mut rng);
        assert_eq!(transpose(&transpose(&r).unwrap()).unwrap(), r);
        assert!(matches!(
            transpose(&Tensor::zeros(&[2, 2, 2])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn elementwise() {
        let z = Tensor::scalar(0.0).unwrap();
        assert_eq!(map_elementwise(&z, ElementwiseFn::Sigmoid).unwrap().data(), &[0.5]);
        let v = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(map_elementwise(&v, ElementwiseFn::Relu).unwrap().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(
            map_elementwise(&v, ElementwiseFn::ReluDerivFromInput).unwrap().data(),
            &[0.0, 0.0, 1.0]
        );
        let mut rng = Rng::new(11);
        let big = random(&[1000], &mut rng);
        let mapped = map_elementwise(&big, ElementwiseFn::Sigmoid).unwrap();
        for (x, y) in big.data().iter().zip(mapped.data()) {
            assert_eq!(*y, 1.0 / (1.0 + (-x).exp()));
        }
        assert!(matches!("tanh".parse::<ElementwiseFn>(), Err(Error::Config(_))));
        assert_eq!(
            "sigmoid_deriv_from_output".parse::<ElementwiseFn>().unwrap(),
            ElementwiseFn::SigmoidDerivFromOutput
        );
    }

    #[test]
    fn reductions() {
        let v = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(reduce(&v, ReduceOp::Sum, ReduceAxis::All).unwrap().data(), &[6.0]);
        let c = Tensor::filled(&[3, 2], 0.75);
        assert_eq!(reduce(&c, ReduceOp::Mean, ReduceAxis::All).unwrap().data(), &[0.75]);
        // sum / count of a non-dyadic constant is within one rounding of it
        let c = Tensor::filled(&[3, 2], 0.7);
        let m = reduce(&c, ReduceOp::Mean, ReduceAxis::All).unwrap().data()[0];
        assert!((m - 0.7).abs() <= f64::EPSILON);
        assert_eq!(reduce(&v, ReduceOp::Max, ReduceAxis::All).unwrap().data(), &[3.0]);

        let mut rng = Rng::new(5);
        let r = random(&[3, 4], &mut rng);
        let s0 = reduce(&r, ReduceOp::Sum, ReduceAxis::Axis(0)).unwrap();
        let s1 = reduce(&r, ReduceOp::Sum, ReduceAxis::Axis(1)).unwrap();
        assert_eq!(s0.shape(), &[4]);
        assert_eq!(s1.shape(), &[3]);
        for j in 0..4 {
            let mut acc = 0.0;
            for i in 0..3 {
                acc += r.get(&[i, j]);
            }
            assert_eq!(s0.data()[j].to_bits(), acc.to_bits());
        }
        for i in 0..3 {
            let mut acc = 0.0;
            for j in 0..4 {
                acc += r.get(&[i, j]);
            }
            assert_eq!(s1.data()[i].to_bits(), acc.to_bits());
        }
        assert!(matches!(
            reduce(&r, ReduceOp::Sum, ReduceAxis::Axis(2)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn argmax_tie_break_and_oracle() {
        let a = Tensor::from_rows(&[vec![0.1, 0.9, 0.0]]).unwrap();
        assert_eq!(argmax_rows(&a).unwrap(), vec![1]);
        let t = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(argmax_rows(&t).unwrap(), vec![0]);
        let mut rng = Rng::new(9);
        let r = random(&[10, 10], &mut rng);
        let got = argmax_rows(&r).unwrap();
        for i in 0..10 {
            let mut best = 0;
            for j in 0..10 {
                if r.get(&[i, j]) > r.get(&[i, best]) {
                    best = j;
                }
            }
            assert_eq!(got[i], best);
        }
    }

    #[test]
    fn rejects_non_finite_and_bad_lengths() {
        assert!(matches!(Tensor::new(vec![2], vec![1.0, f64::NAN]), Err(Error::Numeric(_))));
        assert!(matches!(Tensor::new(vec![2, 2], vec![1.0]), Err(Error::Dimension(_))));
        let huge = Tensor::new(vec![1, 1], vec![1e300]).unwrap();
        assert!(matches!(matmul(&huge, &huge), Err(Error::Numeric(_))));
    }

    #[test]
    fn deterministic_repeat() {
        let mut rng = Rng::new(1);
        let a = random(&[6, 9], &mut rng);
        let b = random(&[9, 4], &mut rng);
        assert_eq!(matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
    }
}
