//! Dense row-major tensors and the matrix kernels behind them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Dense n-dimensional array in row-major order. Every extent is positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Invalid("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().map(|&x| S::lit(x))).collect();
        Self::matrix(rows.len(), cols, data)
    }

    pub fn scalar(x: S) -> Self {
        Self { shape: vec![1], data: vec![x] }
    }

    pub fn full(shape: &[usize], x: S) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![x; n]).expect("positive extents")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    /// Gaussian entries with standard deviation `std` (Box-Muller).
    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            let u2: f64 = rng.gen();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = std::f64::consts::TAU * u2;
            data.push(S::lit(std * r * theta.cos()));
            if data.len() < n {
                data.push(S::lit(std * r * theta.sin()));
            }
        }
        Self::new(shape.to_vec(), data).expect("positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> S {
        self.data[i * self.last_dim() + j]
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::InvalidShape { shape, len: self.data.len() });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, k: S) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> S {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max)
    }

    pub fn transpose2(&self) -> Result<Self, TensorError> {
        let (r, c) = self.dims2("transpose")?;
        Ok(Self {
            shape: vec![c, r],
            data: transpose(&self.data, r, c),
        })
    }

    /// Matrix product of rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self, TensorError> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: vec![m, n],
            data: mm(&self.data, &other.data, m, k, n),
        })
    }
}

pub(crate) fn transpose<S: Scalar>(a: &[S], r: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// `a[m×k] · b[k×n]`
pub(crate) fn mm<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

/// `aᵀ · b` for `a[m×k]`, `b[m×n]`, giving `[k×n]`.
pub(crate) fn mm_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`, giving `[m×n]`.
pub(crate) fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    mm(a, &transpose(b, n, k), m, k, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn identity_product() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        let r = Tensor::<f64>::from_rows(&[&[1.0, 2.0]]).unwrap();
        let c = Tensor::<f64>::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(r.matmul(&c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn kernels_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let bt = b.transpose2().unwrap();
        let via_t = a.matmul(&bt).unwrap();
        let nt = mm_nt(a.data(), b.data(), 3, 4, 5);
        assert!(via_t.data().iter().zip(&nt).all(|(x, y)| (x - y).abs() < 1e-12));
        let c = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        let tn = mm_tn(a.data(), c.data(), 3, 4, 5);
        let at = a.transpose2().unwrap().matmul(&c).unwrap();
        assert!(at.data().iter().zip(&tn).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn randn_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::<f64>::randn(&[10_000], 2.0, &mut rng);
        let mean = t.sum() / 10_000.0;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 0.1);
        assert!((var.sqrt() - 2.0).abs() < 0.1);
    }
}
