//! Dense row-major `f64` tensors.
//!
//! Every reduction runs in a fixed order (left to right over the reduced
//! index) so results are bit-reproducible across runs and platforms.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("zero-sized dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!("shape {shape:?} needs {expected} elements, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// Rank-1 tensor holding `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Rank-2 tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    fn check_same(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!("{op}: shapes {:?} and {:?} differ", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|x| alpha * x)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// `self += alpha * other`.
    ///
    /// Panics if the shapes differ; callers pair tensors from the same layout.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |acc, (&a, &b)| acc + a * b))
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x * x)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc: f64, &x| acc.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Dimension(format!("transpose needs rank 2, got {:?}", self.shape)));
        }
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    /// Matrix product. Each output entry accumulates over the inner index in
    /// ascending order starting from `0.0`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::Dimension(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b = &other.data[p * m..(p + 1) * m];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.rows() != other.rows() {
            return Err(Error::Dimension(format!("matmul_tn: {:?}ᵀ x {:?}", self.shape, other.shape)));
        }
        let (k, n) = (self.rows(), self.cols());
        let m = other.cols();
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let b = &other.data[p * m..(p + 1) * m];
            for i in 0..n {
                let a = self.data[p * n + i];
                let row = &mut out[i * m..(i + 1) * m];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.cols() != other.cols() {
            return Err(Error::Dimension(format!("matmul_nt: {:?} x {:?}ᵀ", self.shape, other.shape)));
        }
        let (n, k) = (self.rows(), self.cols());
        let m = other.rows();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = a.iter().zip(b).fold(0.0, |acc, (&x, &y)| acc + x * y);
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    /// Column sums of a rank-2 tensor, accumulated top to bottom.
    pub fn sum_rows(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        Tensor::vector(out)
    }
}

/// Indices of the `k` largest entries of `values`, sorted ascending.
///
/// Ties are broken toward the lowest index.
pub fn topk_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > values.len() {
        return Err(Error::Argument(format!("k = {k} exceeds length {}", values.len())));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| match values[b].total_cmp(&values[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// I.i.d. normal samples drawn with [`RngStream::next_gaussian`].
pub fn gaussian(rng: &mut RngStream, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::Argument(format!("std must be finite and >= 0, got {std}")));
    }
    let n: usize = shape.iter().product();
    let data = if std == 0.0 { vec![mean; n] } else { (0..n).map(|_| mean + std * rng.next_gaussian()).collect() };
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (n, k, m) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * m + j];
                }
                out[i * m + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_small_cases() {
        let a = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        let row = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let col = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = RngStream::new(11);
        let a = gaussian(&mut rng, &[5, 7], 0.0, 1.0).unwrap();
        let b = gaussian(&mut rng, &[7, 3], 0.0, 1.0).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[5, 3]);
        assert_eq!(c.data(), naive_matmul(&a, &b).as_slice());
        let at = a.transpose().unwrap();
        assert_eq!(at.matmul_tn(&b).unwrap().data(), c.data());
        let bt = b.transpose().unwrap();
        assert_eq!(a.matmul_nt(&bt).unwrap().data(), c.data());
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_indices(&[0.5, -0.2, 0.1, 0.9], 2).unwrap(), vec![0, 3]);
        assert!(topk_indices(&[0.5, -0.2], 0).unwrap().is_empty());
        assert_eq!(topk_indices(&[1.0, 1.0, 1.0], 2).unwrap(), vec![0, 1]);
        assert!(matches!(topk_indices(&[1.0], 2), Err(Error::Argument(_))));
    }

    #[test]
    fn gaussian_degenerate_and_deterministic() {
        let mut rng = RngStream::new(3);
        assert_eq!(gaussian(&mut rng, &[3], 0.0, 0.0).unwrap().data(), &[0.0; 3]);
        assert!(gaussian(&mut rng, &[3], 0.0, -1.0).is_err());
        let a = gaussian(&mut RngStream::new(9), &[50], 1.0, 2.0).unwrap();
        let b = gaussian(&mut RngStream::new(9), &[50], 1.0, 2.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_sample_mean_concentrates() {
        let std = 2.0;
        let t = gaussian(&mut RngStream::new(2024), &[10_000], 3.0, std).unwrap();
        let mean = t.sum() / t.len() as f64;
        assert!((mean - 3.0).abs() < 4.0 * std / 100.0, "mean {mean}");
    }

    proptest! {
        #[test]
        fn elementwise_ops_commute_with_reshape(
            a in proptest::collection::vec(-10.0f64..10.0, 12),
            b in proptest::collection::vec(-10.0f64..10.0, 12),
            alpha in -3.0f64..3.0,
        ) {
            let ta = Tensor::new(vec![3, 4], a.clone()).unwrap();
            let tb = Tensor::new(vec![3, 4], b.clone()).unwrap();
            let fa = Tensor::vector(a);
            let fb = Tensor::vector(b);
            prop_assert_eq!(ta.add(&tb).unwrap().into_data(), fa.add(&fb).unwrap().into_data());
            prop_assert_eq!(ta.sub(&tb).unwrap().into_data(), fa.sub(&fb).unwrap().into_data());
            prop_assert_eq!(ta.mul(&tb).unwrap().into_data(), fa.mul(&fb).unwrap().into_data());
            prop_assert_eq!(ta.scale(alpha).into_data(), fa.scale(alpha).into_data());
        }

        #[test]
        fn topk_full_length_is_all_indices(v in proptest::collection::vec(-5.0f64..5.0, 0..20)) {
            let all: Vec<usize> = (0..v.len()).collect();
            prop_assert_eq!(topk_indices(&v, v.len()).unwrap(), all);
        }

        #[test]
        fn identity_matmul_is_exact(a in proptest::collection::vec(-1e3f64..1e3, 6)) {
            let t = Tensor::new(vec![2, 3], a).unwrap();
            prop_assert_eq!(Tensor::identity(2).matmul(&t).unwrap(), t);
        }
    }
}
