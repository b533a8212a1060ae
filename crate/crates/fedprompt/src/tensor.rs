//! Dense row-major `f64` matrices.
//!
//! Everything in this crate is at most two-dimensional; vectors are `1 x n`
//! tensors. Constructors taking external data validate finiteness once, after
//! which internal arithmetic may assume it. Shape mismatches are programming
//! errors and panic with the offending dimensions.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from row-major data, rejecting size mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor {rows}x{cols}")));
        }
        Ok(Self { rows, cols, data })
    }

    #[must_use]
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    #[must_use]
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    #[must_use]
    pub fn scalar(value: f64) -> Self {
        assert!(value.is_finite(), "scalar must be finite");
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    /// A `1 x n` row vector.
    pub fn row(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(1, n, data)
    }

    #[must_use]
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = f(i, j);
                assert!(v.is_finite(), "from_fn produced non-finite value at ({i},{j})");
                data.push(v);
            }
        }
        Self { rows, cols, data }
    }

    /// I.i.d. Gaussian entries with standard deviation `std`.
    #[must_use]
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        Self { rows, cols, data }
    }

    #[must_use]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[must_use]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[must_use]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[must_use]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[must_use]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    #[must_use]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    #[must_use]
    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_slice_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// The value of a `1 x 1` tensor.
    #[must_use]
    pub fn item(&self) -> f64 {
        assert_eq!((self.rows, self.cols), (1, 1), "item() requires a 1x1 tensor");
        self.data[0]
    }

    /// Returns `Err(NonFinite)` if any entry is NaN or infinite.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// `self · b`.
    #[must_use]
    pub fn matmul(&self, b: &Tensor) -> Tensor {
        assert_eq!(
            self.cols, b.rows,
            "matmul shape mismatch: {}x{} times {}x{}",
            self.rows, self.cols, b.rows, b.cols
        );
        let mut out = Tensor::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let arow = self.row_slice(i);
            let orow = out.row_slice_mut(i);
            for (k, &a) in arow.iter().enumerate() {
                let brow = &b.data[k * b.cols..(k + 1) * b.cols];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    /// `self · bᵀ` without materialising the transpose.
    #[must_use]
    pub fn matmul_nt(&self, b: &Tensor) -> Tensor {
        assert_eq!(
            self.cols, b.cols,
            "matmul_nt shape mismatch: {}x{} times ({}x{})ᵀ",
            self.rows, self.cols, b.rows, b.cols
        );
        let mut out = Tensor::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            let arow = self.row_slice(i);
            let orow = out.row_slice_mut(i);
            for (j, o) in orow.iter_mut().enumerate() {
                let brow = b.row_slice(j);
                *o = dot(arow, brow);
            }
        }
        out
    }

    /// `selfᵀ · b` without materialising the transpose.
    #[must_use]
    pub fn matmul_tn(&self, b: &Tensor) -> Tensor {
        assert_eq!(
            self.rows, b.rows,
            "matmul_tn shape mismatch: ({}x{})ᵀ times {}x{}",
            self.rows, self.cols, b.rows, b.cols
        );
        let mut out = Tensor::zeros(self.cols, b.cols);
        for k in 0..self.rows {
            let arow = self.row_slice(k);
            let brow = b.row_slice(k);
            for (i, &a) in arow.iter().enumerate() {
                let orow = out.row_slice_mut(i);
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    #[must_use]
    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self += alpha * other`, the SGD update primitive.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    #[must_use]
    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    /// Euclidean distance between same-shaped tensors viewed as flat vectors.
    #[must_use]
    pub fn dist(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape(), "dist shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Stacks tensors with equal column counts, top to bottom.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts
            .first()
            .ok_or_else(|| Error::Contract("vstack of zero tensors".into()))?
            .cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::Contract(format!(
                    "vstack column mismatch: {} vs {cols}",
                    p.cols
                )));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { rows, cols, data })
    }
}

#[inline]
#[must_use]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two same-length flat vectors.
///
/// Errors if either vector has norm below `1e-12`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "cosine length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::Contract(format!(
            "cosine of degenerate vector (norms {na:.3e}, {nb:.3e})"
        )));
    }
    Ok(dot(a, b) / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn new_rejects_bad_shape_and_nan() {
        assert!(matches!(Tensor::new(2, 2, vec![1.0; 3]), Err(Error::Contract(_))));
        assert!(matches!(
            Tensor::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn matmul_matches_hand_example() {
        let a = Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let a = Tensor::randn(4, 3, 1.0, &mut rng);
        let b = Tensor::randn(5, 3, 1.0, &mut rng);
        let nt = a.matmul_nt(&b);
        let explicit = a.matmul(&b.transpose());
        assert_eq!(nt, explicit);

        let c = Tensor::randn(4, 6, 1.0, &mut rng);
        let tn = a.matmul_tn(&c);
        let explicit = a.transpose().matmul(&c);
        for (x, y) in tn.data().iter().zip(explicit.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_basics() {
        let a = [1.0, 0.0];
        let b = [0.0, 2.0];
        assert!((cosine(&a, &a.clone()).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine(&a, &b).unwrap().abs() < 1e-15);
        assert!(cosine(&a, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn vstack_concatenates_rows() {
        let a = Tensor::new(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = Tensor::vstack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), (3, 2));
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(Tensor::vstack(&[&a, &Tensor::zeros(1, 3)]).is_err());
    }
}
