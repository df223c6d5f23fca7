//! Dense row-major tensors of floating-point scalars.
//!
//! This is the single storage type behind the autodiff graph, the policy
//! network and the rollout math. The kernels here (matmul, row softmax) are
//! shared by the plain forward path used during sampling and by the graph ops
//! used during training, so both produce bit-identical values: every dot
//! product accumulates left-to-right over the inner index, every softmax row
//! reduces in column order.

use crate::scalar::Real;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite element at index {index}")]
    NonFinite { index: usize },
    #[error("incompatible shapes: {0}")]
    Incompatible(String),
}

/// Dense tensor; `data.len() == shape.iter().product()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    /// Checked constructor for leaf tensors: validates the shape/data
    /// contract and rejects NaN/Inf.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch { shape, len: data.len() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for op outputs; shape/data must already agree.
    /// Non-finite values are allowed here (log-softmax emits -inf on the
    /// masked column).
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![F::zero(); numel] }
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<F>) -> Result<Self, TensorError> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> F {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            1 => 1,
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor::from_op(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Lossy conversion between scalar types (used by checkpoints, which are
    /// always 64-bit on disk).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap()).collect()
    }
}

/// `out[i][j] = sum_k a[i][k] * b[k][j]`, accumulated in ascending k.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, ka) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * ka..(i + 1) * ka];
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &b.data[k * n..(k + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    Tensor::from_op(vec![m, n], out)
}

/// `out = a^T @ b` where a is (k x m), b is (k x n). Used by backward passes.
pub fn matmul_at_b<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (ka, m) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    assert_eq!(ka, kb, "matmul_at_b outer dims {ka} vs {kb}");
    let mut out = vec![F::zero(); m * n];
    for k in 0..ka {
        let arow = &a.data[k * m..(k + 1) * m];
        let brow = &b.data[k * n..(k + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    Tensor::from_op(vec![m, n], out)
}

/// `out = a @ b^T` where a is (m x k), b is (n x k). Used by backward passes.
pub fn matmul_a_bt<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, ka) = (a.rows(), a.cols());
    let (n, kb) = (b.rows(), b.cols());
    assert_eq!(ka, kb, "matmul_a_bt inner dims {ka} vs {kb}");
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * ka..(i + 1) * ka];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b.data[j * kb..(j + 1) * kb];
            let mut acc = F::zero();
            for k in 0..ka {
                acc = acc + arow[k] * brow[k];
            }
            *o = acc;
        }
    }
    Tensor::from_op(vec![m, n], out)
}

/// Numerically stable log-softmax of one row, with an optional masked column
/// treated as probability zero (output -inf there).
///
/// Reductions run in ascending column order so the result is reproducible.
pub fn log_softmax_row<F: Real>(row: &[F], masked: Option<usize>, out: &mut [F]) {
    debug_assert_eq!(row.len(), out.len());
    let mut max = F::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if Some(j) == masked {
            continue;
        }
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for (j, &v) in row.iter().enumerate() {
        if Some(j) == masked {
            continue;
        }
        sum = sum + (v - max).exp();
    }
    let log_z = max + sum.ln();
    for (j, o) in out.iter_mut().enumerate() {
        *o = if Some(j) == masked { F::neg_infinity() } else { row[j] - log_z };
    }
}

/// Shannon entropy (nats) of the softmax of `row`, with the masked column
/// excluded from the support.
pub fn softmax_entropy_row<F: Real>(row: &[F], masked: Option<usize>) -> F {
    let mut logp = vec![F::zero(); row.len()];
    log_softmax_row(row, masked, &mut logp);
    let mut h = F::zero();
    for (j, &lp) in logp.iter().enumerate() {
        if Some(j) == masked {
            continue;
        }
        let p = lp.exp();
        if p > F::zero() {
            h = h - p * lp;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_contract() {
        assert!(Tensor::new(vec![2, 2], vec![1.0f64; 4]).is_ok());
        assert_eq!(
            Tensor::new(vec![2, 2], vec![1.0f64; 3]).unwrap_err(),
            TensorError::ShapeMismatch { shape: vec![2, 2], len: 3 }
        );
        assert_eq!(
            Tensor::new(vec![2], vec![1.0f64, f64::NAN]).unwrap_err(),
            TensorError::NonFinite { index: 1 }
        );
        assert_eq!(
            Tensor::new(vec![1], vec![f64::INFINITY]).unwrap_err(),
            TensorError::NonFinite { index: 0 }
        );
    }

    #[test]
    fn matmul_small_known() {
        let a = Tensor::matrix(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let a = Tensor::matrix(3, 2, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 4, (0..12).map(|v| v as f64).collect()).unwrap();
        let at = Tensor::matrix(2, 3, vec![1.0, 3.0, 5.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(matmul_at_b(&a, &b).data(), matmul(&at, &b).data());

        let c = Tensor::matrix(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let d = Tensor::matrix(4, 3, (0..12).map(|v| v as f64).collect()).unwrap();
        let dt = Tensor::matrix(3, 4, vec![0.0, 3.0, 6.0, 9.0, 1.0, 4.0, 7.0, 10.0, 2.0, 5.0, 8.0, 11.0]).unwrap();
        assert_eq!(matmul_a_bt(&c, &d).data(), matmul(&c, &dt).data());
    }

    #[test]
    fn log_softmax_uniform_and_shift_invariance() {
        let mut out = [0.0f64; 2];
        log_softmax_row(&[0.0, 0.0], None, &mut out);
        for &v in &out {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
        // shift invariance at large magnitude
        let mut a = [0.0f64; 4];
        let mut b = [0.0f64; 4];
        log_softmax_row(&[1000.0, 999.0, 998.0, 997.0], None, &mut a);
        log_softmax_row(&[3.0, 2.0, 1.0, 0.0], None, &mut b);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_masked_column() {
        let mut out = [0.0f64; 3];
        log_softmax_row(&[5.0, 0.0, 0.0], Some(0), &mut out);
        assert!(out[0].is_infinite() && out[0] < 0.0);
        assert!((out[1] + std::f64::consts::LN_2).abs() < 1e-15);
        let p: f64 = out[1].exp() + out[2].exp();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_two_point() {
        let h = softmax_entropy_row(&[0.0f64, 0.0], None);
        assert!((h - std::f64::consts::LN_2).abs() < 1e-12);
        let h1 = softmax_entropy_row(&[1e6f64, 0.0], None);
        assert!(h1 < 1e-6);
    }

    #[test]
    fn kernels_work_at_f32() {
        let a = Tensor::matrix(2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).data(), a.data());
    }
}
