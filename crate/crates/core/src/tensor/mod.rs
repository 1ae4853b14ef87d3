//! Dense row-major tensors, the pure forward kernels used by every model
//! module, and a reverse-mode tape ([`Graph`]) that records those kernels.
//!
//! All reductions run in a fixed index order so forward results are bitwise
//! reproducible for identical inputs.

mod check;
mod graph;

pub(crate) use check::random_tensor;
pub use check::{central_difference, project_to_scalar, relative_error, vjp_check, VjpReport};
pub use graph::{Gradients, Graph, Var};

use crate::error::{Error, Result};

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Norms at or below this are treated as zero by [`l2_normalize`].
pub const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Row vector `1×n`.
    pub fn row(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim("from_rows", &[i, r.len()], &[cols]));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor (a rank-1 tensor counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dim(op, other, &[0, 0])),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        transpose(self)
    }
}

/// `a[m×k] · b[k×n]`, accumulated in `i-p-j` order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_matrix("matmul")?;
    let (k2, n) = b.require_matrix("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a[m×k] · b[n×k]ᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_matrix("matmul_nt")?;
    let (n, k2) = b.require_matrix("matmul_nt")?;
    if k != k2 {
        return Err(Error::dim("matmul_nt", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.require_matrix("matmul_tn")?;
    let (k2, n) = b.require_matrix("matmul_tn")?;
    if k != k2 {
        return Err(Error::dim("matmul_tn", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a.data[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.require_matrix("transpose")?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor::matrix(c, r, out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.data.clone();
    for row in out.chunks_mut(c.max(1)) {
        softmax_in_place(row);
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Saved statistics of a layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Per-row `(x − mean) / sqrt(var + ε) · gain + bias` with population variance.
pub fn layer_norm_rows(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    let c = x.cols();
    if c < 2 {
        return Err(Error::Degenerate(format!(
            "layer norm needs at least 2 channels per row, got {c}"
        )));
    }
    if gain.len() != c || bias.len() != c {
        return Err(Error::dim("layer_norm_rows", &x.shape, gain.shape()));
    }
    let rows = x.len() / c;
    let mut normalized = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        for j in 0..c {
            let xh = (row[j] - mean) * is;
            normalized[r * c + j] = xh;
            out[r * c + j] = xh * gain.data[j] + bias.data[j];
        }
    }
    Ok((
        Tensor {
            shape: x.shape.clone(),
            data: out,
        },
        LayerNormCache {
            normalized: Tensor {
                shape: x.shape.clone(),
                data: normalized,
            },
            inv_std,
        },
    ))
}

/// Unit-norm copy of `v`; vectors with norm ≤ [`L2_EPS`] are returned unchanged.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = l2_norm(v);
    if norm <= L2_EPS {
        return v.to_vec();
    }
    v.iter().map(|x| x / norm).collect()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_matmul() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn selector_row() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_products_agree() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::matrix(4, 3, (0..12).map(f64::from).collect()).unwrap();
        let direct = a.matmul(&b.transpose().unwrap()).unwrap();
        assert_eq!(matmul_nt(&a, &b).unwrap(), direct);
        let c = Tensor::matrix(2, 4, (0..8).map(f64::from).collect()).unwrap();
        let direct = a.transpose().unwrap().matmul(&c).unwrap();
        assert_eq!(matmul_tn(&a, &c).unwrap(), direct);
    }

    #[test]
    fn softmax_equal_logits() {
        let s = softmax_rows(&Tensor::row(vec![0.0; 4]));
        assert_eq!(s.data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_large_logit_does_not_overflow() {
        let s = softmax_rows(&Tensor::row(vec![1000.0, 0.0]));
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1].abs() < 1e-12);
    }

    #[test]
    fn layer_norm_hand_values() {
        let x = Tensor::row(vec![1.0, 2.0, 3.0]);
        let (y, _) = layer_norm_rows(&x, &Tensor::filled(&[3], 1.0), &Tensor::zeros(&[3])).unwrap();
        let expected = [-1.22474, 0.0, 1.22474];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::row(vec![5.0; 3]);
        let (y, _) = layer_norm_rows(&x, &Tensor::filled(&[3], 1.0), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.data(), &[0.0; 3]);
    }

    #[test]
    fn layer_norm_rejects_single_channel() {
        let x = Tensor::row(vec![5.0]);
        let err = layer_norm_rows(&x, &Tensor::filled(&[1], 1.0), &Tensor::zeros(&[1]));
        assert!(matches!(err, Err(Error::Degenerate(_))));
    }

    #[test]
    fn l2_normalize_cases() {
        assert_eq!(l2_normalize(&[3.0, 4.0]), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 1.0]), vec![0.0, 1.0]);
        assert_eq!(l2_normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    fn matrix_strategy(max_r: usize, max_c: usize) -> impl Strategy<Value = Tensor> {
        (1..=max_r, 2..=max_c).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-50.0f64..50.0, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(x in matrix_strategy(6, 9)) {
            let s = softmax_rows(&x);
            for r in 0..s.rows() {
                let sum: f64 = s.row_slice(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(s.row_slice(r).iter().all(|v| *v >= 0.0));
            }
        }

        #[test]
        fn layer_norm_standardizes_rows(x in matrix_strategy(5, 12)) {
            let c = x.cols();
            let (y, _) = layer_norm_rows(&x, &Tensor::filled(&[c], 1.0), &Tensor::zeros(&[c])).unwrap();
            for r in 0..x.rows() {
                let row = x.row_slice(r);
                let m = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c as f64;
                // ε = 1e-5 shrinks the output variance by var/(var+ε).
                prop_assume!(var > 10.0);
                let out = y.row_slice(r);
                let mean = out.iter().sum::<f64>() / c as f64;
                let ovar = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((ovar - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn forward_is_bitwise_deterministic(a in matrix_strategy(5, 7)) {
            let b = a.transpose().unwrap();
            prop_assert_eq!(a.matmul(&b).unwrap(), a.matmul(&b).unwrap());
            prop_assert_eq!(softmax_rows(&a), softmax_rows(&a));
        }
    }
}
