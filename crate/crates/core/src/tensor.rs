//! Dense row-major `f64` tensors.
//!
//! Every constructor and public operation rejects NaN/Inf, so a value of this
//! type is always finite.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    /// Builds a tensor without the finiteness scan. Callers guarantee the
    /// invariants (used internally after a checked computation).
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Number of rows when viewed as a matrix (1-D tensors are a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(op, &self.shape, &[]));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (r, k) = self.require_matrix("matmul")?;
        let (k2, c) = rhs.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let mut out = vec![0.0; r * c];
        gemm_nn(&self.data, &rhs.data, &mut out, r, k, c);
        finite(vec![r, c], out, "matmul")
    }

    /// `self · rhsᵀ`.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        let (r, k) = self.require_matrix("matmul_nt")?;
        let (c, k2) = rhs.require_matrix("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", &self.shape, &rhs.shape));
        }
        let mut out = vec![0.0; r * c];
        gemm_nt(&self.data, &rhs.data, &mut out, r, k, c);
        finite(vec![r, c], out, "matmul_nt")
    }

    /// `selfᵀ · rhs`.
    pub fn matmul_tn(&self, rhs: &Tensor) -> Result<Tensor> {
        let (k, r) = self.require_matrix("matmul_tn")?;
        let (k2, c) = rhs.require_matrix("matmul_tn")?;
        if k != k2 {
            return Err(Error::shape("matmul_tn", &self.shape, &rhs.shape));
        }
        let mut out = vec![0.0; r * c];
        gemm_tn(&self.data, &rhs.data, &mut out, k, r, c);
        finite(vec![r, c], out, "matmul_tn")
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::shape("add", &self.shape, &rhs.shape));
        }
        let out = self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect();
        finite(self.shape.clone(), out, "add")
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::shape("sub", &self.shape, &rhs.shape));
        }
        let out = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        finite(self.shape.clone(), out, "sub")
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let out = self.data.iter().map(|a| a * c).collect();
        finite(self.shape.clone(), out, "scale")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64, op: &'static str) -> Result<Tensor> {
        let out = self.data.iter().map(|&a| f(a)).collect();
        finite(self.shape.clone(), out, op)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, rhs: &Tensor) -> f64 {
        assert_eq!(self.shape, rhs.shape);
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows())
            .map(|i| self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    /// Each row divided by its Euclidean norm.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        let c = self.cols();
        let mut out = self.data.clone();
        for (i, norm) in self.row_norms().into_iter().enumerate() {
            if norm <= crate::autodiff::MIN_ROW_NORM {
                return Err(Error::DegenerateEmbedding { row: i });
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= norm;
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// Rows selected by index, in order.
    pub fn select_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let c = self.cols();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= self.rows() {
                return Err(Error::InvalidArgument(format!(
                    "row index {i} out of range for {} rows",
                    self.rows()
                )));
            }
            out.extend_from_slice(self.row(i));
        }
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty row selection".into()));
        }
        Ok(Tensor::from_parts(vec![ids.len(), c], out))
    }

    /// Stacks equally-wide rows vertically.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("vstack of nothing".into()))?;
        let c = first.cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            if p.cols() != c {
                return Err(Error::shape("vstack", first.shape(), p.shape()));
            }
            rows += p.rows();
            out.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_parts(vec![rows, c], out))
    }

    /// Little-endian byte image of the payload, used for hashing.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

fn finite(shape: Vec<usize>, data: Vec<f64>, op: &'static str) -> Result<Tensor> {
    let t = Tensor::from_parts(shape, data);
    t.check_finite(op)?;
    Ok(t)
}

/// out[r×c] += a[r×k] · b[k×c]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[r×c] += a[r×k] · b[c×k]ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * c + j] += acc;
        }
    }
}

/// out[r×c] += a[k×r]ᵀ · b[k×c]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, r: usize, c: usize) {
    for p in 0..k {
        let arow = &a[p * r..(p + 1) * r];
        let brow = &b[p * c..(p + 1) * c];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * c..(i + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
