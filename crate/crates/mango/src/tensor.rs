//! Dense row-major float64 tensors.
//!
//! Tensors are immutable values once created. All differentiable computation
//! goes through the tape (see [`crate::tape`]); this module provides the
//! storage type plus the handful of plain linear-algebra routines the
//! non-differentiable paths need (triangular solves, pivoted LU).

use crate::error::{MangoError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&s| s == 0) {
            return Err(MangoError::Shape(format!("zero dimension in {shape:?}")));
        }
        if expect != data.len() {
            return Err(MangoError::Shape(format!(
                "shape {shape:?} needs {expect} entries, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; len],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Build an n x n permutation matrix: row i selects source index perm[i].
    pub fn permutation_matrix(perm: &[usize]) -> Self {
        let n = perm.len();
        let mut t = Tensor::zeros(&[n, n]);
        for (i, &j) in perm.iter().enumerate() {
            t.data[i * n + j] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        assert!(self.is_matrix(), "rows() on non-matrix {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert!(self.is_matrix(), "cols() on non-matrix {:?}", self.shape);
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn item(&self) -> f64 {
        assert!(self.data.len() == 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || !other.is_matrix() || self.shape[1] != other.shape[0] {
            return Err(MangoError::Dimension {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * row[j];
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64, op: &'static str) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(MangoError::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a * b, "mul")
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn inf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows `start..start+len` as a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        let c = self.cols();
        assert!(start + len <= self.rows(), "row slice out of range");
        Tensor {
            shape: vec![len, c],
            data: self.data[start * c..(start + len) * c].to_vec(),
        }
    }

    /// New matrix whose row i is self's row `indices[i]`.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor {
            shape: vec![indices.len(), c],
            data,
        }
    }

    pub fn concat_rows(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols() != other.cols() {
            return Err(MangoError::Dimension {
                op: "concat_rows",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Tensor::new(vec![self.rows() + other.rows(), self.cols()], data)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        let (m, c) = (self.rows(), self.cols());
        assert!(start + len <= c, "col slice out of range");
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Tensor {
            shape: vec![m, len],
            data,
        }
    }
}

/// Solve `a x = b` by back-substitution for upper-triangular `a`.
///
/// Never forms an explicit inverse. Diagonal entries below 1e-300 are
/// rejected as singular.
pub fn tri_solve_upper(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(MangoError::Dimension {
            op: "tri_solve_upper",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let d = b.cols();
    let mut x = b.data().to_vec();
    for i in (0..n).rev() {
        let diag = a.at2(i, i);
        if diag.abs() < 1e-300 {
            return Err(MangoError::Singular(format!(
                "upper-triangular diagonal entry {i} is {diag}"
            )));
        }
        for c in 0..d {
            let mut acc = x[i * d + c];
            for j in (i + 1)..n {
                acc -= a.at2(i, j) * x[j * d + c];
            }
            x[i * d + c] = acc / diag;
        }
    }
    Tensor::new(vec![n, d], x)
}

/// Pivoted LU factorization. Returns (compact LU, row permutation, perm sign).
pub struct LuFactors {
    pub lu: Tensor,
    pub pivot: Vec<usize>,
    pub sign: f64,
}

pub fn lu_factor(a: &Tensor) -> Result<LuFactors> {
    let n = a.rows();
    if a.cols() != n {
        return Err(MangoError::Shape(format!(
            "lu_factor requires square matrix, got {:?}",
            a.shape()
        )));
    }
    let mut lu = a.clone();
    let mut pivot: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;
    for col in 0..n {
        let mut best = col;
        let mut best_abs = lu.at2(col, col).abs();
        for r in (col + 1)..n {
            let v = lu.at2(r, col).abs();
            if v > best_abs {
                best = r;
                best_abs = v;
            }
        }
        if best_abs < 1e-300 {
            return Err(MangoError::Singular(format!(
                "pivot {col} underflowed during LU factorization"
            )));
        }
        if best != col {
            for j in 0..n {
                let tmp = lu.at2(col, j);
                let v = lu.at2(best, j);
                lu.set2(col, j, v);
                lu.set2(best, j, tmp);
            }
            pivot.swap(col, best);
            sign = -sign;
        }
        let p = lu.at2(col, col);
        for r in (col + 1)..n {
            let f = lu.at2(r, col) / p;
            lu.set2(r, col, f);
            for j in (col + 1)..n {
                let v = lu.at2(r, j) - f * lu.at2(col, j);
                lu.set2(r, j, v);
            }
        }
    }
    Ok(LuFactors { lu, pivot, sign })
}

impl LuFactors {
    /// Solve `a x = b` for the factored matrix.
    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        let n = self.lu.rows();
        if b.rows() != n {
            return Err(MangoError::Dimension {
                op: "lu_solve",
                lhs: self.lu.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let d = b.cols();
        // Apply row permutation, then forward- and back-substitute.
        let mut x = Vec::with_capacity(n * d);
        for i in 0..n {
            let src = self.pivot[i];
            x.extend_from_slice(&b.data()[src * d..(src + 1) * d]);
        }
        for i in 0..n {
            for c in 0..d {
                let mut acc = x[i * d + c];
                for j in 0..i {
                    acc -= self.lu.at2(i, j) * x[j * d + c];
                }
                x[i * d + c] = acc;
            }
        }
        for i in (0..n).rev() {
            let diag = self.lu.at2(i, i);
            for c in 0..d {
                let mut acc = x[i * d + c];
                for j in (i + 1)..n {
                    acc -= self.lu.at2(i, j) * x[j * d + c];
                }
                x[i * d + c] = acc / diag;
            }
        }
        Tensor::new(vec![n, d], x)
    }
}

/// Solve `a x = b` for general square `a` via pivoted LU.
pub fn lu_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    lu_factor(a)?.solve(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::eye(2);
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(i2.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_projector() {
        let p = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = p.matmul(&b).unwrap();
        assert_eq!(out.data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[3, 4]);
        let b = Tensor::zeros(&[5, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 4]") && msg.contains("[5, 2]"), "{msg}");
    }

    #[test]
    fn tri_solve_matches_hand_computation() {
        let a = Tensor::matrix(2, 2, vec![0.5, 0.5, 0.0, 1.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![4.0, 6.0, 6.0, 8.0]).unwrap();
        let x = tri_solve_upper(&a, &b).unwrap();
        assert!(x.max_abs_diff(&Tensor::matrix(2, 2, vec![2.0, 4.0, 6.0, 8.0]).unwrap()) < 1e-12);
    }

    #[test]
    fn tri_solve_random_residual() {
        let mut r = rng::stream(1, "trisolve");
        for _ in 0..20 {
            let n = 6;
            let mut a = Tensor::zeros(&[n, n]);
            for i in 0..n {
                for j in i..n {
                    let v = if i == j {
                        0.1 + 1.9 * rand::Rng::gen::<f64>(&mut r)
                    } else {
                        rng::gaussian(&mut r)
                    };
                    a.set2(i, j, v);
                }
            }
            let b = rng::gaussian_tensor(&mut r, &[n, 3], 1.0);
            let x = tri_solve_upper(&a, &b).unwrap();
            let resid = a.matmul(&x).unwrap().sub(&b).unwrap().inf_norm();
            assert!(resid < 1e-9, "residual {resid}");
        }
    }

    #[test]
    fn lu_solve_roundtrip() {
        let mut r = rng::stream(2, "lu");
        for _ in 0..10 {
            let a = rng::gaussian_tensor(&mut r, &[5, 5], 1.0);
            let b = rng::gaussian_tensor(&mut r, &[5, 2], 1.0);
            let x = lu_solve(&a, &b).unwrap();
            let resid = a.matmul(&x).unwrap().sub(&b).unwrap().inf_norm();
            assert!(resid < 1e-9, "residual {resid}");
        }
    }

    #[test]
    fn slice_and_gather() {
        let a = Tensor::matrix(4, 2, (0..8).map(|x| x as f64).collect()).unwrap();
        let s = a.slice_rows(1, 2);
        assert_eq!(s.data(), &[2.0, 3.0, 4.0, 5.0]);
        let g = a.gather_rows(&[3, 0]);
        assert_eq!(g.data(), &[6.0, 7.0, 0.0, 1.0]);
        let c = a.slice_cols(1, 1);
        assert_eq!(c.data(), &[1.0, 3.0, 5.0, 7.0]);
    }
}
