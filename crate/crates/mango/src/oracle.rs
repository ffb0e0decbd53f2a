//! Brute-force oracles: numerical Jacobians, dense sign-log-determinants,
//! and invertibility audits.
//!
//! These certify the analytic claims of the flow layers and are deliberately
//! independent of the tape engine: the determinant path below uses its own
//! Gaussian elimination and is cross-checked against cofactor expansion.
//! Audits are restricted to small instances (n*d <= 64 input dimensions).

use serde::{Deserialize, Serialize};

use crate::error::{MangoError, Result};
use crate::tensor::Tensor;

/// Central-difference Jacobian of a vector-valued function, one column per
/// input coordinate (row-major flattening on both sides).
pub fn numerical_jacobian(
    f: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    step: f64,
) -> Result<Tensor> {
    let base = f(x)?;
    let (out_dim, in_dim) = (base.len(), x.len());
    let mut jac = Tensor::zeros(&[out_dim, in_dim]);
    for j in 0..in_dim {
        let mut xp = x.clone();
        xp.data_mut()[j] += step;
        let mut xm = x.clone();
        xm.data_mut()[j] -= step;
        let fp = f(&xp)?;
        let fm = f(&xm)?;
        if !fp.all_finite() || !fm.all_finite() {
            return Err(MangoError::Oracle {
                coord: j,
                detail: "non-finite evaluation during central differences".into(),
            });
        }
        for i in 0..out_dim {
            let v = (fp.data()[i] - fm.data()[i]) / (2.0 * step);
            jac.data_mut()[i * in_dim + j] = v;
        }
    }
    Ok(jac)
}

/// Sign and log-absolute-determinant by Gaussian elimination with partial
/// pivoting. Exactly singular input reports sign 0 and log -inf.
pub fn dense_slogdet(m: &Tensor) -> Result<(f64, f64)> {
    let n = m.rows();
    if m.cols() != n {
        return Err(MangoError::Shape(format!(
            "dense_slogdet requires a square matrix, got {:?}",
            m.shape()
        )));
    }
    let mut a = m.clone();
    let mut sign = 1.0f64;
    let mut log_abs = 0.0f64;
    for col in 0..n {
        let mut best = col;
        let mut best_abs = a.at2(col, col).abs();
        for r in (col + 1)..n {
            let v = a.at2(r, col).abs();
            if v > best_abs {
                best = r;
                best_abs = v;
            }
        }
        if best_abs == 0.0 {
            return Ok((0.0, f64::NEG_INFINITY));
        }
        if best != col {
            for j in 0..n {
                let tmp = a.at2(col, j);
                let v = a.at2(best, j);
                a.set2(col, j, v);
                a.set2(best, j, tmp);
            }
            sign = -sign;
        }
        let pivot = a.at2(col, col);
        sign *= pivot.signum();
        log_abs += pivot.abs().ln();
        for r in (col + 1)..n {
            let f = a.at2(r, col) / pivot;
            for j in (col + 1)..n {
                let v = a.at2(r, j) - f * a.at2(col, j);
                a.set2(r, j, v);
            }
            a.set2(r, col, 0.0);
        }
    }
    Ok((sign, log_abs))
}

/// Determinant by cofactor expansion. Exponential cost; n <= 6 only. Used to
/// cross-check the elimination path.
pub fn cofactor_det(m: &Tensor) -> Result<f64> {
    let n = m.rows();
    if m.cols() != n {
        return Err(MangoError::Shape("cofactor_det requires square".into()));
    }
    if n > 6 {
        return Err(MangoError::Contract(
            "cofactor_det restricted to n <= 6".into(),
        ));
    }
    fn expand(m: &Tensor, rows: &[usize], cols: &[usize]) -> f64 {
        if rows.len() == 1 {
            return m.at2(rows[0], cols[0]);
        }
        let mut det = 0.0;
        let sub_rows = &rows[1..];
        for (k, &c) in cols.iter().enumerate() {
            let sub_cols: Vec<usize> = cols.iter().cloned().filter(|&x| x != c).collect();
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            det += sign * m.at2(rows[0], c) * expand(m, sub_rows, &sub_cols);
        }
        det
    }
    let idx: Vec<usize> = (0..n).collect();
    Ok(expand(m, &idx, &idx))
}

/// Outcome of auditing one bijective layer at one input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub name: String,
    pub roundtrip_err: f64,
    pub logdet_analytic: f64,
    pub logdet_numeric: f64,
    pub rel_err: f64,
    pub pass: bool,
}

pub const ROUNDTRIP_TOL: f64 = 1e-6;
pub const LOGDET_REL_TOL: f64 = 1e-3;

/// Audit a bijection at `x`: inversion round-trip plus analytic log-det vs.
/// the slogdet of the numerically assembled Jacobian.
pub fn audit_bijection(
    name: impl Into<String>,
    forward: &dyn Fn(&Tensor) -> Result<(Tensor, f64)>,
    inverse: &dyn Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
) -> Result<AuditReport> {
    assert!(
        x.len() <= 64,
        "audit inputs restricted to <= 64 dimensions, got {}",
        x.len()
    );
    let (y, logdet_analytic) = forward(x)?;
    let x_back = inverse(&y)?;
    let roundtrip_err = x_back
        .data()
        .iter()
        .zip(x.data())
        .fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs()));

    let jac = numerical_jacobian(&mut |v| forward(v).map(|(y, _)| y), x, 1e-5)?;
    let (_, logdet_numeric) = dense_slogdet(&jac)?;
    let rel_err = (logdet_analytic - logdet_numeric).abs() / logdet_numeric.abs().max(1.0);
    let pass = roundtrip_err < ROUNDTRIP_TOL && rel_err < LOGDET_REL_TOL;
    Ok(AuditReport {
        name: name.into(),
        roundtrip_err,
        logdet_analytic,
        logdet_numeric,
        rel_err,
        pass,
    })
}
