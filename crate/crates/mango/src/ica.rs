//! The invertible cross-attention layer.
//!
//! Forward: Q = LN(LP(x1)), K = LN(LP(x1)), A = masked_softmax(Q K^T / tau),
//! y2 = A x2, with x1 passing through unchanged. The mask restricts attention
//! to j >= i, so A is upper triangular with strictly positive diagonal: the
//! inverse is a back-substitution and the log-determinant w.r.t. x2 is
//! d * sum_i log A_ii (the x1 block of the full Jacobian is the identity, so
//! only the A block contributes; the Kronecker structure over the d feature
//! columns raises det(A) to the d-th power).

use rand::Rng;

use crate::error::{MangoError, Result};
use crate::rng;
use crate::tape::{softplus_inverse, Parameter, Tape, ValueId};
use crate::tensor::{tri_solve_upper, Tensor};

/// Upper-triangular row-stochastic attention matrix.
#[derive(Clone, Debug)]
pub struct AttentionMatrix(pub Tensor);

impl AttentionMatrix {
    /// Serialize as CSV: n rows of n comma-separated floats at 17 significant
    /// digits.
    pub fn to_csv(&self) -> String {
        let n = self.0.rows();
        let mut out = String::new();
        for i in 0..n {
            let row: Vec<String> = (0..n).map(|j| format!("{:.17e}", self.0.at2(i, j))).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for row in &rows {
            let vals: Vec<f64> = row
                .split(',')
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|e| {
                        MangoError::Input(format!("bad attention CSV entry {v:?}: {e}"))
                    })
                })
                .collect::<Result<_>>()?;
            if vals.len() != n {
                return Err(MangoError::Input(format!(
                    "attention CSV row has {} entries, expected {n}",
                    vals.len()
                )));
            }
            data.extend(vals);
        }
        Ok(AttentionMatrix(Tensor::new(vec![n, n], data)?))
    }
}

#[derive(Clone, Debug)]
pub struct IcaResult {
    pub y2: Tensor,
    pub log_det: f64,
    pub attention: AttentionMatrix,
}

/// Tape-side handles from a recorded ICA forward.
pub struct IcaTapeOut {
    pub y2: ValueId,
    pub log_det: ValueId,
    pub attention: ValueId,
}

#[derive(Clone, Debug)]
pub struct IcaLayer {
    pub w_q: Parameter,
    pub w_k: Parameter,
    pub ln_q_gain: Parameter,
    pub ln_q_bias: Parameter,
    pub ln_k_gain: Parameter,
    pub ln_k_bias: Parameter,
    /// Raw scale; the temperature is TAU_FLOOR + softplus(scale_raw).
    pub scale_raw: Parameter,
    d_model: usize,
}

const LN_EPS: f64 = 1e-5;

/// Lower bound on the attention temperature. The likelihood objective
/// rewards ever-sharper attention (A -> I drives the log-det to 0), so an
/// unbounded temperature decays toward zero until logits/tau overflows; the
/// floor keeps the softmax finite and its gradients bounded.
pub const TAU_FLOOR: f64 = 0.3;

impl IcaLayer {
    /// Gaussian(0, 0.02) projections, layer-norm gain 1 / bias 0, temperature
    /// initialized so softplus(raw) = sqrt(d_model).
    ///
    /// The query and key projections start from the same draw: with Q = K the
    /// diagonal logit is each row's maximum (equal-norm rows after layer
    /// norm), so fresh attention is diagonally dominant and a fresh stack is
    /// near volume-preserving instead of strongly contracting.
    pub fn new<R: Rng>(prefix: &str, d_model: usize, r: &mut R) -> Self {
        let mut layer = Self::zero_init(prefix, d_model);
        let w = rng::gaussian_tensor(r, &[d_model, d_model], 0.02);
        layer.w_q.value = w.clone();
        layer.w_k.value = w;
        layer
    }

    /// Zero projections: attention is analytically uniform over allowed
    /// entries regardless of input.
    pub fn zero_init(prefix: &str, d_model: usize) -> Self {
        IcaLayer {
            w_q: Parameter::new(format!("{prefix}.w_q"), Tensor::zeros(&[d_model, d_model])),
            w_k: Parameter::new(format!("{prefix}.w_k"), Tensor::zeros(&[d_model, d_model])),
            ln_q_gain: Parameter::new(format!("{prefix}.ln_q_gain"), Tensor::filled(&[d_model], 1.0)),
            ln_q_bias: Parameter::new(format!("{prefix}.ln_q_bias"), Tensor::zeros(&[d_model])),
            ln_k_gain: Parameter::new(format!("{prefix}.ln_k_gain"), Tensor::filled(&[d_model], 1.0)),
            ln_k_bias: Parameter::new(format!("{prefix}.ln_k_bias"), Tensor::zeros(&[d_model])),
            scale_raw: Parameter::new(
                format!("{prefix}.scale_raw"),
                Tensor::scalar(softplus_inverse((d_model as f64).sqrt() - TAU_FLOOR)),
            ),
            d_model,
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![
            &self.w_q,
            &self.w_k,
            &self.ln_q_gain,
            &self.ln_q_bias,
            &self.ln_k_gain,
            &self.ln_k_bias,
            &self.scale_raw,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.w_q,
            &mut self.w_k,
            &mut self.ln_q_gain,
            &mut self.ln_q_bias,
            &mut self.ln_k_gain,
            &mut self.ln_k_bias,
            &mut self.scale_raw,
        ]
    }

    fn check_inputs(&self, x1: &Tensor, x2: &Tensor) -> Result<()> {
        if x1.shape() != x2.shape() {
            return Err(MangoError::Layout(format!(
                "partition shapes differ: {:?} vs {:?}",
                x1.shape(),
                x2.shape()
            )));
        }
        if !x1.is_matrix() || x1.cols() != self.d_model {
            return Err(MangoError::Shape(format!(
                "expected [n x {}], got {:?}",
                self.d_model,
                x1.shape()
            )));
        }
        if !x1.all_finite() || !x2.all_finite() {
            return Err(MangoError::NonFinite("ica input".into()));
        }
        Ok(())
    }

    /// Record the attention matrix A(x1) on the tape.
    pub fn attention_tape(&self, t: &mut Tape, x1: ValueId) -> Result<ValueId> {
        let wq = t.param(&self.w_q);
        let wk = t.param(&self.w_k);
        let qg = t.param(&self.ln_q_gain);
        let qb = t.param(&self.ln_q_bias);
        let kg = t.param(&self.ln_k_gain);
        let kb = t.param(&self.ln_k_bias);
        let raw = t.param(&self.scale_raw);

        let q_proj = t.matmul(x1, wq)?;
        let q = t.layernorm(q_proj, qg, qb, LN_EPS)?;
        let k_proj = t.matmul(x1, wk)?;
        let k = t.layernorm(k_proj, kg, kb, LN_EPS)?;
        let kt = t.transpose(k);
        let logits = t.matmul(q, kt)?;
        let sp = t.softplus(raw);
        let tau = t.add_const(sp, TAU_FLOOR);
        let inv_tau = t.recip(tau);
        let scaled = t.mul_scalar(logits, inv_tau)?;
        t.masked_softmax(scaled)
    }

    /// Record the full forward on the tape: y2, the scalar log-det, and the
    /// attention matrix.
    pub fn forward_tape(&self, t: &mut Tape, x1: ValueId, x2: ValueId) -> Result<IcaTapeOut> {
        let attention = self.attention_tape(t, x1)?;
        let y2 = t.matmul(attention, x2)?;
        let diag = t.diag(attention)?;
        let log_diag = t.log(diag);
        let sum = t.sum_all(log_diag);
        let log_det = t.scale_const(sum, self.d_model as f64);
        Ok(IcaTapeOut {
            y2,
            log_det,
            attention,
        })
    }

    pub fn forward(&self, x1: &Tensor, x2: &Tensor) -> Result<IcaResult> {
        self.check_inputs(x1, x2)?;
        let mut t = Tape::new();
        let x1 = t.constant(x1.clone());
        let x2 = t.constant(x2.clone());
        let out = self.forward_tape(&mut t, x1, x2)?;
        Ok(IcaResult {
            y2: t.value(out.y2).clone(),
            log_det: t.value(out.log_det).item(),
            attention: AttentionMatrix(t.value(out.attention).clone()),
        })
    }

    pub fn attention_map(&self, x1: &Tensor) -> Result<AttentionMatrix> {
        self.check_inputs(x1, x1)?;
        let mut t = Tape::new();
        let x1 = t.constant(x1.clone());
        let a = self.attention_tape(&mut t, x1)?;
        Ok(AttentionMatrix(t.value(a).clone()))
    }

    /// Recover x2 from (y1, y2). Recomputes the attention from y1 (= x1 by
    /// the coupling structure) and back-substitutes, never forming A^-1.
    pub fn inverse(&self, y1: &Tensor, y2: &Tensor) -> Result<Tensor> {
        self.check_inputs(y1, y2)?;
        let a = self.attention_map(y1)?.0;
        let n = a.rows();
        for i in 0..n {
            if a.at2(i, i) < 1e-300 {
                return Err(MangoError::Singular(format!(
                    "attention diagonal entry {i} underflowed; checkpoint corrupted?"
                )));
            }
        }
        tri_solve_upper(&a, y2)
    }
}
