//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] records primitive operations during the forward pass into a
//! topologically ordered node list. [`Tape::backward`] replays the adjoints
//! in reverse order, producing gradients for every bound [`Parameter`].
//!
//! A tape is single-writer during recording; tensors held by nodes are
//! immutable once pushed.

use std::collections::HashMap;

use crate::error::{MangoError, Result};
use crate::tensor::{lu_factor, Tensor};

/// Handle to a value recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

/// A named trainable tensor with an accumulated gradient of identical shape.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape());
    }
}

enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Neg(ValueId),
    ScaleConst(ValueId, f64),
    AddConst(ValueId, #[allow(dead_code)] f64),
    Matmul(ValueId, ValueId),
    Transpose(ValueId),
    Exp(ValueId),
    Log(ValueId),
    Tanh(ValueId),
    Softplus(ValueId),
    Recip(ValueId),
    /// Tensor times a scalar-shaped tensor, broadcast over all entries.
    MulScalar(ValueId, ValueId),
    /// [n x d] plus a [d] vector broadcast over rows.
    AddRowBroadcast(ValueId, ValueId),
    /// Row-stochastic softmax restricted to the upper-triangular (j >= i)
    /// pattern; disallowed entries are exactly zero.
    MaskedSoftmax(ValueId),
    LayerNorm {
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        eps: f64,
    },
    GatherRows(ValueId, Vec<usize>),
    SliceRows(ValueId, usize, usize),
    ConcatRows(ValueId, ValueId),
    SliceCols(ValueId, usize, usize),
    ConcatCols(ValueId, ValueId),
    /// Same data, different shape; adjoint is reshaped back.
    Reshape(ValueId),
    Diag(ValueId),
    DiagEmbed(ValueId),
    SumAll(ValueId),
    /// z = w^-1 y via pivoted LU; never materializes the inverse.
    LinSolve {
        w: ValueId,
        y: ValueId,
    },
    /// Scalar loss: logsumexp(logits) - logits[target], for a [1 x c] row.
    CrossEntropy {
        logits: ValueId,
        target: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<String, ValueId>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> ValueId {
        self.nodes.push(Node { value, op });
        ValueId(self.nodes.len() - 1)
    }

    /// Record a constant leaf (no gradient consumer).
    pub fn constant(&mut self, t: Tensor) -> ValueId {
        self.push(t, Op::Leaf)
    }

    /// Bind a parameter as a leaf. Repeated binds of the same name share one
    /// node so gradients accumulate in a single place.
    pub fn param(&mut self, p: &Parameter) -> ValueId {
        if let Some(&id) = self.bound.get(&p.name) {
            return id;
        }
        let id = self.push(p.value.clone(), Op::Leaf);
        self.bound.insert(p.name.clone(), id);
        id
    }

    /// Gradient recorded for a bound parameter after [`Tape::backward`].
    pub fn grad_of(&self, p: &Parameter) -> Option<&Tensor> {
        let id = self.bound.get(&p.name)?;
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn same_shape(&self, a: ValueId, b: ValueId, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(MangoError::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).scale(-1.0);
        self.push(v, Op::Neg(a))
    }

    pub fn scale_const(&mut self, a: ValueId, c: f64) -> ValueId {
        let v = self.value(a).scale(c);
        self.push(v, Op::ScaleConst(a, c))
    }

    pub fn add_const(&mut self, a: ValueId, c: f64) -> ValueId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a, c))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn exp(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn recip(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn mul_scalar(&mut self, a: ValueId, s: ValueId) -> Result<ValueId> {
        if self.value(s).len() != 1 {
            return Err(MangoError::Shape(format!(
                "mul_scalar expects scalar rhs, got {:?}",
                self.value(s).shape()
            )));
        }
        let c = self.value(s).data()[0];
        let v = self.value(a).scale(c);
        Ok(self.push(v, Op::MulScalar(a, s)))
    }

    pub fn add_row_broadcast(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || tb.shape().len() != 1 || tb.shape()[0] != ta.cols() {
            return Err(MangoError::Dimension {
                op: "add_row_broadcast",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, d) = (ta.rows(), ta.cols());
        let mut out = ta.data().to_vec();
        for i in 0..m {
            for j in 0..d {
                out[i * d + j] += tb.data()[j];
            }
        }
        Ok(self.push(Tensor::new(vec![m, d], out)?, Op::AddRowBroadcast(a, b)))
    }

    /// Softmax over the allowed entries j >= i of a square logits matrix.
    /// Below-diagonal outputs are bitwise 0.0; each row is stabilized by its
    /// allowed-entry max before exponentiation.
    pub fn masked_softmax(&mut self, logits: ValueId) -> Result<ValueId> {
        let t = self.value(logits);
        if !t.is_matrix() || t.rows() != t.cols() {
            return Err(MangoError::Dimension {
                op: "masked_softmax",
                lhs: t.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let n = t.rows();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for j in i..n {
                mx = mx.max(t.at2(i, j));
            }
            let mut denom = 0.0;
            for j in i..n {
                let e = (t.at2(i, j) - mx).exp();
                out[i * n + j] = e;
                denom += e;
            }
            for j in i..n {
                out[i * n + j] /= denom;
            }
        }
        Ok(self.push(Tensor::new(vec![n, n], out)?, Op::MaskedSoftmax(logits)))
    }

    pub fn layernorm(&mut self, x: ValueId, gain: ValueId, bias: ValueId, eps: f64) -> Result<ValueId> {
        let t = self.value(x);
        if !t.is_matrix() {
            return Err(MangoError::Shape(format!(
                "layernorm expects a matrix, got {:?}",
                t.shape()
            )));
        }
        let d = t.cols();
        for (side, id) in [("gain", gain), ("bias", bias)] {
            let s = self.value(id).shape();
            if s != [d] {
                return Err(MangoError::Shape(format!(
                    "layernorm {side} shape {s:?}, expected [{d}]"
                )));
            }
        }
        let (t, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let m = t.rows();
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &t.data()[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[i * d + j] = g.data()[j] * (row[j] - mu) * inv + b.data()[j];
            }
        }
        Ok(self.push(
            Tensor::new(vec![m, d], out)?,
            Op::LayerNorm { x, gain, bias, eps },
        ))
    }

    pub fn gather_rows(&mut self, a: ValueId, indices: &[usize]) -> Result<ValueId> {
        let t = self.value(a);
        if indices.iter().any(|&i| i >= t.rows()) {
            return Err(MangoError::Shape(format!(
                "gather index out of range for {} rows",
                t.rows()
            )));
        }
        let v = t.gather_rows(indices);
        Ok(self.push(v, Op::GatherRows(a, indices.to_vec())))
    }

    pub fn slice_rows(&mut self, a: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let t = self.value(a);
        if start + len > t.rows() {
            return Err(MangoError::Shape(format!(
                "row slice {start}..{} out of range for {} rows",
                start + len,
                t.rows()
            )));
        }
        let v = t.slice_rows(start, len);
        Ok(self.push(v, Op::SliceRows(a, start, len)))
    }

    pub fn concat_rows(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).concat_rows(self.value(b))?;
        Ok(self.push(v, Op::ConcatRows(a, b)))
    }

    pub fn slice_cols(&mut self, a: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let t = self.value(a);
        if start + len > t.cols() {
            return Err(MangoError::Shape(format!(
                "col slice {start}..{} out of range for {} cols",
                start + len,
                t.cols()
            )));
        }
        let v = t.slice_cols(start, len);
        Ok(self.push(v, Op::SliceCols(a, start, len)))
    }

    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(MangoError::Dimension {
                op: "concat_cols",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(m * (ca + cb));
        for i in 0..m {
            data.extend_from_slice(&ta.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&tb.data()[i * cb..(i + 1) * cb]);
        }
        Ok(self.push(Tensor::new(vec![m, ca + cb], data)?, Op::ConcatCols(a, b)))
    }

    pub fn reshape(&mut self, a: ValueId, shape: &[usize]) -> Result<ValueId> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(MangoError::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                t.shape(),
                t.len(),
                shape
            )));
        }
        let v = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn diag(&mut self, a: ValueId) -> Result<ValueId> {
        let t = self.value(a);
        if !t.is_matrix() || t.rows() != t.cols() {
            return Err(MangoError::Shape(format!(
                "diag expects square matrix, got {:?}",
                t.shape()
            )));
        }
        let n = t.rows();
        let v = Tensor::new(vec![n], (0..n).map(|i| t.at2(i, i)).collect())?;
        Ok(self.push(v, Op::Diag(a)))
    }

    pub fn diag_embed(&mut self, a: ValueId) -> Result<ValueId> {
        let t = self.value(a);
        if t.shape().len() != 1 {
            return Err(MangoError::Shape(format!(
                "diag_embed expects a vector, got {:?}",
                t.shape()
            )));
        }
        let n = t.len();
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            out.data_mut()[i * n + i] = t.data()[i];
        }
        Ok(self.push(out, Op::DiagEmbed(a)))
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn lin_solve(&mut self, w: ValueId, y: ValueId) -> Result<ValueId> {
        let (tw, ty) = (self.value(w), self.value(y));
        if !tw.is_matrix() || tw.rows() != tw.cols() || ty.rows() != tw.rows() {
            return Err(MangoError::Dimension {
                op: "lin_solve",
                lhs: tw.shape().to_vec(),
                rhs: ty.shape().to_vec(),
            });
        }
        let z = lu_factor(tw)?.solve(ty)?;
        Ok(self.push(z, Op::LinSolve { w, y }))
    }

    pub fn cross_entropy(&mut self, logits: ValueId, target: usize) -> Result<ValueId> {
        let t = self.value(logits);
        if !t.is_matrix() || t.rows() != 1 {
            return Err(MangoError::Shape(format!(
                "cross_entropy expects [1 x c] logits, got {:?}",
                t.shape()
            )));
        }
        if target >= t.cols() {
            return Err(MangoError::Input(format!(
                "class label {target} out of range for {} classes",
                t.cols()
            )));
        }
        let row = t.data();
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        let loss = lse - row[target];
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target }))
    }

    /// Convenience: sum of squared entries as a scalar.
    pub fn sum_squares(&mut self, a: ValueId) -> Result<ValueId> {
        let sq = self.mul(a, a)?;
        Ok(self.sum_all(sq))
    }

    /// Run the reverse sweep from a scalar output. Gradients for bound
    /// parameters are retrievable via [`Tape::grad_of`] afterwards.
    pub fn backward(&mut self, out: ValueId) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(MangoError::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_adjoints(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate_adjoints(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let mut acc = |id: ValueId, delta: Tensor| {
            match &mut grads[id.0] {
                Some(existing) => {
                    *existing = existing.add(&delta).expect("gradient shapes agree");
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.mul(self.value(*b))?);
                acc(*b, g.mul(self.value(*a))?);
            }
            Op::Neg(a) => acc(*a, g.scale(-1.0)),
            Op::ScaleConst(a, c) => acc(*a, g.scale(*c)),
            Op::AddConst(a, _) => acc(*a, g.clone()),
            Op::Matmul(a, b) => {
                acc(*a, g.matmul(&self.value(*b).transpose())?);
                acc(*b, self.value(*a).transpose().matmul(g)?);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Exp(a) => acc(*a, g.mul(&self.nodes[idx].value)?),
            Op::Log(a) => acc(*a, g.zip(self.value(*a), |gv, x| gv / x, "log_bw")?),
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                acc(*a, g.zip(y, |gv, t| gv * (1.0 - t * t), "tanh_bw")?);
            }
            Op::Softplus(a) => {
                acc(
                    *a,
                    g.zip(self.value(*a), |gv, x| gv * sigmoid(x), "softplus_bw")?,
                );
            }
            Op::Recip(a) => {
                acc(*a, g.zip(self.value(*a), |gv, x| -gv / (x * x), "recip_bw")?);
            }
            Op::MulScalar(a, s) => {
                let c = self.value(*s).data()[0];
                acc(*a, g.scale(c));
                let ds = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&gv, &av)| gv * av)
                    .sum::<f64>();
                acc(*s, Tensor::scalar(ds));
            }
            Op::AddRowBroadcast(a, b) => {
                acc(*a, g.clone());
                let d = self.value(*b).len();
                let m = g.rows();
                let mut db = vec![0.0; d];
                for i in 0..m {
                    for j in 0..d {
                        db[j] += g.data()[i * d + j];
                    }
                }
                acc(*b, Tensor::new(vec![d], db)?);
            }
            Op::MaskedSoftmax(a) => {
                let y = &self.nodes[idx].value;
                let n = y.rows();
                let mut dl = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    let mut dot = 0.0;
                    for j in i..n {
                        dot += g.at2(i, j) * y.at2(i, j);
                    }
                    for j in i..n {
                        dl.set2(i, j, y.at2(i, j) * (g.at2(i, j) - dot));
                    }
                }
                acc(*a, dl);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let t = self.value(*x);
                let gv = self.value(*gain);
                let (m, d) = (t.rows(), t.cols());
                let mut dx = Tensor::zeros(&[m, d]);
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for i in 0..m {
                    let row = &t.data()[i * d..(i + 1) * d];
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mu) * inv).collect();
                    let grow = &g.data()[i * d..(i + 1) * d];
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        dxhat[j] = grow[j] * gv.data()[j];
                    }
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx.set2(
                            i,
                            j,
                            inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat),
                        );
                    }
                }
                acc(*x, dx);
                acc(*gain, Tensor::new(vec![d], dgain)?);
                acc(*bias, Tensor::new(vec![d], dbias)?);
            }
            Op::GatherRows(a, indices) => {
                let src = self.value(*a);
                let c = src.cols();
                let mut da = Tensor::zeros(src.shape());
                for (i, &srci) in indices.iter().enumerate() {
                    for j in 0..c {
                        da.data_mut()[srci * c + j] += g.data()[i * c + j];
                    }
                }
                acc(*a, da);
            }
            Op::SliceRows(a, start, len) => {
                let src = self.value(*a);
                let c = src.cols();
                let mut da = Tensor::zeros(src.shape());
                da.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                acc(*a, da);
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(*a).rows();
                let rb = self.value(*b).rows();
                acc(*a, g.slice_rows(0, ra));
                acc(*b, g.slice_rows(ra, rb));
            }
            Op::SliceCols(a, start, len) => {
                let src = self.value(*a);
                let (m, c) = (src.rows(), src.cols());
                let mut da = Tensor::zeros(src.shape());
                for i in 0..m {
                    for j in 0..*len {
                        da.data_mut()[i * c + start + j] = g.data()[i * len + j];
                    }
                }
                acc(*a, da);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                acc(*a, g.slice_cols(0, ca));
                acc(*b, g.slice_cols(ca, cb));
            }
            Op::Reshape(a) => {
                let src_shape = self.value(*a).shape().to_vec();
                acc(*a, Tensor::new(src_shape, g.data().to_vec())?);
            }
            Op::Diag(a) => {
                let n = g.len();
                let mut da = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    da.data_mut()[i * n + i] = g.data()[i];
                }
                acc(*a, da);
            }
            Op::DiagEmbed(a) => {
                let n = self.value(*a).len();
                let dv: Vec<f64> = (0..n).map(|i| g.at2(i, i)).collect();
                acc(*a, Tensor::new(vec![n], dv)?);
            }
            Op::SumAll(a) => {
                let gs = g.data()[0];
                acc(*a, Tensor::filled(self.value(*a).shape(), gs));
            }
            Op::LinSolve { w, y } => {
                // z = w^-1 y: dY = w^-T g, dW = -dY z^T
                let tw = self.value(*w);
                let z = &self.nodes[idx].value;
                let gy = lu_factor(&tw.transpose())?.solve(g)?;
                let dw = gy.matmul(&z.transpose())?.scale(-1.0);
                acc(*y, gy);
                acc(*w, dw);
            }
            Op::CrossEntropy { logits, target } => {
                let t = self.value(*logits);
                let row = t.data();
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
                let gs = g.data()[0];
                let mut dl: Vec<f64> = row.iter().map(|&v| gs * (v - mx).exp() / denom).collect();
                dl[*target] -= gs;
                acc(*logits, Tensor::new(t.shape().to_vec(), dl)?);
            }
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// softplus^-1: the raw value whose softplus equals `y`.
pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn finite_diff_grad(
        f: &mut dyn FnMut(&Tensor) -> f64,
        x: &Tensor,
        step: f64,
    ) -> Tensor {
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += step;
            let mut xm = x.clone();
            xm.data_mut()[i] -= step;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * step);
        }
        g
    }

    fn assert_close(analytic: &Tensor, numeric: &Tensor, tol: f64, what: &str) {
        let denom = numeric.inf_norm().max(1.0);
        let err = analytic.max_abs_diff(numeric) / denom;
        assert!(err < tol, "{what}: rel err {err}");
    }

    #[test]
    fn square_at_three() {
        let p = Parameter::new("x", Tensor::scalar(3.0));
        let mut t = Tape::new();
        let x = t.param(&p);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert!((t.grad_of(&p).unwrap().item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn sum_ax_grad_is_column_sums() {
        let mut r = rng::stream(0, "sumax");
        let a = rng::gaussian_tensor(&mut r, &[3, 4], 1.0);
        let p = Parameter::new("x", rng::gaussian_tensor(&mut r, &[4, 2], 1.0));
        let mut t = Tape::new();
        let ai = t.constant(a.clone());
        let xi = t.param(&p);
        let y = t.matmul(ai, xi).unwrap();
        let s = t.sum_all(y);
        t.backward(s).unwrap();
        // d sum(Ax) / dx_{j,c} = sum_i A_{i,j}
        let g = t.grad_of(&p).unwrap();
        for j in 0..4 {
            let colsum: f64 = (0..3).map(|i| a.at2(i, j)).sum();
            for c in 0..2 {
                assert!((g.at2(j, c) - colsum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.backward(x), Err(MangoError::Contract(_))));
    }

    #[test]
    fn matmul_gradient_matches_spec_example() {
        // gradient of sum(a*b) w.r.t. a equals ones(3x2) x b^T
        let mut r = rng::stream(1, "mm");
        let pa = Parameter::new("a", rng::gaussian_tensor(&mut r, &[3, 4], 1.0));
        let b = rng::gaussian_tensor(&mut r, &[4, 2], 1.0);
        let mut t = Tape::new();
        let ai = t.param(&pa);
        let bi = t.constant(b.clone());
        let y = t.matmul(ai, bi).unwrap();
        let s = t.sum_all(y);
        t.backward(s).unwrap();
        let expected = Tensor::filled(&[3, 2], 1.0).matmul(&b.transpose()).unwrap();
        assert!(t.grad_of(&pa).unwrap().max_abs_diff(&expected) < 1e-12);

        // and against finite differences, step 1e-5
        let numeric = finite_diff_grad(
            &mut |a: &Tensor| {
                let mut tt = Tape::new();
                let ai = tt.constant(a.clone());
                let bi = tt.constant(b.clone());
                let y = tt.matmul(ai, bi).unwrap();
                let s = tt.sum_all(y);
                tt.value(s).item()
            },
            &pa.value,
            1e-5,
        );
        assert_close(t.grad_of(&pa).unwrap(), &numeric, 1e-7, "matmul fd");
    }

    #[test]
    fn masked_softmax_uniform_two() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros(&[2, 2]));
        let a = t.masked_softmax(l).unwrap();
        let v = t.value(a);
        assert_eq!(v.data(), &[0.5, 0.5, 0.0, 1.0]);
    }

    #[test]
    fn masked_softmax_single_entry() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::matrix(1, 1, vec![42.0]).unwrap());
        let a = t.masked_softmax(l).unwrap();
        assert_eq!(t.value(a).data(), &[1.0]);
    }

    #[test]
    fn masked_softmax_large_logits_stable() {
        let mut t = Tape::new();
        let l = t
            .constant(Tensor::matrix(3, 3, vec![1000.0, 1000.0, 999.0, 0.0, 1000.0, 999.0, 0.0, 0.0, 7.0]).unwrap());
        let a = t.masked_softmax(l).unwrap();
        let v = t.value(a);
        assert!(v.all_finite());
        for i in 0..3 {
            let row_sum: f64 = (0..3).map(|j| v.at2(i, j)).sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
        // cross-check against an exact high-precision softmax on row 0:
        // exp(0)+exp(0)+exp(-1) after max subtraction
        let denom = 2.0 + (-1.0f64).exp();
        assert!((v.at2(0, 0) - 1.0 / denom).abs() < 1e-15);
        assert!((v.at2(0, 2) - (-1.0f64).exp() / denom).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_is_exactly_triangular() {
        let mut r = rng::stream(5, "tri");
        let l = rng::gaussian_tensor(&mut r, &[6, 6], 3.0);
        let mut t = Tape::new();
        let li = t.constant(l);
        let a = t.masked_softmax(li).unwrap();
        let v = t.value(a);
        for i in 0..6 {
            for j in 0..i {
                assert_eq!(v.at2(i, j).to_bits(), 0.0f64.to_bits());
            }
            let allowed: f64 = (i..6).map(|j| v.at2(i, j)).sum();
            assert!((allowed - 1.0).abs() < 1e-12);
            assert!(v.at2(i, i) > 0.0);
        }
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(1, 4, vec![3.0; 4]).unwrap());
        let g = t.constant(Tensor::filled(&[4], 1.0));
        let b = t.constant(Tensor::zeros(&[4]));
        let y = t.layernorm(x, g, b, 1e-5).unwrap();
        assert!(t.value(y).inf_norm() < 1e-9);
    }

    #[test]
    fn layernorm_unit_variance_row() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        let g = t.constant(Tensor::filled(&[2], 1.0));
        let b = t.constant(Tensor::zeros(&[2]));
        let y = t.layernorm(x, g, b, 1e-5).unwrap();
        let v = t.value(y);
        assert!((v.data()[0] - 1.0).abs() < 1e-4);
        assert!((v.data()[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences() {
        // one composite expression exercising most primitives
        let mut r = rng::stream(9, "fdall");
        let x0 = rng::gaussian_tensor(&mut r, &[4, 8], 1.0);
        let gain0 = rng::gaussian_tensor(&mut r, &[8], 0.3).map(|v| v + 1.0);
        let bias0 = rng::gaussian_tensor(&mut r, &[8], 0.3);
        let w0 = rng::gaussian_tensor(&mut r, &[8, 4], 0.5);
        let s0 = Tensor::scalar(0.7);

        let eval = |x: &Tensor, gain: &Tensor, bias: &Tensor, w: &Tensor, s: &Tensor| -> f64 {
            let mut t = Tape::new();
            let xi = t.constant(x.clone());
            let gi = t.constant(gain.clone());
            let bi = t.constant(bias.clone());
            let wi = t.constant(w.clone());
            let si = t.constant(s.clone());
            let ln = t.layernorm(xi, gi, bi, 1e-5).unwrap();
            let proj = t.matmul(ln, wi).unwrap();
            let projt = t.transpose(proj);
            let logits = t.matmul(proj, projt).unwrap();
            let sp = t.softplus(si);
            let inv = t.recip(sp);
            let scaled = t.mul_scalar(logits, inv).unwrap();
            let a = t.masked_softmax(scaled).unwrap();
            let d = t.diag(a).unwrap();
            let ld = t.log(d);
            let th = t.tanh(proj);
            let e = t.exp(th);
            let part = t.sum_all(e);
            let part2 = t.sum_all(ld);
            let tot = t.add(part, part2).unwrap();
            t.value(tot).item()
        };

        // analytic gradients
        let px = Parameter::new("x", x0.clone());
        let pg = Parameter::new("g", gain0.clone());
        let pb = Parameter::new("b", bias0.clone());
        let pw = Parameter::new("w", w0.clone());
        let ps = Parameter::new("s", s0.clone());
        let mut t = Tape::new();
        let xi = t.param(&px);
        let gi = t.param(&pg);
        let bi = t.param(&pb);
        let wi = t.param(&pw);
        let si = t.param(&ps);
        let ln = t.layernorm(xi, gi, bi, 1e-5).unwrap();
        let proj = t.matmul(ln, wi).unwrap();
        let projt = t.transpose(proj);
        let logits = t.matmul(proj, projt).unwrap();
        let sp = t.softplus(si);
        let inv = t.recip(sp);
        let scaled = t.mul_scalar(logits, inv).unwrap();
        let a = t.masked_softmax(scaled).unwrap();
        let d = t.diag(a).unwrap();
        let ld = t.log(d);
        let th = t.tanh(proj);
        let e = t.exp(th);
        let part = t.sum_all(e);
        let part2 = t.sum_all(ld);
        let tot = t.add(part, part2).unwrap();
        t.backward(tot).unwrap();

        let step = 1e-5;
        let fx = finite_diff_grad(&mut |x| eval(x, &gain0, &bias0, &w0, &s0), &x0, step);
        assert_close(t.grad_of(&px).unwrap(), &fx, 1e-4, "x");
        let fg = finite_diff_grad(&mut |g| eval(&x0, g, &bias0, &w0, &s0), &gain0, step);
        assert_close(t.grad_of(&pg).unwrap(), &fg, 1e-4, "gain");
        let fb = finite_diff_grad(&mut |b| eval(&x0, &gain0, b, &w0, &s0), &bias0, step);
        assert_close(t.grad_of(&pb).unwrap(), &fb, 1e-4, "bias");
        let fw = finite_diff_grad(&mut |w| eval(&x0, &gain0, &bias0, w, &s0), &w0, step);
        assert_close(t.grad_of(&pw).unwrap(), &fw, 1e-4, "w");
        let fs = finite_diff_grad(&mut |s| eval(&x0, &gain0, &bias0, &w0, s), &s0, step);
        assert_close(t.grad_of(&ps).unwrap(), &fs, 1e-4, "scale");
    }

    #[test]
    fn lin_solve_gradients_match_finite_differences() {
        let mut r = rng::stream(11, "linsolve");
        let w0 = rng::gaussian_tensor(&mut r, &[4, 4], 1.0).add(&Tensor::eye(4).scale(3.0)).unwrap();
        let y0 = rng::gaussian_tensor(&mut r, &[4, 2], 1.0);
        let eval = |w: &Tensor, y: &Tensor| -> f64 {
            let mut t = Tape::new();
            let wi = t.constant(w.clone());
            let yi = t.constant(y.clone());
            let z = t.lin_solve(wi, yi).unwrap();
            let th = t.tanh(z);
            let s = t.sum_all(th);
            t.value(s).item()
        };
        let pw = Parameter::new("w", w0.clone());
        let py = Parameter::new("y", y0.clone());
        let mut t = Tape::new();
        let wi = t.param(&pw);
        let yi = t.param(&py);
        let z = t.lin_solve(wi, yi).unwrap();
        let th = t.tanh(z);
        let s = t.sum_all(th);
        t.backward(s).unwrap();
        let fw = finite_diff_grad(&mut |w| eval(w, &y0), &w0, 1e-5);
        assert_close(t.grad_of(&pw).unwrap(), &fw, 1e-4, "w");
        let fy = finite_diff_grad(&mut |y| eval(&w0, y), &y0, 1e-5);
        assert_close(t.grad_of(&py).unwrap(), &fy, 1e-4, "y");
    }

    #[test]
    fn cross_entropy_values_and_grads() {
        // confident correct logits -> near-zero loss
        let mut t = Tape::new();
        let l = t.constant(Tensor::matrix(1, 2, vec![10.0, -10.0]).unwrap());
        let ce = t.cross_entropy(l, 0).unwrap();
        assert!(t.value(ce).item() < 1e-4);

        // uniform logits over c classes -> ln c
        let mut t = Tape::new();
        let l = t.constant(Tensor::matrix(1, 5, vec![0.3; 5]).unwrap());
        let ce = t.cross_entropy(l, 2).unwrap();
        assert!((t.value(ce).item() - 5.0f64.ln()).abs() < 1e-12);

        // gradient check
        let l0 = Tensor::matrix(1, 4, vec![0.2, -1.0, 0.5, 2.0]).unwrap();
        let p = Parameter::new("l", l0.clone());
        let mut t = Tape::new();
        let li = t.param(&p);
        let ce = t.cross_entropy(li, 1).unwrap();
        t.backward(ce).unwrap();
        let f = finite_diff_grad(
            &mut |l| {
                let mut t = Tape::new();
                let li = t.constant(l.clone());
                let ce = t.cross_entropy(li, 1).unwrap();
                t.value(ce).item()
            },
            &l0,
            1e-5,
        );
        assert_close(t.grad_of(&p).unwrap(), &f, 1e-6, "ce");
    }

    #[test]
    fn structural_ops_grads() {
        let mut r = rng::stream(13, "struct");
        let x0 = rng::gaussian_tensor(&mut r, &[6, 4], 1.0);
        let perm = vec![3usize, 1, 5, 0, 2, 4];
        let eval = |x: &Tensor| -> f64 {
            let mut t = Tape::new();
            let xi = t.constant(x.clone());
            let gathered = t.gather_rows(xi, &perm).unwrap();
            let top = t.slice_rows(gathered, 0, 3).unwrap();
            let bottom = t.slice_rows(gathered, 3, 3).unwrap();
            let prod = t.mul(top, bottom).unwrap();
            let left = t.slice_cols(prod, 0, 2).unwrap();
            let right = t.slice_cols(prod, 2, 2).unwrap();
            let joined = t.concat_cols(right, left).unwrap();
            let both = t.concat_rows(joined, joined).unwrap();
            let th = t.tanh(both);
            let s = t.sum_all(th);
            t.value(s).item()
        };
        let p = Parameter::new("x", x0.clone());
        let mut t = Tape::new();
        let xi = t.param(&p);
        let gathered = t.gather_rows(xi, &perm).unwrap();
        let top = t.slice_rows(gathered, 0, 3).unwrap();
        let bottom = t.slice_rows(gathered, 3, 3).unwrap();
        let prod = t.mul(top, bottom).unwrap();
        let left = t.slice_cols(prod, 0, 2).unwrap();
        let right = t.slice_cols(prod, 2, 2).unwrap();
        let joined = t.concat_cols(right, left).unwrap();
        let both = t.concat_rows(joined, joined).unwrap();
        let th = t.tanh(both);
        let s = t.sum_all(th);
        t.backward(s).unwrap();
        let f = finite_diff_grad(&mut |x| eval(x), &x0, 1e-5);
        assert_close(t.grad_of(&p).unwrap(), &f, 1e-6, "structural");
    }
}

#[cfg(test)]
mod masked_softmax_properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        /// For any finite logits the masked softmax is upper triangular,
        /// row-stochastic, and has a strictly positive diagonal — the three
        /// facts the flow's invertibility and log-det rest on.
        #[test]
        fn triangular_row_stochastic_positive_diagonal(
            n in 1usize..8,
            raw in proptest::collection::vec(-40.0f64..40.0, 64),
        ) {
            let logits = Tensor::matrix(n, n, raw[..n * n].to_vec()).unwrap();
            let mut t = Tape::new();
            let li = t.constant(logits);
            let ai = t.masked_softmax(li).unwrap();
            let a = t.value(ai);
            for i in 0..n {
                let mut row_sum = 0.0;
                for j in 0..n {
                    let v = a.at2(i, j);
                    prop_assert!(v.is_finite());
                    if j < i {
                        prop_assert_eq!(v, 0.0, "strict lower triangle must be zero");
                    } else {
                        prop_assert!(v >= 0.0);
                    }
                    row_sum += v;
                }
                prop_assert!((row_sum - 1.0).abs() < 1e-12, "row {} sums to {}", i, row_sum);
                prop_assert!(a.at2(i, i) > 0.0, "diagonal {} not positive", i);
            }
        }

        /// Shifting a whole row of logits by a constant leaves the softmax
        /// unchanged (the numerical-stability property).
        #[test]
        fn row_shift_invariance(
            n in 1usize..6,
            raw in proptest::collection::vec(-10.0f64..10.0, 36),
            shift in -300.0f64..300.0,
        ) {
            let base = Tensor::matrix(n, n, raw[..n * n].to_vec()).unwrap();
            let shifted = base.map(|v| v + shift);
            let run = |m: Tensor| {
                let mut t = Tape::new();
                let li = t.constant(m);
                let ai = t.masked_softmax(li).unwrap();
                t.value(ai).clone()
            };
            let a = run(base);
            let b = run(shifted);
            prop_assert!(a.max_abs_diff(&b) < 1e-9);
        }
    }
}
