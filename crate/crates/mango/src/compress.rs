//! Feature compression: map raw per-token features down to a k-dimensional
//! space the flow models instead of the raw input.
//!
//! Two interchangeable compressors: PCA (default) fitted by power iteration
//! with deflation on the sample covariance, and a small single-hidden-layer
//! tanh autoencoder trained on reconstruction MSE. Fitted compressors are
//! immutable; encode/decode are pure.

use rand::Rng;

use crate::checkpoint::Container;
use crate::error::{MangoError, Result};
use crate::opt::Adam;
use crate::rng;
use crate::tape::{Parameter, Tape};
use crate::tensor::Tensor;

pub const POWER_ITER_TOL: f64 = 1e-10;
const POWER_ITER_MAX: usize = 10_000;

#[derive(Clone, Debug)]
pub struct PcaCompressor {
    pub mean: Tensor,
    /// k orthonormal rows, each of length d_raw. Rows past the data rank are
    /// zero.
    pub components: Tensor,
    /// Eigenvalue captured by each component, non-increasing.
    pub variances: Vec<f64>,
    pub k: usize,
}

impl PcaCompressor {
    /// `samples` is [s x d_raw], one row per observation.
    pub fn fit(samples: &Tensor, k: usize) -> Result<Self> {
        let s = samples.rows();
        let d = samples.cols();
        if s == 0 {
            return Err(MangoError::Input("cannot fit PCA on an empty dataset".into()));
        }
        if k >= d {
            return Err(MangoError::Config {
                field: "compressor.k".into(),
                detail: format!("k = {k} must be smaller than the raw dimension {d}"),
            });
        }
        let mut mean = Tensor::zeros(&[d]);
        for r in 0..s {
            for c in 0..d {
                mean.data_mut()[c] += samples.at2(r, c) / s as f64;
            }
        }
        // sample covariance
        let mut cov = Tensor::zeros(&[d, d]);
        for r in 0..s {
            for i in 0..d {
                let xi = samples.at2(r, i) - mean.data()[i];
                for j in 0..d {
                    let xj = samples.at2(r, j) - mean.data()[j];
                    *cov.data_mut().get_mut(i * d + j).unwrap() += xi * xj / s as f64;
                }
            }
        }
        let mut components = Tensor::zeros(&[k, d]);
        let mut variances = Vec::with_capacity(k);
        let mut deflated = cov;
        let mut r = rng::stream(0x9ca, "pca-power-iter");
        let mut rank_hit = false;
        let mut found: Vec<Vec<f64>> = Vec::new();
        for comp in 0..k {
            let (v, lambda) = power_iterate(&deflated, &found, &mut r)?;
            if lambda < 1e-12 {
                // data rank exhausted: leave this and later rows zero
                if !rank_hit {
                    eprintln!(
                        "warning: data rank {comp} is below k = {k}; remaining components zero-padded"
                    );
                    rank_hit = true;
                }
                variances.push(0.0);
                continue;
            }
            for j in 0..d {
                components.data_mut()[comp * d + j] = v[j];
            }
            found.push(v.clone());
            variances.push(lambda);
            // deflate: C <- C - lambda v v^T
            for i in 0..d {
                for j in 0..d {
                    deflated.data_mut()[i * d + j] -= lambda * v[i] * v[j];
                }
            }
        }
        Ok(PcaCompressor {
            mean,
            components,
            variances,
            k,
        })
    }

    /// x is [n x d_raw]; result is [n x k]. Scores are whitened: each
    /// component coordinate is divided by the square root of its captured
    /// variance, so latent features are unit-scale regardless of how the
    /// raw variance is distributed across components.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let centered = self.center(x)?;
        let mut out = centered.matmul(&self.components.transpose())?;
        for r in 0..out.rows() {
            for c in 0..self.k {
                out.data_mut()[r * self.k + c] /= self.scale(c);
            }
        }
        Ok(out)
    }

    pub fn decode(&self, f: &Tensor) -> Result<Tensor> {
        let mut unwhitened = f.clone();
        for r in 0..unwhitened.rows() {
            for c in 0..self.k {
                unwhitened.data_mut()[r * self.k + c] *= self.scale(c);
            }
        }
        let mut out = unwhitened.matmul(&self.components)?;
        let d = self.mean.len();
        for r in 0..out.rows() {
            for c in 0..d {
                out.data_mut()[r * d + c] += self.mean.data()[c];
            }
        }
        Ok(out)
    }

    /// Whitening scale for component `c`; rank-deficient (zero-variance)
    /// components pass through unscaled.
    fn scale(&self, c: usize) -> f64 {
        let v = self.variances[c];
        if v > 1e-12 {
            v.sqrt()
        } else {
            1.0
        }
    }

    fn center(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if x.cols() != d {
            return Err(MangoError::Shape(format!(
                "expected {d} raw features, got {}",
                x.cols()
            )));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for c in 0..d {
                out.data_mut()[r * d + c] -= self.mean.data()[c];
            }
        }
        Ok(out)
    }

    /// max |components . components^T - I| entry, for audits.
    pub fn orthonormality_err(&self) -> f64 {
        let g = self
            .components
            .matmul(&self.components.transpose())
            .expect("square gram");
        let mut worst: f64 = 0.0;
        for i in 0..self.k {
            for j in 0..self.k {
                // zero-padded rows are exempt from the identity check
                if self.variances[i] == 0.0 || self.variances[j] == 0.0 {
                    continue;
                }
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.at2(i, j) - want).abs());
            }
        }
        worst
    }
}

fn power_iterate<R: Rng>(
    c: &Tensor,
    previous: &[Vec<f64>],
    r: &mut R,
) -> Result<(Vec<f64>, f64)> {
    let d = c.rows();
    let mut v: Vec<f64> = (0..d).map(|_| rng::gaussian(r)).collect();
    orthogonalize(&mut v, previous);
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..POWER_ITER_MAX {
        let mut next = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                next[i] += c.at2(i, j) * v[j];
            }
        }
        // re-orthogonalize every iteration so deflation error cannot
        // accumulate; the final basis is orthonormal to machine precision
        orthogonalize(&mut next, previous);
        let new_lambda = dot(&next, &v);
        let norm = dot(&next, &next).sqrt();
        if norm < 1e-300 {
            return Ok((v, 0.0));
        }
        for x in &mut next {
            *x /= norm;
        }
        let moved = v
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        v = next;
        let settled = (new_lambda - lambda).abs() <= POWER_ITER_TOL * new_lambda.abs().max(1.0);
        lambda = new_lambda;
        if moved < POWER_ITER_TOL && settled {
            break;
        }
    }
    if !lambda.is_finite() {
        return Err(MangoError::NonFinite("power iteration diverged".into()));
    }
    Ok((v, lambda.max(0.0)))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn orthogonalize(v: &mut [f64], previous: &[Vec<f64>]) {
    for p in previous {
        let c = dot(v, p);
        for (vi, pi) in v.iter_mut().zip(p) {
            *vi -= c * pi;
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt().max(1e-300);
    for x in v {
        *x /= n;
    }
}

/// Single-hidden-layer tanh autoencoder with bottleneck k.
#[derive(Clone, Debug)]
pub struct MlpAutoencoder {
    pub e_w1: Parameter,
    pub e_b1: Parameter,
    pub e_w2: Parameter,
    pub e_b2: Parameter,
    pub d_w1: Parameter,
    pub d_b1: Parameter,
    pub d_w2: Parameter,
    pub d_b2: Parameter,
    pub d_raw: usize,
    pub k: usize,
}

impl MlpAutoencoder {
    pub fn new<R: Rng>(d_raw: usize, k: usize, r: &mut R) -> Result<Self> {
        if k >= d_raw {
            return Err(MangoError::Config {
                field: "compressor.k".into(),
                detail: format!("k = {k} must be smaller than the raw dimension {d_raw}"),
            });
        }
        let h = 4 * d_raw;
        let g = |r: &mut R, shape: &[usize]| rng::gaussian_tensor(r, shape, 0.2);
        Ok(MlpAutoencoder {
            e_w1: Parameter::new("ae.e_w1", g(r, &[d_raw, h])),
            e_b1: Parameter::new("ae.e_b1", Tensor::zeros(&[h])),
            e_w2: Parameter::new("ae.e_w2", g(r, &[h, k])),
            e_b2: Parameter::new("ae.e_b2", Tensor::zeros(&[k])),
            d_w1: Parameter::new("ae.d_w1", g(r, &[k, h])),
            d_b1: Parameter::new("ae.d_b1", Tensor::zeros(&[h])),
            d_w2: Parameter::new("ae.d_w2", g(r, &[h, d_raw])),
            d_b2: Parameter::new("ae.d_b2", Tensor::zeros(&[d_raw])),
            d_raw,
            k,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.e_w1,
            &mut self.e_b1,
            &mut self.e_w2,
            &mut self.e_b2,
            &mut self.d_w1,
            &mut self.d_b1,
            &mut self.d_w2,
            &mut self.d_b2,
        ]
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![
            &self.e_w1, &self.e_b1, &self.e_w2, &self.e_b2, &self.d_w1, &self.d_b1, &self.d_w2,
            &self.d_b2,
        ]
    }

    fn half(
        t: &mut Tape,
        x: crate::tape::ValueId,
        w1: &Parameter,
        b1: &Parameter,
        w2: &Parameter,
        b2: &Parameter,
    ) -> Result<crate::tape::ValueId> {
        let w1 = t.param(w1);
        let b1 = t.param(b1);
        let w2 = t.param(w2);
        let b2 = t.param(b2);
        let lin = t.matmul(x, w1)?;
        let aff = t.add_row_broadcast(lin, b1)?;
        let h = t.tanh(aff);
        let out = t.matmul(h, w2)?;
        t.add_row_broadcast(out, b2)
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let xi = t.constant(x.clone());
        let f = Self::half(&mut t, xi, &self.e_w1, &self.e_b1, &self.e_w2, &self.e_b2)?;
        Ok(t.value(f).clone())
    }

    pub fn decode(&self, f: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let fi = t.constant(f.clone());
        let x = Self::half(&mut t, fi, &self.d_w1, &self.d_b1, &self.d_w2, &self.d_b2)?;
        Ok(t.value(x).clone())
    }

    /// Reconstruction MSE per scalar on `samples` [s x d_raw].
    pub fn mse(&self, samples: &Tensor) -> Result<f64> {
        let recon = self.decode(&self.encode(samples)?)?;
        let diff = recon.sub(samples)?;
        Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / samples.len() as f64)
    }

    /// Full-batch Adam on reconstruction MSE. Deterministic given the
    /// construction RNG and data order.
    pub fn train(&mut self, samples: &Tensor, steps: usize, lr: f64) -> Result<f64> {
        let mut adam = Adam::new(lr);
        let count = samples.len() as f64;
        let mut last = f64::NAN;
        for _ in 0..steps {
            let mut t = Tape::new();
            let xi = t.constant(samples.clone());
            let f = Self::half(&mut t, xi, &self.e_w1, &self.e_b1, &self.e_w2, &self.e_b2)?;
            let recon = Self::half(&mut t, f, &self.d_w1, &self.d_b1, &self.d_w2, &self.d_b2)?;
            let neg = t.neg(xi);
            let diff = t.add(recon, neg)?;
            let sq = t.sum_squares(diff)?;
            let loss = t.scale_const(sq, 1.0 / count);
            t.backward(loss)?;
            last = t.value(loss).item();
            for p in self.params_mut() {
                p.zero_grad();
            }
            for p in self.params_mut() {
                if let Some(g) = t.grad_of(p) {
                    p.grad = g.clone();
                }
            }
            let mut refs = self.params_mut();
            adam.step(&mut refs);
        }
        Ok(last)
    }
}

/// A fitted compressor of either kind.
#[derive(Clone, Debug)]
pub enum Compressor {
    Pca(PcaCompressor),
    Mlp(MlpAutoencoder),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressorKind {
    Pca,
    Autoencoder,
}

impl CompressorKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(CompressorKind::Pca),
            "autoencoder" => Ok(CompressorKind::Autoencoder),
            other => Err(MangoError::Config {
                field: "compressor.kind".into(),
                detail: format!("unknown compressor kind {other:?}"),
            }),
        }
    }
}

/// Fit a compressor of `kind` on row-wise samples. The autoencoder trains
/// 2000 full-batch steps at lr 1e-2.
pub fn fit(kind: CompressorKind, samples: &Tensor, k: usize, seed: u64) -> Result<Compressor> {
    match kind {
        CompressorKind::Pca => Ok(Compressor::Pca(PcaCompressor::fit(samples, k)?)),
        CompressorKind::Autoencoder => {
            let mut r = rng::stream(seed, "autoencoder-init");
            let mut ae = MlpAutoencoder::new(samples.cols(), k, &mut r)?;
            ae.train(samples, 2000, 1e-2)?;
            Ok(Compressor::Mlp(ae))
        }
    }
}

impl Compressor {
    pub fn k(&self) -> usize {
        match self {
            Compressor::Pca(p) => p.k,
            Compressor::Mlp(m) => m.k,
        }
    }

    pub fn d_raw(&self) -> usize {
        match self {
            Compressor::Pca(p) => p.mean.len(),
            Compressor::Mlp(m) => m.d_raw,
        }
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Compressor::Pca(p) => p.encode(x),
            Compressor::Mlp(m) => m.encode(x),
        }
    }

    pub fn decode(&self, f: &Tensor) -> Result<Tensor> {
        match self {
            Compressor::Pca(p) => p.decode(f),
            Compressor::Mlp(m) => m.decode(f),
        }
    }

    pub fn to_container(&self) -> Container {
        match self {
            Compressor::Pca(p) => Container {
                meta: serde_json::json!({
                    "kind": "compressor", "variant": "pca",
                    "k": p.k, "variances": p.variances,
                }),
                tensors: vec![
                    ("mean".into(), p.mean.clone()),
                    ("components".into(), p.components.clone()),
                ],
            },
            Compressor::Mlp(m) => Container {
                meta: serde_json::json!({
                    "kind": "compressor", "variant": "autoencoder",
                    "k": m.k, "d_raw": m.d_raw,
                }),
                tensors: m
                    .params()
                    .iter()
                    .map(|p| (p.name.clone(), p.value.clone()))
                    .collect(),
            },
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bad = |detail: String| MangoError::Format { offset: 16, detail };
        if c.meta["kind"] != "compressor" {
            return Err(bad(format!("expected a compressor container, got {}", c.meta["kind"])));
        }
        let find = |name: &str| -> Result<Tensor> {
            c.tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| bad(format!("missing tensor {name:?}")))
        };
        match c.meta["variant"].as_str() {
            Some("pca") => {
                let components = find("components")?;
                let k = components.rows();
                let variances: Vec<f64> = serde_json::from_value(c.meta["variances"].clone())
                    .map_err(|e| bad(format!("variances: {e}")))?;
                Ok(Compressor::Pca(PcaCompressor {
                    mean: find("mean")?,
                    components,
                    variances,
                    k,
                }))
            }
            Some("autoencoder") => {
                let d_raw = c.meta["d_raw"].as_u64().ok_or_else(|| bad("d_raw missing".into()))?
                    as usize;
                let k = c.meta["k"].as_u64().ok_or_else(|| bad("k missing".into()))? as usize;
                let mut r = rng::stream(0, "autoencoder-init");
                let mut ae = MlpAutoencoder::new(d_raw, k, &mut r)?;
                for p in ae.params_mut() {
                    let t = find(&p.name)?;
                    if t.shape() != p.value.shape() {
                        return Err(bad(format!("tensor {:?} has wrong shape", p.name)));
                    }
                    p.value = t;
                }
                Ok(Compressor::Mlp(ae))
            }
            other => Err(bad(format!("unknown compressor variant {other:?}"))),
        }
    }
}
