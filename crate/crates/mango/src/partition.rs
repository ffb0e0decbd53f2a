//! Reversible token partition/merge rules.
//!
//! MMCA and IMCA are pure index permutations over the token axis. LICA mixes
//! tokens with a learnable invertible matrix W = P L (U + diag(s)) before a
//! half/half split, and applies W^-1 at merge.

use rand::Rng;

use crate::error::{MangoError, Result};
use crate::rng;
use crate::tape::{Parameter, Tape, ValueId};
use crate::tensor::{lu_solve, Tensor};

/// Token counts of the two modalities. Equal halves are required downstream,
/// so `m == k` is enforced here (padding happens upstream).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModalityLayout {
    pub m: usize,
    pub k: usize,
}

impl ModalityLayout {
    pub fn new(m: usize, k: usize) -> Result<Self> {
        if m == 0 || k == 0 {
            return Err(MangoError::Layout("empty modality".into()));
        }
        if m != k {
            return Err(MangoError::Layout(format!(
                "unequal modality token counts m={m}, k={k}; pad upstream"
            )));
        }
        Ok(ModalityLayout { m, k })
    }

    pub fn n(&self) -> usize {
        self.m + self.k
    }
}

/// Index-permutation partition schemes. The first n/2 entries of the
/// permutation are the sources of x1, the rest the sources of x2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum IndexScheme {
    MmcaAToB,
    MmcaBToA,
    /// The four half-of-each-modality pairings, mode in 1..=4.
    Imca(u8),
}

impl IndexScheme {
    pub fn permutation(&self, layout: ModalityLayout) -> Result<Vec<usize>> {
        let (m, k) = (layout.m, layout.k);
        let a: Vec<usize> = (0..m).collect();
        let b: Vec<usize> = (m..m + k).collect();
        match self {
            IndexScheme::MmcaAToB => Ok([a, b].concat()),
            IndexScheme::MmcaBToA => Ok([b, a].concat()),
            IndexScheme::Imca(mode) => {
                if m % 2 != 0 || k % 2 != 0 {
                    return Err(MangoError::Layout(format!(
                        "IMCA needs even per-modality counts, got m={m}, k={k}"
                    )));
                }
                let (a1, a2) = a.split_at(m / 2);
                let (b1, b2) = b.split_at(k / 2);
                let pairs: [(&[usize], &[usize], &[usize], &[usize]); 4] = [
                    (a1, b1, a2, b2),
                    (a1, b2, a2, b1),
                    (a2, b1, a1, b2),
                    (a2, b2, a1, b1),
                ];
                let idx = match mode {
                    1..=4 => (*mode - 1) as usize,
                    _ => {
                        return Err(MangoError::Layout(format!(
                            "IMCA mode {mode} out of range 1..=4"
                        )))
                    }
                };
                let (p, q, r, s) = pairs[idx];
                Ok([p, q, r, s].concat())
            }
        }
    }
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Split a token batch under an index scheme.
pub fn partition(scheme: IndexScheme, x: &Tensor, layout: ModalityLayout) -> Result<(Tensor, Tensor)> {
    let n = layout.n();
    if x.rows() != n {
        return Err(MangoError::Layout(format!(
            "token batch has {} rows, layout expects {n}",
            x.rows()
        )));
    }
    let perm = scheme.permutation(layout)?;
    let gathered = x.gather_rows(&perm);
    Ok((gathered.slice_rows(0, n / 2), gathered.slice_rows(n / 2, n / 2)))
}

/// Restore original token order after an index-scheme split.
pub fn merge(scheme: IndexScheme, y1: &Tensor, y2: &Tensor, layout: ModalityLayout) -> Result<Tensor> {
    let n = layout.n();
    if y1.rows() + y2.rows() != n || y1.cols() != y2.cols() {
        return Err(MangoError::Layout(format!(
            "merge shapes {:?} + {:?} do not form an {n}-token batch",
            y1.shape(),
            y2.shape()
        )));
    }
    let perm = scheme.permutation(layout)?;
    let stacked = y1.concat_rows(y2)?;
    Ok(stacked.gather_rows(&invert_permutation(&perm)))
}

/// LU-parameterized learnable token mixing: W = P L (U + diag(s)).
///
/// The permutation P and the signs of s are fixed at initialization; L, U and
/// the magnitudes of s (stored in log-space, so s never crosses zero) are
/// learned.
#[derive(Clone, Debug)]
pub struct LuPermutation {
    pub perm: Vec<usize>,
    pub lower: Parameter,
    pub upper: Parameter,
    pub sign: Vec<f64>,
    pub log_s: Parameter,
}

impl LuPermutation {
    pub fn new<R: Rng>(prefix: &str, n: usize, rng: &mut R) -> Self {
        let perm = rng::random_permutation(rng, n);
        let sign: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        LuPermutation {
            perm,
            lower: Parameter::new(format!("{prefix}.lower"), Tensor::zeros(&[n, n])),
            upper: Parameter::new(format!("{prefix}.upper"), Tensor::zeros(&[n, n])),
            sign,
            log_s: Parameter::new(format!("{prefix}.log_s"), Tensor::zeros(&[n])),
        }
    }

    /// Identity mixing (P = I, L = I, U = 0, s = 1), mainly for tests.
    pub fn identity(prefix: &str, n: usize) -> Self {
        LuPermutation {
            perm: (0..n).collect(),
            lower: Parameter::new(format!("{prefix}.lower"), Tensor::zeros(&[n, n])),
            upper: Parameter::new(format!("{prefix}.upper"), Tensor::zeros(&[n, n])),
            sign: vec![1.0; n],
            log_s: Parameter::new(format!("{prefix}.log_s"), Tensor::zeros(&[n])),
        }
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }

    fn masks(n: usize) -> (Tensor, Tensor) {
        let mut lower = Tensor::zeros(&[n, n]);
        let mut upper = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if j < i {
                    lower.set2(i, j, 1.0);
                } else if j > i {
                    upper.set2(i, j, 1.0);
                }
            }
        }
        (lower, upper)
    }

    /// Record the dense W on the tape, with gradients flowing to L, U and
    /// log|s|.
    pub fn compose_tape(&self, t: &mut Tape) -> Result<ValueId> {
        let n = self.n();
        let (lmask, umask) = Self::masks(n);
        let lower = t.param(&self.lower);
        let upper = t.param(&self.upper);
        let log_s = t.param(&self.log_s);

        let lmask = t.constant(lmask);
        let umask = t.constant(umask);
        let eye = t.constant(Tensor::eye(n));
        let p = t.constant(Tensor::permutation_matrix(&self.perm));
        let sign = t.constant(Tensor::new(vec![n], self.sign.clone())?);

        let lstrict = t.mul(lower, lmask)?;
        let l = t.add(eye, lstrict)?;
        let ustrict = t.mul(upper, umask)?;
        let s_mag = t.exp(log_s);
        let s = t.mul(s_mag, sign)?;
        let sdiag = t.diag_embed(s)?;
        let u = t.add(ustrict, sdiag)?;
        let lu = t.matmul(l, u)?;
        t.matmul(p, lu)
    }

    /// Dense W as a plain tensor.
    pub fn compose(&self) -> Result<Tensor> {
        let mut t = Tape::new();
        let w = self.compose_tape(&mut t)?;
        Ok(t.value(w).clone())
    }

    /// Per-channel log|det W| = sum log|s_i|. Each of the d feature channels
    /// contributes this amount to the flow log-det when W mixes tokens.
    pub fn log_det_per_channel(&self) -> Result<f64> {
        if !self.log_s.value.all_finite() {
            return Err(MangoError::Singular(
                "log|s| non-finite; mixing matrix degenerate".into(),
            ));
        }
        Ok(self.log_s.value.sum())
    }

    /// Sum log|s_i| on the tape (for differentiable log-det accumulation).
    pub fn log_det_per_channel_tape(&self, t: &mut Tape) -> ValueId {
        let log_s = t.param(&self.log_s);
        t.sum_all(log_s)
    }

    /// Apply W (or W^-1 with `inverse`) along the token axis. The inverse is
    /// two triangular solves behind a pivoted LU, never a dense inversion.
    pub fn apply(&self, x: &Tensor, inverse: bool) -> Result<Tensor> {
        let w = self.compose()?;
        if inverse {
            lu_solve(&w, x)
        } else {
            w.matmul(x)
        }
    }
}

/// Spec-level operation: dense W plus its per-channel log-det.
pub fn lu_compose(lu: &LuPermutation) -> Result<(Tensor, f64)> {
    Ok((lu.compose()?, lu.log_det_per_channel()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::rng;

    fn toy_batch() -> (Tensor, ModalityLayout) {
        // tokens [a1, a2, b1, b2] with distinguishable rows
        let x = Tensor::matrix(4, 2, vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5]).unwrap();
        (x, ModalityLayout::new(2, 2).unwrap())
    }

    #[test]
    fn mmca_a_to_b_splits_modalities() {
        let (x, layout) = toy_batch();
        let (x1, x2) = partition(IndexScheme::MmcaAToB, &x, layout).unwrap();
        assert_eq!(x1.data(), &[1.0, 1.5, 2.0, 2.5]);
        assert_eq!(x2.data(), &[3.0, 3.5, 4.0, 4.5]);
    }

    #[test]
    fn imca_mode1_interleaves() {
        let (x, layout) = toy_batch();
        let (x1, x2) = partition(IndexScheme::Imca(1), &x, layout).unwrap();
        assert_eq!(x1.data(), &[1.0, 1.5, 3.0, 3.5]); // [a1, b1]
        assert_eq!(x2.data(), &[2.0, 2.5, 4.0, 4.5]); // [a2, b2]
    }

    #[test]
    fn mmca_b_to_a_merge_restores_a_first_order() {
        let (x, layout) = toy_batch();
        let (y1, y2) = partition(IndexScheme::MmcaBToA, &x, layout).unwrap();
        // y1 holds B tokens, y2 holds A tokens; merge restores original order
        let merged = merge(IndexScheme::MmcaBToA, &y1, &y2, layout).unwrap();
        assert_eq!(merged, x);
    }

    #[test]
    fn all_index_schemes_roundtrip_exactly() {
        let mut r = rng::stream(0, "part");
        let layout = ModalityLayout::new(4, 4).unwrap();
        let x = rng::gaussian_tensor(&mut r, &[8, 3], 1.0);
        let schemes = [
            IndexScheme::MmcaAToB,
            IndexScheme::MmcaBToA,
            IndexScheme::Imca(1),
            IndexScheme::Imca(2),
            IndexScheme::Imca(3),
            IndexScheme::Imca(4),
        ];
        for s in schemes {
            let (x1, x2) = partition(s, &x, layout).unwrap();
            let back = merge(s, &x1, &x2, layout).unwrap();
            assert_eq!(back, x, "{s:?}");
            // pure index permutation: row multiset preserved
            let mut orig: Vec<Vec<u64>> = (0..8)
                .map(|i| (0..3).map(|j| x.at2(i, j).to_bits()).collect())
                .collect();
            let mut parts: Vec<Vec<u64>> = (0..4)
                .map(|i| (0..3).map(|j| x1.at2(i, j).to_bits()).collect())
                .chain((0..4).map(|i| (0..3).map(|j| x2.at2(i, j).to_bits()).collect()))
                .collect();
            orig.sort();
            parts.sort();
            assert_eq!(orig, parts);
        }
    }

    #[test]
    fn imca_rejects_odd_counts() {
        let layout = ModalityLayout::new(3, 3).unwrap();
        let x = Tensor::zeros(&[6, 2]);
        assert!(partition(IndexScheme::Imca(1), &x, layout).is_err());
    }

    #[test]
    fn lu_compose_diag_case() {
        let mut lu = LuPermutation::identity("t", 2);
        lu.log_s.value = Tensor::new(vec![2], vec![2.0f64.ln(), 3.0f64.ln()]).unwrap();
        let (w, ld) = lu_compose(&lu).unwrap();
        assert!(w.max_abs_diff(&Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap()) < 1e-12);
        assert!((ld - 6.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lu_compose_unit_s_gives_pure_permutation() {
        let mut r = rng::stream(1, "lup");
        let mut lu = LuPermutation::new("t", 5, &mut r);
        lu.sign = vec![1.0; 5];
        let (w, ld) = lu_compose(&lu).unwrap();
        assert!(w.max_abs_diff(&Tensor::permutation_matrix(&lu.perm)) < 1e-12);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn lu_logdet_matches_dense_slogdet() {
        let mut r = rng::stream(2, "lud");
        for _ in 0..5 {
            let mut lu = LuPermutation::new("t", 5, &mut r);
            lu.lower.value = rng::gaussian_tensor(&mut r, &[5, 5], 0.5);
            lu.upper.value = rng::gaussian_tensor(&mut r, &[5, 5], 0.5);
            lu.log_s.value = rng::gaussian_tensor(&mut r, &[5], 0.5);
            let (w, ld) = lu_compose(&lu).unwrap();
            let (_, expected) = oracle::dense_slogdet(&w).unwrap();
            assert!((ld - expected).abs() < 1e-10, "{ld} vs {expected}");
        }
    }

    #[test]
    fn lica_apply_identity_and_swap() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let id = LuPermutation::identity("t", 2);
        assert!(id.apply(&x, false).unwrap().max_abs_diff(&x) < 1e-12);

        let mut swap = LuPermutation::identity("t", 2);
        swap.perm = vec![1, 0];
        let y = swap.apply(&x, false).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn lica_apply_roundtrip() {
        let mut r = rng::stream(3, "lur");
        let mut lu = LuPermutation::new("t", 8, &mut r);
        lu.lower.value = rng::gaussian_tensor(&mut r, &[8, 8], 0.3);
        lu.upper.value = rng::gaussian_tensor(&mut r, &[8, 8], 0.3);
        lu.log_s.value = rng::gaussian_tensor(&mut r, &[8], 0.3);
        let x = rng::gaussian_tensor(&mut r, &[8, 4], 1.0);
        let y = lu.apply(&x, false).unwrap();
        let back = lu.apply(&y, true).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn lica_full_jacobian_logdet_uses_d_exponent() {
        // d * sum log|s| must match slogdet of the full n*d Jacobian
        let mut r = rng::stream(4, "luj");
        let mut lu = LuPermutation::new("t", 4, &mut r);
        lu.lower.value = rng::gaussian_tensor(&mut r, &[4, 4], 0.4);
        lu.upper.value = rng::gaussian_tensor(&mut r, &[4, 4], 0.4);
        lu.log_s.value = rng::gaussian_tensor(&mut r, &[4], 0.4);
        let d = 3usize;
        let x = rng::gaussian_tensor(&mut r, &[4, d], 1.0);
        let lu2 = lu.clone();
        let jac = oracle::numerical_jacobian(&mut move |v| lu2.apply(v, false), &x, 1e-5).unwrap();
        let (_, num) = oracle::dense_slogdet(&jac).unwrap();
        let analytic = d as f64 * lu.log_det_per_channel().unwrap();
        let rel = (analytic - num).abs() / num.abs().max(1.0);
        assert!(rel < 1e-6, "rel {rel}");
    }
}

#[cfg(test)]
mod partition_properties {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn schemes() -> Vec<IndexScheme> {
        let mut s = vec![IndexScheme::MmcaAToB, IndexScheme::MmcaBToA];
        s.extend((1..=4).map(IndexScheme::Imca));
        s
    }

    proptest! {
        /// merge(partition(x)) restores x exactly for every scheme, any even
        /// modality sizes, and arbitrary token contents.
        #[test]
        fn partition_merge_is_exact_roundtrip(
            half in 1usize..5,
            d in 1usize..5,
            seed in 0u64..1000,
        ) {
            let layout = ModalityLayout::new(2 * half, 2 * half).unwrap();
            let mut r = rng::stream(seed, "partition-prop");
            let x = rng::gaussian_tensor(&mut r, &[layout.n(), d], 3.0);
            for scheme in schemes() {
                let (y1, y2) = partition(scheme, &x, layout).unwrap();
                prop_assert_eq!(y1.rows() + y2.rows(), layout.n());
                let back = merge(scheme, &y1, &y2, layout).unwrap();
                prop_assert_eq!(back.data(), x.data());
            }
        }

        /// Every scheme's index permutation is a true permutation and
        /// inverting it twice is the identity.
        #[test]
        fn scheme_permutations_are_involutively_invertible(half in 1usize..6) {
            let layout = ModalityLayout::new(2 * half, 2 * half).unwrap();
            for scheme in schemes() {
                let p = scheme.permutation(layout).unwrap();
                let mut sorted = p.clone();
                sorted.sort_unstable();
                prop_assert_eq!(&sorted, &(0..layout.n()).collect::<Vec<_>>());
                let inv = invert_permutation(&p);
                prop_assert_eq!(invert_permutation(&inv), p);
            }
        }
    }
}
