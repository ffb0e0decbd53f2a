//! First-order optimization: Adam updates over named parameters and
//! global-norm gradient clipping.

use std::collections::HashMap;

use crate::tape::Parameter;
use crate::tensor::Tensor;

/// Adam with bias correction. Moment state is keyed by parameter name so the
/// optimizer survives parameter re-collection between steps.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Apply one update from each parameter's accumulated gradient, then
    /// leave the gradients untouched (callers zero them per step).
    pub fn step(&mut self, params: &mut [&mut Parameter]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in params.iter_mut() {
            let m = self
                .m
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = self
                .v
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            for i in 0..p.value.len() {
                let g = p.grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.value.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

pub fn global_grad_norm(params: &[&mut Parameter]) -> f64 {
    params
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Global-norm clipping; returns the scale applied, min(1, max_norm/|g|).
pub fn clip_global_norm(params: &mut [&mut Parameter], max_norm: f64) -> f64 {
    let norm = global_grad_norm(params);
    let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
    if scale < 1.0 {
        for p in params.iter_mut() {
            p.grad = p.grad.scale(scale);
        }
    }
    scale
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_params() -> Vec<Parameter> {
        vec![
            Parameter::new("a", Tensor::matrix(1, 2, vec![3.0, -2.0]).unwrap()),
            Parameter::new("b", Tensor::scalar(5.0)),
        ]
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        // f(p) = sum((p - target)^2), minimizer at target
        let targets = [1.5, -0.5, 2.0];
        let mut params = quad_params();
        let mut adam = Adam::new(0.05);
        for _ in 0..500 {
            let flat: Vec<f64> = params
                .iter()
                .flat_map(|p| p.value.data().iter().copied())
                .collect();
            let mut idx = 0;
            for p in &mut params {
                for i in 0..p.value.len() {
                    p.grad.data_mut()[i] = 2.0 * (flat[idx] - targets[idx]);
                    idx += 1;
                }
            }
            let mut refs: Vec<&mut Parameter> = params.iter_mut().collect();
            adam.step(&mut refs);
        }
        let flat: Vec<f64> = params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect();
        for (v, t) in flat.iter().zip(&targets) {
            assert!((v - t).abs() < 1e-4, "{v} vs {t}");
        }
    }

    #[test]
    fn clip_below_threshold_is_exactly_one() {
        let mut params = quad_params();
        params[0].grad = Tensor::matrix(1, 2, vec![0.3, 0.4]).unwrap();
        params[1].grad = Tensor::scalar(0.0);
        let mut refs: Vec<&mut Parameter> = params.iter_mut().collect();
        let scale = clip_global_norm(&mut refs, 5.0);
        assert_eq!(scale, 1.0);
        assert_eq!(refs[0].grad.data(), &[0.3, 0.4]);
    }

    #[test]
    fn clip_caps_global_norm() {
        let mut params = quad_params();
        params[0].grad = Tensor::matrix(1, 2, vec![30.0, 40.0]).unwrap();
        params[1].grad = Tensor::scalar(0.0);
        let mut refs: Vec<&mut Parameter> = params.iter_mut().collect();
        let scale = clip_global_norm(&mut refs, 5.0);
        assert!((scale - 0.1).abs() < 1e-12);
        let norm = global_grad_norm(&refs);
        assert!((norm - 5.0).abs() < 1e-12);
    }

    #[test]
    fn doubled_gradient_clips_to_identical_update_direction() {
        let mut a = quad_params();
        a[0].grad = Tensor::matrix(1, 2, vec![30.0, 40.0]).unwrap();
        a[1].grad = Tensor::scalar(10.0);
        let mut b = a.clone();
        for p in &mut b {
            p.grad = p.grad.scale(2.0);
        }
        let mut ra: Vec<&mut Parameter> = a.iter_mut().collect();
        let mut rb: Vec<&mut Parameter> = b.iter_mut().collect();
        clip_global_norm(&mut ra, 5.0);
        clip_global_norm(&mut rb, 5.0);
        for (x, y) in ra.iter().zip(rb.iter()) {
            for (gx, gy) in x.grad.data().iter().zip(y.grad.data()) {
                assert!((gx - gy).abs() < 1e-12);
            }
        }
    }
}
