//! Adam with bias correction:
//!
//! ```text
//! m ← β1 m + (1 − β1) g
//! v ← β2 v + (1 − β2) g²
//! θ ← θ − lr · (m / (1 − β1ᵗ)) / (√(v / (1 − β2ᵗ)) + ε)
//! ```
//!
//! A tensor whose gradient is identically zero in a step keeps its value; its
//! moments still decay.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{NnError, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<DMatrix<T>>,
    pub v: Vec<DMatrix<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut DMatrix<T>], grads: &[DMatrix<T>]) -> Result<(), NnError> {
        if params.len() != grads.len() {
            return Err(NnError::Shape(format!("{} tensors, {} gradients", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(NnError::Shape(format!("tensor {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(NnError::NonFinite("gradient"));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| DMatrix::zeros(g.nrows(), g.ncols())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() || self.m.iter().zip(grads).any(|(m, g)| m.shape() != g.shape()) {
            return Err(NnError::Shape("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let c = |x: f64| -> T { nalgebra::convert(x) };
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = c(1.0 - beta1.powi(self.t as i32));
        let bc2 = c(1.0 - beta2.powi(self.t as i32));
        let (b1, b2, lr, eps) = (c(beta1), c(beta2), c(lr), c(eps));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let zero = g.iter().all(|x| *x == T::zero());
            m.zip_apply(g, |mi, gi| *mi = b1 * *mi + (T::one() - b1) * gi);
            v.zip_apply(g, |vi, gi| *vi = b2 * *vi + (T::one() - b2) * gi * gi);
            if zero {
                continue;
            }
            for ((pi, mi), vi) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *pi -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    #[test]
    fn three_step_hand_calculation() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg);
        let mut p = scalar(1.0);
        // hand-unrolled recurrences
        let (mut m, mut v, mut th) = (0.0f64, 0.0f64, 1.0f64);
        for (t, g) in [0.5, -0.2, 0.3].into_iter().enumerate() {
            opt.step(&mut [&mut p], &[scalar(g)]).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let k = t as i32 + 1;
            th -= 0.1 * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
            assert!((p[(0, 0)] - th).abs() < 1e-15, "step {k}");
        }
        // first step moves by lr·sign(g) up to ε
        let mut q = scalar(0.0);
        Adam::new(cfg).step(&mut [&mut q], &[scalar(2.0)]).unwrap();
        assert!((q[(0, 0)] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = scalar(1.0);
        opt.step(&mut [&mut p], &[scalar(0.0)]).unwrap();
        assert_eq!(p[(0, 0)], 1.0);
        opt.step(&mut [&mut p], &[scalar(1.0)]).unwrap();
        let (p1, m1, v1) = (p[(0, 0)], opt.m[0][(0, 0)], opt.v[0][(0, 0)]);
        opt.step(&mut [&mut p], &[scalar(0.0)]).unwrap();
        assert_eq!(p[(0, 0)], p1);
        assert_eq!(opt.m[0][(0, 0)], 0.9 * m1);
        assert_eq!(opt.v[0][(0, 0)], 0.999 * v1);
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let mut a = Adam::new(AdamConfig::default());
        let mut b = a.clone();
        let mut pa = DMatrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64 * 0.1);
        let mut pb = pa.clone();
        for k in 0..5 {
            let g = DMatrix::from_fn(3, 2, |i, j| ((i * 7 + j * 3 + k) as f64).sin());
            a.step(&mut [&mut pa], &[g.clone()]).unwrap();
            b.step(&mut [&mut pb], &[g]).unwrap();
        }
        assert_eq!(pa, pb);
    }

    #[test]
    fn non_finite_gradient_fails_fast() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = scalar(1.0);
        assert!(opt.step(&mut [&mut p], &[scalar(f64::NAN)]).is_err());
        assert_eq!(p[(0, 0)], 1.0);
        assert_eq!(opt.t, 0);
    }
}
