//! First-order optimizers over flat parameter buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adaptive moments with bias correction and decoupled weight decay.
    #[default]
    AdaptiveDecoupled,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adaptive_decoupled" | "adamw" => Ok(Self::AdaptiveDecoupled),
            "sgd" => Ok(Self::Sgd),
            other => Err(format!("expected `adaptive_decoupled` or `sgd`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    /// Number of completed steps.
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Updates every buffer in place. Each buffer carries its own learning
    /// rate and weight decay. Nothing changes when a gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]], hyper: &[(T, T)]) -> Result<()> {
        if params.len() != grads.len() || params.len() != hyper.len() {
            return Err(Error::Shape {
                context: "optimizer buffers",
                expected: params.len(),
                actual: grads.len(),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::Shape {
                    context: "optimizer buffer length",
                    expected: p.len(),
                    actual: g.len(),
                });
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    index: i,
                    what: "gradient",
                });
            }
        }
        if self.m.is_empty() && self.kind == OptimizerKind::AdaptiveDecoupled {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, g), &(lr, wd)) in params.iter_mut().zip(grads).zip(hyper) {
                    let decay = T::one() - lr * wd;
                    for (pv, &gv) in p.iter_mut().zip(g.iter()) {
                        *pv = *pv * decay - lr * gv;
                    }
                }
            }
            OptimizerKind::AdaptiveDecoupled => {
                let t = self.t as i32;
                let c1 = T::one() - self.beta1.powi(t);
                let c2 = T::one() - self.beta2.powi(t);
                for (k, ((p, g), &(lr, wd))) in params.iter_mut().zip(grads).zip(hyper).enumerate() {
                    let decay = T::one() - lr * wd;
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for i in 0..p.len() {
                        let gv = g[i];
                        m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * gv;
                        v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * gv * gv;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_adaptive_step() {
        let mut opt = Optimizer::<f64>::new(OptimizerKind::AdaptiveDecoupled);
        let mut p = [1.0];
        opt.step(&mut [&mut p[..]], &[&[1.0][..]], &[(0.1, 0.0)]).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps)
        assert!((p[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_grads() {
        for kind in [OptimizerKind::AdaptiveDecoupled, OptimizerKind::Sgd] {
            let mut opt = Optimizer::<f64>::new(kind);
            let mut p = [2.0, -3.0];
            opt.step(&mut [&mut p[..]], &[&[0.0, 0.0][..]], &[(0.1, 0.0)]).unwrap();
            assert_eq!(p, [2.0, -3.0]);
            opt.step(&mut [&mut p[..]], &[&[0.0, 0.0][..]], &[(0.1, 0.5)]).unwrap();
            assert!((p[0] - 2.0 * 0.95).abs() < 1e-15);
            assert!((p[1] + 3.0 * 0.95).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_leaves_state() {
        let mut opt = Optimizer::<f64>::new(OptimizerKind::AdaptiveDecoupled);
        let mut p = [1.0, 1.0];
        let r = opt.step(&mut [&mut p[..]], &[&[0.5, f64::NAN][..]], &[(0.1, 0.0)]);
        assert!(matches!(r, Err(Error::NonFinite { index: 1, .. })));
        assert_eq!(p, [1.0, 1.0]);
        assert_eq!(opt.t, 0);
    }

    #[test]
    fn adaptive_matches_reference_over_steps() {
        let mut opt = Optimizer::<f64>::new(OptimizerKind::AdaptiveDecoupled);
        let mut p = [0.5];
        let (mut m, mut v, mut q) = (0.0f64, 0.0f64, 0.5f64);
        for t in 1..=20 {
            let g = (t as f64).sin();
            opt.step(&mut [&mut p[..]], &[&[g][..]], &[(0.01, 0.1)]).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            q = q * (1.0 - 0.01 * 0.1) - 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0] - q).abs() < 1e-14);
    }
}
