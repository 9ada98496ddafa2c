//! AdaMax: Adam with the second moment replaced by an exponentially weighted
//! infinity norm.
//!
//! ```text
//! m ← β1·m + (1−β1)·g
//! u ← max(β2·u, |g|)
//! θ ← θ − lr/(1−β1^t) · m / max(u, δ)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaMaxConfig {
    pub beta1: f64,
    pub beta2: f64,
    /// Floor applied to `u` before dividing.
    pub delta: f64,
}

impl Default for AdaMaxConfig {
    fn default() -> Self {
        AdaMaxConfig {
            beta1: 0.9,
            beta2: 0.999,
            delta: 1e-8,
        }
    }
}

impl AdaMaxConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(self.beta1) || !ok(self.beta2) || !(self.delta > 0.0) {
            return Err(Error::config(format!(
                "invalid AdaMax hyperparameters {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdaMaxConfig,
    /// Number of completed steps.
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub u: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(config: AdaMaxConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        OptimizerState {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            u: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.m.iter().map(Vec::len).collect()
    }

    /// Apply one update. Nothing is modified when any gradient is non-finite.
    pub fn step<P, G>(
        &mut self,
        params: &mut [(String, P)],
        grads: &[(String, G)],
        lr: f64,
    ) -> Result<()>
    where
        P: AsMut<[f32]>,
        G: AsRef<[f32]>,
    {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, ((pn, p), (_, g))) in params.iter_mut().zip(grads).enumerate() {
            let (p, g) = (p.as_mut(), g.as_ref());
            if p.len() != self.m[i].len() || g.len() != p.len() {
                return Err(Error::dim(format!("tensor {pn}: size mismatch")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(pn.clone()));
            }
        }

        self.step += 1;
        let AdaMaxConfig {
            beta1,
            beta2,
            delta,
        } = self.config;
        let step_size = (lr / (1.0 - beta1.powi(self.step.min(i32::MAX as u64) as i32))) as f32;
        let (b1, b2, delta) = (beta1 as f32, beta2 as f32, delta as f32);
        for (i, ((_, p), (_, g))) in params.iter_mut().zip(grads).enumerate() {
            let (m, u) = (&mut self.m[i], &mut self.u[i]);
            for (((theta, &gv), mv), uv) in p
                .as_mut()
                .iter_mut()
                .zip(g.as_ref())
                .zip(m.iter_mut())
                .zip(u.iter_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *uv = (b2 * *uv).max(gv.abs());
                *theta -= step_size * *mv / uv.max(delta);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> Vec<(String, Vec<f32>)> {
        vec![("p".to_string(), vec![v])]
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = OptimizerState::new(AdaMaxConfig::default(), [3]);
        let mut p = vec![("p".to_string(), vec![1.0f32, -2.0, 3.0])];
        let g = vec![("p".to_string(), vec![0.0f32; 3])];
        s.step(&mut p, &g, 0.01).unwrap();
        assert_eq!(p[0].1, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_by_hand() {
        let mut s = OptimizerState::new(AdaMaxConfig::default(), [1]);
        let mut p = one(0.5);
        s.step(&mut p, &one(1.0), 0.01).unwrap();
        assert!((s.u[0][0] - 1.0).abs() < 1e-7);
        assert!((s.m[0][0] - 0.1).abs() < 1e-7);
        assert!((p[0].1[0] - (0.5 - 0.01)).abs() < 1e-7);
    }

    #[test]
    fn steady_state_step_is_scale_invariant() {
        let run = |scale: f32| {
            let mut s = OptimizerState::new(AdaMaxConfig::default(), [1]);
            let mut p = one(0.0);
            let mut deltas = Vec::new();
            for _ in 0..50 {
                let before = p[0].1[0];
                s.step(&mut p, &one(scale), 0.01).unwrap();
                deltas.push(p[0].1[0] - before);
            }
            deltas
        };
        let (a, b) = (run(1.0), run(1000.0));
        for (x, y) in a.iter().zip(&b) {
            assert!(x.signum() == y.signum());
            assert!((x - y).abs() <= 1e-5 * x.abs(), "{x} vs {y}");
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut s = OptimizerState::new(AdaMaxConfig::default(), [1, 1]);
        let mut p = vec![
            ("a".to_string(), vec![1.0f32]),
            ("b".to_string(), vec![2.0f32]),
        ];
        let g = vec![
            ("a".to_string(), vec![1.0f32]),
            ("b".to_string(), vec![f32::NAN]),
        ];
        let err = s.step(&mut p, &g, 0.01).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "b"));
        assert_eq!(p[0].1, vec![1.0]);
        assert_eq!(s.step, 0);
        assert_eq!(s.m[0], vec![0.0]);
    }
}
