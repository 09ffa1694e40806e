use crate::error::{shape_err, Result};
use crate::params::{Grads, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam optimizer with bias-corrected first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(shape_err("adam", &[params.len()], &[grads.len()]));
        }
        for (id, g) in grads.iter().enumerate() {
            if g.shape() != params.get(id).shape() {
                return Err(shape_err("adam", params.get(id).shape(), g.shape()));
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (id, g) in grads.iter().enumerate() {
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            let w = params.get_mut(id).data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("w".into(), Tensor::scalar(w)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = single(0.75);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let g = Grads::zeros_like(&p);
        for _ in 0..10 {
            adam.step(&mut p, &g).unwrap();
        }
        assert_eq!(p.get(0).data(), [0.75]);
    }

    /// Independent scalar recurrence for the same update rule.
    fn scalar_adam(mut w: f64, steps: usize, lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        w
    }

    #[test]
    fn quadratic_converges_and_matches_scalar_recurrence() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut p = single(1.0);
        let mut adam = Adam::new(cfg, &p);
        for _ in 0..500 {
            let mut g = Grads::zeros_like(&p);
            g.accumulate(0, &Tensor::scalar(2.0 * p.get(0).data()[0]))
                .unwrap();
            adam.step(&mut p, &g).unwrap();
        }
        let w = p.get(0).data()[0];
        assert!(w.abs() < 0.05, "|w| = {}", w.abs());
        assert!((w - scalar_adam(1.0, 500, 0.01)).abs() < 1e-12);
    }

    #[test]
    fn identical_inputs_give_identical_updates() {
        let run = || {
            let mut p = single(0.3);
            let mut adam = Adam::new(AdamConfig::default(), &p);
            let mut g = Grads::zeros_like(&p);
            g.accumulate(0, &Tensor::scalar(-1.7)).unwrap();
            adam.step(&mut p, &g).unwrap();
            adam.step(&mut p, &g).unwrap();
            (p, adam)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = single(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let mut other = ParamSet::new();
        other.add("w".into(), Tensor::zeros(&[2])).unwrap();
        let g = Grads::zeros_like(&other);
        assert!(adam.step(&mut p, &g).is_err());
    }
}
