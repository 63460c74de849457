//! Adaptive-moment optimizer with decoupled weight decay, plus global-norm
//! gradient clipping.

use serde::{Deserialize, Serialize};

use crate::backend::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl AdamW {
    /// Moment buffers take the layout of `params`, which must not change
    /// afterwards.
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        assert!(
            params.same_layout(&self.m) && grads.same_layout(&self.m),
            "parameter layout changed"
        );
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let tensors = params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.m.tensors.iter_mut().zip(self.v.tensors.iter_mut()));
        for ((p, g), (m, v)) in tensors {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] -= c.learning_rate * c.weight_decay * p.data[i];
                p.data[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}

/// Scales all gradients jointly so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut ParamSet], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.values().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Tensor;

    fn single(values: &[f64]) -> ParamSet {
        let mut t = Tensor::zeros("x", 1, values.len());
        t.data.copy_from_slice(values);
        ParamSet { tensors: vec![t] }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = single(&[1.0, -2.0]);
        let g = single(&[0.3, -5.0]);
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &g);
        assert!((p.tensors[0].data[0] - 0.9).abs() < 1e-6);
        assert!((p.tensors[0].data[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = single(&[2.0]);
        let g = single(&[0.0]);
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &g);
        assert!((p.tensors[0].data[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = single(&[3.0, -4.0]);
        let cfg = AdamWConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        for _ in 0..2000 {
            let g = single(
                &p.tensors[0]
                    .data
                    .iter()
                    .map(|x| 2.0 * x)
                    .collect::<Vec<_>>(),
            );
            opt.step(&mut p, &g);
        }
        assert!(p.norm() < 1e-2, "{:?}", p.tensors[0].data);
    }

    #[test]
    fn clipping() {
        let mut a = single(&[3.0]);
        let mut b = single(&[4.0]);
        let n = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(n, 5.0);
        assert!((a.tensors[0].data[0] - 0.6).abs() < 1e-15);
        assert!((b.tensors[0].data[0] - 0.8).abs() < 1e-15);
        let mut c = single(&[0.1]);
        clip_global_norm(&mut [&mut c], 1.0);
        assert_eq!(c.tensors[0].data[0], 0.1);
    }
}
