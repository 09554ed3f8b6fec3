use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are laid out parallel to the
/// parameters of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Result<Self> {
        if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
            return Err(Error::config(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        let first: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        let second = first.clone();
        Ok(Adam {
            cfg,
            step: 0,
            first,
            second,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, param: usize) -> &[f64] {
        &self.first[param]
    }

    pub fn second_moment(&self, param: usize) -> &[f64] {
        &self.second[param]
    }

    /// Update every parameter from its accumulated gradient, then zero the gradients.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let (m, v) = (&mut self.first[id.0], &mut self.second[id.0]);
            for (((w, g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.iter_mut())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * *g;
                *vi = beta2 * *vi + (1.0 - beta2) * *g * *g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
                *g = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(v));
        s
    }

    #[test]
    fn rejects_non_positive_learning_rate() {
        let s = scalar_store(1.0);
        assert!(Adam::new(AdamConfig::new(0.0), &s).is_err());
        assert!(Adam::new(AdamConfig::new(-1e-3), &s).is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = scalar_store(0.75);
        let mut opt = Adam::new(AdamConfig::new(1e-3), &s).unwrap();
        opt.step(&mut s);
        opt.step(&mut s);
        assert_eq!(s.value(crate::numeric::ParamId(0)).data(), &[0.75]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001, mhat = 1, vhat = 1 -> step = lr / (1 + eps)
        let mut s = scalar_store(0.0);
        s.get_mut(crate::numeric::ParamId(0)).grad[0] = 1.0;
        let mut opt = Adam::new(AdamConfig::new(1e-3), &s).unwrap();
        opt.step(&mut s);
        let w = s.value(crate::numeric::ParamId(0)).data()[0];
        assert!((w + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, "{w}");
        assert_eq!(s.get(crate::numeric::ParamId(0)).grad[0], 0.0);
    }

    #[test]
    fn sign_flipping_gradient_matches_hand_recurrence() {
        // g1 = +1, g2 = -1, lr = 0.01
        // m1 = 0.1, v1 = 0.001; w1 = -0.01/(1+1e-8)
        // m2 = 0.9*0.1 - 0.1 = -0.01, v2 = 0.999*0.001 + 0.001 = 0.001999
        // mhat2 = -0.01/0.19, vhat2 = 0.001999/0.001999 = 1
        let id = crate::numeric::ParamId(0);
        let mut s = scalar_store(0.0);
        let mut opt = Adam::new(AdamConfig::new(0.01), &s).unwrap();
        s.get_mut(id).grad[0] = 1.0;
        opt.step(&mut s);
        s.get_mut(id).grad[0] = -1.0;
        opt.step(&mut s);
        assert!((opt.first_moment(0)[0] - (-0.01)).abs() < 1e-15);
        assert!((opt.second_moment(0)[0] - 0.001999).abs() < 1e-15);
        let c2 = 1.0 - 0.999f64.powi(2);
        let w1 = -0.01 / (1.0 + 1e-8);
        let w2 = w1 - 0.01 * (-0.01 / 0.19) / ((0.001999 / c2).sqrt() + 1e-8);
        let w = s.value(id).data()[0];
        assert!((w - w2).abs() < 1e-15, "{w} vs {w2}");
    }
}
