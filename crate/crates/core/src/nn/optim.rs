use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::params::ParamStore;
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay.
///
/// Decay multiplies a parameter by `1 - lr·wd` before the Adam step and is
/// skipped for parameters registered without decay (biases, norm scales).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Rebuilds optimizer state, e.g. from a checkpoint.
    #[allow(clippy::too_many_arguments)]
    pub fn from_state(
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
        step: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    ) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step,
            m,
            v,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, store has {}, got {} gradients",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        for (p, g) in store.params_mut().iter().zip(grads) {
            if g.len() != p.value.len() {
                return Err(crate::error::shape_err("adamw", p.value.shape(), &[g.len()]));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training {
                    epoch: 0,
                    detail: format!("non-finite gradient for parameter `{}`", p.name),
                });
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        for ((p, g), (m, v)) in store
            .params_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if !p.trainable {
                continue;
            }
            let decay = if p.decay { self.lr * self.weight_decay } else { 0.0 };
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= decay * *w;
                *w -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(p: f64, decay: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(p), decay);
        s
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut s = scalar_store(0.37, true);
        let mut opt = AdamW::new(&s, 0.1, 0.0);
        opt.step(&mut s, &[vec![0.0]]).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.data(), &[0.37]);
    }

    #[test]
    fn decay_only_step() {
        let mut s = scalar_store(1.0, true);
        let mut opt = AdamW::new(&s, 0.1, 0.1);
        opt.step(&mut s, &[vec![0.0]]).unwrap();
        assert!((s.iter().next().unwrap().1.value.data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn bias_skips_decay() {
        let mut s = scalar_store(1.0, false);
        let mut opt = AdamW::new(&s, 0.1, 0.1);
        opt.step(&mut s, &[vec![0.0]]).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.data(), &[1.0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(1.0, true);
        let mut opt = AdamW::new(&s, 0.1, 0.0);
        match opt.step(&mut s, &[vec![f64::NAN]]) {
            Err(Error::Training { detail, .. }) => assert!(detail.contains("`p`")),
            other => panic!("{other:?}"),
        }
    }
}
