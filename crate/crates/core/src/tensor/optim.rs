//! Adam with bias correction and decoupled weight decay.

use std::collections::BTreeMap;

use super::{ParameterStore, Scalar, Tensor};
use crate::error::{GemtError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState<F> {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<F>>,
    second: BTreeMap<String, Vec<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    /// Zeroed moments for every parameter in `params`.
    pub fn new(config: AdamConfig, params: &ParameterStore<F>) -> Self {
        let zeros = |t: &Tensor<F>| vec![F::zero(); t.numel()];
        OptimizerState {
            config,
            step: 0,
            first: params.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
            second: params.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update of `params` from `grads`. Parameters absent from
    /// `grads` are left untouched. Nothing is written if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut ParameterStore<F>, grads: &ParameterStore<F>) -> Result<()> {
        for (path, g) in grads.iter() {
            let p = params.get(path)?;
            if p.shape() != g.shape() {
                return Err(GemtError::shape("adam_step", p.shape(), g.shape()));
            }
            if !self.first.contains_key(path) {
                return Err(GemtError::Contract(format!("optimizer has no state for `{path}`")));
            }
            if !g.is_finite() {
                return Err(GemtError::NonFinite {
                    op: format!("gradient of `{path}`"),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let (lr, eps, wd) = (F::lit(c.lr), F::lit(c.eps), F::lit(c.weight_decay));
        let (bc1, bc2) = (F::lit(bc1), F::lit(bc2));
        for (path, g) in grads.iter() {
            let m = self.first.get_mut(path).expect("checked above");
            let v = self.second.get_mut(path).expect("checked above");
            let p = params.get_mut(path)?.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (F::one() - b1) * gi;
                v[i] = b2 * v[i] + (F::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] - lr * (mhat / (vhat.sqrt() + eps) + wd * p[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::from_f64(&[1], &[v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(0.7);
        let mut st = OptimizerState::new(AdamConfig::default(), &p);
        st.step(&mut p, &store(0.0)).unwrap();
        assert_eq!(p.get("x").unwrap().data()[0], 0.7);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // f(x) = x, gradient 1; bias-corrected first step is -lr * g / (|g| + eps)
        let mut p = store(0.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut st = OptimizerState::new(cfg, &p);
        st.step(&mut p, &store(1.0)).unwrap();
        let x = p.get("x").unwrap().data()[0];
        assert!((x + 0.1).abs() < 1e-7, "{x}");
    }

    #[test]
    fn identical_steps_are_identical() {
        let run = || {
            let mut p = store(0.3);
            let mut st = OptimizerState::new(AdamConfig::default(), &p);
            for i in 0..5 {
                st.step(&mut p, &store(0.1 * i as f64 - 0.2)).unwrap();
            }
            p.get("x").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = store(0.0);
        let mut st = OptimizerState::new(AdamConfig::default(), &p);
        let err = st.step(&mut p, &store(f64::NAN)).unwrap_err();
        assert!(err.to_string().contains("`x`"), "{err}");
        assert_eq!(st.step_count(), 0);
        assert_eq!(p.get("x").unwrap().data()[0], 0.0);
    }
}
