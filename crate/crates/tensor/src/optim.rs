use serde::{Deserialize, Serialize};

use crate::tensor::ParamStore;
use crate::{Scalar, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW with decoupled weight decay. Moments are kept in `f64`.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    _scalar: std::marker::PhantomData<T>,
}

/// Linear warmup: `min(1, (step + 1) / warmup_steps)`.
pub fn lr_multiplier(step: u64, warmup_steps: u64) -> f64 {
    assert!(warmup_steps >= 1, "warmup_steps must be at least 1");
    ((step + 1) as f64 / warmup_steps as f64).min(1.0)
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        AdamW {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
            _scalar: std::marker::PhantomData,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `config.lr * lr_scale`; gradients are
    /// zeroed afterwards.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr_scale: f64) -> Result<(), TensorError> {
        if let Some((_, name, _)) = params.iter().find(|(_, _, t)| t.grad.is_none()) {
            return Err(TensorError::MissingGrad(name.to_string()));
        }
        self.step += 1;
        let c = &self.config;
        let lr = c.lr * lr_scale;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let grad = t.grad.take().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[j].to_f64().expect("finite gradient");
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut x = p.to_f64().expect("finite parameter");
                x -= lr * c.weight_decay * x;
                x -= lr * mhat / (vhat.sqrt() + c.eps);
                *p = T::from_f64_lossy(x);
            }
            t.grad = Some(grad);
            t.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn single(p: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(p));
        s.get_mut(id).grad = Some(vec![g]);
        s
    }

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_a_no_op() {
        let mut s = single(0.75, 0.0);
        let mut opt = AdamW::new(cfg(0.1, 0.0), &s);
        opt.step(&mut s, 1.0).unwrap();
        assert_eq!(s.get(crate::ParamId(0)).data(), &[0.75]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Hand-rolled: m = 0.1, v = 0.001, mhat = vhat = 1, update = 1 / (1 + eps).
        let mut s = single(1.0, 1.0);
        let mut opt = AdamW::new(cfg(0.1, 0.0), &s);
        opt.step(&mut s, 1.0).unwrap();
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        let got = s.get(crate::ParamId(0)).data()[0];
        assert!((got - expected).abs() < 1e-12, "{got}");
        assert!((got - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let mut s = single(2.0, 0.0);
        let mut opt = AdamW::new(cfg(0.01, 0.5), &s);
        opt.step(&mut s, 1.0).unwrap();
        let got = s.get(crate::ParamId(0)).data()[0];
        assert!((got - 2.0 * (1.0 - 0.01 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn grads_are_zeroed_and_missing_grads_rejected() {
        let mut s = single(1.0, 3.0);
        let mut opt = AdamW::new(cfg(0.1, 0.0), &s);
        opt.step(&mut s, 1.0).unwrap();
        assert_eq!(s.get(crate::ParamId(0)).grad.as_deref(), Some(&[0.0][..]));
        s.get_mut(crate::ParamId(0)).grad = None;
        assert!(matches!(opt.step(&mut s, 1.0), Err(TensorError::MissingGrad(_))));
    }

    #[test]
    fn warmup_multiplier() {
        assert_eq!(lr_multiplier(1000, 1000), 1.0);
        assert_eq!(lr_multiplier(5000, 1000), 1.0);
        assert_eq!(lr_multiplier(499, 1000), 0.5);
        assert_eq!(lr_multiplier(0, 1), 1.0);
        let mut prev = 0.0;
        for s in 0..2000 {
            let m = lr_multiplier(s, 1000);
            assert!(m >= prev);
            prev = m;
        }
    }
}
