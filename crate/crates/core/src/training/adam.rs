use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::volgrad::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Element = f32> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    config: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::contract(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let cast = T::from_f64_lossy;
    let (b1, b2) = (cast(config.beta1), cast(config.beta2));
    let (one_b1, one_b2) = (cast(1.0 - config.beta1), cast(1.0 - config.beta2));
    let (lr, eps) = (cast(config.lr), cast(config.eps));
    let (c1, c2) = (cast(c1), cast(c2));
    for (k, param) in params.tensors_mut().iter_mut().enumerate() {
        let g = &grads[k];
        if g.shape() != param.shape() {
            return Err(Error::shape("adam", param.shape(), g.shape()));
        }
        let m = state.first[k].data_mut();
        let v = state.second[k].data_mut();
        for (((p, &gi), mi), vi) in param.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.add("w", Tensor::from_vec(&[1], vec![value]).unwrap());
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = single(1.0);
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig::default();
        adam_step(
            &mut p,
            &[Tensor::from_vec(&[1], vec![1.0]).unwrap()],
            &mut s,
            &cfg,
        )
        .unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let want = 1.0 - cfg.lr / (1.0 + cfg.eps);
        assert!((p.tensors()[0].data()[0] - want).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.3);
        let mut s = AdamState::new(&p);
        for _ in 0..50 {
            adam_step(
                &mut p,
                &[Tensor::zeros(&[1])],
                &mut s,
                &AdamConfig::default(),
            )
            .unwrap();
        }
        assert_eq!(p.tensors()[0].data()[0], 0.3);
    }

    #[test]
    fn minimizes_a_quadratic_deterministically() {
        let run = || {
            let mut p = single(3.0);
            let mut s = AdamState::new(&p);
            let cfg = AdamConfig {
                lr: 0.05,
                ..Default::default()
            };
            let mut trace = Vec::new();
            for _ in 0..400 {
                let x = p.tensors()[0].data()[0];
                adam_step(
                    &mut p,
                    &[Tensor::from_vec(&[1], vec![2.0 * x]).unwrap()],
                    &mut s,
                    &cfg,
                )
                .unwrap();
                trace.push(p.tensors()[0].data()[0].to_bits());
            }
            trace
        };
        let a = run();
        assert_eq!(a, run());
        assert!(f64::from_bits(*a.last().unwrap()).abs() < 0.05);
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let mut p = single(0.0);
        let mut s = AdamState::new(&p);
        assert!(adam_step(&mut p, &[], &mut s, &AdamConfig::default()).is_err());
        assert!(adam_step(
            &mut p,
            &[Tensor::zeros(&[2])],
            &mut s,
            &AdamConfig::default()
        )
        .is_err());
    }
}
