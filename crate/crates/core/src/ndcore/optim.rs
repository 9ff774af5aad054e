//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::ndcore::tensor::{ParamId, ParamStore, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moment buffers for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        }
    }
}

/// One AdamW update of `param` in place. `step` is 1-based and drives bias
/// correction; weight decay is applied as `p -= lr·wd·p` before the
/// adaptive step.
pub fn adamw_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut Moments<T>,
    lr: f64,
    cfg: &AdamWConfig,
    weight_decay: f64,
    step: u64,
) -> Result<()> {
    if grad.len() != param.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::shape(
            "adamw_step",
            &[param.len(), grad.len()],
            &[state.m.len(), state.v.len()],
        ));
    }
    assert!(step >= 1, "adamw step counter is 1-based");
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let bc1 = T::lit(1.0 - cfg.beta1.powi(step as i32));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(step as i32));
    let lr_t = T::lit(lr);
    let decay = T::one() - T::lit(lr * weight_decay);
    let eps = T::lit(cfg.eps);
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] = param[i] * decay - lr_t * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Optimizer state over a whole [`ParamStore`].
///
/// Only parameters holding a gradient are updated. Weight decay skips
/// rank-0/1 tensors (biases, norm gains, learned tokens).
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub state: Vec<Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            state: store.iter().map(|(_, _, p)| Moments::zeros(p.value.shape())).collect(),
        }
    }

    pub fn decays(shape: &[usize]) -> bool {
        shape.len() >= 2
    }

    /// Applies one step at learning rate `lr` and clears the gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.state.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.state.len(),
                store.len()
            )));
        }
        self.step += 1;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let Some(grad) = p.grad.take() else { continue };
            if !p.requires_grad {
                continue;
            }
            let wd = if Self::decays(p.value.shape()) {
                self.cfg.weight_decay
            } else {
                0.0
            };
            adamw_step(
                p.value.data_mut(),
                grad.data(),
                &mut self.state[id.index()],
                lr,
                &self.cfg,
                wd,
                self.step,
            )?;
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let ids: Vec<ParamId> = store.ids().collect();
    let total: f64 = ids
        .iter()
        .filter_map(|&id| store.get(id).grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.to_f64().unwrap_or(0.0);
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let s = T::lit(max_norm / total);
        for id in ids {
            if let Some(g) = store.get_mut(id).grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let mut p = vec![0.5f64, -1.0];
        let mut st = Moments::zeros(&[2]);
        adamw_step(&mut p, &[0.0, 0.0], &mut st, 0.1, &AdamWConfig::default(), 0.0, 1).unwrap();
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn first_unit_gradient_step_moves_by_lr() {
        let mut p = vec![0.0f64];
        let mut st = Moments::zeros(&[1]);
        adamw_step(&mut p, &[1.0], &mut st, 0.1, &AdamWConfig::default(), 0.0, 1).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-8);
    }

    // Hand-rolled scalar AdamW for trace comparison.
    fn scalar_trace(p0: f64, grads: &[f64], lr: f64, wd: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        let mut out = Vec::new();
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p = p * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + eps);
            out.push(p);
        }
        out
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let grads = [0.3, 0.3];
        let expected = scalar_trace(1.5, &grads, 0.01, 0.05);
        let mut p = vec![1.5f64];
        let mut st = Moments::zeros(&[1]);
        let cfg = AdamWConfig::default();
        for (i, g) in grads.iter().enumerate() {
            adamw_step(&mut p, &[*g], &mut st, 0.01, &cfg, 0.05, i as u64 + 1).unwrap();
            assert!((p[0] - expected[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn state_shape_mismatch_is_an_error() {
        let mut p = vec![0.0f32; 3];
        let mut st = Moments::zeros(&[2]);
        let r = adamw_step(&mut p, &[0.0; 3], &mut st, 0.1, &AdamWConfig::default(), 0.0, 1);
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn store_step_skips_params_without_grad() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::full(&[2, 2], 1.0));
        let b = store.add("b", Tensor::full(&[2], 1.0));
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        store.get_mut(a).accumulate(&[1.0; 4]);
        opt.step(&mut store, 0.1).unwrap();
        assert!(store.get(a).value.data()[0] < 1.0);
        assert_eq!(store.get(b).value.data(), &[1.0, 1.0]);
        assert!(store.get(a).grad.is_none());
    }
}
