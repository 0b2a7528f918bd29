use serde::{Deserialize, Serialize};

use super::{Float, ParamStore, Tensor};
use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.02 }
    }
}

/// Moment buffers for a single parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamWState<T> {
    pub step: u64,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Float> AdamWState<T> {
    pub fn new(shape: &[usize]) -> Self {
        Self { step: 0, m: Tensor::zeros(shape.to_vec()), v: Tensor::zeros(shape.to_vec()) }
    }
}

/// One decoupled-weight-decay Adam update with bias correction, applied in place.
/// Non-finite gradients leave both parameter and state untouched.
pub fn adamw_step<T: Float>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || state.m.shape() != param.shape() {
        return Err(contract(format!(
            "adamw: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    if !grad.all_finite() {
        return Err(Error::Numeric("non-finite gradient entries".into()));
    }
    apply_adamw(param, grad, state, cfg);
    Ok(())
}

fn apply_adamw<T: Float>(param: &mut Tensor<T>, grad: &Tensor<T>, state: &mut AdamWState<T>, cfg: &AdamWConfig) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::lit(1.0 - cfg.beta1.powi(t));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(t));
    let lr = T::lit(cfg.lr);
    let decay = T::one() - lr * T::lit(cfg.weight_decay);
    let eps = T::lit(cfg.eps);
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p = *p * decay - lr * mhat / (vhat.sqrt() + eps);
    }
}

/// AdamW over every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    states: Vec<AdamWState<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let states = store.tensors().iter().map(|t| AdamWState::new(t.shape())).collect();
        Self { cfg, states }
    }

    pub fn steps(&self) -> u64 {
        self.states.first().map_or(0, |s| s.step)
    }

    /// Update every parameter at learning rate `lr`. Rejects the whole step
    /// if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(contract(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for {}", store.name(super::ParamId(i)))));
        }
        let cfg = AdamWConfig { lr, ..self.cfg };
        for ((p, g), s) in store.tensors_mut().iter_mut().zip(grads).zip(&mut self.states) {
            if p.shape() != g.shape() {
                return Err(contract(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            apply_adamw(p, g, s, &cfg);
        }
        Ok(())
    }
}

/// Exponential moving average of a parameter set.
#[derive(Clone, Debug)]
pub struct EmaState<T> {
    pub decay: f64,
    pub shadow: Vec<Tensor<T>>,
}

impl<T: Float> EmaState<T> {
    pub fn new(store: &ParamStore<T>, decay: f64) -> Self {
        Self { decay, shadow: store.tensors().to_vec() }
    }

    /// `shadow ← decay·shadow + (1−decay)·params`
    pub fn update(&mut self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(contract("ema: parameter count changed"));
        }
        let d = T::lit(self.decay);
        let one_minus = T::lit(1.0 - self.decay);
        for (s, p) in self.shadow.iter_mut().zip(params) {
            if s.shape() != p.shape() {
                return Err(contract(format!("ema: shadow {:?} vs param {:?}", s.shape(), p.shape())));
            }
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + one_minus * b;
            }
        }
        Ok(())
    }
}

/// Global L2 norm over a gradient set.
pub fn global_norm<T: Float>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().map(|g| g.sum_sq().as_f64()).sum::<f64>().sqrt()
}

/// Rescale so the global L2 norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn grad_clip_by_norm<T: Float>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: wd }
    }

    #[test]
    fn single_step_matches_closed_form() {
        let mut p = Tensor::<f64>::scalar(1.0);
        let mut s = AdamWState::new(&[]);
        adamw_step(&mut p, &Tensor::scalar(1.0), &mut s, &cfg(0.02)).unwrap();
        // bias-corrected m̂ = v̂ = 1 after one step
        let expected = 1.0 * (1.0 - 1e-3 * 0.02) - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        assert!((p.item() - 0.99898).abs() < 1e-8);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_grad_without_decay_leaves_param() {
        let mut p = Tensor::<f32>::from_fn([4], |i| i as f32 - 1.5);
        let before = p.clone();
        let mut s = AdamWState::new(p.shape());
        adamw_step(&mut p, &Tensor::zeros([4]), &mut s, &cfg(0.0)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn two_steps_replay_the_recurrence() {
        let g = Tensor::<f64>::from_fn([3], |i| 0.5 - i as f64);
        let mut p = Tensor::<f64>::from_fn([3], |i| i as f64);
        let mut s = AdamWState::new(p.shape());
        adamw_step(&mut p, &g, &mut s, &cfg(0.02)).unwrap();
        adamw_step(&mut p, &g, &mut s, &cfg(0.02)).unwrap();

        // independent scalar recurrence
        for i in 0..3 {
            let gi = 0.5 - i as f64;
            let (mut th, mut m, mut v) = (i as f64, 0.0, 0.0);
            for t in 1..=2 {
                m = 0.9 * m + 0.1 * gi;
                v = 0.95 * v + 0.05 * gi * gi;
                let mh = m / (1.0 - 0.9f64.powi(t));
                let vh = v / (1.0 - 0.95f64.powi(t));
                th = th * (1.0 - 1e-3 * 0.02) - 1e-3 * mh / (vh.sqrt() + 1e-8);
            }
            assert!((p.data()[i] - th).abs() < 1e-14);
        }
        assert_eq!(s.step, 2);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let mut p = Tensor::<f32>::full([2], 1.0);
        let mut s = AdamWState::new(p.shape());
        let g = Tensor::new([2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(adamw_step(&mut p, &g, &mut s, &cfg(0.02)), Err(Error::Numeric(_))));
        assert_eq!(p.data(), &[1.0, 1.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn ema_edge_decays() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::scalar(0.0));
        let ones = vec![Tensor::scalar(1.0)];
        let mut e = EmaState::new(&store, 0.9999);
        e.update(&ones).unwrap();
        assert!((e.shadow[0].item() - 1e-4).abs() < 1e-15);
        let mut e = EmaState::new(&store, 0.0);
        e.update(&ones).unwrap();
        assert_eq!(e.shadow[0].item(), 1.0);
        let mut e = EmaState::new(&store, 1.0);
        e.update(&ones).unwrap();
        assert_eq!(e.shadow[0].item(), 0.0);
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        // norm 6
        let mut g = vec![Tensor::<f64>::new([4], vec![3.0, 3.0, 3.0, 3.0]).unwrap()];
        let n = grad_clip_by_norm(&mut g, 3.0);
        assert!((n - 6.0).abs() < 1e-12);
        assert_eq!(g[0].data(), &[1.5, 1.5, 1.5, 1.5]);

        let mut g = vec![Tensor::<f64>::new([2], vec![0.6, 0.8]).unwrap()];
        grad_clip_by_norm(&mut g, 3.0);
        assert_eq!(g[0].data(), &[0.6, 0.8]);

        let mut g = vec![Tensor::<f64>::zeros([3])];
        grad_clip_by_norm(&mut g, 3.0);
        assert_eq!(g[0].data(), &[0.0; 3]);
    }
}
