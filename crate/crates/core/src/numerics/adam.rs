use crate::error::{bail, Result};

use super::params::{ParamId, ParamStore};
use super::real::Real;
use super::tensor::Tensor;

/// Moment accumulators of the Adam optimiser.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    /// Zeroed accumulators with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(params: &ParamStore<T>) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        AdamState { first: zeros(), second: zeros(), step: 0, beta1, beta2, eps }
    }
}

/// One bias-corrected Adam update. Parameters for which `frozen` returns true
/// keep their values and moments.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    frozen: impl Fn(ParamId) -> bool,
) -> Result<()> {
    if !(lr > 0.0) {
        bail!(Parameter, "learning rate must be positive, got {}", lr);
    }
    if grads.len() != params.len() || state.first.len() != params.len() {
        bail!(Dimension, "{} gradients / {} moment slots for {} parameters", grads.len(), state.first.len(), params.len());
    }
    for (i, g) in grads.iter().enumerate() {
        let id = ParamId(i);
        if g.shape() != params.get(id).shape() || state.first[i].len() != g.numel() {
            bail!(Dimension, "gradient for {} has shape {:?}, parameter {:?}", params.name(id), g.shape(), params.get(id).shape());
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (T::lit(state.beta1), T::lit(state.beta2), T::lit(state.eps));
    let step_size = T::lit(lr / c1);
    let c2_sqrt = T::lit(c2.sqrt());
    for (i, g) in grads.iter().enumerate() {
        let id = ParamId(i);
        if frozen(id) {
            continue;
        }
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            p[j] -= step_size * m[j] / (v[j].sqrt() / c2_sqrt + eps);
        }
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data().iter()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![w]));
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = scalar_store(0.5);
        let mut st = AdamState::new(&s);
        st.first[0][0] = 0.2;
        adam_step(&mut s, &[Tensor::vector(vec![0.0])], &mut st, 0.1, |_| false).unwrap();
        assert!((st.first[0][0] - 0.18).abs() < 1e-15);
        // moment decayed but non-zero; the update itself comes only from m
        let (mut s2, _) = scalar_store(0.5);
        let mut st2 = AdamState::new(&s2);
        adam_step(&mut s2, &[Tensor::vector(vec![0.0])], &mut st2, 0.1, |_| false).unwrap();
        assert_eq!(s2.get(id).data()[0], 0.5);
        assert_eq!(st2.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = scalar_store(0.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &[Tensor::vector(vec![1.0])], &mut st, 0.01, |_| false).unwrap();
        assert!((s.get(id).data()[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn quadratic_descent_from_one() {
        // Reference values from a plain scalar Adam loop written independently below.
        let (mut s, id) = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        for _ in 0..100 {
            let w = s.get(id).data()[0];
            adam_step(&mut s, &[Tensor::vector(vec![2.0 * w])], &mut st, 0.05, |_| false).unwrap();
        }
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        let got = s.get(id).data()[0];
        assert!(got.abs() < 0.2, "|w| = {}", got.abs());
        assert!((got - w).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_inputs_and_is_deterministic() {
        let (mut s, _) = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        assert!(adam_step(&mut s, &[Tensor::vector(vec![1.0, 2.0])], &mut st, 0.1, |_| false).is_err());
        assert!(adam_step(&mut s, &[Tensor::vector(vec![1.0])], &mut st, 0.0, |_| false).is_err());
        let (mut a, _) = scalar_store(1.0);
        let (mut b, _) = scalar_store(1.0);
        let (mut sa, mut sb) = (AdamState::new(&a), AdamState::new(&b));
        for _ in 0..5 {
            adam_step(&mut a, &[Tensor::vector(vec![0.3])], &mut sa, 0.1, |_| false).unwrap();
            adam_step(&mut b, &[Tensor::vector(vec![0.3])], &mut sb, 0.1, |_| false).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let (mut s, id) = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &[Tensor::vector(vec![1.0])], &mut st, 0.1, |_| true).unwrap();
        assert_eq!(s.get(id).data()[0], 1.0);
    }
}
