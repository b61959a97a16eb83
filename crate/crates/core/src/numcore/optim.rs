use std::collections::BTreeMap;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{bail, Result};

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every parameter from its gradient slot.
pub fn adam_step(params: &mut ParamSet, state: &mut OptimState) -> Result<()> {
    for (name, _, grad) in params.iter_mut_with_grad() {
        if !grad.all_finite() {
            bail!(Numeric, "non-finite gradient for parameter `{name}`");
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (name, value, grad) in params.iter_mut_with_grad() {
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(value.dims()));
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(value.dims()));
        if m.dims() != value.dims() {
            bail!(
                Shape,
                "optimizer moments for `{name}` do not match parameter dims"
            );
        }
        for (((p, &g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
        if !value.all_finite() {
            bail!(Numeric, "parameter `{name}` became non-finite");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::row(&[v])).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = single(1.25);
        let mut st = OptimState::new(0.1);
        for _ in 0..10 {
            adam_step(&mut p, &mut st).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[1.25]);
        assert_eq!(st.step, 10);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient() {
        for g in [3.0, -0.02] {
            let mut p = single(0.0);
            p.set_grad("w", Tensor::row(&[g])).unwrap();
            let mut st = OptimState::new(0.01);
            adam_step(&mut p, &mut st).unwrap();
            let w = p.get("w").unwrap().data()[0];
            assert!((w.abs() - 0.01).abs() < 1e-6, "{w}");
            assert_eq!(w.signum(), -g.signum());
        }
    }

    #[test]
    fn quadratic_converges_like_scalar_recurrence() {
        // Independent scalar recurrence for f(w) = (w-5)², lr 0.1.
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * (w - 5.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            w -=
                0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((w - 5.0).abs() < 0.5);

        let mut p = single(0.0);
        let mut st = OptimState::new(0.1);
        for _ in 0..100 {
            let cur = p.get("w").unwrap().data()[0];
            p.set_grad("w", Tensor::row(&[2.0 * (cur - 5.0)])).unwrap();
            adam_step(&mut p, &mut st).unwrap();
        }
        let got = p.get("w").unwrap().data()[0];
        assert!((got - 5.0).abs() < 0.5);
        assert!((got - w).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = single(0.0);
        p.set_grad("w", Tensor::row(&[f64::NAN])).unwrap();
        let err = adam_step(&mut p, &mut OptimState::new(0.1)).unwrap_err();
        assert!(
            matches!(&err, crate::Error::Numeric(m) if m.contains("`w`")),
            "{err}"
        );
    }
}
