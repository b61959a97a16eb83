//! Central finite differences, used as an independent oracle for
//! [`Graph::backward`](super::Graph::backward).

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{bail, Result};

/// `(f(x+h) - f(x-h)) / 2h` for a scalar function.
pub fn finite_diff_scalar(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> Result<f64> {
    if h <= 0.0 {
        bail!(Contract, "finite-difference step must be positive, got {h}");
    }
    Ok((f(x + h) - f(x - h)) / (2.0 * h))
}

/// Central-difference gradient of `loss` with respect to every coordinate of
/// every parameter in `params`. Returned in a [`ParamSet`] of the same layout.
pub fn finite_diff_grad(
    mut loss: impl FnMut(&ParamSet) -> Result<f64>,
    params: &ParamSet,
    h: f64,
) -> Result<ParamSet> {
    if h <= 0.0 {
        bail!(Contract, "finite-difference step must be positive, got {h}");
    }
    let mut probe = params.clone();
    let mut out = ParamSet::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name)?.len();
        let mut grad = vec![0.0; n];
        for (i, g) in grad.iter_mut().enumerate() {
            let orig = params.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + h;
            let up = loss(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - h;
            let down = loss(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            *g = (up - down) / (2.0 * h);
        }
        out.insert(
            name.clone(),
            Tensor::new(params.get(&name)?.dims().to_vec(), grad)?,
        )?;
    }
    Ok(out)
}

/// Largest relative error `|a-b| / max(|a|, |b|)` between two gradient sets
/// (pairs where both are exactly zero count as zero error).
pub fn max_relative_error(analytic: &ParamSet, numeric: &ParamSet) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for name in analytic.names() {
        let a = analytic.grad(name)?;
        let b = numeric.get(name)?;
        if a.dims() != b.dims() {
            bail!(Shape, "gradient dims differ for `{name}`");
        }
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let denom = x.abs().max(y.abs());
            if denom > 0.0 {
                worst = worst.max((x - y).abs() / denom);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_and_sine() {
        let d = finite_diff_scalar(|x| x * x, 3.0, 1e-6).unwrap();
        assert!((d - 6.0).abs() < 1e-6);
        let d = finite_diff_scalar(f64::sin, 0.0, 1e-6).unwrap();
        assert!((d - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(finite_diff_scalar(|x| x, 0.0, 0.0).is_err());
        assert!(finite_diff_grad(|_| Ok(0.0), &ParamSet::new(), -1.0).is_err());
    }
}
