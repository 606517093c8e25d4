//! Finite-difference gradient oracle.
//!
//! Central differences against analytic adjoints, reported as the maximum
//! relative error `|analytic - numeric| / max(1, |analytic|)` over all
//! coordinates. The objective must be deterministic at a fixed RNG state.

use super::param::Parameter;
use super::{backward, Element, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar objective.
pub fn central_difference_gradient(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut grads = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let plus = f(&probe)?;
        probe[i] = point[i] - h;
        let minus = f(&probe)?;
        probe[i] = point[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                context: format!("finite difference probe at coordinate {i}"),
            });
        }
        grads.push((plus - minus) / (2.0 * h));
    }
    Ok(grads)
}

/// Max relative error between analytic and numeric gradients.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    debug_assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compare an analytic gradient against central differences of `f` at `point`.
pub fn finite_difference_check(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    h: f64,
    analytic: &[f64],
) -> Result<f64> {
    let numeric = central_difference_gradient(f, point, h)?;
    Ok(max_relative_error(analytic, &numeric))
}

fn flatten_params<F: Element>(params: &[&Parameter<F>]) -> Vec<f64> {
    let mut flat = Vec::new();
    for p in params {
        flat.extend(p.tensor().data().iter().map(|v| v.into_f64()));
    }
    flat
}

fn write_params<F: Element>(params: &[&Parameter<F>], flat: &[f64]) {
    let mut offset = 0;
    for p in params {
        let n = p.numel();
        let mut data = p.tensor().data_mut();
        for (slot, &v) in data.iter_mut().zip(&flat[offset..offset + n]) {
            *slot = F::from_f64(v);
        }
        offset += n;
    }
}

/// Gradient-check a model: run `loss` once for analytic adjoints via
/// [`backward`], then probe the same objective with central differences over
/// the flattened parameter vector. Parameter values are restored afterwards.
pub fn check_loss_gradients<F: Element>(
    params: &[&Parameter<F>],
    h: f64,
    loss: &mut dyn FnMut() -> Result<Tensor<F>>,
) -> Result<f64> {
    for p in params {
        p.tensor().zero_grad();
    }
    let root = loss()?;
    if !root.value().into_f64().is_finite() {
        return Err(Error::NonFinite {
            context: "gradient check objective".into(),
        });
    }
    backward(&root)?;
    let mut analytic = Vec::new();
    for p in params {
        match p.tensor().grad_to_f64() {
            Some(g) => analytic.extend(g),
            None => analytic.extend(std::iter::repeat(0.0).take(p.numel())),
        }
    }

    let point = flatten_params(params);
    let mut objective = |flat: &[f64]| -> Result<f64> {
        write_params(params, flat);
        let out = loss()?;
        Ok(out.value().into_f64())
    };
    let result = finite_difference_check(&mut objective, &point, h, &analytic);
    write_params(params, &point);
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::{matmul, mul, sum_all};

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        // f(x) = 0.5 * ||x||^2, grad = x
        let point = vec![1.0, -2.0, 3.0, 0.25];
        let mut f = |v: &[f64]| Ok(0.5 * v.iter().map(|x| x * x).sum::<f64>());
        let analytic = point.clone();
        let err = finite_difference_check(&mut f, &point, 1e-5, &analytic).unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn linear_is_exact() {
        let point = vec![0.3, -0.7];
        let mut f = |v: &[f64]| Ok(2.0 * v[0] - 5.0 * v[1]);
        let err = finite_difference_check(&mut f, &point, 1e-5, &[2.0, -5.0]).unwrap();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut f = |_: &[f64]| Ok(f64::NAN);
        assert!(matches!(
            central_difference_gradient(&mut f, &[1.0], 1e-5),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn model_gradient_check_on_small_graph() {
        let w = Parameter::new(
            "w",
            Tensor::<f64>::leaf(&[2, 2], vec![0.5, -0.3, 0.8, 0.1], true).unwrap(),
        );
        let x = Tensor::<f64>::constant(&[2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let err = check_loss_gradients(&[&w], 1e-5, &mut || {
            let y = matmul(&x, w.tensor())?;
            let sq = mul(&y, &y)?;
            Ok(sum_all(&sq))
        })
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }
}
