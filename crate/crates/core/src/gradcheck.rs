//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Worst coordinate found by [`grad_check_many`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between taped gradients of a scalar `f` and central
/// differences with step `eps`, over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let report = grad_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), eps)?;
    Ok(report.max_rel_error)
}

/// Multi-input variant of [`grad_check`]: `f` receives one leaf per tensor.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let leaves: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = f(&tape, &leaves)?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("objective value {value}")));
        }
        let grads = tape.backward(loss)?;
        leaves.iter().map(|l| grads.wrt(*l)).collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::no_grad();
        let leaves: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let v = f(&tape, &leaves)?.value().item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!(
                "objective value {v} under perturbation"
            )))
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut inputs: Vec<Tensor> = xs.to_vec();
    for (t, x) in xs.iter().enumerate() {
        for i in 0..x.numel() {
            let orig = x.data()[i];
            inputs[t].data_mut()[i] = orig + eps;
            let plus = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig - eps;
            let minus = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t].data()[i];
            let err = relative_error(a, numeric);
            if err > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: err,
                    worst: (t, i),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

/// Checks gradients with respect to every entry of every parameter in
/// `store`. `floor` replaces the `1e-8` denominator floor of
/// [`relative_error`]; pass `1e-8` for the plain metric.
pub fn param_grad_check<F>(
    store: &ParamStore,
    f: F,
    eps: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Bound<'t>) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let loss = f(&bound)?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("objective value {value}")));
        }
        bound.grads(&tape.backward(loss)?)
    };
    let mut work = store.clone();
    let eval = |work: &ParamStore| -> Result<f64> {
        let tape = Tape::no_grad();
        let v = f(&work.bind(&tape))?.value().item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!(
                "objective value {v} under perturbation"
            )))
        }
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    for t in 0..store.len() {
        for i in 0..store.values()[t].numel() {
            let orig = store.values()[t].data()[i];
            work.values_mut()[t].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.values_mut()[t].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.values_mut()[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: err,
                    worst: (t, i),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]);
        let err = grad_check(|tape, _x| Ok(tape.constant(Tensor::scalar(7.0))), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn softplus_of_matmul_is_tight() {
        let x = Tensor::from_rows(&[&[0.3, -1.2, 0.7], &[2.0, 0.1, -0.4]]);
        let w = Tensor::from_rows(&[&[0.5, -0.3], &[1.1, 0.2], &[-0.8, 0.9]]);
        let err = grad_check(
            |tape, x| {
                let w = tape.constant(w.clone());
                Ok(x.matmul(&w)?.softplus().sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let x = Tensor::from_rows(&[&[-1.0]]);
        let r = grad_check(|_, x| Ok(x.ln().sum()), &x, 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
