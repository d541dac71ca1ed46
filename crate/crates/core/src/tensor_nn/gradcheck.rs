//! Central finite-difference check of tape gradients.

use crate::error::{Error, Result};
use crate::tensor_nn::params::{Bound, ParamStore};
use crate::tensor_nn::tape::{Tape, Var};

/// Denominator floor for relative errors. Central differences of an f64
/// loss carry round-off near `1e-10`, so gradient entries below this scale
/// are effectively compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Largest absolute analytic gradient entry, for context.
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(store: &ParamStore, loss_fn: &F, with_grad: bool) -> Result<(f64, Option<Vec<crate::Tensor>>)>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = loss_fn(&mut tape, &bound)?;
    let value = tape.scalar(out);
    if !value.is_finite() {
        return Err(Error::InvalidArgument(format!("loss is not finite: {value}")));
    }
    let grads = if with_grad {
        let g = tape.backward(out)?;
        Some(store.collect_grads(&bound, &g))
    } else {
        None
    };
    Ok((value, grads))
}

/// Compares backprop gradients of `loss_fn` with central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε`, coordinate by coordinate, for every parameter
/// in `params`.
pub fn finite_diff_check<F>(params: &ParamStore, epsilon: f64, tolerance: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let (_, grads) = evaluate(params, &loss_fn, true)?;
    let grads = grads.expect("requested gradients");
    let mut work = params.clone();
    let mut checks = Vec::with_capacity(params.len());
    for id in params.ids() {
        let analytic = &grads[id.0];
        let mut worst: f64 = 0.0;
        for i in 0..params.get(id).len() {
            let original = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = original + epsilon;
            let (plus, _) = evaluate(&work, &loss_fn, false)?;
            work.get_mut(id).data_mut()[i] = original - epsilon;
            let (minus, _) = evaluate(&work, &loss_fn, false)?;
            work.get_mut(id).data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        checks.push(ParamCheck {
            name: params.name(id).to_string(),
            max_rel_error: worst,
            max_abs_grad: analytic.data().iter().fold(0.0_f64, |m, v| m.max(v.abs())),
        });
    }
    let max_rel_error = checks.iter().fold(0.0_f64, |m, c| m.max(c.max_rel_error));
    Ok(GradCheckReport {
        epsilon,
        tolerance,
        params: checks,
        max_rel_error,
        passed: max_rel_error < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row(&[0.3, -1.2, 2.5, 0.7]).unwrap()).unwrap();
        let report = finite_diff_check(&store, 1e-5, 1e-8, |tape, p| {
            let v = p.get(x);
            let sq = tape.mul(v, v)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::row(&[1.0, 2.0]).unwrap()).unwrap();
        let report = finite_diff_check(&store, 1e-5, 1e-8, |tape, _| {
            Ok(tape.leaf(Tensor::scalar(3.0).unwrap()))
        })
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn bad_epsilon_rejected() {
        let store = ParamStore::new();
        let r = finite_diff_check(&store, 0.0, 1e-4, |tape, _| Ok(tape.leaf(Tensor::scalar(0.0).unwrap())));
        assert!(r.is_err());
    }
}
