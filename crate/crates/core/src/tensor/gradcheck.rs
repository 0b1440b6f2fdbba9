use super::{GradStore, ParamStore};
use crate::error::{CsdnError, Result};

/// Outcome of [`grad_check`]: the worst coordinate and its error.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares analytic gradients against central differences over every
/// scalar of every parameter in `params`.
///
/// `f(params, Some(grads))` must return the objective and accumulate its
/// analytic gradient into `grads`; `f(params, None)` only evaluates. The
/// error per coordinate is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(mut f: F, params: &mut ParamStore, epsilon: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, Option<&mut GradStore>) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(CsdnError::InvalidArgument(format!(
            "grad_check epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let mut analytic = GradStore::zeros_like(params);
    let base = f(params, Some(&mut analytic))?;
    if !base.is_finite() {
        return Err(CsdnError::NonFinite("objective at the base point".into()));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for p in 0..params.len() {
        for i in 0..params.params()[p].value.len() {
            let numeric = central_difference(&mut f, params, p, i, epsilon)?;
            let a = analytic.as_slices()[p][i];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst_param = params.params()[p].name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// `(f(theta + eps e_i) - f(theta - eps e_i)) / 2 eps` for one coordinate;
/// the parameter is restored before returning.
pub fn central_difference<F>(
    f: &mut F,
    params: &mut ParamStore,
    param: usize,
    index: usize,
    epsilon: f64,
) -> Result<f64>
where
    F: FnMut(&ParamStore, Option<&mut GradStore>) -> Result<f64>,
{
    let original = params.params()[param].value.data()[index];
    params.params_mut()[param].value.data_mut()[index] = original + epsilon;
    let plus = f(params, None);
    params.params_mut()[param].value.data_mut()[index] = original - epsilon;
    let minus = f(params, None);
    params.params_mut()[param].value.data_mut()[index] = original;
    let (plus, minus) = (plus?, minus?);
    if !plus.is_finite() || !minus.is_finite() {
        return Err(CsdnError::NonFinite(format!(
            "objective while perturbing {}[{index}]",
            params.params()[param].name
        )));
    }
    Ok((plus - minus) / (2.0 * epsilon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let t = store.add("theta", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let report = grad_check(
            |s: &ParamStore, g: Option<&mut GradStore>| {
                let v = s.value(t).data();
                if let Some(g) = g {
                    g.accumulate(t, &[2.0 * v[0], 2.0 * v[1]]);
                }
                Ok(v.iter().map(|x| x * x).sum())
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8);
        assert_eq!(report.coordinates, 2);
    }

    #[test]
    fn constant_has_zero_error() {
        let mut store = ParamStore::new();
        store.add("theta", Tensor::full(&[3], 0.3));
        let report = grad_check(|_, _| Ok(4.0), &mut store, 1e-5).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn rejects_bad_epsilon_and_non_finite_values() {
        let mut store = ParamStore::new();
        store.add("theta", Tensor::full(&[1], 0.3));
        assert!(grad_check(|_, _| Ok(0.0), &mut store, 1e-2).is_err());
        assert!(matches!(
            grad_check(|_, _| Ok(f64::NAN), &mut store, 1e-5),
            Err(CsdnError::NonFinite(_))
        ));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut store = ParamStore::new();
        let t = store.add("theta", Tensor::full(&[1], 3.0));
        let report = grad_check(
            |s: &ParamStore, g: Option<&mut GradStore>| {
                let v = s.value(t).data()[0];
                if let Some(g) = g {
                    g.accumulate(t, &[v]); // should be 2v
                }
                Ok(v * v)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error > 0.4);
        assert_eq!(report.worst_param, "theta");
    }
}
