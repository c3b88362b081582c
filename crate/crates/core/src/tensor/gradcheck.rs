//! Central finite-difference verification of taped gradients.

use super::{ParameterStore, Tape, Var};
use crate::error::{Error, Result};

/// Largest relative error seen for one named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    /// Entries compared (all of them unless subsampled).
    pub checked: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    pub fn worst(&self) -> Option<&ParamError> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn eval<F>(f: &mut F, store: &ParameterStore) -> Result<f64>
where
    F: FnMut(&ParameterStore) -> Result<(Tape, Var)>,
{
    let (tape, loss) = f(store)?;
    tape.value(loss).item()
}

/// Compares the taped gradient of `f` against central differences with the
/// given `step`, for every parameter of `store`.
///
/// `f` records a scalar loss on a fresh tape. It must be deterministic: the
/// loss is evaluated twice up front and any difference is an error. When
/// `max_entries` is set, larger tensors are checked on evenly spaced entries.
/// Gradients already in `store` are cleared.
pub fn finite_difference_check<F>(
    store: &mut ParameterStore,
    step: f64,
    max_entries: Option<usize>,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterStore) -> Result<(Tape, Var)>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::config(format!("finite-difference step {step} outside (0, 1e-2]")));
    }
    let first = eval(&mut f, store)?;
    let second = eval(&mut f, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    store.zero_grad();
    let (tape, loss) = f(store)?;
    tape.backward(loss, &mut [&mut *store])?;
    drop(tape);

    let mut report = GradCheckReport::default();
    for p in 0..store.len() {
        let n = store.value_at(p).numel();
        let picks: Vec<usize> = match max_entries {
            Some(m) if m > 0 && n > m => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for &e in &picks {
            let orig = store.value_at(p).data()[e];
            store.value_at_mut(p).data_mut()[e] = orig + step;
            let up = eval(&mut f, store);
            store.value_at_mut(p).data_mut()[e] = orig - step;
            let down = eval(&mut f, store);
            store.value_at_mut(p).data_mut()[e] = orig;
            let numeric = (up? - down?) / (2.0 * step);
            let analytic = store.grad_at(p).data()[e];
            worst = worst.max(relative_error(analytic, numeric));
        }
        report.params.push(ParamError {
            name: store.names()[p].clone(),
            max_rel_error: worst,
            checked: picks.len(),
        });
    }
    store.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_form_is_near_exact() {
        // loss = x^T A x with A symmetric positive definite.
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::matrix(3, 1, vec![0.7, -1.3, 2.1]).unwrap()).unwrap();
        let a = Tensor::from_rows(&[
            vec![2.0, 0.5, 0.0],
            vec![0.5, 3.0, -0.4],
            vec![0.0, -0.4, 1.5],
        ])
        .unwrap();
        let report = finite_difference_check(&mut s, 1e-5, None, |st| {
            let mut tape = Tape::new();
            let x = tape.param(st, "x")?;
            let am = tape.constant(a.clone());
            let ax = tape.matmul(am, x)?;
            let xt = tape.transpose(x)?;
            let q = tape.matmul(xt, ax)?;
            let loss = tape.sum(q);
            Ok((tape, loss))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::scalar(1.0)).unwrap();
        let mut calls = 0.0;
        let err = finite_difference_check(&mut s, 1e-5, None, |st| {
            calls += 1.0;
            let mut tape = Tape::new();
            let x = tape.param(st, "x")?;
            let loss = tape.add_scalar(x, calls);
            Ok((tape, loss))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn step_out_of_range_is_rejected() {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::scalar(1.0)).unwrap();
        let r = finite_difference_check(&mut s, 0.1, None, |st| {
            let mut tape = Tape::new();
            let x = tape.param(st, "x")?;
            Ok((tape, x))
        });
        assert!(r.is_err());
    }
}
