//! Central-difference gradient oracle.

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{CstsError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: 0 }
    }

    fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        let err = rel_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst_index = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    if !analytic.is_finite() || !numeric.is_finite() {
        return f64::INFINITY;
    }
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn forward_value(r: Result<f64>) -> Result<f64> {
    match r {
        Ok(v) => Ok(v),
        Err(CstsError::NonFinite { .. }) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

/// Compares the tape gradient of `f` at `x` against central differences
/// with step `h`, over every component of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'static>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        forward_value((|| {
            let mut g = Graph::new();
            let v = g.input(t.clone());
            let out = f(&mut g, v)?;
            Ok(g.value(out).sum())
        })())
    };

    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let analytic = match f(&mut g, xv) {
        Ok(out) => g.backward(out)?.wrt(xv),
        Err(CstsError::NonFinite { .. }) => {
            let mut r = GradCheckReport::empty();
            r.record(0, f64::NAN, f64::NAN);
            return Ok(r);
        }
        Err(e) => return Err(e),
    };

    let mut report = GradCheckReport::empty();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        report.record(i, analytic.data()[i], (up - down) / (2.0 * h));
    }
    Ok(report)
}

/// Below this, a parameter gradient is indistinguishable from zero: central
/// differences of an O(1) loss at `h = 1e-5` carry roundoff near 1e-11.
pub const PARAM_NOISE_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub param: ParamId,
    pub name: String,
    pub report: GradCheckReport,
}

/// Checks the gradient of `loss` with respect to selected entries of
/// stored parameters. `selection` lists, per parameter, the flat indices
/// to probe.
pub fn finite_diff_params<F>(
    store: &ParamStore,
    loss: F,
    selection: &[(ParamId, Vec<usize>)],
    h: f64,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::with_params(store);
        let out = loss(&mut g)?;
        let grads = g.backward(out)?;
        grads.params(&g)
    };
    let grad_of = |id: ParamId| analytic.iter().find(|(p, _)| *p == id).map(|(_, t)| t);

    let mut work = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        forward_value((|| {
            let mut g = Graph::with_params(s);
            let out = loss(&mut g)?;
            Ok(g.value(out).sum())
        })())
    };

    let mut out = Vec::with_capacity(selection.len());
    for (id, indices) in selection {
        let mut report = GradCheckReport::empty();
        for &i in indices {
            let a = grad_of(*id).map_or(0.0, |t| t.data()[i]);
            let orig = work.get(*id).data()[i];
            work.get_mut(*id).data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(*id).data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(*id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            if a.abs() <= PARAM_NOISE_FLOOR && numeric.abs() <= PARAM_NOISE_FLOOR {
                // Structurally zero (e.g. key biases under softmax): both sides are noise.
                report.record(i, 0.0, 0.0);
            } else {
                report.record(i, a, numeric);
            }
        }
        out.push(ParamCheck { param: *id, name: store.name(*id).to_owned(), report });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let r = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn nan_forward_is_a_failure() {
        let x = Tensor::new(&[2], vec![-1.0, 2.0]).unwrap();
        let r = finite_diff_check(
            |g, x| {
                let l = g.log(x)?;
                g.sum(l)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn rel_error_zero_for_agreeing_zeros() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
    }
}
