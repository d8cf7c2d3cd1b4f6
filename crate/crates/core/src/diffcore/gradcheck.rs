use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{LblmError, Result};

/// Worst agreement found for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub failures: usize,
    /// Entries above the tolerance but inside the difference-quotient
    /// round-off.
    pub roundoff_exempt: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub rel_tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.failures == 0)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// Denominator floor for the relative error, so entries whose true gradient
/// is numerically zero are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares reverse-mode gradients of `loss_fn` against central finite
/// differences `(f(w + h) - f(w - h)) / 2h` for every parameter entry, with
/// `h = eps * max(1, |w|)`. Entries whose disagreement is below the
/// round-off of the difference quotient are not counted as failures.
///
/// `loss_fn` must build the loss on the supplied fresh graph from the
/// supplied parameters and be deterministic.
pub fn grad_check<F>(
    store: &ParamStore,
    eps: f64,
    rel_tol: f64,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let f0 = g.value(loss).item();
    if !f0.is_finite() {
        return Err(LblmError::DegenerateFunction(format!("loss evaluated to {f0}")));
    }
    let grads = g.backward(loss);
    let mut analytic = store.clone();
    analytic.zero_grad();
    g.accumulate_param_grads(&grads, &mut analytic);

    let mut work = store.clone();
    let mut eval = |work: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, work)?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(LblmError::DegenerateFunction(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        rel_tol,
        params: Vec::new(),
    };
    for id in store.ids().collect::<Vec<ParamId>>() {
        let name = store.get(id).name.clone();
        let mut check = ParamCheck {
            name,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            failures: 0,
            roundoff_exempt: 0,
        };
        for j in 0..store.get(id).numel() {
            let w = store.get(id).values[j];
            let h = eps * w.abs().max(1.0);
            work.get_mut(id).values[j] = w + h;
            let fp = eval(&work)?;
            work.get_mut(id).values[j] = w - h;
            let fm = eval(&work)?;
            work.get_mut(id).values[j] = w;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.get(id).grad[j];
            let err = relative_error(a, numeric);
            // cancellation error of the difference quotient itself
            let roundoff = 4.0 * f64::EPSILON * fp.abs().max(fm.abs()).max(1.0) / (2.0 * h);
            if err > rel_tol {
                if (a - numeric).abs() > roundoff {
                    check.failures += 1;
                } else {
                    check.roundoff_exempt += 1;
                }
            }
            if err >= check.max_rel_err {
                check.max_rel_err = err;
                check.worst_index = j;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
