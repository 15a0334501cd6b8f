//! Central finite-difference verification of reverse-mode gradients.

use crate::engine::graph::{Graph, NodeId};
use crate::engine::params::{ParamId, ParamStore};
use crate::error::Result;

/// Gradient magnitudes below this are treated as zero by
/// [`ParamCheck::scaled_error`].
pub const GRAD_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Largest analytic gradient magnitude seen for this parameter.
    pub max_grad: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl ParamCheck {
    /// Largest absolute error relative to the largest gradient entry of the
    /// same tensor, floored at [`GRAD_FLOOR`]; unlike the entrywise ratio it
    /// stays meaningful when some entries are near zero.
    pub fn scaled_error(&self) -> f64 {
        self.max_abs_error / self.max_grad.max(GRAD_FLOOR)
    }
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    pub fn max_scaled_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.scaled_error()))
    }

    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Relative error with the `max(|a|, |b|, 1e-12)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares the gradient of `loss_fn` against central differences with the
/// given `step`, for every trainable parameter accepted by `filter`.
///
/// `loss_fn` must build a scalar loss from the parameter values in the store
/// it is handed; it is called once for the analytic pass and twice per
/// checked entry.
pub fn finite_diff_check<F>(
    store: &ParamStore,
    step: f64,
    filter: impl Fn(ParamId, &str) -> bool,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<NodeId>,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let mut g = Graph::new();
    let loss = loss_fn(store, &mut g)?;
    let grads = g.gradients(loss)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(s, &mut g)?;
        g.check_finite()?;
        Ok(g.value(l).item())
    };

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (id, p) in store.iter() {
        if !p.trainable || !filter(id, &p.name) {
            continue;
        }
        let zero = crate::tensor::Mat::zeros(p.value.rows(), p.value.cols());
        let analytic = grads.get(id).unwrap_or(&zero);
        let mut check = ParamCheck {
            name: p.name.clone(),
            entries: p.value.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            max_grad: analytic.max_abs(),
        };
        for i in 0..p.value.len() {
            let orig = p.value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            check.max_abs_error = check.max_abs_error.max((a - fd).abs());
            check.max_rel_error = check.max_rel_error.max(relative_error(a, fd));
        }
        report.params.push(check);
    }
    Ok(report)
}
