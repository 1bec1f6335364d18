//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Fault, Var};
use crate::error::{Error, Result};
use crate::params::{Graph, ParamStore};

/// Largest parameter tensor the checker accepts.
pub const MAX_CHECKED_ELEMENTS: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter holding the worst element, with its flat index.
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates whose `±eps` probes crossed a ReLU or max-pool switch.
    pub skipped_kinks: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients with central differences for every parameter
/// the loss touches. Probes that straddle a non-differentiable switch are
/// counted in `skipped_kinks` rather than scored.
pub fn finite_difference_check<F>(store: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    finite_difference_check_with_fault(store, eps, None, f)
}

/// As [`finite_difference_check`], computing the analytic side on a tape
/// carrying `fault`.
pub fn finite_difference_check_with_fault<F>(
    store: &ParamStore,
    eps: f64,
    fault: Option<Fault>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps must be positive, got {eps}"
        )));
    }
    if let Some(p) = store.iter().find(|p| p.value.len() > MAX_CHECKED_ELEMENTS) {
        return Err(Error::InvalidArgument(format!(
            "parameter `{}` has {} elements (limit {MAX_CHECKED_ELEMENTS})",
            p.name,
            p.value.len()
        )));
    }

    let analytic = {
        let mut g = Graph::with_fault(store, fault);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };

    let eval = |s: &ParamStore| -> Result<(f64, u64)> {
        let mut g = Graph::new(s);
        let loss = f(&mut g)?;
        Ok((g.value(loss).item(), g.tape.branch_digest()))
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        skipped_kinks: 0,
    };
    for id in store.ids() {
        let Some(grad) = analytic.get(id) else {
            continue;
        };
        let name = &store.get(id).name;
        for (i, &a) in grad.iter().enumerate() {
            let original = store.get(id).value.data()[i];
            work.get_mut(id).value.data_mut()[i] = original + eps;
            let (plus, up) = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = original - eps;
            let (minus, down) = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = original;
            if up != down {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFiniteGradient { name: name.clone() });
            }
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Adds seeded uniform noise in `±scale` to every parameter value.
///
/// Zero-initialized biases leave ReLU inputs exactly at the kink wherever a
/// patch is all zero, which central differences cannot resolve.
pub fn jitter(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-scale..=scale);
        }
    }
}
