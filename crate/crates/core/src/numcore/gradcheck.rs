//! Central finite-difference gradient checking.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub n_params: usize,
}

/// Relative error with an absolute floor, so entries whose true gradient
/// is zero do not blow up the ratio.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const DEFAULT_FLOOR: f64 = 1e-4;

/// Compare reverse-mode gradients of `f` against central differences with
/// step `eps` for every parameter in `store`.
pub fn check<F>(store: &ParamStore, eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    let mut tape = Tape::new();
    let root = f(&mut tape, &work)?;
    tape.backward(root, &mut work)?;
    let analytic = work.grads().to_vec();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let r = f(&mut t, s)?;
        t.check_finite()?;
        Ok(t.value(r).get(0, 0))
    };

    let mut worst = (0.0f64, 0usize);
    for i in 0..work.len() {
        let orig = work.values()[i];
        work.values_mut()[i] = orig + eps;
        let up = eval(&work)?;
        work.values_mut()[i] = orig - eps;
        let down = eval(&work)?;
        work.values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let e = rel_err(analytic[i], numeric, DEFAULT_FLOOR);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    Ok(GradCheck {
        max_rel_err: worst.0,
        worst_index: worst.1,
        n_params: work.len(),
    })
}
