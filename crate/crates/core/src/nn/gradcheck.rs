//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor; below it errors are measured in absolute terms.
const REL_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: (String, usize),
    /// Analytic and numeric derivative at the worst entry.
    pub worst_values: (f64, f64),
}

/// Central difference formula used for the numeric derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`.
    ThreePoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`; admits a larger
    /// step, which keeps roundoff small on deep composites.
    FivePoint,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let out = f(&mut tape)?;
    Ok(tape.value(out).item())
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences for every trainable parameter. Parameters with more than
/// `max_entries` scalars are checked on a random subset.
pub fn check_gradients<F, R>(
    store: &ParamStore,
    f: F,
    step: f64,
    max_entries: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
    R: Rng,
{
    check_gradients_with(store, f, Stencil::ThreePoint, step, max_entries, rng)
}

pub fn check_gradients_with<F, R>(
    store: &ParamStore,
    f: F,
    stencil: Stencil,
    step: f64,
    max_entries: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
    R: Rng,
{
    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        let grads = tape.backward(out);
        store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| {
                let g = grads
                    .param(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.tensor.len()]);
                (id, g)
            })
            .collect()
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: (String::new(), 0),
        worst_values: (0.0, 0.0),
    };
    for (id, grad) in analytic {
        let n = grad.len();
        let entries: Vec<usize> = if n <= max_entries {
            (0..n).collect()
        } else {
            let mut e = sample(rng, n, max_entries).into_vec();
            e.sort_unstable();
            e
        };
        for i in entries {
            let orig = work.get(id).tensor.data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(id).tensor.data_mut()[i] = orig + offset;
                evaluate(&work, &f)
            };
            let numeric = match stencil {
                Stencil::ThreePoint => (at(step)? - at(-step)?) / (2.0 * step),
                Stencil::FivePoint => {
                    let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
                    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step)
                }
            };
            work.get_mut(id).tensor.data_mut()[i] = orig;
            let err = relative_error(grad[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (work.get(id).name.clone(), i);
                report.worst_values = (grad[i], numeric);
            }
        }
    }
    Ok(report)
}
