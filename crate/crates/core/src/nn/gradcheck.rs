//! Central finite-difference checking of analytic gradients.

use super::params::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Largest relative error over the checked coordinates.
    pub max_rel_error: f64,
    /// Coordinates actually compared.
    pub checked: usize,
    /// Coordinates discarded because the perturbation crossed a discrete
    /// branch (ReLU sign, clamp, argmax pick, matching change).
    pub skipped: usize,
}

/// Compares analytic gradients of a scalar-valued graph against central
/// finite differences on a random subsample of at most `max_coords`
/// coordinates of the named parameters.
///
/// `build` must deterministically rebuild the same graph from the store and
/// return its scalar root. A coordinate whose `±h` evaluations land on
/// different smooth pieces (detected via the tape's branch hash) says nothing
/// about the derivative at the center point, so it is skipped and replaced.
///
/// The relative error uses an absolute floor: `|a - n| / max(|a|, |n|, 1e-2)`,
/// which absorbs finite-difference round-off on coordinates with near-zero
/// gradients without masking genuinely wrong ones.
pub fn grad_check<F>(
    store: &mut ParameterStore,
    names: &[String],
    build: F,
    rng: &mut ChaCha8Rng,
    max_coords: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterStore) -> Var,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let root = build(&mut tape, store);
    tape.backward(root);
    let grads = tape.param_grads();

    // Coordinate universe over the requested names.
    let mut sizes = Vec::with_capacity(names.len());
    let mut total = 0usize;
    for name in names {
        let e = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
        sizes.push(e.values.len());
        total += e.values.len();
    }
    if total == 0 {
        return Err(Error::EmptyInput("no coordinates to check".into()));
    }

    let coord = |flat: usize| -> (usize, usize) {
        let mut rest = flat;
        for (k, &s) in sizes.iter().enumerate() {
            if rest < s {
                return (k, rest);
            }
            rest -= s;
        }
        unreachable!()
    };

    let mut order: Vec<usize> = (0..total).collect();
    // partial Fisher-Yates: enough prefix for the budget plus retries
    let want = max_coords.min(total);
    let budget = (want * 4).min(total);
    for i in 0..budget {
        let j = rng.gen_range(i..total);
        order.swap(i, j);
    }

    let eval = |store: &ParameterStore| -> (f64, u64) {
        let mut t = Tape::new();
        let r = build(&mut t, store);
        (t.scalar_value(r), t.branch_hash())
    };

    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut max_rel = 0.0_f64;
    let mut cursor = 0usize;
    while checked < want && cursor < budget {
        let flat = order[cursor];
        cursor += 1;
        let (k, idx) = coord(flat);
        let name = &names[k];
        let orig = store.get(name).unwrap().values[idx];

        store.get_mut(name).unwrap().values[idx] = orig + FD_STEP;
        let (f_plus, sig_plus) = eval(store);
        store.get_mut(name).unwrap().values[idx] = orig - FD_STEP;
        let (f_minus, sig_minus) = eval(store);
        store.get_mut(name).unwrap().values[idx] = orig;

        if sig_plus != sig_minus {
            skipped += 1;
            continue;
        }
        let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
        let analytic = grads.get(name).map(|g| g[idx]).unwrap_or(0.0);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2);
        if rel > max_rel {
            max_rel = rel;
        }
        checked += 1;
    }
    if checked == 0 {
        return Err(Error::UndefinedMetric(
            "every sampled coordinate crossed a branch; nothing was checked".into(),
        ));
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked,
        skipped,
    })
}
