//! Central finite-difference verification of tape gradients.
//!
//! Deliberately uses nothing from the backward pass: each check reruns the
//! forward closure with one parameter entry nudged by ±h, so it stays an
//! independent oracle for the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{self, Var};
use crate::{ParamStore, Tape};

/// Forward pass under test: records a scalar loss for the given parameters.
pub trait LossFn: for<'t> Fn(&'t Tape, &ParamStore) -> numerics::Result<Var<'t, f64>> {}
impl<F> LossFn for F where F: for<'t> Fn(&'t Tape, &ParamStore) -> numerics::Result<Var<'t, f64>> {}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (param name, flat index, analytic, finite difference) of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// Relative error with the small-gradient floor used everywhere in the
/// checks: |a − d| / (|a| + 1e-8).
pub fn rel_err(analytic: f64, diff: f64) -> f64 {
    (analytic - diff).abs() / (analytic.abs() + 1e-8)
}

/// Checks analytic gradients of `loss_fn` against central differences on
/// `samples` randomly chosen parameter entries.
pub fn check_params(
    store: &ParamStore,
    samples: usize,
    h: f64,
    seed: u64,
    loss_fn: impl LossFn,
) -> numerics::Result<GradCheckReport> {
    // Analytic gradients from a single recorded pass.
    let mut work = store.clone();
    work.zero_grads();
    {
        let tape = Tape::new();
        let loss = loss_fn(&tape, &work)?;
        tape.backward(loss)?;
        tape.accumulate_param_grads(&mut work);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = work.total_values();
    let samples = samples.min(total);
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };

    for _ in 0..samples {
        let slot = rng.gen_range(0..work.len());
        let name = work.name_by_index(slot).to_string();
        let len = work.by_index(slot).values.len();
        let idx = rng.gen_range(0..len);
        let analytic = work.by_index(slot).grad[idx];

        let mut probe = work.clone();
        let original = probe.by_index(slot).values[idx];
        let eval = |probe: &mut ParamStore, v: f64| -> numerics::Result<f64> {
            probe.get_mut(&name).unwrap().values[idx] = v;
            let tape = Tape::new();
            Ok(loss_fn(&tape, probe)?.scalar_value())
        };
        let up = eval(&mut probe, original + h)?;
        let down = eval(&mut probe, original - h)?;
        let diff = (up - down) / (2.0 * h);

        let err = rel_err(analytic, diff);
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((name, idx, analytic, diff));
        }
    }
    Ok(report)
}

/// Asserts that every parameter received a nonzero gradient under `loss_fn`
/// (no dead parameters); returns the names that did not.
pub fn dead_params(store: &ParamStore, loss_fn: impl LossFn) -> numerics::Result<Vec<String>> {
    let mut work = store.clone();
    work.zero_grads();
    let tape = Tape::new();
    let loss = loss_fn(&tape, &work)?;
    tape.backward(loss)?;
    tape.accumulate_param_grads(&mut work);
    Ok(work
        .iter()
        .filter(|(_, p)| p.grad.iter().all(|g| *g == 0.0))
        .map(|(name, _)| name.to_string())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_checks_out() {
        let mut store = ParamStore::new();
        store.insert("w", &[3], vec![0.3, -0.7, 1.1]);
        let report = check_params(&store, 3, 1e-5, 1, |tape, p| {
            let w = tape.param(p, "w")?;
            w.hadamard(w)?.sum()
        })
        .unwrap();
        assert!(report.passes(1e-7), "max rel err {}", report.max_rel_err);
        let _ = &mut store;
    }

    #[test]
    fn dead_params_flags_unused_parameter() {
        let mut store = ParamStore::new();
        store.insert("used", &[2], vec![1.0, 2.0]);
        store.insert("unused", &[2], vec![1.0, 2.0]);
        let dead = dead_params(&store, |tape, p| {
            let w = tape.param(p, "used")?;
            let _ = tape.param(p, "unused")?;
            w.sum()
        })
        .unwrap();
        assert_eq!(dead, vec!["unused".to_string()]);
    }
}
