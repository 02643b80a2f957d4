//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::Result;
use crate::optim::ParamSet;

/// Anything that owns trainable parameter sets.
pub trait HasParams {
    fn param_sets(&self) -> Vec<&ParamSet>;
    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet>;
}

impl HasParams for ParamSet {
    fn param_sets(&self) -> Vec<&ParamSet> {
        vec![self]
    }
    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        vec![self]
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Relative step: `h = step · max(|θ|, 1)`.
    pub step: f64,
    pub tolerance: f64,
    /// Gradients smaller than this are compared absolutely.
    pub floor: f64,
    /// Check at most this many entries per parameter (seeded subsample).
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-5, floor: 1e-4, max_entries_per_param: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub params: Vec<ParamReport>,
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<M>(model: &M, loss: &impl Fn(&M, &mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let l = loss(model, &mut tape)?;
    Ok(tape.scalar(l))
}

/// Runs the backward pass once and checks it against central differences.
pub fn gradcheck<M: HasParams>(
    model: &mut M,
    loss: impl Fn(&M, &mut Tape) -> Result<Var>,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut tape = Tape::new();
    let l = loss(model, &mut tape)?;
    let analytic = tape.backward(l)?;
    compare_gradients(model, loss, &analytic, opts)
}

/// Checks a supplied gradient map (possibly tampered with) against central differences.
pub fn compare_gradients<M: HasParams>(
    model: &mut M,
    loss: impl Fn(&M, &mut Tape) -> Result<Var>,
    analytic: &Gradients,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut targets = vec![];
    for (si, set) in model.param_sets().into_iter().enumerate() {
        if set.is_frozen() {
            continue;
        }
        for (name, value) in set.iter() {
            let n = value.len();
            let idx: Vec<usize> = match opts.max_entries_per_param {
                Some(k) if k < n => {
                    let mut v = sample(&mut rng, n, k).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..n).collect(),
            };
            targets.push((si, name.to_string(), set.full_name(name), idx));
        }
    }

    let mut reports = vec![];
    for (si, name, full, idx) in targets {
        let zeros;
        let grad = match analytic.get(&full) {
            Some(g) => g,
            None => {
                // An unused parameter should have zero numeric gradient too.
                let shape = model.param_sets()[si].get(&name).shape();
                zeros = crate::linalg::Mat::zeros(shape.0, shape.1);
                &zeros
            }
        };
        let mut worst = 0.0_f64;
        for &k in &idx {
            let orig = model.param_sets()[si].get(&name)[k];
            let h = opts.step * orig.abs().max(1.0);
            model.param_sets_mut().swap_remove(si).get_mut(&name)?[k] = orig + h;
            let plus = eval(model, &loss)?;
            model.param_sets_mut().swap_remove(si).get_mut(&name)?[k] = orig - h;
            let minus = eval(model, &loss)?;
            model.param_sets_mut().swap_remove(si).get_mut(&name)?[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(grad[k], numeric, opts.floor));
        }
        reports.push(ParamReport { name: full, checked: idx.len(), max_rel_err: worst });
    }
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let entries_checked = reports.iter().map(|r| r.checked).sum();
    Ok(GradcheckReport {
        params: reports,
        entries_checked,
        max_rel_err,
        tolerance: opts.tolerance,
        passed: max_rel_err <= opts.tolerance && max_rel_err.is_finite(),
    })
}
