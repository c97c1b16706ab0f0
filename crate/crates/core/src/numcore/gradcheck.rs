//! Central finite-difference verification of tape gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per parameter tensor (all if `None`).
    pub max_coords_per_param: Option<usize>,
    /// Coordinates whose analytic gradient is smaller than this are not
    /// sampled; central differences there are dominated by roundoff.
    pub min_magnitude: f64,
    pub seed: u64,
    /// Multiplies the analytic gradient before comparison. Only useful for
    /// exercising the harness itself.
    pub corrupt_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_param: None,
            min_magnitude: 0.0,
            seed: 0,
            corrupt_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation changed a discrete decision
    /// (threshold or matching) and were therefore excluded.
    pub skipped: usize,
    /// `(parameter index, flat coordinate)` of the worst error.
    pub worst: Option<(usize, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar produced by `f` against
/// central differences `(f(x+eps) - f(x-eps)) / (2 eps)`.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_guarded(|tape, vars| Ok((f(tape, vars)?, 0)), params, opts)
}

/// Like [`finite_diff_check`], but `f` also returns a signature of the
/// discrete decisions taken during evaluation. Perturbations that change the
/// signature cross a non-differentiable point and are skipped.
pub fn finite_diff_check_guarded<F>(mut f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<(Var, u64)>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let (loss, base_sig) = f(&mut tape, &vars)?;
    check_finite(tape.value(loss).item())?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut eval = |values: &[Tensor]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.constant(p.clone())).collect();
        let (loss, sig) = f(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        check_finite(v)?;
        Ok((v, sig))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for idx in select_coords(grad, opts, &mut rng) {
            let a = grad.data()[idx] * opts.corrupt_scale;
            let orig = work[pi].data()[idx];
            work[pi].data_mut()[idx] = orig + opts.eps;
            let (fp, sp) = eval(&work)?;
            work[pi].data_mut()[idx] = orig - opts.eps;
            let (fm, sm) = eval(&work)?;
            work[pi].data_mut()[idx] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, idx));
            }
        }
    }
    Ok(report)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("objective evaluated to {v}")))
    }
}

fn select_coords(grad: &Tensor, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let data = grad.data();
    let mut candidates: Vec<usize> = (0..data.len()).filter(|&i| data[i].abs() >= opts.min_magnitude).collect();
    let Some(budget) = opts.max_coords_per_param else {
        return candidates;
    };
    if candidates.len() <= budget {
        return candidates;
    }
    // Always include the largest component, then sample the rest.
    let top = *candidates
        .iter()
        .max_by(|&&a, &&b| data[a].abs().total_cmp(&data[b].abs()))
        .expect("non-empty");
    candidates.retain(|&i| i != top);
    candidates.shuffle(rng);
    candidates.truncate(budget.saturating_sub(1));
    candidates.push(top);
    candidates.sort_unstable();
    candidates
}
