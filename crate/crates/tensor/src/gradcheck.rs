//! Central finite differences against tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tape::{Precision, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub precision: Precision,
    /// Check at most this many entries per input tensor (sampled); `None` checks all.
    pub max_entries_per_input: Option<usize>,
    pub seed: u64,
    /// Leave out entries whose perturbed evaluations cross a kink of a
    /// non-smooth op (see [`Tape::branch_signature`]); they are counted in
    /// [`GradCheckReport::kinked`] instead.
    pub skip_kinks: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            precision: Precision::F64,
            max_entries_per_input: None,
            seed: 0,
            skip_kinks: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input index, flat entry)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    /// Largest relative error seen for each input.
    pub per_input: Vec<f64>,
    /// Entries skipped because a perturbation changed a discrete branch.
    pub kinked: usize,
}

/// Relative error with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients of the scalar `f(inputs)` with central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if opts.precision != Precision::F64 {
        return Err(TensorError::CheckFailed(
            "gradient checks require 64-bit precision".into(),
        ));
    }
    let eval = |vals: &[Tensor]| -> Result<(f64, u64)> {
        let mut tape = Tape::with_precision(Precision::F64);
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out).item(), tape.branch_signature()))
    };

    let mut tape = Tape::with_precision(Precision::F64);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base_branches = tape.branch_signature();
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get_or_zeros(*v, t.shape()))
        .collect();
    for g in &analytic {
        if g.data().iter().any(|x| !x.is_finite()) {
            return Err(TensorError::CheckFailed("non-finite tape gradient".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        per_input: vec![0.0; inputs.len()],
        kinked: 0,
    };
    for (i, input) in inputs.iter().enumerate() {
        let entries: Vec<usize> = match opts.max_entries_per_input {
            Some(k) if k < input.len() => {
                let mut e = sample(&mut rng, input.len(), k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..input.len()).collect(),
        };
        for e in entries {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + opts.eps;
            let (plus, bp) = eval(&work)?;
            work[i].data_mut()[e] = orig - opts.eps;
            let (minus, bm) = eval(&work)?;
            work[i].data_mut()[e] = orig;
            if opts.skip_kinks && (bp != base_branches || bm != base_branches) {
                report.kinked += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            if !numeric.is_finite() {
                return Err(TensorError::CheckFailed("non-finite numeric gradient".into()));
            }
            let err = relative_error(analytic[i].data()[e], numeric);
            report.checked += 1;
            report.per_input[i] = report.per_input[i].max(err);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((i, e));
                }
            }
        }
    }
    Ok(report)
}
