//! Central finite-difference verification of reverse-mode gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the relative error.
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator, so gradients that are
    /// zero up to rounding compare absolutely.
    pub scale_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, tolerance: 1e-4, scale_floor: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU kink or max-pool tie.
    pub excluded: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn excluded(&self) -> usize {
        self.params.iter().map(|p| p.excluded.len()).sum()
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `backward` against central differences for every coordinate of
/// `params`. `f` must build a scalar loss from parameter leaves and be
/// deterministic (dropout masks fixed or disabled).
pub fn grad_check<F>(params: &[Tensor], mut f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut eval = |ps: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        if tape.value(loss).len() != 1 {
            bail!(Contract, "grad_check function must return a scalar");
        }
        Ok((tape, vars, loss))
    };

    let (tape, vars, loss) = eval(params)?;
    let base_print = tape.branch_fingerprint();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().zip(params).map(|(v, p)| grads.get_or_zeros(*v, p)).collect();
    drop(tape);

    let mut work = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut check = ParamCheck { index: pi, max_rel_error: 0.0, checked: 0, excluded: Vec::new() };
        for ci in 0..grad.len() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + opts.step;
            let (tp, _, lp) = eval(&work)?;
            work[pi].data_mut()[ci] = orig - opts.step;
            let (tm, _, lm) = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            if tp.branch_fingerprint() != base_print || tm.branch_fingerprint() != base_print {
                check.excluded.push(ci);
                continue;
            }
            let numeric = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * opts.step);
            let err = relative_error(grad.data()[ci], numeric, opts.scale_floor);
            check.max_rel_error = check.max_rel_error.max(err);
            check.checked += 1;
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report, tolerance: opts.tolerance })
}
