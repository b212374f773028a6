use std::fmt;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale; central
/// differences of an O(1) function carry roughly 1e-11 of round-off noise.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub index: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_element: usize,
    pub non_finite: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_err))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "param {:>3}  max_rel_err {:.3e}  max_abs_err {:.3e}  non_finite {}  {}",
                e.index,
                e.max_rel_err,
                e.max_abs_err,
                e.non_finite,
                if e.passed { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Relative error used throughout gradient checking.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences, one report entry per parameter tensor.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::Invalid(format!(
            "finite-difference step {step} outside [1e-7, 1e-3]"
        )));
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.var(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var<'_>> = ps.iter().map(|p| t.constant(p.clone())).collect();
        Ok(f(&t, &vs)?.item())
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut entries = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut entry = GradCheckEntry {
            index: pi,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_element: 0,
            non_finite: 0,
            passed: true,
        };
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + step;
            let up = eval(&work);
            work[pi].data_mut()[ei] = orig - step;
            let down = eval(&work);
            work[pi].data_mut()[ei] = orig;
            let (up, down) = match (up, down) {
                (Ok(u), Ok(d)) if u.is_finite() && d.is_finite() => (u, d),
                _ => {
                    entry.non_finite += 1;
                    continue;
                }
            };
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[ei];
            if !a.is_finite() {
                entry.non_finite += 1;
                continue;
            }
            let rel = relative_error(a, numeric);
            if rel > entry.max_rel_err {
                entry.max_rel_err = rel;
                entry.worst_element = ei;
            }
            entry.max_abs_err = entry.max_abs_err.max((a - numeric).abs());
        }
        entry.passed = entry.non_finite == 0 && entry.max_rel_err < tol;
        entries.push(entry);
    }
    Ok(GradCheckReport { step, tol, entries })
}
