//! Central finite-difference oracle for analytic gradients.
//!
//! The oracle only evaluates the forward closure; it never looks at the
//! backward rules it is checking.

use crate::error::Result;

use super::array::Tensor;
use super::tape::{Tape, Var};

/// Magnitude below which gradients are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-4;
/// Default central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Default pass threshold on the relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Which elements of each input to perturb.
#[derive(Clone, Debug)]
pub enum Probe {
    All,
    /// At most this many evenly spaced elements per input.
    Strided(usize),
}

fn probe_indices(n: usize, probe: &Probe) -> Vec<usize> {
    match *probe {
        Probe::All => (0..n).collect(),
        Probe::Strided(k) if n <= k => (0..n).collect(),
        Probe::Strided(k) => {
            let mut v: Vec<usize> = (0..k).map(|i| i * n / k + (i * 7919) % (n / k).max(1)).collect();
            v.dedup();
            v
        }
    }
}

/// Checks the gradient of a scalar function of several tensors.
///
/// `f` receives a fresh tape and one leaf per input and must return a scalar.
pub fn check<F>(f: F, inputs: &[Tensor<f64>], step: f64, probe: &Probe) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ii, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[ii].numel()]);
        for e in probe_indices(inputs[ii].numel(), probe) {
            let orig = work[ii].data()[e];
            work[ii].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[ii].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[ii].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_err(analytic[e], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((ii, e, analytic[e], numeric));
                }
            }
        }
    }
    Ok(report)
}
