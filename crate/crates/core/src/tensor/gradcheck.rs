//! Central finite-difference verification of tape gradients.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of every backward rule it checks.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, floor)`
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of the scalar `f(inputs)` with central
/// differences of step `h` on every coordinate of every input.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .get(*v)
                    .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
            })
            .collect()
    };

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<Var<'_>> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut probe = inputs.to_vec();
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_rel_err = max_rel_err.max(rel_err(analytic[i][j], numeric, REL_FLOOR));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        checked,
    })
}
