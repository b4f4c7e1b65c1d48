use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare reverse-mode gradients of a scalar function against central
/// differences.
///
/// `f` builds the loss on a fresh tape from leaves holding `params`. The
/// return value is the largest `|analytic − numeric| / max(1, |numeric|)`
/// over every parameter entry.
pub fn grad_check<F>(params: &[Tensor], eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .map(|&v| tape.grad(v).expect("leaf gradient"))
        .collect();
    drop(tape);

    let mut eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        let v = t.value(l).item();
        if !v.is_finite() {
            return Err(Error::Domain("non-finite loss during gradient check".into()));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for p in 0..work.len() {
        for i in 0..work[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[p].data()[i];
            if !a.is_finite() {
                return Err(Error::Domain("non-finite analytic gradient".into()));
            }
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
