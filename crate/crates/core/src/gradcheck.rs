//! Finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Max relative error between the tape gradient of `f` at `x` and central
/// finite differences with step `h`:
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)` over coordinates.
///
/// `f` must build a scalar from the given input id and be deterministic
/// (dropout and masking frozen).
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    let mut xg = x.clone();
    xg.requires_grad = true;
    let mut tape = Tape::new();
    let id = tape.leaf(&xg);
    let loss = f(&mut tape, id)?;
    if tape.data(loss).len() != 1 {
        return Err(Error::Usage("grad_check target must be scalar".into()));
    }
    tape.backward(loss)?;
    let analytic = tape
        .grad(id)
        .ok_or_else(|| Error::Usage("input did not receive a gradient".into()))?
        .to_vec();

    let eval = |xv: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.constant(xv);
        let l = f(&mut t, id)?;
        t.scalar_value(l)
    };

    let mut work = x.clone();
    work.requires_grad = false;
    let mut max_err = 0.0f64;
    for i in 0..work.data.len() {
        let orig = work.data[i];
        work.data[i] = orig + h;
        let fp = eval(&work)?;
        work.data[i] = orig - h;
        let fm = eval(&work)?;
        work.data[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + 1e-12);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
