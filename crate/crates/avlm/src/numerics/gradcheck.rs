//! Central-difference gradient checking at f64.
//!
//! The numeric side only evaluates forward passes, so it stays independent
//! of the backward implementation it is checking.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::Tensor;

/// Max relative error between analytic and central-difference gradients of
/// a scalar-valued function at `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::Shape {
            op: "grad_check",
            detail: format!("f must return a scalar, got shape {:?}", tape.value(y).shape()),
        });
    }
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |point: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(point, false);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        let numeric = (eval(xp)? - eval(xm)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
