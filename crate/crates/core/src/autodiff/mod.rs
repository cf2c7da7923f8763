//! Dense reverse-mode differentiation.
//!
//! The tape is rebuilt for every training step; nothing is cached between
//! steps. Only the operators the sampling and reconstruction networks need are
//! provided, and there is no broadcasting: binary ops require equal shapes.

mod tape;
mod tensor;

pub use tape::{Gradients, Parameter, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Step used by [`grad_check`] for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Compare reverse-mode gradients of `builder` at `point` against central
/// finite differences. Returns `max |analytic - numeric| / max(1e-8, |numeric|)`.
pub fn grad_check<F>(builder: F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let loss = builder(&mut tape, x)?;
    let analytic = tape.backward(loss)?.get_or_zero(x);

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(p);
        let l = builder(&mut t, x)?;
        Ok(t.value(l).item())
    };

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = point.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * FD_STEP);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
