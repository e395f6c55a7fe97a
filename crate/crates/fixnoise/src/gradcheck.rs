//! Central finite-difference checking of recorded gradients.
//!
//! The checker only ever evaluates forward passes, so it stays independent
//! of the backward implementation it judges. Step size follows
//! h = 1e-4 * max(1, |x|) per coordinate. This module is part of the
//! library because the `gradcheck` CLI verb runs the same suite.

use crate::error::Result;
use crate::tensor::{Tape, TensorId};

/// |a - b| relative to the larger magnitude, guarded below.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Check d loss / d x of a tape-built scalar function against central
/// finite differences. `build` must construct the graph from the given
/// coordinates and return (loss, wrt-leaf). Returns the max relative
/// error over coordinates, with denominators guarded by `guard`.
pub fn fd_check_scalar_fn<F>(x0: &[f64], guard: f64, build: F) -> Result<f64>
where
    F: Fn(&[f64], &mut Tape) -> Result<(TensorId, TensorId)>,
{
    let eval = |x: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = build(x, &mut tape)?;
        Ok(tape.value(loss))
    };

    let mut tape = Tape::new();
    let (loss, wrt) = build(x0, &mut tape)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(wrt)
        .ok_or_else(|| err_contract!("fd check: wrt leaf received no gradient"))?
        .to_vec();

    let mut x = x0.to_vec();
    let mut max_err = 0.0f64;
    for i in 0..x.len() {
        let h = 1e-4 * x[i].abs().max(1.0);
        let orig = x[i];
        x[i] = orig + h;
        let lp = eval(&x)?;
        x[i] = orig - h;
        let lm = eval(&x)?;
        x[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(guard);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

/// One row of the gradcheck table.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_basics() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!(rel_err(1.0, 1.1) > 0.09);
    }

    #[test]
    fn fd_agrees_on_linear_function() {
        let x0 = [1.5];
        let max = fd_check_scalar_fn(&x0, 1e-6, |xv, tape| {
            let x = tape.leaf(xv.to_vec(), vec![1], true);
            let y = tape.scale(x, 2.0);
            Ok((tape.sum(y), x))
        })
        .unwrap();
        assert!(max < 1e-9);
    }
}
