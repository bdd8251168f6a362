//! Central finite-difference validation of tape gradients.

use super::tape::{GradTape, Var};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Compare the tape gradient of `f` at `x` against central finite
/// differences.  Returns the worst relative error
/// max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
///
/// `f` must evaluate to a 1x1 node; anything else is an error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut GradTape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Domain(format!("grad_check eps {eps}")));
    }
    let mut tape = GradTape::new();
    let xv = tape.leaf(x)?;
    let y = f(&mut tape, xv)?;
    if y.numel() != 1 {
        return Err(Error::Shape(format!(
            "grad_check needs a scalar objective, got {}x{}",
            y.rows(),
            y.cols()
        )));
    }
    let grads = tape.backward(y)?;
    let analytic = grads.get_or_zeros(xv);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(x.rows(), x.cols(), data)?;
        let mut tape = GradTape::new();
        let xv = tape.leaf(&t)?;
        let y = f(&mut tape, xv)?;
        Ok(tape.scalar_value(y))
    };

    let mut worst = 0.0_f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
