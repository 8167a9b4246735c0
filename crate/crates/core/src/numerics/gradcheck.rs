use alloc::vec::Vec;

use super::{finite_diff_grad, max_rel_err, Tape, Tensor, Var};
use crate::error::Result;

/// Coordinates whose true and estimated gradients both fall below this are
/// compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Compares tape gradients of `build` against central differences.
///
/// `build` records a scalar loss over the given inputs (all registered as
/// parameters). Returns the largest relative error over every input
/// coordinate.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    h: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let l = build(&mut t, &vs).expect("re-evaluation of a graph that already built once");
        t.value(l).item()
    };

    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
        let numeric = finite_diff_grad(
            |xi| {
                probe[i] = xi.clone();
                eval(&probe)
            },
            x,
            h,
        );
        worst = worst.max(max_rel_err(&analytic, &numeric, REL_ERR_FLOOR));
    }
    Ok(worst)
}
