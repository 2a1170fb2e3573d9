//! Central finite-difference validation of backward rules.
//!
//! The closure under test must be pure: it gets fresh leaves on a fresh tape
//! every evaluation and must not carry state between calls (batch-norm state
//! belongs inside the closure).

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor inside the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Builds the tape, runs the closure to a scalar loss, and returns the loss
/// value plus analytic gradients for every input in order.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars);
    let loss_val = tape.value(loss).item();
    tape.backward(loss).expect("loss must be scalar");
    let grads = vars.iter().map(|&v| tape.grad(v).expect("leaf gradient").clone()).collect();
    (loss_val, grads)
}

/// Central finite differences of the scalar loss with respect to every input
/// element.
pub fn finite_diff_grads<F>(f: &F, inputs: &[Tensor<f64>], eps: f64) -> Vec<Tensor<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let eval = |probe: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).item()
    };

    let mut grads = Vec::with_capacity(inputs.len());
    for p in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[p].shape());
        for i in 0..inputs[p].numel() {
            let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
            probe[p].data_mut()[i] += eps;
            let plus = eval(&probe);
            probe[p].data_mut()[i] -= 2.0 * eps;
            let minus = eval(&probe);
            g.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)` over all tensors.
pub fn max_rel_err(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert!(a.same_shape(n), "gradient shape mismatch");
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let denom = av.abs().max(nv.abs()).max(REL_ERR_FLOOR);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

/// Maximum relative disagreement between analytic and central-difference
/// gradients of `f` at `inputs`.
pub fn grad_check<F>(f: &F, inputs: &[Tensor<f64>], eps: f64) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let (_, analytic) = analytic_grads(f, inputs);
    let numeric = finite_diff_grads(f, inputs, eps);
    max_rel_err(&analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(tape: &mut Tape<f64>, vars: &[Var]) -> Var {
        let sq = tape.mul(vars[0], vars[0]);
        tape.sum_all(sq)
    }

    #[test]
    fn linear_map_matches_to_high_precision() {
        // loss = sum(3x) is exactly linear; central differences are exact
        let f = |tape: &mut Tape<f64>, vars: &[Var]| {
            let y = tape.scale(vars[0], 3.0);
            tape.sum_all(y)
        };
        let x = Tensor::new(&[5], vec![0.3, -1.2, 2.0, 0.0, 4.5]);
        assert!(grad_check(&f, &[x], 1e-4) < 1e-10);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let x = Tensor::new(&[4], vec![1.0, -0.5, 2.0, 0.25]);
        let (_, mut analytic) = analytic_grads(&quadratic, &[x.clone()]);
        let numeric = finite_diff_grads(&quadratic, &[x], 1e-4);
        assert!(max_rel_err(&analytic, &numeric) < 1e-8);
        // sabotage one backward value; the harness must notice
        analytic[0].data_mut()[2] *= 1.5;
        assert!(max_rel_err(&analytic, &numeric) > 1e-2);
    }
}
