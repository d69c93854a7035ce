//! Central finite-difference gradient checking.
//!
//! Used by the test suites to validate every analytic backward rule:
//! a scalar-valued closure is re-evaluated with each input element
//! nudged by ±h and the slope is compared against the tape gradient.

use super::{Tensor, Var};

/// Default step for central differences on f64 inputs.
pub const FD_STEP: f64 = 1e-5;

/// Scaled error between an analytic and a finite-difference gradient:
/// |a - f| / max(|a|, |f|, 1). The floor keeps finite-difference noise
/// on near-zero entries from registering as a large relative error.
pub fn scaled_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central finite-difference gradient of `f` with respect to `inputs`.
///
/// `f` receives the (possibly perturbed) inputs and must return the
/// scalar objective value. Returns one gradient tensor per input; each
/// is evaluated with two calls to `f` per element (step `FD_STEP`).
pub fn numeric_grads<F>(inputs: &[Tensor], mut f: F) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = vec![0.0; inputs[t].numel()];
        for i in 0..inputs[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + FD_STEP;
            let plus = f(&work);
            work[t].data_mut()[i] = orig - FD_STEP;
            let minus = f(&work);
            work[t].data_mut()[i] = orig;
            g[i] = (plus - minus) / (2.0 * FD_STEP);
        }
        grads.push(Tensor::new(inputs[t].shape().to_vec(), g).expect("shape preserved"));
    }
    grads
}

/// Max scaled error between tape gradients and finite differences for
/// a scalar objective built by `build` over `inputs`.
///
/// `build` receives a tape and the leaves (recorded with
/// `requires_grad = true`) and returns the scalar root variable.
pub fn check_grads<F>(inputs: &[Tensor], mut build: F) -> f64
where
    F: FnMut(&super::Tape, &[Var]) -> Var,
{
    let tape = super::Tape::new();
    let leaves: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let root = build(&tape, &leaves);
    tape.backward(&root).expect("backward");
    let analytic: Vec<Tensor> = leaves
        .iter()
        .map(|v| {
            tape.grad(v)
                .unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()))
        })
        .collect();

    let numeric = numeric_grads(inputs, |xs| {
        let tape = super::Tape::new();
        let leaves: Vec<Var> = xs
            .iter()
            .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
            .collect();
        build(&tape, &leaves).item()
    });

    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (av, nv) in a.data().iter().zip(n.data()) {
            worst = worst.max(scaled_err(*av, *nv));
        }
    }
    worst
}
