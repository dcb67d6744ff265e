//! Central finite-difference checking against tape gradients.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-12);
    (a - b).abs() / denom
}

/// Central finite difference of `f` with respect to element `idx` of
/// `inputs[which]`.
pub fn central_diff(
    inputs: &[Tensor],
    which: usize,
    idx: usize,
    h: f64,
    f: &dyn Fn(&[Tensor]) -> f64,
) -> f64 {
    let mut plus = inputs.to_vec();
    plus[which].data_mut()[idx] += h;
    let mut minus = inputs.to_vec();
    minus[which].data_mut()[idx] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Builds the tape twice per probed element and asserts every analytic
/// partial matches the central difference within `tol` relative error.
/// `build` must register the inputs as leaves in order and return the
/// scalar root.
pub fn fd_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
    let eval = |ts: &[Tensor]| -> f64 {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vars);
        tape.value(root).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root);

    for (which, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[which].shape().to_vec()));
        for idx in 0..inputs[which].numel() {
            let fd = central_diff(inputs, which, idx, 1e-6, &eval);
            let an = analytic.data()[idx];
            let err = rel_err(an, fd);
            // absolute tolerance guards near-zero partials
            assert!(
                err < tol || (an - fd).abs() < 1e-8,
                "grad mismatch input {which} elem {idx}: analytic {an} vs fd {fd} (rel {err})"
            );
        }
    }
}

/// Relative-error comparison for a subset of elements; returns the worst
/// relative error observed instead of asserting.
pub fn fd_check_sampled(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
    probes: &[(usize, usize)],
    h: f64,
) -> f64 {
    let eval = |ts: &[Tensor]| -> f64 {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vars);
        tape.value(root).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root);

    let mut worst: f64 = 0.0;
    for &(which, idx) in probes {
        let fd = central_diff(inputs, which, idx, h, &eval);
        let an = grads
            .wrt(vars[which])
            .map(|t| t.data()[idx])
            .unwrap_or(0.0);
        if (an - fd).abs() > 1e-8 {
            worst = worst.max(rel_err(an, fd));
        }
    }
    worst
}
