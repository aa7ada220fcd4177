//! Independent oracles shared by the integration suites.
//!
//! Nothing here calls back into the code path it checks: gradients come from
//! central differences, metrics from brute-force enumeration.
#![allow(dead_code)]

pub mod fixtures;
pub mod oracles;
pub mod rigs;

use t5lab::tensor::{Tape, Tensor, Var};

pub const FD_EPS: f64 = 1e-5;

/// Relative error with an absolute floor: components where both values are
/// below `1e-8` in magnitude count as agreeing.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Max relative error between tape gradients and central differences of
/// `f` with respect to every element of every input.
pub fn gradient_check(inputs: &[Tensor], f: &dyn Fn(&Tape, &[Var]) -> Var) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).expect("backward");

    let eval = |perturbed: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars);
        tape.value(out).item()
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.numel() {
            let x = input.data()[j];
            work[i].data_mut()[j] = x + FD_EPS;
            let up = eval(&work);
            work[i].data_mut()[j] = x - FD_EPS;
            let down = eval(&work);
            work[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}
