#![allow(dead_code)]

use autosign::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_RTOL: f64 = 1e-6;
pub const FD_ATOL: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn within(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= FD_ATOL + FD_RTOL * analytic.abs().max(numeric.abs())
}

/// Worst violation of the finite-difference tolerance over every input
/// element; `Ok(())` when all agree.
///
/// `build` must return a scalar. Inputs are tracked leaves.
pub fn check_gradients(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> Result<(), String> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = build(&mut tape, &vars);
    assert_eq!(tape.data(loss).len(), 1, "loss must be scalar");
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let eval = |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let loss = build(&mut tape, &vars);
        tape.data(loss)[0]
    };
    let mut worst: Option<String> = None;
    let mut worst_err = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic[k][i];
            if !within(a, numeric) {
                let err = (a - numeric).abs();
                if err > worst_err {
                    worst_err = err;
                    worst = Some(format!("input {k} element {i}: analytic {a}, numeric {numeric}"));
                }
            }
        }
    }
    worst.map_or(Ok(()), Err)
}

/// `Σ x ⊙ w` for a fixed pseudo-random `w`, turning any output into a scalar
/// whose gradient exercises every element.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let n = tape.data(x).len();
    let w: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let y = tape.mul_const(x, w).unwrap();
    tape.sum(y)
}
