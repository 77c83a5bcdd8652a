#![allow(dead_code)]

use ldp_core::autodiff::{Tape, Var};
use ldp_core::rng::{stream_rng, Stream};
use ldp_core::Tensor;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::normal(shape, 1.0, &mut stream_rng(seed, Stream::Weights))
}

/// Largest absolute difference divided by the larger of the two gradients'
/// peak magnitudes.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(1e-12, f64::max);
    diff / scale
}

fn weighted(y: &Tensor, r: &Tensor) -> f64 {
    y.data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

/// Compares tape gradients of `sum(build(inputs) * R)` for a fixed random
/// `R` against central differences of step `h` on every input element.
/// The weighted sum for the numeric side is accumulated in f64. Returns the
/// relative error per input.
pub fn fd_check<F>(inputs: &[Tensor], h: f32, build: F) -> Vec<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = build(&mut tape, &vars);
    let r = randn(tape.value(y).shape(), 99);
    let rv = tape.leaf(r.clone());
    let prod = tape.mul(y, rv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .unwrap()
                .data()
                .iter()
                .map(|&g| g as f64)
                .collect()
        })
        .collect();

    let eval = |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = build(&mut tape, &vars);
        weighted(tape.value(y), &r)
    };
    let mut errs = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(input.numel());
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let x = input.data()[j];
            plus[i].data_mut()[j] = x + h;
            minus[i].data_mut()[j] = x - h;
            let span = (x + h) as f64 - (x - h) as f64;
            numeric.push((eval(&plus) - eval(&minus)) / span);
        }
        errs.push(rel_err(&analytic[i], &numeric));
    }
    errs
}

/// Shifts every element at least `margin` away from zero, keeping its sign.
pub fn away_from_zero(mut t: Tensor, margin: f32) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin } + *v;
        }
    }
    t
}
