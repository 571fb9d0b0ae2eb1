//! Test-side oracles shared by the integration targets.

#![allow(dead_code)]

use protoadapt::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    protoadapt::seeded_rng(seed, 0xC0FFEE)
}

/// Uniform entries in `[-scale, scale]`.
pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Builds a scalar from `inputs` on a fresh tape.
pub type Graph<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

fn evaluate(inputs: &[Tensor], f: &Graph) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).item()
}

/// Largest error between the tape gradient and a central finite difference
/// over every input. Two measures are taken and the larger is returned:
/// elementwise `|a − n| / max(1, |n|)`, and per input
/// `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)`, which stays strict when gradients are
/// small.
pub fn grad_check(inputs: &[Tensor], f: &Graph) -> f64 {
    const H: f64 = 1e-6;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], |g| g.data().to_vec()))
        .collect();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for i in 0..input.len() {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[i] += H;
            let up = evaluate(&shifted, f);
            shifted[k].data_mut()[i] -= 2.0 * H;
            let down = evaluate(&shifted, f);
            numeric[i] = (up - down) / (2.0 * H);
        }
        let diff = norm(analytic[k].iter().zip(&numeric).map(|(a, n)| a - n));
        let scale = norm(analytic[k].iter().copied()) + norm(numeric.iter().copied());
        worst = worst.max(diff / scale.max(1e-12));
        for (a, n) in analytic[k].iter().zip(&numeric) {
            worst = worst.max((a - n).abs() / n.abs().max(1.0));
        }
    }
    worst
}

fn norm(values: impl Iterator<Item = f64>) -> f64 {
    values.map(|v| v * v).sum::<f64>().sqrt()
}

/// `Σ weights ⊙ y`: turns any output into a scalar with a non-trivial
/// gradient.
pub fn weighted_sum(tape: &mut Tape, y: Var, weights: &Tensor) -> Var {
    let w = tape.constant(Tensor::new(tape.value(y).shape().to_vec(), weights.data().to_vec()).unwrap());
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

/// Plain AdaDelta written out from the update rule, one scalar parameter.
pub fn adadelta_reference(x0: f64, steps: usize, rho: f64, eps: f64, grad: impl Fn(f64) -> f64) -> Vec<f64> {
    let (mut x, mut eg2, mut edx2) = (x0, 0.0f64, 0.0f64);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let g = grad(x);
        eg2 = rho * eg2 + (1.0 - rho) * g * g;
        let rms_dx = (edx2 + eps).sqrt();
        let rms_g = (eg2 + eps).sqrt();
        let dx = -(rms_dx / rms_g) * g;
        edx2 = rho * edx2 + (1.0 - rho) * dx * dx;
        x += dx;
        out.push(x);
    }
    out
}
