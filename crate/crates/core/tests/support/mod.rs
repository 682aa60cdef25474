//! Shared test oracles.
#![allow(dead_code)]

pub mod cases;

use osa_detect::tensor::{Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Outcome of a finite-difference comparison.
#[derive(Debug)]
pub struct GradCheck {
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Compares reverse-mode gradients against central finite differences.
///
/// The graph output `y = build(inputs)` is reduced with a fixed random probe
/// `r` to the scalar `L = Σ r·y`, so the check covers the full
/// vector-Jacobian product. The error is `‖g_analytic − g_numeric‖ /
/// max(‖g_analytic‖, ‖g_numeric‖)` over all inputs jointly.
pub fn grad_check<B>(inputs: &[Tensor<f64>], probe_seed: u64, eps: f64, build: B) -> GradCheck
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let run = |vals: &[Tensor<f64>]| -> (Tape<f64>, Vec<Var>, Var) {
        let mut tape = Tape::<f64>::new(7);
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = run(inputs);
    let mut prng = rng(probe_seed);
    let probe = random_tensor(&mut prng, tape.shape(out));
    let scalar = |tape: &Tape<f64>, out: Var| -> f64 {
        tape.value(out)
            .data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let grads = tape.backward_with(out, probe.clone()).expect("backward");
    let mut diff2 = 0.0;
    let mut an2 = 0.0;
    let mut num2 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let (tp, _, op) = run(&plus);
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            let (tm, _, om) = run(&minus);
            let numeric = (scalar(&tp, op) - scalar(&tm, om)) / (2.0 * eps);
            diff2 += (analytic[j] - numeric).powi(2);
            an2 += analytic[j].powi(2);
            num2 += numeric.powi(2);
        }
    }
    let denom = an2.sqrt().max(num2.sqrt()).max(1e-12);
    GradCheck {
        rel_error: diff2.sqrt() / denom,
        analytic_norm: an2.sqrt(),
    }
}

pub fn cast<F: Real>(t: &Tensor<f64>) -> Tensor<F> {
    t.cast()
}
