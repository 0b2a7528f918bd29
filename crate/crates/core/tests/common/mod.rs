#![allow(dead_code)]

use eqar_core::numerics::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Central finite differences of a scalar function of one tensor.
pub fn finite_diff(x: &Tensor<f64>, h: f64, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut g = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), with a tiny floor for all-zero gradients.
pub fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.sum_sq().sqrt();
    let nb = b.sum_sq().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Check d/dx of `build(tape, x)` (a scalar) against finite differences.
pub fn check_grad(x: &Tensor<f64>, build: impl Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = build(&mut tape, xv);
    let ad = tape.backward(loss).unwrap().wrt(xv);
    let fd = finite_diff(x, 1e-5, |xp| {
        let mut t = Tape::new();
        let v = t.leaf(xp.clone());
        let l = build(&mut t, v);
        t.value(l).item()
    });
    rel_err(&ad, &fd)
}

/// Weighted sum with a fixed random tensor so every output entry matters.
pub fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let shape = tape.shape(y).to_vec();
    let w = randn(&shape, &mut rng(seed));
    let wv = tape.leaf(w);
    let p = tape.mul(y, wv).unwrap();
    tape.sum(p)
}
