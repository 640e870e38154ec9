#![allow(dead_code)]

use gridify_core::nn::{ParamStore, Tape, Var};
use gridify_core::{Result, Rng, Tensor};
use rand::{Rng as _, SeedableRng};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).unwrap()
}

pub fn uniform_vec(rng: &mut Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Relative error with a floor on the denominator so that gradients that
/// are zero analytically do not amplify finite-difference noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Reduces an output to a scalar through fixed random weights, so every
/// output element contributes with a distinct coefficient.
fn weighted_loss(tape: &mut Tape, out: Var) -> Result<Var> {
    let n = tape.value(out).len();
    let mut r = rng(0x5eed ^ n as u64);
    let w = uniform_vec(&mut r, n, 1.0);
    let y = tape.mul_const(out, w)?;
    tape.reduce_mean(y)
}

/// Largest relative error between backprop and central differences over
/// every element of every input.
pub fn check_inputs(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        let loss = weighted_loss(&mut tape, out).unwrap();
        tape.value(loss).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = weighted_loss(&mut tape, out).unwrap();
    tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

/// Same check over every trainable parameter of `store`.
pub fn check_params(store: &ParamStore, build: impl Fn(&mut Tape, &ParamStore) -> Result<Var>) -> f64 {
    let eval = |s: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let out = build(&mut tape, s).unwrap();
        let loss = weighted_loss(&mut tape, out).unwrap();
        tape.value(loss).data()[0]
    };
    let mut tape = Tape::new();
    let out = build(&mut tape, store).unwrap();
    let loss = weighted_loss(&mut tape, out).unwrap();
    tape.backward(loss).unwrap();
    let grads = tape.param_grads(store);
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let base = store.value(id).clone();
        for i in 0..base.len() {
            let mut t = base.clone();
            t.data_mut()[i] += FD_STEP;
            probe.set(id, t.clone()).unwrap();
            let up = eval(&probe);
            t.data_mut()[i] -= 2.0 * FD_STEP;
            probe.set(id, t).unwrap();
            let down = eval(&probe);
            probe.set(id, base.clone()).unwrap();
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[id.index()][i], numeric));
        }
    }
    worst
}

/// `n` points uniform in `[-1, 1]^dim`.
pub fn random_coords(rng: &mut Rng, n: usize, dim: usize) -> Vec<f64> {
    uniform_vec(rng, n * dim, 1.0)
}
