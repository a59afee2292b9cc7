#![allow(dead_code)]

use deco_core::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
    .unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Scalar `Σ f(inputs) ⊙ r` with fixed random weights `r`, so every output
/// entry contributes to the checked gradient.
fn weighted(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let p = g.mul_const(out, weights)?;
    g.sum(p)
}

/// Largest norm-wise relative error between reverse-mode gradients and
/// central finite differences over all `inputs`.
pub fn gradcheck<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let shape = {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vs).unwrap();
        g.shape(out).to_vec()
    };
    let weights = randn(&mut rng(seed ^ 0x5eed), &shape);
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vs).unwrap();
        let l = weighted(&mut g, out, &weights).unwrap();
        g.value(l).item().unwrap()
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vs).unwrap();
    let l = weighted(&mut g, out, &weights).unwrap();
    g.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vs.iter().enumerate() {
        let analytic = g.grad(*v).unwrap();
        let mut xs = inputs.to_vec();
        let mut diff = 0.0;
        let mut num_sq = 0.0;
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            xs[k].data_mut()[i] = x0 + FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] = x0 - FD_STEP;
            let down = eval(&xs);
            xs[k].data_mut()[i] = x0;
            let num = (up - down) / (2.0 * FD_STEP);
            diff += (num - analytic.data()[i]).powi(2);
            num_sq += num * num;
        }
        let denom = num_sq.sqrt().max(analytic.norm_sq().sqrt()).max(1e-12);
        worst = worst.max(diff.sqrt() / denom);
    }
    worst
}
