//! Helpers shared by unit tests.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::rng::{substream, Rng as ChaCha, Stream};
use crate::tensor::Tensor;

pub fn rng(index: u32) -> ChaCha {
    substream(0xfeed, Stream::Dump, index)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between reverse-mode gradients and central
/// differences (step `h`) over every element of every input.
pub fn gradient_error(
    inputs: &[Tensor],
    h: f64,
    floor: f64,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).item().unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&g, *v);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[j], numeric, floor));
        }
    }
    worst
}
