//! Finite-difference verification of analytic gradients.
//!
//! Runs in 64-bit only: central differences with h = 1e-5 are meaningless
//! in single precision. The output is scalarized by a fixed random
//! weighting so every output element influences the loss.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::Result;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-3;

/// Uniform [-1, 1] tensor from a fixed seed.
pub fn seeded_uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("generated data matches shape")
}

fn loss_weights(numel: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Check `build`'s gradients w.r.t. every element of every input.
///
/// `build` must be a pure function of the leaf vars it receives.
pub fn grad_check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_scaled(name, inputs, tolerance, 1.0, build)
}

/// Harness sensitivity hook: scales the analytic gradients before the
/// comparison, so a factor != 1 must produce a failing report.
pub fn grad_check_scaled<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    grad_scale: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<(f64, Option<Vec<Vec<f64>>>, Vec<f64>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| g.leaf(t.clone(), true))
            .collect::<Result<_>>()?;
        let out = build(&mut g, &vars)?;
        let w = loss_weights(g.value(out).numel(), 7);
        let wt = g.constant(Tensor::from_vec(g.value(out).shape().to_vec().as_slice(), w.clone())?)?;
        let prod = g.mul(out, wt)?;
        let loss = g.sum_all(prod)?;
        let loss_val = g.value(loss).item();
        let grads = g.backward(loss)?;
        let per_input: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| grads.get(v).map(|s| s.to_vec()).unwrap_or_default())
            .collect();
        Ok((loss_val, Some(per_input), w))
    };

    let (_, analytic, _) = eval(inputs)?;
    let analytic = analytic.unwrap();

    let mut max_rel = 0.0f64;
    for (ti, base) in inputs.iter().enumerate() {
        let grad = &analytic[ti];
        for ei in 0..base.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[ti].values_mut()[ei] += FD_STEP;
            minus[ti].values_mut()[ei] -= FD_STEP;
            let fp = {
                let mut g = Graph::new();
                let vars: Vec<Var> = plus
                    .iter()
                    .map(|t| g.leaf(t.clone(), false))
                    .collect::<Result<_>>()?;
                let out = build(&mut g, &vars)?;
                weighted_sum(&g, out)
            };
            let fm = {
                let mut g = Graph::new();
                let vars: Vec<Var> = minus
                    .iter()
                    .map(|t| g.leaf(t.clone(), false))
                    .collect::<Result<_>>()?;
                let out = build(&mut g, &vars)?;
                weighted_sum(&g, out)
            };
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = if grad.is_empty() { 0.0 } else { grad[ei] * grad_scale };
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        pass: max_rel < tolerance,
    })
}

fn weighted_sum(g: &Graph<f64>, out: Var) -> f64 {
    let w = loss_weights(g.value(out).numel(), 7);
    g.value(out)
        .values()
        .iter()
        .zip(&w)
        .map(|(v, wi)| v * wi)
        .sum()
}
