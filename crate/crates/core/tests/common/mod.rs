#![allow(dead_code)]

use lexrecycle::autodiff::{finite_difference_check_many, FdReport, Tensor};
use lexrecycle::model::{forward_on_tape, init_params, GptParams, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Central-difference check of the mean next-token loss of `tokens` with
/// respect to every parameter of the model.
pub fn model_gradient_check(params: &GptParams, tokens: &[u32], step: f64, tolerance: f64) -> FdReport {
    let points: Vec<Tensor> = params.named().iter().map(|p| p.tensor.clone()).collect();
    let cfg = params.config().clone();
    let inputs = &tokens[..tokens.len() - 1];
    let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
    let scale = 1.0 / targets.len() as f64;
    finite_difference_check_many(
        |tape, vars| {
            let logits = forward_on_tape(tape, &cfg, vars, inputs)?;
            tape.cross_entropy(logits, &targets, scale)
        },
        &points,
        step,
        tolerance,
    )
    .unwrap()
}

/// The two-layer model used for the gradient criterion.
pub fn gradient_check_model() -> GptParams {
    init_params(&ModelConfig::new(2, 16, 2, 16, 32, 11)).unwrap()
}
