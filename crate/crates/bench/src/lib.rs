//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chem_emu_core::{ChemNNEModel, ModelConfig, Tensor};

/// A freshly initialized model with inputs for `batch` samples.
pub fn model_and_inputs(cfg: &ModelConfig, batch: usize) -> (ChemNNEModel, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = ChemNNEModel::build(cfg, &mut rng).expect("valid model config");
    let x0 = random(&[batch, cfg.n_in], &mut rng);
    let env = Tensor::from_fn(&[batch, cfg.n_env], |_| rng.random_range(0.0..1.0));
    (model, x0, env)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}
