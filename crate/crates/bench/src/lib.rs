//! Fixtures shared by the benchmarks.

use occu_core::config::RunConfig;
use occu_core::model::feature_sizes;
use occu_core::vt::{build_vt, VtMatrices};
use occu_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

pub fn random_costs(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// View-transformation matrices of the default desk configuration.
pub fn default_vt() -> (RunConfig, VtMatrices) {
    let cfg = RunConfig::default();
    let rig = cfg.scene.rig();
    let vt = build_vt(&rig, &cfg.scene.grid, &feature_sizes(rig.image_size().unwrap(), cfg.model.scales)).unwrap();
    (cfg, vt)
}
