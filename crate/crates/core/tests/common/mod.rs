#![allow(dead_code)]

use c3r::encoder::{Aggregation, CceEncoder, EncoderConfig, ModelConfig};
use c3r::mcd::trainer::TrainConfig;
use c3r::params::ParamStore;
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

/// D=32 encoder on 32px images with 8px patches.
pub fn small_encoder(aggregation: Aggregation) -> EncoderConfig {
    EncoderConfig {
        embed_dim: 32,
        branch_depth: 1,
        shared_depth: 2,
        heads: 4,
        aggregation,
        patch_size: 8,
        image_size: 32,
        ..EncoderConfig::toy()
    }
}

pub fn build_cce(cfg: &EncoderConfig, dtype: DType, seed: u64) -> (ParamStore, CceEncoder) {
    let mut store = ParamStore::new(dtype);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = CceEncoder::new(&mut store.builder(&mut rng), cfg).unwrap();
    (store, enc)
}

pub fn small_model(aggregation: Aggregation) -> ModelConfig {
    ModelConfig::Cce(small_encoder(aggregation))
}

pub fn small_train(seed: u64, steps: usize) -> TrainConfig {
    let mut t = TrainConfig::toy(32);
    t.seed = seed;
    t.steps = steps;
    t.head.hidden_dim = 64;
    t.head.bottleneck_dim = 32;
    t.head.prototypes = 64;
    t
}
