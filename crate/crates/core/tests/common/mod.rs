#![allow(dead_code)]

use mpft::adapter::TrainConfig;
use mpft::fed::{Environment, FLConfig, Method, ModelConfig};
use mpft::rng::{self, Rng};
use mpft::world::{gauss, generate_federation, Federation, Sample, WorldConfig};

pub fn small_world(seed: u64, clients: usize) -> WorldConfig {
    WorldConfig {
        clients,
        classes: 4,
        d_in: 10,
        d_emb: 8,
        samples_per_class_per_client: 20,
        seed,
        ..WorldConfig::default()
    }
}

pub fn federation(world: &WorldConfig) -> Federation {
    generate_federation(world).expect("valid world")
}

pub fn environment(world: &WorldConfig) -> Environment {
    Environment::new(&federation(world), &ModelConfig::default(), world.seed).expect("environment")
}

pub fn quick_fl(method: Method, seed: u64) -> FLConfig {
    FLConfig {
        method,
        max_global_rounds: 25,
        warmup_rounds: 3,
        patience: 3,
        seed,
        ..FLConfig::default()
    }
}

pub fn quick_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        max_epochs: 60,
        adapt_epochs: 5,
        ..TrainConfig::default()
    }
}

pub fn rng(seed: u64) -> Rng {
    rng::stream(seed, &[0xfeed])
}

pub fn random_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * gauss(rng)).collect()
}

pub fn random_samples(rng: &mut Rng, n: usize, dim: usize, classes: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| Sample {
            x: random_vec(rng, dim, 1.0),
            y: i % classes,
            origin_domain: 0,
        })
        .collect()
}
