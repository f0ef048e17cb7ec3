//! Compares prototype counts and cross-client divergence for each sampling
//! method.
//!
//! ```text
//! cargo run --release --example prototype_sampling -- [rate]
//! ```

use mpft::fed::{client_prototypes, Environment, FLConfig, ModelConfig};
use mpft::prototype::{divergence_stats, PrototypeDataset, SamplingMethod};
use mpft::world::{generate_federation, WorldConfig};

fn main() -> mpft::Result<()> {
    let rate: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let federation = generate_federation(&WorldConfig::default())?;
    let env = Environment::new(&federation, &ModelConfig::default(), 0)?;
    for sampling in [SamplingMethod::Mean, SamplingMethod::Cluster, SamplingMethod::Random] {
        let fl = FLConfig { sampling, rate: Some(rate), ..FLConfig::default() };
        let sets = client_prototypes(&env, &fl)?;
        let dataset = PrototypeDataset::from_clients(&sets, env.d_emb, env.classes);
        let div = divergence_stats(&dataset);
        let avg = div.client_avg.iter().sum::<f64>() / div.client_avg.len() as f64;
        println!("{sampling:?}: {} prototypes, mean divergence {avg:.4}, max {:.4}", dataset.len(), div.max);
    }
    Ok(())
}
