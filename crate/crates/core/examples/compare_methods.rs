//! Runs every method on one synthetic federation and prints a comparison.
//!
//! ```text
//! cargo run --release --example compare_methods -- [seed]
//! ```

use mpft::adapter::TrainConfig;
use mpft::fed::{run, Environment, FLConfig, Method, ModelConfig};
use mpft::prototype::SamplingMethod;
use mpft::world::{generate_federation, WorldConfig};

fn main() -> mpft::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let world = WorldConfig { seed, ..WorldConfig::default() };
    let federation = generate_federation(&world)?;
    let env = Environment::new(&federation, &ModelConfig::default(), seed)?;
    let train = TrainConfig::default();
    println!("{:<10} {:>8} {:>8} {:>7} {:>12} {:>9}", "method", "ood", "ind", "rounds", "bytes", "secs");
    for method in Method::ALL {
        let fl = FLConfig {
            method,
            sampling: SamplingMethod::Random,
            rate: Some(0.3),
            seed,
            ..FLConfig::default()
        };
        let r = run(&env, &fl, &train)?;
        println!(
            "{:<10} {:>8.4} {:>8.4} {:>7} {:>12} {:>9.3}",
            method.name(),
            r.ood_acc.unwrap_or(f64::NAN),
            r.ind_acc,
            r.rounds_used,
            r.comm_bytes,
            r.wall_time.total_secs
        );
    }
    Ok(())
}
