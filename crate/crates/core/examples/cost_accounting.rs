//! Prints logged communication for every method next to its closed-form
//! cost.
//!
//! ```text
//! cargo run --release --example cost_accounting
//! ```

use mpft::adapter::TrainConfig;
use mpft::fed::{run, Environment, FLConfig, Method, ModelConfig};
use mpft::world::{generate_federation, WorldConfig};

fn main() -> mpft::Result<()> {
    let federation = generate_federation(&WorldConfig::default())?;
    let env = Environment::new(&federation, &ModelConfig::default(), 0)?;
    let train = TrainConfig::default();
    for method in Method::ALL {
        let r = run(&env, &FLConfig { method, ..FLConfig::default() }, &train)?;
        let c = &r.costs;
        println!(
            "{:<10} up {:>9} down {:>9} total {:>9} closed form {:>9} ({} events)",
            method.name(),
            c.uplink_bytes,
            c.downlink_bytes,
            c.total_bytes,
            c.formula.evaluate(),
            c.events
        );
    }
    Ok(())
}
