//! Trains the global adapter once per distillation weight and adapts it to
//! each client from a few labelled samples.
//!
//! ```text
//! cargo run --release --example local_adaptation -- [few_shot]
//! ```

use mpft::adapter::TrainConfig;
use mpft::fed::{run, Environment, FLConfig, Method, ModelConfig};
use mpft::world::{generate_federation, WorldConfig};

fn main() -> mpft::Result<()> {
    let few_shot: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let federation = generate_federation(&WorldConfig::default())?;
    let env = Environment::new(&federation, &ModelConfig::default(), 0)?;
    let fl = FLConfig { method: Method::Mpft, adapt: true, ..FLConfig::default() };
    println!("{:>6} {:>10} {:>10} {:>10}", "beta", "ind gain", "forgetting", "max drift");
    for beta in [0.0, 0.5, 2.0, 10.0] {
        let train = TrainConfig { kd_weight: beta, few_shot, ..TrainConfig::default() };
        let a = run(&env, &fl, &train)?.adaptation.expect("adaptation requested");
        println!(
            "{beta:>6} {:>10.4} {:>10.4} {:>10.4}",
            a.ind_gain,
            a.forgetting.unwrap_or(f64::NAN),
            a.drift.iter().copied().fold(0.0, f64::max)
        );
    }
    Ok(())
}
