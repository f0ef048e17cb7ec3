//! Shows how Gaussian noise on uploaded prototypes affects MPFT accuracy.
//!
//! ```text
//! cargo run --release --example prototype_noise
//! ```

use mpft::adapter::TrainConfig;
use mpft::fed::{run, Environment, FLConfig, Method, ModelConfig};
use mpft::prototype::SamplingMethod;
use mpft::world::{generate_federation, WorldConfig};

fn main() -> mpft::Result<()> {
    let federation = generate_federation(&WorldConfig::default())?;
    let env = Environment::new(&federation, &ModelConfig::default(), 0)?;
    let train = TrainConfig::default();
    println!("{:>5} {:>5} {:>8} {:>8}", "q", "s", "ood", "ind");
    for (q, s) in [(0.0, 0.0), (0.2, 0.05), (0.5, 0.2), (1.0, 0.5)] {
        let fl = FLConfig {
            method: Method::Mpft,
            sampling: SamplingMethod::Random,
            rate: Some(0.3),
            dp_q: q,
            dp_s: s,
            ..FLConfig::default()
        };
        let r = run(&env, &fl, &train)?;
        println!("{q:>5} {s:>5} {:>8.4} {:>8.4}", r.ood_acc.unwrap_or(f64::NAN), r.ind_acc);
    }
    Ok(())
}
