//! Reconstructs an input from an uploaded prototype by gradient descent
//! through the frozen encoder.
//!
//! ```text
//! cargo run --release --example inversion_attack -- [iterations]
//! ```

use mpft::attack::{hijack_attack, AttackConfig};
use mpft::world::{generate_federation, Part, WorldConfig};

fn main() -> mpft::Result<()> {
    let iterations: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let federation = generate_federation(&WorldConfig::default())?;
    let client = &federation.datasets[0];
    let victim: Vec<_> = client.part(Part::Train).into_iter().filter(|s| s.y == 0).collect();
    let d_in = federation.encoder.d_in();
    let mut mean_input = vec![0.0; d_in];
    let mut prototype = vec![0.0; federation.encoder.d_emb()];
    for s in &victim {
        let e = federation.encoder.encode(&s.x)?;
        mean_input.iter_mut().zip(&s.x).for_each(|(a, v)| *a += v / victim.len() as f64);
        prototype.iter_mut().zip(&e).for_each(|(a, v)| *a += v / victim.len() as f64);
    }
    let config = AttackConfig { iterations, log_every: iterations / 10, ..AttackConfig::default() };
    let report = hijack_attack(&federation.encoder, &prototype, &config, Some(&mean_input))?;
    print!("{}", report.trajectory_csv());
    println!(
        "correlation with the mean input: {}",
        report.correlation.map_or("-".into(), |c| format!("{c:.4}"))
    );
    Ok(())
}
