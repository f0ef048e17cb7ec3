//! Trains a bias-free linear adapter on client prototypes with step size
//! 1/L and checks the per-epoch descent guarantee.
//!
//! ```text
//! cargo run --release --example convergence_check
//! ```

use mpft::adapter::{lipschitz_bound, train_global_adapter, Adapter, AdapterKind, ClassificationHead, HeadMode, TrainConfig};
use mpft::fed::{client_prototypes, Environment, FLConfig, ModelConfig};
use mpft::prototype::PrototypeDataset;
use mpft::rng::{self, purpose};
use mpft::tensor::OptimizerKind;
use mpft::world::{generate_federation, WorldConfig};

fn main() -> mpft::Result<()> {
    let federation = generate_federation(&WorldConfig::default())?;
    let env = Environment::new(&federation, &ModelConfig::default(), 0)?;
    let sets = client_prototypes(&env, &FLConfig::default())?;
    let data = PrototypeDataset::from_clients(&sets, env.d_emb, env.classes);
    let head = ClassificationHead::new(env.head.anchors().clone(), HeadMode::Linear, 1.0)?;
    let kind = AdapterKind::Linear { bias: false };
    let l_hat = lipschitz_bound(&data, &head, kind)?;
    let eta = 1.0 / l_hat;
    let config = TrainConfig {
        learning_rate: eta,
        batch_size: data.len(),
        max_epochs: 300,
        variance_threshold: 0.0,
        optimizer: OptimizerKind::Sgd,
        grad_clip: 0.0,
        ..TrainConfig::default()
    };
    let init = Adapter::init(kind, env.d_emb, &mut rng::stream(0, &[purpose::ADAPTER_INIT]))?;
    let out = train_global_adapter(&data, &head, init, &config)?;
    let c = eta - l_hat * eta * eta / 2.0;
    let (l, g) = (&out.loss_history, &out.grad_norm_sq_history);
    let worst = (0..l.len() - 1).map(|t| l[t] - l[t + 1] - c * g[t]).fold(f64::INFINITY, f64::min);
    println!("L = {l_hat:.4}, step {eta:.4}, {} epochs", out.epochs_used);
    println!("loss {:.4} -> {:.4}", l[0], l[l.len() - 1]);
    println!("smallest slack in the descent inequality: {worst:.3e}");
    Ok(())
}
