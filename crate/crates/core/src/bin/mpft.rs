use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use mpft::experiment::{self, ExperimentSpec};
use mpft::fed::Method;
use mpft::Error;

#[derive(Parser)]
#[command(name = "mpft", version, about = "Prototype-based federated fine-tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML experiment spec; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the world, run and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `outputs.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and export its embeddings.
    Generate(Common),
    /// Run one method.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<String>,
    },
    /// Run every `[[sweep]]` entry of the spec.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<String>,
    },
    /// Run the prototype inversion attack.
    Attack(Common),
    /// Tabulate report files.
    Compare {
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> mpft::Result<(ExperimentSpec, PathBuf)> {
    let mut spec = match &common.config {
        Some(path) => ExperimentSpec::load(path).map_err(|e| match e {
            Error::Io(io) => Error::Config {
                field: "--config".into(),
                message: format!("{}: {io}", path.display()),
            },
            other => other,
        })?,
        None => ExperimentSpec::default(),
    };
    if let Some(seed) = common.seed {
        spec = spec.with_seed(seed);
    }
    let out = common.out.clone().unwrap_or_else(|| spec.outputs.dir.clone());
    Ok((spec, out))
}

fn parse_method(method: &Option<String>) -> mpft::Result<Option<Method>> {
    method.as_deref().map(str::parse).transpose()
}

fn execute(cli: Cli) -> mpft::Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let (spec, out) = load(&common)?;
            for path in experiment::generate(&spec, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Run { common, method } => {
            let method = parse_method(&method)?;
            let (spec, out) = load(&common)?;
            let (report, files) = experiment::run(&spec, method, &out)?;
            info!("{} finished in {:.3}s", report.method, report.wall_time.total_secs);
            for path in files {
                println!("{}", path.display());
            }
        }
        Command::Sweep { common, method } => {
            let method = parse_method(&method)?;
            let (spec, out) = load(&common)?;
            for (label, report) in experiment::sweep(&spec, method, &out)? {
                println!(
                    "{label}: {} ood {} ind {:.4}",
                    report.method,
                    report.ood_acc.map_or("-".into(), |v| format!("{v:.4}")),
                    report.ind_acc
                );
            }
        }
        Command::Attack(common) => {
            let (mut spec, out) = load(&common)?;
            spec.attack.enabled = true;
            let federation = mpft::world::generate_federation(&spec.world)?;
            let outcome = experiment::run_attack(&federation, &spec.attack)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join(experiment::ATTACK_TRAJECTORY_FILE), outcome.report.trajectory_csv())?;
            std::fs::write(out.join(experiment::ATTACK_REPORT_FILE), serde_json::to_string_pretty(&outcome)?)?;
            let last = outcome.report.prototype_mse_history.last().copied().unwrap_or(f64::NAN);
            println!(
                "prototype mse {last:.3e} after {} iterations; nearest-sample input mse {:.4}",
                outcome.report.iterations_run, outcome.nearest_sample_mse
            );
        }
        Command::Compare { reports, out } => {
            if reports.is_empty() {
                return Err(Error::Config {
                    field: "reports".into(),
                    message: "no report files given".into(),
                });
            }
            let table = experiment::compare(&reports)?;
            print!("{table}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join(experiment::COMPARISON_FILE), &table)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
