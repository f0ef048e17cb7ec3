//! Experiment specs read from TOML, and the file outputs of each command.
//!
//! ```toml
//! [world]
//! clients = 6
//! [fl]
//! method = "mpft"
//! sampling = "random"
//! rate = 0.3
//! [[sweep]]
//! "fl.rate" = 0.1
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::TrainConfig;
use crate::attack::{hijack_attack, AttackConfig, AttackInit, AttackReport, StepRule};
use crate::embeddings::{export_embeddings, import_embeddings};
use crate::error::{Error, Result};
use crate::fed::{self, events_to_jsonl, Environment, FLConfig, Method, ModelConfig, RunReport};
use crate::metrics::{error_bound_report, fairness_export};
use crate::tensor::squared_distance;
use crate::world::{generate_federation, Federation, Part, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub enabled: bool,
    /// Client whose uploaded class-mean prototype is attacked.
    pub client: usize,
    pub class: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub init: String,
    pub init_seed: u64,
    pub log_every: usize,
    pub step_rule: StepRule,
}

impl Default for AttackSection {
    fn default() -> Self {
        let base = AttackConfig::default();
        Self {
            enabled: false,
            client: 0,
            class: 0,
            iterations: base.iterations,
            learning_rate: base.learning_rate,
            init: "zeros".into(),
            init_seed: 0,
            log_every: base.log_every,
            step_rule: base.step_rule,
        }
    }
}

impl AttackSection {
    pub fn config(&self) -> Result<AttackConfig> {
        let init = match self.init.as_str() {
            "zeros" => AttackInit::Zeros,
            "gaussian" => AttackInit::Gaussian { seed: self.init_seed },
            other => {
                return Err(Error::config(
                    "attack.init",
                    format!("unknown init `{other}`; expected zeros or gaussian"),
                ))
            }
        };
        let cfg = AttackConfig {
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            init,
            log_every: self.log_every,
            step_rule: self.step_rule,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputsConfig {
    pub dir: PathBuf,
}

impl Default for OutputsConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    /// Optional `MPFTEMB1` file replacing the generated world's data.
    pub embeddings: Option<PathBuf>,
    pub world: WorldConfig,
    pub fl: FLConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub attack: AttackSection,
    pub outputs: OutputsConfig,
    pub sweep: Vec<toml::Table>,
}

fn path_error<E: std::fmt::Display>(err: serde_path_to_error::Error<E>) -> Error {
    let path = err.path().to_string();
    let field = if path == "." { "<root>".to_string() } else { path };
    Error::config(field, err.into_inner().to_string())
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        let spec: ExperimentSpec = serde_path_to_error::deserialize(de).map_err(path_error)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<root>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.fl.validate()?;
        self.train.validate()?;
        self.model.validate()?;
        if self.attack.enabled {
            self.attack.config()?;
        }
        Ok(())
    }

    /// Sets the world, run and training seeds together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.world.seed = seed;
        self.fl.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Applies dotted-key overrides such as `fl.rate = 0.1`. Keys must name
    /// fields of an existing section.
    pub fn with_overrides(&self, overrides: &toml::Table) -> Result<Self> {
        let mut root = toml::Table::try_from(self).map_err(|e| Error::config("<root>", e.to_string()))?;
        root.remove("sweep");
        for (key, value) in overrides {
            let parts: Vec<&str> = key.split('.').collect();
            let (last, sections) = parts.split_last().expect("split yields one part");
            let mut table = &mut root;
            for (depth, part) in sections.iter().enumerate() {
                let prefix = parts[..=depth].join(".");
                table = table
                    .get_mut(*part)
                    .and_then(toml::Value::as_table_mut)
                    .ok_or_else(|| Error::config(prefix.clone(), "no such config section"))?;
            }
            table.insert((*last).to_string(), value.clone());
        }
        let text = toml::to_string(&root).map_err(|e| Error::config("<root>", e.to_string()))?;
        Self::from_toml(&text)
    }

    /// The federation and environment this spec describes.
    pub fn environment(&self) -> Result<(Option<Federation>, Environment)> {
        match &self.embeddings {
            Some(path) => {
                let (file, datasets) = import_embeddings(path, &self.world.split, self.world.seed)?;
                let env = Environment::from_datasets(&datasets, file.header.classes as usize, &self.model, self.world.seed)?;
                Ok((None, env))
            }
            None => {
                let federation = generate_federation(&self.world)?;
                let env = Environment::new(&federation, &self.model, self.world.seed)?;
                Ok((Some(federation), env))
            }
        }
    }
}

/// Short directory-safe label for one sweep entry.
pub fn override_label(index: usize, overrides: &toml::Table) -> String {
    let mut label = format!("{index:02}");
    for (k, v) in overrides {
        let value = match v {
            toml::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let _ = write!(label, "-{k}={value}");
    }
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.=".contains(c) { c } else { '_' })
        .collect()
}

/// File names written by [`run`].
pub const REPORT_FILE: &str = "report.json";
pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const FAIRNESS_FILE: &str = "fairness.csv";
pub const TRANSMISSIONS_FILE: &str = "transmissions.jsonl";
pub const ATTACK_TRAJECTORY_FILE: &str = "attack_trajectory.csv";
pub const ATTACK_REPORT_FILE: &str = "attack_report.json";
pub const ADAPTER_FILE: &str = "global_adapter.mpftadp";
pub const EMBEDDINGS_FILE: &str = "embeddings.mpftemb";
pub const WORLD_FILE: &str = "world.json";
pub const COMPARISON_FILE: &str = "comparison.csv";

#[derive(Debug, Clone, Serialize)]
pub struct AttackOutcome {
    pub client: usize,
    pub class: usize,
    pub contributing_samples: usize,
    /// Input-space MSE to the closest contributing sample.
    pub nearest_sample_mse: f64,
    pub report: AttackReport,
}

/// Attacks the class-mean prototype that `client` would upload for
/// `class`. The ground truth is the mean raw input of the contributing
/// samples.
pub fn run_attack(federation: &Federation, section: &AttackSection) -> Result<AttackOutcome> {
    let config = section.config()?;
    let dataset = federation
        .datasets
        .iter()
        .find(|d| d.client_id == section.client)
        .ok_or_else(|| Error::config("attack.client", format!("no client {}", section.client)))?;
    let inputs: Vec<Vec<f64>> = dataset
        .part(Part::Train)
        .into_iter()
        .filter(|s| s.y == section.class)
        .map(|s| s.x)
        .collect();
    if inputs.is_empty() {
        return Err(Error::config(
            "attack.class",
            format!("client {} holds no training samples of class {}", section.client, section.class),
        ));
    }
    let d_in = inputs[0].len();
    let mut raw_mean = vec![0.0; d_in];
    let mut target = vec![0.0; federation.encoder.d_emb()];
    for x in &inputs {
        raw_mean.iter_mut().zip(x).for_each(|(a, v)| *a += v);
        let e = federation.encoder.encode(x)?;
        target.iter_mut().zip(&e).for_each(|(a, v)| *a += v);
    }
    let n = inputs.len() as f64;
    raw_mean.iter_mut().for_each(|a| *a /= n);
    target.iter_mut().for_each(|a| *a /= n);
    let report = hijack_attack(&federation.encoder, &target, &config, Some(&raw_mean))?;
    let nearest = inputs
        .iter()
        .map(|x| squared_distance(x, &report.x_star) / d_in as f64)
        .fold(f64::INFINITY, f64::min);
    Ok(AttackOutcome {
        client: section.client,
        class: section.class,
        contributing_samples: inputs.len(),
        nearest_sample_mse: nearest,
        report,
    })
}

/// Runs one method and writes its report files into `dir`. Returns the
/// report and the list of written files.
pub fn run(spec: &ExperimentSpec, method: Option<Method>, dir: &Path) -> Result<(RunReport, Vec<PathBuf>)> {
    let mut fl = spec.fl.clone();
    if let Some(m) = method {
        fl.method = m;
    }
    let (federation, env) = spec.environment()?;
    let mut report = fed::run(&env, &fl, &spec.train)?;
    if let Some(div) = &report.divergence {
        report.error_bounds = Some(bound_report(&env, &report, div, &fl)?);
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut write = |name: &str, contents: &[u8]| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, contents)?;
        written.push(path);
        Ok(())
    };
    write(REPORT_FILE, serde_json::to_string_pretty(&report)?.as_bytes())?;
    write(ACCURACY_FILE, report.accuracy.to_csv().as_bytes())?;
    write(FAIRNESS_FILE, fairness_export(&report.per_domain_acc).csv.as_bytes())?;
    if !report.events.is_empty() {
        write(TRANSMISSIONS_FILE, events_to_jsonl(&report.events)?.as_bytes())?;
    }
    if report.adapters.len() == 1 && fl.method != Method::Local {
        write(ADAPTER_FILE, &report.adapters[0].to_checkpoint())?;
    }
    if spec.attack.enabled {
        let federation = federation.ok_or_else(|| {
            Error::config("attack.enabled", "the attack needs the generated encoder, not imported embeddings")
        })?;
        let outcome = run_attack(&federation, &spec.attack)?;
        write(ATTACK_TRAJECTORY_FILE, outcome.report.trajectory_csv().as_bytes())?;
        write(ATTACK_REPORT_FILE, serde_json::to_string_pretty(&outcome)?.as_bytes())?;
    }
    Ok((report, written))
}

fn bound_report(
    env: &Environment,
    report: &RunReport,
    div: &crate::prototype::DivergenceReport,
    fl: &FLConfig,
) -> Result<crate::metrics::ErrorBoundReport> {
    let n = env.size();
    let local_errors: Vec<f64> = (0..n).map(|i| 1.0 - report.accuracy.acc[i][i]).collect();
    let measured: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let (mut num, mut den) = (0.0, 0.0);
            for j in (0..n).filter(|&j| j != i) {
                num += (1.0 - report.accuracy.acc[i][j]) * report.accuracy.counts[j] as f64;
                den += report.accuracy.counts[j] as f64;
            }
            (local_errors[i], if den > 0.0 { num / den } else { 0.0 })
        })
        .collect();
    error_bound_report(div, &local_errors, fl.bound_alpha, fl.bound_beta, Some(&measured))
}

/// Writes the world's embedded data and a JSON summary.
pub fn generate(spec: &ExperimentSpec, dir: &Path) -> Result<Vec<PathBuf>> {
    let federation = generate_federation(&spec.world)?;
    let embedded = federation.embedded()?;
    fs::create_dir_all(dir)?;
    let emb = dir.join(EMBEDDINGS_FILE);
    export_embeddings(&embedded, federation.classes, &emb)?;
    let summary = serde_json::json!({
        "world": spec.world,
        "encoder_fingerprint": format!("{:016x}", federation.encoder.fingerprint()),
        "clients": federation.datasets.iter().map(|d| serde_json::json!({
            "client_id": d.client_id,
            "home_domain": d.home_domain,
            "samples": d.len(),
            "train": d.split.train.len(),
            "validation": d.split.validation.len(),
            "test": d.split.test.len(),
        })).collect::<Vec<_>>(),
    });
    let world = dir.join(WORLD_FILE);
    fs::write(&world, serde_json::to_string_pretty(&summary)?)?;
    Ok(vec![emb, world])
}

/// Runs every sweep entry into its own subdirectory of `dir`.
pub fn sweep(spec: &ExperimentSpec, method: Option<Method>, dir: &Path) -> Result<Vec<(String, RunReport)>> {
    if spec.sweep.is_empty() {
        return Err(Error::config("sweep", "no sweep entries given"));
    }
    spec.sweep
        .iter()
        .enumerate()
        .map(|(i, overrides)| {
            let label = override_label(i, overrides);
            let entry = spec.with_overrides(overrides)?;
            let (report, _) = run(&entry, method, &dir.join(&label))?;
            Ok((label, report))
        })
        .collect()
}

/// Fields of a report JSON needed by [`compare`].
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReportSummary {
    pub method: Method,
    pub ood_acc: Option<f64>,
    pub ind_acc: f64,
    pub rounds_used: usize,
    pub comm_bytes: u64,
    pub wall_time: fed::WallTime,
}

pub fn load_summary(path: &Path) -> Result<ReportSummary> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::config("reports", format!("cannot read {}: {e}", path.display()))
    })?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        Error::config("reports", format!("{}: {} at `{}`", path.display(), e.inner(), e.path()))
    })
}

/// One CSV row per report, sorted by method name then path.
pub fn compare(paths: &[PathBuf]) -> Result<String> {
    let mut rows = paths
        .iter()
        .map(|p| Ok((load_summary(p)?, p.display().to_string())))
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.0.method.name().cmp(b.0.method.name()).then(a.1.cmp(&b.1)));
    let mut out = String::from("method,ood_acc,ind_acc,rounds,comm_bytes,wall_time,report\n");
    for (r, path) in rows {
        let ood = r.ood_acc.map_or(String::new(), |v| format!("{v:.4}"));
        let _ = writeln!(
            out,
            "{},{ood},{:.4},{},{},{:.3},{path}",
            r.method, r.ind_acc, r.rounds_used, r.comm_bytes, r.wall_time.total_secs
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_method_names_field() {
        let err = ExperimentSpec::from_toml("[fl]\nmethod = \"fedsgd\"\n").unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "fl.method"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_names_section() {
        match ExperimentSpec::from_toml("[train]\nlearnin_rate = 0.1\n").unwrap_err() {
            Error::Config { field, message } => {
                assert!(field.starts_with("train"), "{field}");
                assert!(message.contains("learnin_rate"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let text = "[fl]\nsampling = \"random\"\nrate = 0.3\n[[sweep]]\n\"fl.rate\" = 0.1\n";
        let spec = ExperimentSpec::from_toml(text).unwrap();
        let again = ExperimentSpec::from_toml(&spec.to_toml().unwrap()).unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn overrides_apply_and_reject_unknown() {
        let spec = ExperimentSpec::default();
        let mut o = toml::Table::new();
        o.insert("fl.rate".into(), toml::Value::Float(0.1));
        o.insert("fl.sampling".into(), toml::Value::String("cluster".into()));
        let s = spec.with_overrides(&o).unwrap();
        assert_eq!(s.fl.rate, Some(0.1));
        assert_eq!(override_label(3, &o), "03-fl.rate=0.1-fl.sampling=cluster");
        let mut bad = toml::Table::new();
        bad.insert("fl.nope".into(), toml::Value::Integer(1));
        assert!(matches!(spec.with_overrides(&bad), Err(Error::Config { .. })));
        let mut bad = toml::Table::new();
        bad.insert("nosuch.rate".into(), toml::Value::Integer(1));
        match spec.with_overrides(&bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "nosuch"),
            other => panic!("{other:?}"),
        }
    }
}
