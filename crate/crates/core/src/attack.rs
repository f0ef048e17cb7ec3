//! Feature-space hijacking: invert a prototype through the known frozen
//! encoder by gradient descent on the input.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, purpose};
use crate::tensor::{dot, squared_distance};
use crate::world::{gauss, FrozenEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    /// Halve the step and retry whenever a step would raise the loss.
    #[default]
    Halving,
    /// Always take the configured step.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttackInit {
    #[default]
    Zeros,
    Gaussian { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub init: AttackInit,
    pub log_every: usize,
    pub step_rule: StepRule,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            learning_rate: 1.0,
            init: AttackInit::Zeros,
            log_every: 100,
            step_rule: StepRule::Halving,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.log_every == 0 {
            return Err(Error::config("attack.log_every", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("attack.learning_rate", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub x_star: Vec<f64>,
    /// Logged at iteration 0 and every `log_every` iterations.
    pub logged_iterations: Vec<usize>,
    pub prototype_mse_history: Vec<f64>,
    /// Present when a ground-truth input was supplied.
    pub input_mse_history: Option<Vec<f64>>,
    pub input_mse: Option<f64>,
    /// Pearson correlation between `x*` and the ground truth.
    pub correlation: Option<f64>,
    pub iterations_run: usize,
    pub final_learning_rate: f64,
    /// Iteration at which a non-finite loss stopped the attack.
    pub aborted_at: Option<usize>,
}

impl AttackReport {
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("iteration,prototype_mse,input_mse\n");
        for (k, it) in self.logged_iterations.iter().enumerate() {
            let input = self
                .input_mse_history
                .as_ref()
                .map_or(String::new(), |h| h[k].to_string());
            let _ = writeln!(out, "{it},{},{input}", self.prototype_mse_history[k]);
        }
        out
    }
}

/// `(1/d)·‖encode(x) − p‖²` and its gradient with respect to `x`.
pub fn attack_objective(encoder: &FrozenEncoder, x: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let e = encoder.encode(x)?;
    let d = target.len() as f64;
    let diff: Vec<f64> = e.iter().zip(target).map(|(a, b)| a - b).collect();
    let loss = dot(&diff, &diff) / d;
    let upstream: Vec<f64> = diff.iter().map(|v| 2.0 * v / d).collect();
    Ok((loss, encoder.input_grad(x, &upstream)?))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b) / a.len() as f64
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

const MAX_HALVINGS: usize = 60;

pub fn hijack_attack(
    encoder: &FrozenEncoder,
    target: &[f64],
    config: &AttackConfig,
    ground_truth: Option<&[f64]>,
) -> Result<AttackReport> {
    config.validate()?;
    if target.len() != encoder.d_emb() {
        return Err(Error::domain(format!(
            "target prototype has length {}, encoder emits {}",
            target.len(),
            encoder.d_emb()
        )));
    }
    if let Some(gt) = ground_truth {
        if gt.len() != encoder.d_in() {
            return Err(Error::domain("ground-truth input has the wrong length"));
        }
    }
    let mut x = match config.init {
        AttackInit::Zeros => vec![0.0; encoder.d_in()],
        AttackInit::Gaussian { seed } => {
            let mut rng = rng::stream(seed, &[purpose::ATTACK]);
            (0..encoder.d_in()).map(|_| gauss(&mut rng)).collect()
        }
    };
    let mut lr = config.learning_rate;
    let (mut loss, mut grad) = attack_objective(encoder, &x, target)?;
    let mut logged = vec![0];
    let mut proto_hist = vec![loss];
    let mut input_hist = ground_truth.map(|gt| vec![mse(&x, gt)]);
    let mut aborted_at = None;
    let mut iterations_run = 0;
    if !loss.is_finite() {
        aborted_at = Some(0);
    }

    while aborted_at.is_none() && iterations_run < config.iterations {
        let t = iterations_run + 1;
        let mut step = lr;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate: Vec<f64> = x.iter().zip(&grad).map(|(xi, gi)| xi - step * gi).collect();
            let (l, g) = attack_objective(encoder, &candidate, target)?;
            if config.step_rule == StepRule::Fixed || l <= loss {
                accepted = Some((candidate, l, g));
                break;
            }
            step *= 0.5;
        }
        iterations_run = t;
        match accepted {
            Some((candidate, l, g)) => {
                if !l.is_finite() {
                    aborted_at = Some(t);
                    break;
                }
                x = candidate;
                loss = l;
                grad = g;
                lr = step;
            }
            // No descent step exists at machine precision; the iterate is
            // stationary from here on.
            None => {}
        }
        if t % config.log_every == 0 {
            logged.push(t);
            proto_hist.push(loss);
            if let (Some(h), Some(gt)) = (input_hist.as_mut(), ground_truth) {
                h.push(mse(&x, gt));
            }
        }
    }

    Ok(AttackReport {
        input_mse: ground_truth.map(|gt| mse(&x, gt)),
        correlation: ground_truth.and_then(|gt| pearson(&x, gt)),
        x_star: x,
        logged_iterations: logged,
        prototype_mse_history: proto_hist,
        input_mse_history: input_hist,
        iterations_run,
        final_learning_rate: lr,
        aborted_at,
    })
}
