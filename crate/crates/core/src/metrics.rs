//! Evaluation metrics over accuracy matrices, fairness exports and the
//! prototype-divergence error-bound report.

use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prototype::DivergenceReport;

/// `acc[i][j]` is the accuracy of client `i`'s model on the test data of
/// domain `j`; `counts[j]` is the size of that test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub acc: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl AccuracyMatrix {
    pub fn new(acc: Vec<Vec<f64>>, counts: Vec<usize>) -> Result<Self> {
        let n = counts.len();
        if n == 0 {
            return Err(Error::domain("accuracy matrix needs at least one domain"));
        }
        if acc.len() != n || acc.iter().any(|r| r.len() != n) {
            return Err(Error::domain("accuracy matrix must be N × N with N counts"));
        }
        if acc.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain("accuracies must lie in [0, 1]"));
        }
        if counts.contains(&0) {
            return Err(Error::domain("every domain needs a positive test count"));
        }
        Ok(Self { acc, counts })
    }

    pub fn size(&self) -> usize {
        self.counts.len()
    }

    /// Sample-weighted in-domain accuracy.
    pub fn ind(&self) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &n) in self.counts.iter().enumerate() {
            num += self.acc[i][i] * n as f64;
            den += n as f64;
        }
        num / den
    }

    /// Sample-weighted out-of-domain accuracy; undefined for one domain.
    pub fn ood(&self) -> Result<f64> {
        let n = self.size();
        if n < 2 {
            return Err(Error::domain("out-of-domain accuracy needs at least two domains"));
        }
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                num += self.acc[i][j] * self.counts[j] as f64;
                den += self.counts[j] as f64;
            }
        }
        Ok(num / den)
    }

    /// Column means: accuracy per test domain averaged over models. For a
    /// shared global model every row is the same and this is that row.
    pub fn per_domain(&self) -> Vec<f64> {
        let n = self.size() as f64;
        (0..self.size())
            .map(|j| self.acc.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for j in 0..self.size() {
            let _ = write!(out, ",domain_{j}");
        }
        out.push('\n');
        for (i, row) in self.acc.iter().enumerate() {
            let _ = write!(out, "client_{i}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn ind_ood(matrix: &AccuracyMatrix) -> Result<(f64, f64)> {
    Ok((matrix.ind(), matrix.ood()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessExport {
    pub csv: String,
    /// `min / max` of the per-domain accuracies; 1 is perfectly even.
    pub roundness: f64,
}

pub fn fairness_export(per_domain: &[f64]) -> FairnessExport {
    let mut csv = String::from("domain,accuracy\n");
    for (j, v) in per_domain.iter().enumerate() {
        let _ = writeln!(csv, "{j},{v}");
    }
    let max = per_domain.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = per_domain.iter().copied().fold(f64::INFINITY, f64::min);
    let roundness = if per_domain.is_empty() || max <= 0.0 {
        warn!("per-domain accuracies have zero maximum; roundness set to 0");
        0.0
    } else {
        min / max
    };
    FairnessExport { csv, roundness }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientBound {
    pub client: usize,
    pub local_error: f64,
    /// `ε_local + α·Δ_i^avg`.
    pub ind_bound: f64,
    /// Per other client `j`: `ε_local + β·Δ_ij^max`.
    pub ood_bounds: Vec<(usize, f64)>,
    pub measured_ind_error: Option<f64>,
    pub measured_ood_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundReport {
    pub alpha: f64,
    pub beta: f64,
    pub clients: Vec<ClientBound>,
}

/// Right-hand sides of the divergence error bounds. `local_errors[i]` is
/// indexed like `divergence.clients`; `measured` optionally supplies each
/// client's observed in-domain and out-of-domain errors.
pub fn error_bound_report(
    divergence: &DivergenceReport,
    local_errors: &[f64],
    alpha: f64,
    beta: f64,
    measured: Option<&[(f64, f64)]>,
) -> Result<ErrorBoundReport> {
    if !(alpha >= 0.0) {
        return Err(Error::config("fl.bound_alpha", "must be non-negative"));
    }
    if !(beta >= 0.0) {
        return Err(Error::config("fl.bound_beta", "must be non-negative"));
    }
    let n = divergence.clients.len();
    if local_errors.len() != n {
        return Err(Error::domain("one local error per client required"));
    }
    let clients = (0..n)
        .map(|i| ClientBound {
            client: divergence.clients[i],
            local_error: local_errors[i],
            ind_bound: local_errors[i] + alpha * divergence.client_avg[i],
            ood_bounds: (0..n)
                .filter(|&j| j != i)
                .map(|j| (divergence.clients[j], local_errors[i] + beta * divergence.pairwise_max[i][j]))
                .collect(),
            measured_ind_error: measured.map(|m| m[i].0),
            measured_ood_error: measured.map(|m| m[i].1),
        })
        .collect();
    Ok(ErrorBoundReport { alpha, beta, clients })
}
