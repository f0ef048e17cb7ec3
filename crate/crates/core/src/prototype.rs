//! Prototype sampling, k-means, Gaussian perturbation and divergence
//! statistics.
//!
//! A client turns its embedded training split into a set of prototypes with
//! one of three methods:
//!
//! * `mean`: one class-mean embedding per class;
//! * `cluster`: `⌈r·|D^(k)|⌉` k-means centers per class;
//! * `random`: `⌈r·|D^(k)|⌉` embeddings drawn without replacement per class.
//!
//! The server simply concatenates every client's set into a
//! [`PrototypeDataset`]. Prototypes of the same class from different clients
//! are never averaged together.

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::embeddings;
use crate::error::{Error, Result};
use crate::rng::{self, purpose, Rng};
use crate::tensor::{norm, squared_distance};
use crate::world::{gauss, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub client_id: usize,
    pub class_id: usize,
    pub vec: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMethod {
    #[default]
    Mean,
    Cluster,
    Random,
}

/// Prototypes produced by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientPrototypes {
    pub client_id: usize,
    pub prototypes: Vec<Prototype>,
    /// Classes for which the client held no samples.
    pub missing_classes: Vec<usize>,
}

impl ClientPrototypes {
    /// Serialised upload in the `MPFTEMB1` format.
    pub fn payload(&self, d_emb: usize, classes: usize, clients: usize) -> Vec<u8> {
        embeddings::encode(
            d_emb,
            classes,
            clients,
            self.prototypes
                .iter()
                .map(|p| (p.client_id, p.class_id, p.vec.as_slice())),
        )
    }
}

/// The server-side training set: the union of every client's prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeDataset {
    pub prototypes: Vec<Prototype>,
    pub d_emb: usize,
    pub classes: usize,
    pub contributing_clients: Vec<usize>,
    /// `(client, class)` pairs for which no prototype exists.
    pub missing: Vec<(usize, usize)>,
}

impl PrototypeDataset {
    pub fn from_clients(sets: &[ClientPrototypes], d_emb: usize, classes: usize) -> Self {
        let mut prototypes = Vec::new();
        let mut missing = Vec::new();
        for set in sets {
            prototypes.extend(set.prototypes.iter().cloned());
            missing.extend(set.missing_classes.iter().map(|&k| (set.client_id, k)));
        }
        Self {
            prototypes,
            d_emb,
            classes,
            contributing_clients: sets.iter().map(|s| s.client_id).collect(),
            missing,
        }
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    /// Prototypes as `(vec, label)` training samples.
    pub fn as_samples(&self) -> Vec<Sample> {
        self.prototypes
            .iter()
            .map(|p| Sample {
                x: p.vec.clone(),
                y: p.class_id,
                origin_domain: p.client_id,
            })
            .collect()
    }
}

fn group_by_class<'a>(samples: &'a [Sample], classes: usize) -> Vec<Vec<&'a [f64]>> {
    let mut groups = vec![Vec::new(); classes];
    for s in samples {
        groups[s.y].push(s.x.as_slice());
    }
    groups
}

fn mean_of(points: &[&[f64]]) -> Vec<f64> {
    let d = points[0].len();
    let mut acc = vec![0.0; d];
    for p in points {
        acc.iter_mut().zip(p.iter()).for_each(|(a, v)| *a += v);
    }
    let n = points.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::config("fl.rate", format!("sampling rate {rate} must lie in (0, 1]")));
    }
    Ok(())
}

/// Number of prototypes per class, `⌈r·n⌉`. A 1e-9 slack keeps exact
/// products such as `0.7·10` from rounding up past the integer.
pub fn prototype_count(rate: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    (((rate * n as f64) - 1e-9).ceil() as usize).clamp(1, n)
}

fn missing_warning(client_id: usize, class: usize) {
    warn!("client {client_id} has no samples of class {class}; no prototype produced");
}

pub fn mean_sampling(client_id: usize, samples: &[Sample], classes: usize) -> ClientPrototypes {
    let groups = group_by_class(samples, classes);
    let mut out = ClientPrototypes {
        client_id,
        prototypes: Vec::new(),
        missing_classes: Vec::new(),
    };
    for (class, points) in groups.iter().enumerate() {
        if points.is_empty() {
            missing_warning(client_id, class);
            out.missing_classes.push(class);
            continue;
        }
        out.prototypes.push(Prototype {
            client_id,
            class_id: class,
            vec: mean_of(points),
        });
    }
    out
}

pub fn random_sampling(
    client_id: usize,
    samples: &[Sample],
    classes: usize,
    rate: f64,
    rng: &mut Rng,
) -> Result<ClientPrototypes> {
    check_rate(rate)?;
    let groups = group_by_class(samples, classes);
    let mut out = ClientPrototypes {
        client_id,
        prototypes: Vec::new(),
        missing_classes: Vec::new(),
    };
    for (class, points) in groups.iter().enumerate() {
        if points.is_empty() {
            missing_warning(client_id, class);
            out.missing_classes.push(class);
            continue;
        }
        let count = prototype_count(rate, points.len());
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let (chosen, _) = idx.partial_shuffle(rng, count);
        let mut chosen = chosen.to_vec();
        chosen.sort_unstable();
        out.prototypes.extend(chosen.iter().map(|&i| Prototype {
            client_id,
            class_id: class,
            vec: points[i].to_vec(),
        }));
    }
    Ok(out)
}

pub fn cluster_sampling(
    client_id: usize,
    samples: &[Sample],
    classes: usize,
    rate: f64,
    rng: &mut Rng,
) -> Result<ClientPrototypes> {
    check_rate(rate)?;
    let groups = group_by_class(samples, classes);
    let mut out = ClientPrototypes {
        client_id,
        prototypes: Vec::new(),
        missing_classes: Vec::new(),
    };
    for (class, points) in groups.iter().enumerate() {
        if points.is_empty() {
            missing_warning(client_id, class);
            out.missing_classes.push(class);
            continue;
        }
        let count = prototype_count(rate, points.len());
        let result = kmeans(points, count, rng, DEFAULT_KMEANS_ITERS)?;
        out.prototypes.extend(result.centers.into_iter().map(|vec| Prototype {
            client_id,
            class_id: class,
            vec,
        }));
    }
    Ok(out)
}

/// Runs the chosen sampling method with the client's own random stream.
pub fn sample_prototypes(
    method: SamplingMethod,
    rate: f64,
    client_id: usize,
    samples: &[Sample],
    classes: usize,
    seed: u64,
) -> Result<ClientPrototypes> {
    let mut rng = rng::stream(seed, &[purpose::SAMPLING, client_id as u64]);
    match method {
        SamplingMethod::Mean => Ok(mean_sampling(client_id, samples, classes)),
        SamplingMethod::Cluster => cluster_sampling(client_id, samples, classes, rate, &mut rng),
        SamplingMethod::Random => random_sampling(client_id, samples, classes, rate, &mut rng),
    }
}

pub const DEFAULT_KMEANS_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Objective after initialisation and after every Lloyd iteration.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().unwrap_or(&0.0)
    }
}

/// Sum of squared distances from each point to its assigned center.
pub fn kmeans_objective(points: &[&[f64]], centers: &[Vec<f64>], assignment: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &c)| squared_distance(p, &centers[c]))
        .sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d = squared_distance(point, center);
        // Strict comparison breaks ties toward the lowest index.
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn kmeans_plus_plus(points: &[&[f64]], count: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = vec![points[first].to_vec()];
    let mut dist: Vec<f64> = points.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < count {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total distance")
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        centers.push(points[next].to_vec());
        for (i, p) in points.iter().enumerate() {
            dist[i] = dist[i].min(squared_distance(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

/// Independent k-means++ restarts; the lowest final objective wins.
pub const KMEANS_RESTARTS: usize = 30;

/// Lloyd's algorithm with k-means++ seeding, followed by single-point
/// transfers that lower the objective.
///
/// Lloyd stops when assignments stop changing or after `max_iters`
/// iterations. An empty cluster takes over the point farthest from its
/// current center. The best of [`KMEANS_RESTARTS`] seeded runs is returned.
/// `count == points.len()` returns the points themselves.
pub fn kmeans(points: &[&[f64]], count: usize, rng: &mut Rng, max_iters: usize) -> Result<KMeansResult> {
    if count == 0 {
        return Err(Error::domain("k-means needs at least one center"));
    }
    if count > points.len() {
        return Err(Error::domain(format!(
            "cannot place {count} centers on {} points",
            points.len()
        )));
    }
    if count == points.len() {
        return Ok(KMeansResult {
            centers: points.iter().map(|p| p.to_vec()).collect(),
            assignment: (0..count).collect(),
            objective_history: vec![0.0],
            iterations: 0,
        });
    }
    let mut best: Option<KMeansResult> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = kmeans_once(points, count, rng, max_iters);
        if best.as_ref().is_none_or(|b| run.objective() < b.objective()) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn centers_of(points: &[&[f64]], assignment: &[usize], count: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let d = points[0].len();
    let mut sums = vec![vec![0.0; d]; count];
    let mut counts = vec![0usize; count];
    for (p, &c) in points.iter().zip(assignment) {
        counts[c] += 1;
        sums[c].iter_mut().zip(p.iter()).for_each(|(s, v)| *s += v);
    }
    let centers = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    (centers, counts)
}

fn kmeans_once(points: &[&[f64]], count: usize, rng: &mut Rng, max_iters: usize) -> KMeansResult {
    let mut centers = kmeans_plus_plus(points, count, rng);
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    let mut history = vec![kmeans_objective(points, &centers, &assignment)];
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        repair_empty(points, &centers, &mut assignment, count);
        centers = centers_of(points, &assignment, count).0;
        history.push(kmeans_objective(points, &centers, &assignment));
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    repair_empty(points, &centers, &mut assignment, count);
    if transfer_points(points, &mut assignment, count, max_iters) {
        centers = centers_of(points, &assignment, count).0;
        history.push(kmeans_objective(points, &centers, &assignment));
    }
    KMeansResult {
        centers,
        assignment,
        objective_history: history,
        iterations,
    }
}

/// Moves single points between clusters while a move lowers the objective.
/// Moving `x` from `a` to `b` changes it by
/// `n_b/(n_b+1)·‖x−c_b‖² − n_a/(n_a−1)·‖x−c_a‖²`.
fn transfer_points(points: &[&[f64]], assignment: &mut [usize], count: usize, max_sweeps: usize) -> bool {
    let mut moved_any = false;
    for _ in 0..max_sweeps.max(1) {
        let mut moved = false;
        for i in 0..points.len() {
            let (centers, counts) = centers_of(points, assignment, count);
            let a = assignment[i];
            if counts[a] < 2 {
                continue;
            }
            let na = counts[a] as f64;
            let leave = na / (na - 1.0) * squared_distance(points[i], &centers[a]);
            let mut target = None;
            let mut best_gain = 1e-12 * (1.0 + leave);
            for b in (0..count).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let gain = leave - nb / (nb + 1.0) * squared_distance(points[i], &centers[b]);
                if gain > best_gain {
                    best_gain = gain;
                    target = Some(b);
                }
            }
            if let Some(b) = target {
                assignment[i] = b;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        moved_any = true;
    }
    moved_any
}

fn repair_empty(points: &[&[f64]], centers: &[Vec<f64>], assignment: &mut [usize], count: usize) {
    loop {
        let mut sizes = vec![0usize; count];
        assignment.iter().for_each(|&c| sizes[c] += 1);
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if sizes[assignment[i]] < 2 {
                continue;
            }
            let d = squared_distance(p, &centers[assignment[i]]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        match far {
            Some(i) => assignment[i] = empty,
            None => return,
        }
    }
}

/// Adds `q·N(0, s²)` noise to every coordinate.
pub fn apply_dp_noise(prototypes: &[Prototype], q: f64, s: f64, rng: &mut Rng) -> Result<Vec<Prototype>> {
    if !(q >= 0.0) {
        return Err(Error::config("fl.dp_q", format!("perturbation coefficient {q} is negative")));
    }
    if !(s >= 0.0) {
        return Err(Error::config("fl.dp_s", format!("noise scale {s} is negative")));
    }
    if q == 0.0 || s == 0.0 {
        return Ok(prototypes.to_vec());
    }
    let scale = q * s;
    Ok(prototypes
        .iter()
        .map(|p| Prototype {
            client_id: p.client_id,
            class_id: p.class_id,
            vec: p.vec.iter().map(|v| v + scale * gauss(rng)).collect(),
        })
        .collect())
}

/// Prototype divergence across clients.
///
/// A client holding several prototypes of a class is represented by their
/// mean. `Δ_i^(k) = ‖p_i^(k) − p̄^(k)‖` where `p̄^(k)` averages the client
/// representatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub clients: Vec<usize>,
    /// Cross-client mean per class; `None` for classes no client holds.
    pub class_means: Vec<Option<Vec<f64>>>,
    /// `per_client[i][k]` is `Δ_i^(k)`, indexed like `clients`.
    pub per_client: Vec<Vec<Option<f64>>>,
    /// Mean of `Δ_i^(k)` over the classes client `i` holds.
    pub client_avg: Vec<f64>,
    /// `pairwise_max[i][j] = max_k ‖p_i^(k) − p_j^(k)‖` over shared classes.
    pub pairwise_max: Vec<Vec<f64>>,
    pub max: f64,
    pub excluded_classes: Vec<usize>,
}

pub fn divergence_stats(dataset: &PrototypeDataset) -> DivergenceReport {
    let clients = dataset.contributing_clients.clone();
    let k = dataset.classes;
    let reps: Vec<Vec<Option<Vec<f64>>>> = clients
        .iter()
        .map(|&c| {
            (0..k)
                .map(|class| {
                    let pts: Vec<&[f64]> = dataset
                        .prototypes
                        .iter()
                        .filter(|p| p.client_id == c && p.class_id == class)
                        .map(|p| p.vec.as_slice())
                        .collect();
                    (!pts.is_empty()).then(|| mean_of(&pts))
                })
                .collect()
        })
        .collect();

    let mut excluded = Vec::new();
    let class_means: Vec<Option<Vec<f64>>> = (0..k)
        .map(|class| {
            let pts: Vec<&[f64]> = reps.iter().filter_map(|r| r[class].as_deref()).collect();
            if pts.is_empty() {
                warn!("class {class} has no prototypes from any client; excluded from divergence");
                excluded.push(class);
                None
            } else {
                Some(mean_of(&pts))
            }
        })
        .collect();

    let per_client: Vec<Vec<Option<f64>>> = reps
        .iter()
        .map(|r| {
            (0..k)
                .map(|class| {
                    let rep = r[class].as_ref()?;
                    let mean = class_means[class].as_ref()?;
                    Some(squared_distance(rep, mean).sqrt())
                })
                .collect()
        })
        .collect();
    let client_avg: Vec<f64> = per_client
        .iter()
        .map(|row| {
            let vals: Vec<f64> = row.iter().flatten().copied().collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect();
    let max = per_client
        .iter()
        .flatten()
        .flatten()
        .copied()
        .fold(0.0, f64::max);
    let pairwise_max = reps
        .iter()
        .map(|ri| {
            reps.iter()
                .map(|rj| {
                    (0..k)
                        .filter_map(|class| match (&ri[class], &rj[class]) {
                            (Some(a), Some(b)) => Some(squared_distance(a, b).sqrt()),
                            _ => None,
                        })
                        .fold(0.0, f64::max)
                })
                .collect()
        })
        .collect();
    DivergenceReport {
        clients,
        class_means,
        per_client,
        client_avg,
        pairwise_max,
        max,
        excluded_classes: excluded,
    }
}

/// Mean Euclidean norm of the prototypes, a scale reference for Δ.
pub fn mean_prototype_norm(dataset: &PrototypeDataset) -> f64 {
    if dataset.is_empty() {
        return 0.0;
    }
    dataset.prototypes.iter().map(|p| norm(&p.vec)).sum::<f64>() / dataset.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(points: &[(&[f64], usize)]) -> Vec<Sample> {
        points
            .iter()
            .map(|(x, y)| Sample {
                x: x.to_vec(),
                y: *y,
                origin_domain: 0,
            })
            .collect()
    }

    #[test]
    fn mean_of_two_points() {
        let s = samples(&[(&[1.0, 3.0], 0), (&[3.0, 1.0], 0), (&[5.0, 5.0], 1)]);
        let p = mean_sampling(0, &s, 2);
        assert_eq!(p.prototypes[0].vec, vec![2.0, 2.0]);
        assert_eq!(p.prototypes[1].vec, vec![5.0, 5.0]);
    }

    #[test]
    fn missing_class_is_flagged() {
        let s = samples(&[(&[1.0], 0), (&[2.0], 2)]);
        let p = mean_sampling(4, &s, 3);
        assert_eq!(p.prototypes.len(), 2);
        assert_eq!(p.missing_classes, vec![1]);
        let ds = PrototypeDataset::from_clients(&[p], 1, 3);
        assert_eq!(ds.missing, vec![(4, 1)]);
    }

    #[test]
    fn prototype_counts() {
        assert_eq!(prototype_count(0.1, 25), 3);
        assert_eq!(prototype_count(1.0, 25), 25);
        assert_eq!(prototype_count(0.7, 10), 7);
        assert_eq!(prototype_count(0.3, 10), 3);
        assert_eq!(prototype_count(0.001, 5), 1);
    }

    #[test]
    fn random_sampling_draws_members() {
        let pts: Vec<Vec<f64>> = (0..25).map(|i| vec![i as f64, -(i as f64)]).collect();
        let s: Vec<Sample> = pts
            .iter()
            .map(|x| Sample { x: x.clone(), y: 0, origin_domain: 0 })
            .collect();
        let mut rng = rng::stream(3, &[]);
        let p = random_sampling(0, &s, 1, 0.1, &mut rng).unwrap();
        assert_eq!(p.prototypes.len(), 3);
        assert!(p.prototypes.iter().all(|q| pts.contains(&q.vec)));
        let all = random_sampling(0, &s, 1, 1.0, &mut rng).unwrap();
        let mut got: Vec<Vec<f64>> = all.prototypes.into_iter().map(|q| q.vec).collect();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(got, pts);
    }

    #[test]
    fn rate_out_of_range() {
        let s = samples(&[(&[1.0], 0)]);
        let mut rng = rng::stream(3, &[]);
        for r in [0.0, -0.1, 1.5] {
            assert!(matches!(
                random_sampling(0, &s, 1, r, &mut rng),
                Err(Error::Config { .. })
            ));
            assert!(cluster_sampling(0, &s, 1, r, &mut rng).is_err());
        }
    }

    #[test]
    fn kmeans_square_corners() {
        let pts: Vec<&[f64]> = vec![&[0.0, 0.0], &[0.0, 1.0], &[10.0, 0.0], &[10.0, 1.0]];
        for seed in 0..10 {
            let res = kmeans(&pts, 2, &mut rng::stream(seed, &[]), 100).unwrap();
            let mut c = res.centers.clone();
            c.sort_by(|a, b| a[0].total_cmp(&b[0]));
            assert_eq!(c, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
            assert!((res.objective() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_degenerate_counts() {
        let pts: Vec<&[f64]> = vec![&[0.0, 2.0], &[4.0, 0.0], &[2.0, 1.0]];
        let mut rng = rng::stream(1, &[]);
        let all = kmeans(&pts, 3, &mut rng, 100).unwrap();
        assert_eq!(all.centers, pts.iter().map(|p| p.to_vec()).collect::<Vec<_>>());
        let one = kmeans(&pts, 1, &mut rng, 100).unwrap();
        assert_eq!(one.centers, vec![vec![2.0, 1.0]]);
        assert!(kmeans(&pts, 4, &mut rng, 100).is_err());
        assert!(kmeans(&pts, 0, &mut rng, 100).is_err());
    }

    #[test]
    fn kmeans_handles_duplicates() {
        let pts: Vec<&[f64]> = vec![&[1.0], &[1.0], &[1.0], &[1.0], &[2.0]];
        let res = kmeans(&pts, 3, &mut rng::stream(9, &[]), 100).unwrap();
        assert_eq!(res.centers.len(), 3);
        assert!(res.centers.iter().all(|c| c[0].is_finite()));
        assert!(res.objective() < 1e-12);
    }

    #[test]
    fn dp_noise_zero_is_identity() {
        let p = vec![Prototype { client_id: 0, class_id: 0, vec: vec![-0.0, 1.5] }];
        let mut rng = rng::stream(1, &[]);
        assert_eq!(apply_dp_noise(&p, 0.0, 0.3, &mut rng).unwrap(), p);
        assert_eq!(apply_dp_noise(&p, 0.2, 0.0, &mut rng).unwrap(), p);
        assert!(apply_dp_noise(&p, -0.1, 0.3, &mut rng).is_err());
        assert!(apply_dp_noise(&p, 0.1, -0.3, &mut rng).is_err());
    }

    #[test]
    fn divergence_two_clients() {
        let ds = PrototypeDataset {
            prototypes: vec![
                Prototype { client_id: 0, class_id: 0, vec: vec![0.0, 0.0] },
                Prototype { client_id: 1, class_id: 0, vec: vec![2.0, 0.0] },
            ],
            d_emb: 2,
            classes: 2,
            contributing_clients: vec![0, 1],
            missing: vec![(0, 1), (1, 1)],
        };
        let r = divergence_stats(&ds);
        assert_eq!(r.class_means[0], Some(vec![1.0, 0.0]));
        assert_eq!(r.per_client[0][0], Some(1.0));
        assert_eq!(r.per_client[1][0], Some(1.0));
        assert_eq!(r.max, 1.0);
        assert_eq!(r.excluded_classes, vec![1]);
        assert_eq!(r.pairwise_max[0][1], 2.0);
    }

    #[test]
    fn identical_prototypes_have_zero_divergence() {
        let protos = (0..3)
            .flat_map(|c| {
                (0..2).map(move |k| Prototype { client_id: c, class_id: k, vec: vec![k as f64, 1.0] })
            })
            .collect();
        let ds = PrototypeDataset {
            prototypes: protos,
            d_emb: 2,
            classes: 2,
            contributing_clients: vec![0, 1, 2],
            missing: vec![],
        };
        let r = divergence_stats(&ds);
        assert_eq!(r.max, 0.0);
        assert!(r.client_avg.iter().all(|v| *v == 0.0));
    }
}
