mod common;

use common::rng;
use mpft::metrics::{error_bound_report, fairness_export, ind_ood, AccuracyMatrix, ErrorBoundReport};
use mpft::prototype::DivergenceReport;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

fn brute(acc: &[Vec<f64>], n: &[usize]) -> (f64, f64) {
    let k = acc.len();
    let (mut ind_num, mut ind_den, mut ood_num, mut ood_den) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = n[j] as f64;
            if i == j {
                ind_num += acc[i][j] * w;
                ind_den += w;
            } else {
                ood_num += acc[i][j] * w;
                ood_den += w;
            }
        }
    }
    (ind_num / ind_den, ood_num / ood_den)
}

fn random_instance(r: &mut mpft::rng::Rng, k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let acc = (0..k).map(|_| (0..k).map(|_| r.random::<f64>()).collect()).collect();
    let n = (0..k).map(|_| r.random_range(1..500)).collect();
    (acc, n)
}

#[test]
fn ind_ood_matches_double_loop() {
    let mut r = rng(31);
    for _ in 0..500 {
        let k = r.random_range(2..9);
        let (acc, n) = random_instance(&mut r, k);
        let (ind, ood) = ind_ood(&AccuracyMatrix::new(acc.clone(), n.clone()).unwrap()).unwrap();
        let (bi, bo) = brute(&acc, &n);
        assert!((ind - bi).abs() < 1e-12 && (ood - bo).abs() < 1e-12);
    }
}

#[test]
fn worked_two_client_example() {
    let m = AccuracyMatrix::new(vec![vec![1.0, 0.5], vec![0.7, 0.0]], vec![10, 30]).unwrap();
    assert_eq!(ind_ood(&m).unwrap(), (0.25, 0.55));
    let flat = AccuracyMatrix::new(vec![vec![0.4; 3]; 3], vec![1, 2, 3]).unwrap();
    let (ind, ood) = ind_ood(&flat).unwrap();
    assert!((ind - 0.4).abs() < 1e-15 && (ood - 0.4).abs() < 1e-15);
}

#[test]
fn single_client_has_no_ood() {
    let m = AccuracyMatrix::new(vec![vec![0.7]], vec![3]).unwrap();
    assert!(ind_ood(&m).is_err());
    assert!((m.ind() - 0.7).abs() < 1e-15);
}

#[test]
fn malformed_matrices_are_rejected() {
    assert!(AccuracyMatrix::new(vec![vec![0.1, 0.2]], vec![1]).is_err());
    assert!(AccuracyMatrix::new(vec![vec![1.5]], vec![1]).is_err());
    assert!(AccuracyMatrix::new(vec![vec![0.5]], vec![0]).is_err());
}

proptest! {
    #[test]
    fn relabelling_clients_preserves_the_metrics(seed in 0u64..5_000, k in 2usize..7) {
        let mut r = rng(seed);
        let (acc, n) = random_instance(&mut r, k);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut r);
        let p_acc: Vec<Vec<f64>> = perm.iter().map(|&i| perm.iter().map(|&j| acc[i][j]).collect()).collect();
        let p_n: Vec<usize> = perm.iter().map(|&i| n[i]).collect();
        let a = ind_ood(&AccuracyMatrix::new(acc, n).unwrap()).unwrap();
        let b = ind_ood(&AccuracyMatrix::new(p_acc, p_n).unwrap()).unwrap();
        prop_assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
    }

    #[test]
    fn scaling_counts_changes_nothing(seed in 0u64..5_000, k in 2usize..7, s in 1usize..50) {
        let mut r = rng(seed);
        let (acc, n) = random_instance(&mut r, k);
        let scaled: Vec<usize> = n.iter().map(|v| v * s).collect();
        let a = ind_ood(&AccuracyMatrix::new(acc.clone(), n).unwrap()).unwrap();
        let b = ind_ood(&AccuracyMatrix::new(acc.clone(), scaled).unwrap()).unwrap();
        prop_assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        let diag: Vec<f64> = (0..k).map(|i| acc[i][i]).collect();
        let off: Vec<f64> = (0..k).flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| acc[i][j]).collect();
        let within = |v: f64, xs: &[f64]| v >= xs.iter().copied().fold(f64::INFINITY, f64::min) - 1e-12 && v <= xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1e-12;
        prop_assert!(within(a.0, &diag) && within(a.1, &off));
    }
}

#[test]
fn fairness_export_lists_every_domain() {
    let out = fairness_export(&[0.5, 0.8, 0.4]);
    assert_eq!(out.csv, "domain,accuracy\n0,0.5\n1,0.8\n2,0.4\n");
    assert!((out.roundness - 0.5).abs() < 1e-12);
    assert_eq!(fairness_export(&[0.4, 0.8, 0.5]).roundness, out.roundness);
    assert_eq!(fairness_export(&[0.6; 4]).roundness, 1.0);
    assert_eq!(fairness_export(&[0.0, 0.7]).roundness, 0.0);
    assert_eq!(fairness_export(&[0.0, 0.0]).roundness, 0.0);
}

fn divergence(avg: Vec<f64>, pairwise: Vec<Vec<f64>>) -> DivergenceReport {
    let n = avg.len();
    DivergenceReport {
        clients: (0..n).collect(),
        class_means: Vec::new(),
        per_client: vec![Vec::new(); n],
        max: avg.iter().copied().fold(0.0, f64::max),
        client_avg: avg,
        pairwise_max: pairwise,
        excluded_classes: Vec::new(),
    }
}

#[test]
fn bounds_follow_their_formulas_and_grow_with_the_constants() {
    let mut r = rng(32);
    let n = 3;
    let pairwise: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 0.0 } else { 0.3 + 0.1 * (i + j) as f64 }).collect()).collect();
    let div = divergence(vec![0.2, 0.4, 0.1], pairwise.clone());
    let errors: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 0.5).collect();
    let mut prev: Option<ErrorBoundReport> = None;
    for c in [0.0, 0.5, 1.0, 2.0] {
        let rep = error_bound_report(&div, &errors, c, c, None).unwrap();
        for (i, b) in rep.clients.iter().enumerate() {
            assert!((b.ind_bound - (errors[i] + c * div.client_avg[i])).abs() < 1e-12);
            for &(j, v) in &b.ood_bounds {
                assert!((v - (errors[i] + c * pairwise[i][j])).abs() < 1e-12);
            }
        }
        if let Some(p) = prev {
            for (a, b) in p.clients.iter().zip(&rep.clients) {
                assert!(b.ind_bound >= a.ind_bound);
                assert!(b.ood_bounds.iter().zip(&a.ood_bounds).all(|(x, y)| x.1 >= y.1));
            }
        }
        prev = Some(rep);
    }
    let flat = error_bound_report(&divergence(vec![0.0; 3], vec![vec![0.0; 3]; 3]), &errors, 2.0, 2.0, None).unwrap();
    assert!(flat.clients.iter().zip(&errors).all(|(b, e)| b.ind_bound == *e));
    assert!(error_bound_report(&div, &errors, -1.0, 0.0, None).is_err());
}
