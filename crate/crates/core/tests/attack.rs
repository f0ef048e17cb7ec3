mod common;

use common::{random_vec, rng};
use mpft::attack::{attack_objective, hijack_attack, AttackConfig, AttackInit, StepRule};
use mpft::tensor::{finite_diff_grad, relative_error, squared_distance};
use mpft::world::FrozenEncoder;
use rand::Rng as _;

#[test]
fn identity_inversion_recovers_the_prototype() {
    let mut r = rng(41);
    for _ in 0..5 {
        let d = r.random_range(2..20);
        let p = random_vec(&mut r, d, 2.0);
        let cfg = AttackConfig { iterations: 1000, log_every: 10, ..AttackConfig::default() };
        let rep = hijack_attack(&FrozenEncoder::identity(d), &p, &cfg, Some(&p)).unwrap();
        assert!(*rep.prototype_mse_history.last().unwrap() < 1e-10);
        assert!(rep.input_mse.unwrap() < 1e-10);
        assert_eq!(rep.prototype_mse_history.len(), 1000 / 10 + 1);
    }
}

#[test]
fn mlp_inversion_with_halving_descends() {
    let enc = FrozenEncoder::mlp2(64, 16, 42);
    let mut r = rng(42);
    let source = random_vec(&mut r, 64, 1.0);
    let target = enc.encode(&source).unwrap();
    let cfg = AttackConfig { iterations: 10_000, ..AttackConfig::default() };
    let rep = hijack_attack(&enc, &target, &cfg, Some(&source)).unwrap();
    let h = &rep.prototype_mse_history;
    assert!(h.last().unwrap() <= &(0.1 * h[0]), "{} vs {}", h.last().unwrap(), h[0]);
    for w in h.windows(2) {
        assert!(w[1] <= w[0]);
    }
    assert_eq!(rep.aborted_at, None);
    let again = hijack_attack(&enc, &target, &cfg, Some(&source)).unwrap();
    assert_eq!(rep, again);
}

#[test]
fn gaussian_start_is_deterministic() {
    let enc = FrozenEncoder::mlp2(12, 6, 3);
    let target = random_vec(&mut rng(43), 6, 0.3);
    let cfg = AttackConfig { iterations: 300, log_every: 7, init: AttackInit::Gaussian { seed: 9 }, step_rule: StepRule::Fixed, learning_rate: 0.1 };
    let a = hijack_attack(&enc, &target, &cfg, None).unwrap();
    let b = hijack_attack(&enc, &target, &cfg, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.logged_iterations.len(), 300 / 7 + 1);
    assert!(a.input_mse.is_none());
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let mut r = rng(44);
    for case in 0..100 {
        let d_in = r.random_range(2..10);
        let d_emb = r.random_range(2..8);
        let enc = FrozenEncoder::mlp2(d_in, d_emb, 1000 + case);
        let x = random_vec(&mut r, d_in, 1.0);
        let p = random_vec(&mut r, d_emb, 0.5);
        let (_, g) = attack_objective(&enc, &x, &p).unwrap();
        let numeric = finite_diff_grad(|v| attack_objective(&enc, v, &p).unwrap().0, &x, 1e-5);
        let err = relative_error(&g, &numeric, 1e-8);
        assert!(err < 1e-4, "case {case}: {err}");
    }
}

#[test]
fn a_mean_prototype_matches_no_single_source() {
    let mut r = rng(45);
    for _ in 0..50 {
        let d = r.random_range(2..8);
        let count = r.random_range(2..6);
        let sources: Vec<Vec<f64>> = (0..count).map(|_| random_vec(&mut r, d, 1.0)).collect();
        let mean: Vec<f64> = (0..d).map(|j| sources.iter().map(|s| s[j]).sum::<f64>() / count as f64).collect();
        let cfg = AttackConfig { iterations: 200, ..AttackConfig::default() };
        let rep = hijack_attack(&FrozenEncoder::identity(d), &mean, &cfg, None).unwrap();
        let mut d_min = f64::INFINITY;
        for i in 0..count {
            for j in i + 1..count {
                d_min = d_min.min(squared_distance(&sources[i], &sources[j]));
            }
        }
        let dists: Vec<f64> = sources.iter().map(|s| squared_distance(&rep.x_star, s)).collect();
        let max = dists.iter().copied().fold(0.0, f64::max);
        let mean_dist = dists.iter().sum::<f64>() / count as f64;
        assert!(max >= 0.25 * d_min - 1e-9);
        assert!(mean_dist >= 0.25 * d_min - 1e-9);
    }
}
