mod common;

use common::{random_vec, rng};
use mpft::tensor::{
    dot, finite_diff_grad, flatten, log_softmax, relative_error, softmax, softmax_cross_entropy, unflatten, Matrix, Optimizer,
};
use proptest::prelude::*;

fn matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
    let mut r = rng(seed);
    Matrix::from_fn(rows, cols, |_, _| mpft::world::gauss(&mut r))
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let lp = log_softmax(&logits);
        for (a, b) in p.iter().zip(&lp) {
            prop_assert!((a.ln() - b).abs() < 1e-9 || *a == 0.0);
        }
    }

    #[test]
    fn cross_entropy_gradient_is_centered_and_exact(logits in prop::collection::vec(-5.0f64..5.0, 2..8), pick in 0usize..8) {
        let label = pick % logits.len();
        let (loss, grad) = softmax_cross_entropy(&logits, label).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert!(grad.iter().sum::<f64>().abs() < 1e-12);
        let numeric = finite_diff_grad(|z| softmax_cross_entropy(z, label).unwrap().0, &logits, 1e-5);
        prop_assert!(relative_error(&grad, &numeric, 1e-10) < 1e-6);
    }

    #[test]
    fn transpose_product_is_the_adjoint(seed in 0u64..10_000, rows in 1usize..7, cols in 1usize..7) {
        let a = matrix(seed, rows, cols);
        let mut r = rng(seed + 1);
        let x = random_vec(&mut r, cols, 1.0);
        let y = random_vec(&mut r, rows, 1.0);
        prop_assert!((dot(&a.matvec(&x), &y) - dot(&x, &a.matvec_t(&y))).abs() < 1e-10);
        prop_assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn spectral_norm_bounds_every_direction(seed in 0u64..10_000, rows in 1usize..7, cols in 1usize..7) {
        let a = matrix(seed, rows, cols);
        let s = a.spectral_norm();
        prop_assert!(s * s <= a.frobenius_sq() + 1e-9);
        prop_assert!(s * s * rows.min(cols) as f64 >= a.frobenius_sq() - 1e-9);
        let mut r = rng(seed + 2);
        for _ in 0..20 {
            let x = random_vec(&mut r, cols, 1.0);
            let ax = a.matvec(&x);
            prop_assert!(dot(&ax, &ax).sqrt() <= s * dot(&x, &x).sqrt() * (1.0 + 1e-9));
        }
        // Power iteration approaches the top singular value from below.
        let mut v = vec![1.0; cols];
        for _ in 0..500 {
            let w = a.matvec_t(&a.matvec(&v));
            let n = dot(&w, &w).sqrt();
            if n == 0.0 { break; }
            v = w.iter().map(|x| x / n).collect();
        }
        let av = a.matvec(&v);
        prop_assert!(dot(&av, &av).sqrt() <= s * (1.0 + 1e-9));
    }

    #[test]
    fn flatten_round_trips(seed in 0u64..10_000, shapes in prop::collection::vec((1usize..5, 1usize..5), 1..4)) {
        let parts: Vec<Matrix> = shapes.iter().enumerate().map(|(i, &(r, c))| matrix(seed + i as u64, r, c)).collect();
        let flat = flatten(&parts);
        prop_assert_eq!(flat.len(), parts.iter().map(Matrix::len).sum::<usize>());
        prop_assert_eq!(unflatten(&parts, &flat), parts);
    }

    #[test]
    fn adam_steps_stay_near_the_learning_rate(g in prop::collection::vec(-1e3f64..1e3, 1..6)) {
        prop_assume!(g.iter().all(|v| v.abs() > 1e-3));
        let mut params = vec![Matrix::zeros(1, g.len())];
        let grads = vec![Matrix::from_vec(1, g.len(), g.clone()).unwrap()];
        let mut opt = Optimizer::adam(0.01);
        opt.step(&mut params, &grads).unwrap();
        prop_assert_eq!(opt.step_count(), 1);
        for (p, gi) in params[0].data().iter().zip(&g) {
            prop_assert!((p.abs() - 0.01).abs() < 1e-6);
            prop_assert!(p.signum() == -gi.signum());
        }
    }
}

#[test]
fn affine_functions_differentiate_exactly() {
    let f = |x: &[f64]| 3.0 * x[0] - 2.0 * x[1] + 7.0;
    for h in [1e-1, 1e-3, 1e-6] {
        let g = finite_diff_grad(f, &[0.3, -1.2], h);
        assert!((g[0] - 3.0).abs() < 1e-8 && (g[1] + 2.0).abs() < 1e-8);
    }
}
