use kdlab::dynamics::{
    correlations, decorrelation, ema_equivalence, low_rank_gap, projector_velocity, rank_bound_holds,
    record_spectrum, step, whiten, CorrelationPair, DynamicsConfig, LowRankConfig,
};
use kdlab::gradcheck::{central_difference, relative_error};
use kdlab::kdcore::ProjectorState;
use kdlab::linalg::{numerical_rank, Matrix, Rng};

fn half_sq_residual(zs: &Matrix, wp: &Matrix, zt: &Matrix) -> f64 {
    0.5 * zs.matmul(wp).unwrap().sub(zt).unwrap().frobenius_norm_sq()
}

#[test]
fn velocity_is_negative_gradient() {
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let mut rng = Rng::new(seed);
        let (b, ds, dt) = (6 + rng.below(10), 2 + rng.below(5), 2 + rng.below(6));
        let zs = rng.normal_matrix(b, ds);
        let zt = rng.normal_matrix(b, dt);
        let wp = rng.normal_matrix(ds, dt);
        let c = correlations(&zs, &zt).unwrap();
        let v = projector_velocity(&c, &wp).unwrap();
        let numeric = central_difference(&wp, 1e-6, |w| Ok(half_sq_residual(&zs, w, &zt))).unwrap();
        worst = worst.max(relative_error(&v.scale(-1.0), &numeric));
    }
    assert!(worst <= 1e-6, "worst relative error {worst:e}");
}

#[test]
fn whitened_iteration_reaches_fixed_point() {
    let mut rng = Rng::new(11);
    let cst = rng.normal_matrix(5, 7);
    let c = CorrelationPair::new(Matrix::identity(5), cst.clone()).unwrap();
    let cfg = DynamicsConfig::new(0.1, 0.0, 200);
    let mut wp = Matrix::zeros(5, 7);
    let mut reached = None;
    for t in 1..=200 {
        wp = step(&wp, &c, &cfg).unwrap();
        if reached.is_none() && wp.sub(&cst).unwrap().frobenius_norm() <= 1e-6 * cst.frobenius_norm() {
            reached = Some(t);
        }
    }
    assert!(reached.is_some(), "not within 1e-6 after 200 steps");
    assert_eq!(projector_velocity(&c, &cst).unwrap().max_abs(), 0.0);
}

fn whitened_pair(rng: &mut Rng, b: usize, ds: usize, dt: usize) -> CorrelationPair {
    let zs = whiten(&rng.normal_matrix(b, ds)).unwrap();
    let zt = rng.normal_matrix(b, dt);
    let c = correlations(&zs, &zt).unwrap();
    assert!(c.is_whitened());
    c
}

#[test]
fn whitened_stream_is_a_moving_average() {
    let mut rng = Rng::new(5);
    let stream: Vec<_> = (0..50).map(|_| whitened_pair(&mut rng, 40, 6, 9)).collect();
    let check = ema_equivalence(&stream, &DynamicsConfig::new(0.05, 0.01, 50)).unwrap();
    assert!(check.max_abs_diff <= 1e-12, "{:e}", check.max_abs_diff);
}

#[test]
fn equal_decay_and_rate_halve_the_target() {
    let mut rng = Rng::new(6);
    let c = whitened_pair(&mut rng, 30, 4, 5);
    let stream = vec![c.clone(); 300];
    let check = ema_equivalence(&stream, &DynamicsConfig::new(0.1, 0.1, 300)).unwrap();
    let err = check.simulated.sub(&c.cst.scale(0.5)).unwrap().max_abs();
    assert!(err <= 1e-9, "{err:e}");
}

#[test]
fn unwhitened_stream_rejected() {
    let mut rng = Rng::new(7);
    let c = correlations(&rng.normal_matrix(20, 3), &rng.normal_matrix(20, 4)).unwrap();
    assert!(ema_equivalence(&[c], &DynamicsConfig::new(0.1, 0.0, 1)).is_err());
}

#[test]
fn low_rank_optimum_matches_truncation() {
    let cfg = LowRankConfig::default();
    for seed in 0..10 {
        let mut rng = Rng::new(100 + seed);
        let zs = whiten(&rng.normal_matrix(32, 8)).unwrap();
        let zt = rng.normal_matrix(32, 12);
        for r in 1..=3 {
            let gap = low_rank_gap(&zs, &zt, r, &cfg).unwrap();
            assert!(gap.relative_gap() <= 0.01, "seed {seed} r {r}: {}", gap.relative_gap());
            assert!(gap.constrained_loss >= gap.oracle_loss * (1.0 - 1e-9));
            let product = zs.matmul(&gap.weights).unwrap();
            let tol = kdlab::dynamics::RANK_TOL;
            assert!(numerical_rank(&product, tol).unwrap() <= numerical_rank(&gap.weights, tol).unwrap());
            assert!(numerical_rank(&gap.weights, tol).unwrap() <= r);
            assert!(rank_bound_holds(&zs, &gap.weights).unwrap());
        }
    }
}

#[test]
fn spectrum_ignores_rotations() {
    let mut rng = Rng::new(8);
    let w = rng.normal_matrix(6, 4);
    let q = whiten(&rng.normal_matrix(6, 6)).unwrap();
    let base = record_spectrum(&ProjectorState::linear(w.clone())).unwrap();
    let rotated = record_spectrum(&ProjectorState::linear(q.matmul(&w).unwrap())).unwrap();
    assert_eq!(base.len(), 4);
    assert_eq!(base[0], 1.0);
    for (a, b) in base.iter().zip(&rotated) {
        assert!((a - b).abs() < 1e-12);
    }
    let scaled = record_spectrum(&ProjectorState::linear(w.scale(3.5))).unwrap();
    for (a, b) in base.iter().zip(&scaled) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn decorrelation_invariances() {
    let mut rng = Rng::new(9);
    let x = rng.normal_matrix(64, 5);
    let y = rng.normal_matrix(64, 7);
    let base = decorrelation(&x, &y).unwrap();
    let perm = rng.permutation(7);
    let permuted = Matrix::from_fn(64, 7, |i, j| y[(i, perm[j])]);
    let rescaled = Matrix::from_fn(64, 7, |i, j| (j as f64 + 0.5) * y[(i, j)] - 2.0);
    for other in [permuted, rescaled] {
        assert!((decorrelation(&x, &other).unwrap() - base).abs() < 1e-12);
    }
    assert!((decorrelation(&x, &x.scale(-2.0)).unwrap() - 1.0).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&base));
}

#[test]
fn independent_features_score_low() {
    for seed in 0..10 {
        let mut rng = Rng::new(seed);
        let d = decorrelation(&rng.normal_matrix(256, 16), &rng.normal_matrix(256, 16)).unwrap();
        assert!(d < 0.5, "seed {seed}: {d}");
    }
}
