mod common;

use common::{brute_force_inner, dv, finite_diff_grad, random_cournot_signal, random_raw, theta_true};
use invgame::forward::{cournot_closed_form, observe};
use invgame::game::{cournot_game, ThetaBox};
use invgame::kkt::{
    assemble_kkt, inner_dual_solve, lipschitz_probe, loss, matrix_certificates, reduced_loss, subgradient, KktData,
    INNER_TOL,
};
use invgame::Error;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noisy_kkt(rng: &mut ChaCha8Rng) -> KktData {
    let game = cournot_game(3, 100.0).unwrap();
    let u = random_cournot_signal(rng);
    let eq = cournot_closed_form(&u, &theta_true()).unwrap();
    let obs = observe(&eq, &u, 1, rng, 1.0);
    assemble_kkt(&game, &obs.y, &u).unwrap()
}

#[test]
fn inner_solve_matches_grid_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..40 {
        let (m, p) = [(1, 0), (2, 0), (1, 1), (0, 1), (2, 1)][i % 5];
        let n = rng.random_range((m + p).max(2)..=4);
        let raw = random_raw(&mut rng, n, m, p);
        let theta = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let duals = inner_dual_solve(&raw.kkt(), &theta, INNER_TOL).unwrap();
        let ours = raw.objective(&theta, &duals.lambda, &duals.nu);
        let oracle = brute_force_inner(&raw, &theta);
        assert!(ours <= oracle + 1e-4 * (1.0 + oracle), "{ours} vs {oracle}");
        assert!(oracle <= ours + 1e-4 * (1.0 + ours), "{ours} vs {oracle}");
    }
}

#[test]
fn reduced_form_agrees_with_direct_route() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for i in 0..300 {
        let data = if i % 2 == 0 {
            noisy_kkt(&mut rng)
        } else {
            let raw = random_raw(&mut rng, 4, 2, 1);
            raw.kkt()
        };
        assert!(data.full_rank());
        let theta = DVector::from_fn(data.n_params(), |_, _| rng.random_range(0.0..100.0));
        let a = loss(&data, &theta).unwrap().value;
        let b = reduced_loss(&data, &theta).unwrap().value;
        assert!((a - b).abs() <= 1e-6 * (1.0 + a), "{a} vs {b}");
    }
}

#[test]
fn rank_deficient_constraints_disable_reduced_path() {
    let n = 3;
    let grad_h = DMatrix::from_row_slice(n, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    let data = KktData::from_parts(
        DMatrix::identity(n, n),
        dv(&[1.0, -2.0, 0.5]),
        grad_h,
        DVector::zeros(2),
        DMatrix::zeros(n, 0),
        DVector::zeros(0),
    )
    .unwrap();
    assert!(!data.full_rank());
    let cert = matrix_certificates(&data);
    assert!(!cert.reduced_enabled());
    assert!(!cert.passes());
    assert!(matches!(reduced_loss(&data, &dv(&[0.0, 0.0, 0.0])), Err(Error::RankDeficient { .. })));
    assert!(loss(&data, &dv(&[0.0, 0.0, 0.0])).is_ok());
}

#[test]
fn certificates_hold_on_observed_rounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..200 {
        let cert = matrix_certificates(&noisy_kkt(&mut rng));
        assert!(cert.passes(), "{cert:?}");
    }
}

#[test]
fn subgradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..50 {
        let data = noisy_kkt(&mut rng);
        let theta = DVector::from_fn(3, |_, _| rng.random_range(1.0..99.0));
        let s = subgradient(&data, &theta).unwrap();
        let fd = finite_diff_grad(|t| loss(&data, t).unwrap().value, &theta, 1e-4);
        assert!((&s - &fd).amax() <= 1e-4 * (1.0 + s.amax()), "{s} vs {fd}");
    }
}

#[test]
fn midpoint_convexity() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let data: Vec<_> = (0..20).map(|_| noisy_kkt(&mut rng)).collect();
    let domain = ThetaBox::uniform(3, 0.0, 100.0).unwrap();
    for _ in 0..2000 {
        let d = &data[rng.random_range(0..data.len())];
        let a = domain.sample(&mut rng);
        let b = domain.sample(&mut rng);
        let mid = (&a + &b) * 0.5;
        let (la, lb, lm) = (loss(d, &a).unwrap().value, loss(d, &b).unwrap().value, loss(d, &mid).unwrap().value);
        assert!(lm <= 0.5 * (la + lb) + 1e-9 * (1.0 + la + lb));
    }
}

#[test]
fn probe_bounds_held_out_ratios() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let data: Vec<_> = (0..15).map(|_| noisy_kkt(&mut rng)).collect();
    let domain = ThetaBox::uniform(3, 0.0, 100.0).unwrap();
    let c_hat = lipschitz_probe(&data, &domain, 500, &mut rng).unwrap();
    for _ in 0..2000 {
        let d = &data[rng.random_range(0..data.len())];
        let a = domain.sample(&mut rng);
        let b = domain.sample(&mut rng);
        let ratio = (loss(d, &a).unwrap().value - loss(d, &b).unwrap().value).abs() / (&a - &b).norm();
        assert!(ratio <= 1.05 * c_hat);
    }
}

#[test]
fn exact_observation_has_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let game = cournot_game(3, 100.0).unwrap();
    for _ in 0..100 {
        let u = random_cournot_signal(&mut rng);
        let eq = cournot_closed_form(&u, &theta_true()).unwrap();
        let data = assemble_kkt(&game, &eq.x_star, &u).unwrap();
        let l = loss(&data, &theta_true()).unwrap();
        assert!(l.value <= 1e-12 * (1.0 + eq.x_star.norm_squared()), "{}", l.value);
        assert!((l.lambda[0] - eq.lambda[0]).abs() <= 1e-6 * (1.0 + eq.lambda[0]));
    }
}
