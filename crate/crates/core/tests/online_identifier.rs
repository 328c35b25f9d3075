mod common;

use common::{brute_force_update, random_cournot_signal, random_raw, theta_true, Raw};
use invgame::forward::{cournot_closed_form, observe, Observation};
use invgame::game::{cournot_game, ThetaBox};
use invgame::kkt::{assemble_kkt, loss};
use invgame::online::{
    block_coordinate_update, project_theta, regularized_objective, run_online, update_step, IdentifierState,
    STATIONARITY_TOL,
};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stream(seed: u64, rounds: usize, noise: f64) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (1..=rounds)
        .map(|k| {
            let u = random_cournot_signal(&mut rng);
            let eq = cournot_closed_form(&u, &theta_true()).unwrap();
            observe(&eq, &u, k, &mut rng, noise)
        })
        .collect()
}

fn raw_of(game: &invgame::ParametricGame, obs: &Observation) -> Raw {
    let data = assemble_kkt(game, &obs.y, &obs.u).unwrap();
    Raw {
        basis: data.basis().clone(),
        offset: data.offset().clone(),
        grad_h: data.grad_h().clone(),
        h: data.h().clone(),
        grad_g: data.grad_g().clone(),
        g: data.g().clone(),
    }
}

#[test]
fn update_matches_brute_force_oracle() {
    let game = cournot_game(3, 100.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for (k, obs) in stream(41, 12, 1.0).iter().enumerate() {
        let raw = raw_of(&game, obs);
        let theta_k = game.domain().sample(&mut rng);
        let mu1 = 0.05 * (k + 1) as f64;
        let state = IdentifierState::new(theta_k.clone(), mu1, game.domain().clone()).unwrap();
        let r = update_step(&state, obs, &raw.kkt()).unwrap();
        let (oracle, _, _) = brute_force_update(&raw, &theta_k, state.learning_rate(), 10, &mut rng);
        assert!((&r.theta_tilde - &oracle).amax() <= 1e-5, "{} vs {}", r.theta_tilde, oracle);
        assert!(r.stationarity_residual <= STATIONARITY_TOL);
    }
}

#[test]
fn update_matches_oracle_with_equalities() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..10 {
        let raw = random_raw(&mut rng, 4, 2, 1);
        let theta_k = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
        let mu = rng.random_range(0.05..1.0);
        let (ours, _, _) = block_coordinate_update(&theta_k, mu, &raw.kkt()).unwrap();
        let (oracle, _, _) = brute_force_update(&raw, &theta_k, mu, 10, &mut rng);
        assert!((&ours - &oracle).amax() <= 1e-5, "{ours} vs {oracle}");
    }
}

#[test]
fn proximal_step_never_increases_regularized_objective() {
    let game = cournot_game(3, 100.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for obs in stream(43, 60, 1.0) {
        let data = assemble_kkt(&game, &obs.y, &obs.u).unwrap();
        let theta_k = game.domain().sample(&mut rng);
        let k = rng.random_range(1..200);
        let mu = 0.3 / (k as f64).sqrt();
        let (tilde, _, _) = block_coordinate_update(&theta_k, mu, &data).unwrap();
        let before = regularized_objective(&data, &theta_k, mu, &theta_k).unwrap();
        let after = regularized_objective(&data, &theta_k, mu, &tilde).unwrap();
        assert!(after <= before + 1e-9 * (1.0 + before));
    }
}

#[test]
fn projection_satisfies_pythagoras() {
    let domain = ThetaBox::uniform(3, 0.0, 100.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..10_000 {
        let t = DVector::from_fn(3, |_, _| rng.random_range(-300.0..400.0));
        let z = domain.sample(&mut rng);
        let p = project_theta(&t, &domain);
        let slack = (&t - &z).norm_squared() - (&t - &p).norm_squared() - (&p - &z).norm_squared();
        assert!(slack >= -1e-12 * (1.0 + (&t - &z).norm_squared()));
    }
}

#[test]
fn noiseless_run_from_truth_stays_at_truth() {
    let game = cournot_game(3, 100.0).unwrap();
    let state = run_online(&game, &stream(45, 50, 0.0), &theta_true(), 0.1).unwrap();
    for r in state.trajectory() {
        assert!((&r.theta - theta_true()).amax() <= 1e-9);
        assert!(r.loss <= 1e-12);
    }
}

#[test]
fn estimates_stay_in_the_box() {
    let game = cournot_game(3, 100.0).unwrap();
    let state = run_online(&game, &stream(46, 80, 1.0), &game.domain().midpoint(), 0.5).unwrap();
    assert!(state.trajectory().iter().all(|r| game.domain().contains(&r.theta)));
    assert!(game.domain().contains(state.theta()));
}

#[test]
fn realized_loss_is_the_loss_at_the_current_estimate() {
    let game = cournot_game(3, 100.0).unwrap();
    let obs = stream(47, 10, 1.0);
    let state = run_online(&game, &obs, &game.domain().midpoint(), 0.1).unwrap();
    for (r, o) in state.trajectory().iter().zip(&obs) {
        let data = assemble_kkt(&game, &o.y, &o.u).unwrap();
        assert_eq!(r.loss, loss(&data, &r.theta).unwrap().value);
    }
}
