//! Online identification: one proximal KKT-loss step per observation, then
//! projection onto the parameter box.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::forward::Observation;
use crate::game::{ParametricGame, ThetaBox};
use crate::kkt::{self, KktData};
use crate::linalg;
use crate::qp;

/// Bound on `‖θ̃ − θᵏ + μ_k s(θ̃)‖` accepted from an update.
pub const STATIONARITY_TOL: f64 = 1e-6;
const BCD_CHANGE_TOL: f64 = 1e-10;
const BCD_MAX_SWEEPS: usize = 10_000;

/// `μ_k = μ₁ / √k`.
pub fn learning_rate(k: usize, mu1: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("round index starts at 1".into()));
    }
    if !(mu1 > 0.0 && mu1.is_finite()) {
        return Err(Error::InvalidArgument(format!("mu1 must be positive, got {mu1}")));
    }
    Ok(mu1 / (k as f64).sqrt())
}

/// Euclidean projection onto the box.
pub fn project_theta(theta_tilde: &DVector<f64>, domain: &ThetaBox) -> DVector<f64> {
    domain.project(theta_tilde)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMethod {
    Elimination,
    BlockCoordinate,
}

#[derive(Debug, Clone)]
pub struct UpdateResult {
    pub theta_tilde: DVector<f64>,
    pub theta_next: DVector<f64>,
    pub lambda: DVector<f64>,
    pub nu: DVector<f64>,
    pub stationarity_residual: f64,
    pub method: UpdateMethod,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub round: usize,
    /// Estimate used in this round, before the update.
    pub theta: DVector<f64>,
    /// Realized loss `l(θᵏ; yᵏ, uᵏ)`.
    pub loss: f64,
    pub residual: f64,
    pub wall_time: f64,
}

/// State of the online identifier between rounds.
#[derive(Debug, Clone)]
pub struct IdentifierState {
    theta: DVector<f64>,
    round: usize,
    mu1: f64,
    domain: ThetaBox,
    trajectory: Vec<TrajectoryRecord>,
}

impl IdentifierState {
    pub fn new(theta_init: DVector<f64>, mu1: f64, domain: ThetaBox) -> Result<IdentifierState> {
        learning_rate(1, mu1)?;
        if theta_init.len() != domain.dim() {
            return Err(Error::Dimension { what: "initial parameter", expected: domain.dim(), got: theta_init.len() });
        }
        if !domain.contains(&theta_init) {
            return Err(Error::InvalidArgument(format!("initial parameter {:?} lies outside the box", theta_init.as_slice())));
        }
        Ok(IdentifierState { theta: theta_init, round: 1, mu1, domain, trajectory: Vec::new() })
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    /// Index of the next round to be played.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn mu1(&self) -> f64 {
        self.mu1
    }

    pub fn domain(&self) -> &ThetaBox {
        &self.domain
    }

    pub fn trajectory(&self) -> &[TrajectoryRecord] {
        &self.trajectory
    }

    pub fn learning_rate(&self) -> f64 {
        self.mu1 / (self.round as f64).sqrt()
    }

    /// Plays one round: records the realized loss, updates and projects.
    pub fn step(&mut self, game: &ParametricGame, obs: &Observation) -> Result<UpdateResult> {
        let round = self.round;
        let at_round = |e: Error| e.at_round(obs.round);
        game.check_strategy(&obs.y).map_err(at_round)?;
        game.check_signal(&obs.u).map_err(at_round)?;

        let start = Instant::now();
        let data = kkt::assemble_kkt(game, &obs.y, &obs.u).map_err(at_round)?;
        let update = update_step(self, obs, &data).map_err(at_round)?;
        let wall_time = start.elapsed().as_secs_f64();

        let loss = kkt::loss(&data, &self.theta).map_err(at_round)?.value;
        self.trajectory.push(TrajectoryRecord {
            round,
            theta: self.theta.clone(),
            loss,
            residual: update.stationarity_residual,
            wall_time,
        });
        self.theta = update.theta_next.clone();
        self.round += 1;
        Ok(update)
    }
}

/// Solves `min ½‖θ − θᵏ‖² + μ_k L(θ, λ, ν)` over `θ` free, `λ ≥ 0`, `ν` free and
/// projects the minimizer onto the box.
///
/// `θ` is eliminated in closed form: with `W = (I + 2μ MᵀM)⁻¹` the problem in
/// `z = (λ, ν)` is `min (F_k + Bz)ᵀ W (F_k + Bz) + ‖Hλ‖²` where `B = [∇h ∇g]`,
/// and `θ̃ = θᵏ − 2μ M W (F_k + Bz*)`. If that route fails or misses the
/// stationarity tolerance, block-coordinate descent takes over.
pub fn update_step(state: &IdentifierState, obs: &Observation, kkt: &KktData) -> Result<UpdateResult> {
    if obs.y.len() != kkt.n() {
        return Err(Error::Dimension { what: "observed strategy", expected: kkt.n(), got: obs.y.len() });
    }
    let mu = state.learning_rate();
    let eliminated = eliminated_update(state.theta(), mu, kkt).and_then(|(theta_tilde, lambda, nu)| {
        finish(state, mu, kkt, theta_tilde, lambda, nu, UpdateMethod::Elimination)
    });
    match eliminated {
        Ok(r) if r.stationarity_residual <= STATIONARITY_TOL => Ok(r),
        _ => {
            let (theta_tilde, lambda, nu) = block_coordinate_update(state.theta(), mu, kkt)?;
            let r = finish(state, mu, kkt, theta_tilde, lambda, nu, UpdateMethod::BlockCoordinate)?;
            if r.stationarity_residual > STATIONARITY_TOL {
                return Err(Error::NotConverged {
                    method: "proximal update",
                    iterations: BCD_MAX_SWEEPS,
                    residual: r.stationarity_residual,
                });
            }
            Ok(r)
        }
    }
}

fn finish(
    state: &IdentifierState,
    mu: f64,
    kkt: &KktData,
    theta_tilde: DVector<f64>,
    lambda: DVector<f64>,
    nu: DVector<f64>,
    method: UpdateMethod,
) -> Result<UpdateResult> {
    if lambda.iter().any(|l| *l < 0.0) || theta_tilde.iter().any(|t| !t.is_finite()) {
        return Err(Error::NotConverged { method: "proximal update", iterations: 0, residual: f64::INFINITY });
    }
    let s = kkt::subgradient(kkt, &theta_tilde)?;
    let stationarity_residual = (&theta_tilde - state.theta() + s * mu).norm();
    let theta_next = project_theta(&theta_tilde, state.domain());
    Ok(UpdateResult { theta_tilde, theta_next, lambda, nu, stationarity_residual, method })
}

fn prox_weight(mu: f64, kkt: &KktData) -> Result<DMatrix<f64>> {
    let m = kkt.basis();
    let n = kkt.n();
    let a = DMatrix::identity(n, n) + m.tr_mul(m) * (2.0 * mu);
    linalg::spd_inverse(&a, "proximal weight")
}

type Triple = (DVector<f64>, DVector<f64>, DVector<f64>);

fn eliminated_update(theta_k: &DVector<f64>, mu: f64, kkt: &KktData) -> Result<Triple> {
    let w = prox_weight(mu, kkt)?;
    let f_k = kkt.pseudo_gradient(theta_k)?;
    let duals = kkt::solve_duals(kkt, &f_k, Some(&w), kkt::INNER_TOL)?;
    let z_part = &duals.lambda;
    let r = &w * (&f_k + kkt.grad_h() * z_part + kkt.grad_g() * &duals.nu);
    let theta_tilde = theta_k - kkt.basis() * r * (2.0 * mu);
    Ok((theta_tilde, duals.lambda, duals.nu))
}

/// Alternates the exact `(θ, ν)` minimization for fixed `λ` with the
/// nonnegative least-squares step in `λ` for fixed `(θ, ν)`.
pub fn block_coordinate_update(theta_k: &DVector<f64>, mu: f64, kkt: &KktData) -> Result<Triple> {
    let (m, p) = (kkt.m(), kkt.p());
    let w = prox_weight(mu, kkt)?;
    let f_k = kkt.pseudo_gradient(theta_k)?;
    let grad_h = kkt.grad_h();
    let grad_g = kkt.grad_g();

    let nu_solver = if p > 0 {
        let gram = grad_g.transpose() * &w * grad_g;
        Some((gram.pseudo_inverse(1e-12).map_err(Error::Singular)?, grad_g.transpose() * &w))
    } else {
        None
    };
    let mut lam_hess = grad_h.tr_mul(grad_h) * 2.0;
    for q in 0..m {
        lam_hess[(q, q)] += 2.0 * kkt.h()[q] * kkt.h()[q];
    }

    let mut lambda = DVector::zeros(m);
    let mut nu = DVector::zeros(p);
    let mut theta = theta_k.clone();
    for _ in 0..BCD_MAX_SWEEPS {
        let v = &f_k + grad_h * &lambda;
        let new_nu = match &nu_solver {
            Some((pinv, gtw)) => -(pinv * (gtw * &v)),
            None => DVector::zeros(0),
        };
        let r = &w * (v + grad_g * &new_nu);
        let new_theta = theta_k - kkt.basis() * r * (2.0 * mu);

        let new_lambda = if m > 0 {
            let base = kkt.pseudo_gradient(&new_theta)? + grad_g * &new_nu;
            let lin = grad_h.tr_mul(&base) * 2.0;
            match qp::solve_active_set(&lam_hess, &lin, m, kkt::INNER_TOL) {
                Ok(sol) => sol.z,
                Err(Error::Singular(_)) => qp::solve_projected(&lam_hess, &lin, m, kkt::INNER_TOL, 1_000_000)?.z,
                Err(e) => return Err(e),
            }
        } else {
            DVector::zeros(0)
        };
        let change = (&new_theta - &theta)
            .amax()
            .max(if m > 0 { (&new_lambda - &lambda).amax() } else { 0.0 })
            .max(if p > 0 { (&new_nu - &nu).amax() } else { 0.0 });
        theta = new_theta;
        lambda = new_lambda;
        nu = new_nu;
        if change <= BCD_CHANGE_TOL {
            return Ok((theta, lambda, nu));
        }
    }
    Ok((theta, lambda, nu))
}

/// Runs the identifier over `observations` starting from `theta_init`.
pub fn run_online(
    game: &ParametricGame,
    observations: &[Observation],
    theta_init: &DVector<f64>,
    mu1: f64,
) -> Result<IdentifierState> {
    let mut state = IdentifierState::new(theta_init.clone(), mu1, game.domain().clone())?;
    for obs in observations {
        state.step(game, obs)?;
    }
    Ok(state)
}

/// Regularized round objective `½‖θ − θᵏ‖² + μ l(θ)`.
pub fn regularized_objective(kkt: &KktData, theta_k: &DVector<f64>, mu: f64, theta: &DVector<f64>) -> Result<f64> {
    Ok(0.5 * (theta - theta_k).norm_squared() + mu * kkt::loss(kkt, theta)?.value)
}

pub const TRAJECTORY_VERSION_LINE: &str = "# invgame trajectory v1";

/// Writes `k,theta_1..,loss,residual,wall_time_s`.
pub fn write_trajectory_csv<W: Write>(records: &[TrajectoryRecord], dim: usize, out: W) -> Result<()> {
    let mut out = out;
    writeln!(out, "{TRAJECTORY_VERSION_LINE}")?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["k".to_string()];
    header.extend((1..=dim).map(|i| format!("theta_{i}")));
    header.extend(["loss", "residual", "wall_time_s"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mut row = vec![r.round.to_string()];
        row.extend(r.theta.iter().map(|v| v.to_string()));
        row.push(r.loss.to_string());
        row.push(r.residual.to_string());
        row.push(r.wall_time.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}
