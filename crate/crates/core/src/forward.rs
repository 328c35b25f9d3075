//! Variational equilibria of a parametric game and noisy observations of them.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::game::{CournotModel, GameModel, ParametricGame, Signal};
use crate::kkt;
use crate::linalg::inf_norm;

/// A variational equilibrium with its shared-constraint multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumResult {
    pub x_star: DVector<f64>,
    pub lambda: DVector<f64>,
    pub nu: DVector<f64>,
    /// Infinity norm of stationarity, complementarity, primal and dual
    /// feasibility violations.
    pub kkt_residual: f64,
}

/// One round of data: the signal and a noise-corrupted equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub round: usize,
    pub u: Signal,
    pub y: DVector<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct VeOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for VeOptions {
    fn default() -> Self {
        VeOptions { tol: 1e-8, max_iter: 100_000 }
    }
}

/// KKT residual of `(x, λ, ν)` for `VI(X(u), F(·, u, θ))`.
pub fn kkt_residual(
    game: &ParametricGame,
    x: &DVector<f64>,
    u: &Signal,
    theta: &DVector<f64>,
    lambda: &DVector<f64>,
    nu: &DVector<f64>,
) -> Result<f64> {
    let f = game.pseudo_gradient(x, u, theta)?;
    let ce = game.constraint_eval(x, u)?;
    Ok(residual_parts(&f, &ce.h, &ce.grad_h, &ce.g, &ce.grad_g, lambda, nu))
}

fn residual_parts(
    f: &DVector<f64>,
    h: &DVector<f64>,
    grad_h: &DMatrix<f64>,
    g: &DVector<f64>,
    grad_g: &DMatrix<f64>,
    lambda: &DVector<f64>,
    nu: &DVector<f64>,
) -> f64 {
    let stationarity = inf_norm(&(f + grad_h * lambda + grad_g * nu));
    let complementarity = inf_norm(&h.component_mul(lambda));
    let primal = h.iter().fold(0.0_f64, |a, v| a.max(*v)).max(inf_norm(g));
    let dual = lambda.iter().fold(0.0_f64, |a, v| a.max(-v));
    stationarity.max(complementarity).max(primal).max(dual)
}

/// Natural residual `‖x − Π(x − F(x))‖∞`.
fn natural_residual(game: &ParametricGame, x: &DVector<f64>, f: &DVector<f64>, u: &Signal) -> Result<f64> {
    Ok(inf_norm(&(x - game.project(&(x - f), u)?)))
}

/// Variational equilibrium of `game` at `(u, θ)` by the extragradient
/// projection method with a backtracked step, started from the projection
/// of the origin onto `X(u)`.
pub fn solve_ve(game: &ParametricGame, u: &Signal, theta: &DVector<f64>, tol: f64) -> Result<EquilibriumResult> {
    solve_ve_with(game, u, theta, &VeOptions { tol, ..VeOptions::default() })
}

pub fn solve_ve_with(
    game: &ParametricGame,
    u: &Signal,
    theta: &DVector<f64>,
    opts: &VeOptions,
) -> Result<EquilibriumResult> {
    game.check_theta(theta)?;
    game.check_signal(u)?;
    if opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {}", opts.tol)));
    }
    let field = |x: &DVector<f64>| game.pseudo_gradient(x, u, theta);

    let mut x = game.project(&DVector::zeros(game.n()), u)?;
    let mut fx = field(&x)?;
    let mut step = 1.0_f64;
    let mut last = f64::INFINITY;
    for _ in 0..opts.max_iter {
        if natural_residual(game, &x, &fx, u)? <= opts.tol {
            if let Some(eq) = certify(game, &x, u, theta, opts.tol)? {
                return Ok(eq);
            }
        }
        // backtrack until the step satisfies the local Lipschitz test
        let (xbar, fbar) = loop {
            let xbar = game.project(&(&x - &fx * step), u)?;
            let fbar = field(&xbar)?;
            let moved = (&xbar - &x).norm();
            if moved == 0.0 || step * (&fbar - &fx).norm() <= 0.9 * moved {
                break (xbar, fbar);
            }
            step *= 0.5;
            if step < 1e-300 {
                return Err(Error::NotConverged { method: "extragradient step search", iterations: 0, residual: f64::NAN });
            }
        };
        x = game.project(&(&x - &fbar * step), u)?;
        fx = field(&x)?;
        last = natural_residual(game, &xbar, &fbar, u)?;
        step *= 1.2;
    }
    Err(Error::NotConverged { method: "variational equilibrium", iterations: opts.max_iter, residual: last })
}

/// Recovers multipliers at `x` and accepts it if the full KKT residual is within `tol`.
fn certify(
    game: &ParametricGame,
    x: &DVector<f64>,
    u: &Signal,
    theta: &DVector<f64>,
    tol: f64,
) -> Result<Option<EquilibriumResult>> {
    let data = kkt::assemble_kkt(game, x, u)?;
    let duals = kkt::inner_dual_solve(&data, theta, kkt::INNER_TOL)?;
    let f = data.pseudo_gradient(theta)?;
    let residual = residual_parts(&f, data.h(), data.grad_h(), data.g(), data.grad_g(), &duals.lambda, &duals.nu);
    if residual <= tol {
        return Ok(Some(EquilibriumResult { x_star: x.clone(), lambda: duals.lambda, nu: duals.nu, kkt_residual: residual }));
    }
    Ok(None)
}

/// Closed-form variational equilibrium of the Cournot market.
///
/// Without the supply floor the first-order conditions give total supply
/// `S = (Σθ − N a) / ((N + 1) b)`. If `S ≥ q` that is the equilibrium with
/// `λ = 0`; otherwise the floor binds, `Σx = q` and the shared multiplier is
/// `λ = (Σθ − N a − (N + 1) b q) / N`. In both cases
/// `x_v = (θ_v − a − b Σx − λ) / b`.
pub fn cournot_closed_form(u: &Signal, theta: &DVector<f64>) -> Result<EquilibriumResult> {
    if u.len() != 3 {
        return Err(Error::Dimension { what: "Cournot signal", expected: 3, got: u.len() });
    }
    let n = theta.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty parameter vector".into()));
    }
    let (a, b, q) = (u.as_slice()[0], u.as_slice()[1], u.as_slice()[2]);
    if b == 0.0 {
        return Err(Error::InvalidSignal("Cournot demand slope b must be nonzero".into()));
    }
    let nf = n as f64;
    let sum_theta = theta.sum();
    let free_total = (sum_theta - nf * a) / ((nf + 1.0) * b);
    let (total, lam) = if free_total >= q {
        (free_total, 0.0)
    } else {
        (q, (sum_theta - nf * a - (nf + 1.0) * b * q) / nf)
    };
    let x = theta.map(|t| (t - a - b * total - lam) / b);
    let lambda = DVector::from_element(1, lam);

    let model = CournotModel::new(n);
    let (_, c) = model.basis(&x, u);
    let f = theta + c;
    let (h, grad_h) = model.inequalities(&x, u);
    let (g, grad_g) = model.equalities(&x, u);
    let nu = DVector::zeros(0);
    let kkt_residual = residual_parts(&f, &h, &grad_h, &g, &grad_g, &lambda, &nu);
    Ok(EquilibriumResult { x_star: x, lambda, nu, kkt_residual })
}

/// `y = x* + noise_scale · ε` with independent standard normal `ε`.
pub fn observe<R: Rng + ?Sized>(
    eq: &EquilibriumResult,
    u: &Signal,
    round: usize,
    rng: &mut R,
    noise_scale: f64,
) -> Observation {
    let y = if noise_scale == 0.0 {
        eq.x_star.clone()
    } else {
        eq.x_star.map(|xv| xv + noise_scale * rng.sample::<f64, _>(StandardNormal))
    };
    Observation { round, u: u.clone(), y }
}
