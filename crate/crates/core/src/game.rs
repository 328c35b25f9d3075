//! Jointly convex games whose cost functions are linear in unknown parameters.
//!
//! A game is described by its pseudo-gradient, split into a parameter basis
//! and an offset,
//!
//! ```text
//! F(x, u, θ) = M(x, u)ᵀ θ + c(x, u),
//! ```
//!
//! where `M` is block diagonal (player `v`'s block is the Jacobian of its
//! basis cost vector with respect to its own strategy), and by the shared
//! feasible set `X(u) = { x : h(x, u) ≤ 0, g(x, u) = 0 }`.
//!
//! Games are registered programmatically: implement [`GameModel`] and wrap it
//! with [`ParametricGame::new`]. [`cournot_game`] is the canonical instance.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

/// Observable exogenous vector `u` for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal(DVector<f64>);

impl Signal {
    /// Any finite vector.
    pub fn new(values: Vec<f64>) -> Result<Signal> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSignal(format!("non-finite entry in {values:?}")));
        }
        Ok(Signal(DVector::from_vec(values)))
    }

    /// Cournot market conditions `(a, b, q)`: demand intercept, demand slope and
    /// minimum total supply. Requires `a > 0`, `b < 0`, `q > 0` and a positive
    /// price at the minimum supply, `a + b q > 0`.
    pub fn cournot(a: f64, b: f64, q: f64) -> Result<Signal> {
        let s = Signal::new(vec![a, b, q])?;
        if !(a > 0.0 && b < 0.0 && q > 0.0) {
            return Err(Error::InvalidSignal(format!(
                "Cournot signal needs a > 0, b < 0, q > 0; got ({a}, {b}, {q})"
            )));
        }
        if a + b * q <= 0.0 {
            return Err(Error::InvalidSignal(format!(
                "price at minimum demand is not positive: a + b q = {}",
                a + b * q
            )));
        }
        Ok(s)
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The parameter domain Θ: a product of closed, finite intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl ThetaBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<ThetaBox> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension {
                what: "theta box bounds",
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo.is_empty() {
            return Err(Error::InvalidGame("parameter box has no coordinates".into()));
        }
        for (i, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !l.is_finite() || !h.is_finite() || l > h {
                return Err(Error::InvalidGame(format!(
                    "interval {i} must be finite with lo <= hi, got [{l}, {h}]"
                )));
            }
        }
        Ok(ThetaBox { lo, hi })
    }

    /// `[lo, hi]^dim`.
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<ThetaBox> {
        ThetaBox::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lo
    }

    pub fn upper(&self) -> &[f64] {
        &self.hi
    }

    pub fn contains(&self, theta: &DVector<f64>) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(t, (l, h))| *l <= *t && *t <= *h)
    }

    /// Euclidean projection onto the box (componentwise clamp).
    pub fn project(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            theta.len(),
            theta
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .map(|(t, (l, h))| t.clamp(*l, *h)),
        )
    }

    pub fn midpoint(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)),
        )
    }

    /// Norm of the box corner farthest from the origin; bounds `‖θ‖` over Θ.
    pub fn max_norm(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| l.abs().max(h.abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lo
                .iter()
                .zip(&self.hi)
                .map(|(l, h)| if l == h { *l } else { rng.random_range(*l..=*h) }),
        )
    }

    /// All `2^dim` vertices. Only sensible for small boxes.
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let d = self.dim();
        (0..1usize << d)
            .map(|mask| {
                DVector::from_iterator(
                    d,
                    (0..d).map(|i| if mask >> i & 1 == 1 { self.hi[i] } else { self.lo[i] }),
                )
            })
            .collect()
    }
}

/// Raw evaluations of a game. Implementations may assume consistent dimensions;
/// [`ParametricGame`] checks them before delegating.
pub trait GameModel: Send + Sync + fmt::Debug {
    /// Basis matrix `M` (`n' × n`) and offset `c` (length `n`) of the pseudo-gradient.
    fn basis(&self, x: &DVector<f64>, u: &Signal) -> (DMatrix<f64>, DVector<f64>);

    /// Inequality values `h` (length `m`) and gradients as columns (`n × m`).
    fn inequalities(&self, x: &DVector<f64>, u: &Signal) -> (DVector<f64>, DMatrix<f64>);

    /// Equality values `g` (length `p`) and gradients as columns (`n × p`).
    fn equalities(&self, x: &DVector<f64>, u: &Signal) -> (DVector<f64>, DMatrix<f64>);

    /// Euclidean projection onto `X(u)`.
    fn project(&self, x: &DVector<f64>, u: &Signal) -> Result<DVector<f64>>;

    /// Game-specific admissibility of a signal beyond its length.
    fn check_signal(&self, _u: &Signal) -> Result<()> {
        Ok(())
    }
}

/// Constraint values and gradients at one `(x, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintEval {
    pub h: DVector<f64>,
    pub g: DVector<f64>,
    pub grad_h: DMatrix<f64>,
    pub grad_g: DMatrix<f64>,
}

impl ConstraintEval {
    /// `H = diag(h)`.
    pub fn h_diag(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.h)
    }
}

/// A jointly convex game with cost functions linear in the parameters.
///
/// Immutable after construction; clones share the underlying model.
#[derive(Clone)]
pub struct ParametricGame {
    name: String,
    player_dims: Vec<usize>,
    param_dims: Vec<usize>,
    signal_dim: usize,
    num_ineq: usize,
    num_eq: usize,
    domain: ThetaBox,
    model: Arc<dyn GameModel>,
}

impl fmt::Debug for ParametricGame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParametricGame")
            .field("name", &self.name)
            .field("player_dims", &self.player_dims)
            .field("param_dims", &self.param_dims)
            .field("signal_dim", &self.signal_dim)
            .field("m", &self.num_ineq)
            .field("p", &self.num_eq)
            .finish()
    }
}

impl ParametricGame {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        player_dims: Vec<usize>,
        param_dims: Vec<usize>,
        signal_dim: usize,
        num_ineq: usize,
        num_eq: usize,
        domain: ThetaBox,
        model: Arc<dyn GameModel>,
    ) -> Result<ParametricGame> {
        if player_dims.is_empty() || player_dims.contains(&0) {
            return Err(Error::InvalidGame("player strategy dimensions must be positive".into()));
        }
        if param_dims.len() != player_dims.len() || param_dims.contains(&0) {
            return Err(Error::InvalidGame(
                "each player needs a positive parameter dimension".into(),
            ));
        }
        if num_ineq + num_eq == 0 {
            return Err(Error::InvalidGame("the shared feasible set needs at least one constraint".into()));
        }
        let n_params: usize = param_dims.iter().sum();
        if domain.dim() != n_params {
            return Err(Error::Dimension {
                what: "parameter domain",
                expected: n_params,
                got: domain.dim(),
            });
        }
        Ok(ParametricGame {
            name: name.into(),
            player_dims,
            param_dims,
            signal_dim,
            num_ineq,
            num_eq,
            domain,
            model,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn player_dims(&self) -> &[usize] {
        &self.player_dims
    }

    pub fn param_dims(&self) -> &[usize] {
        &self.param_dims
    }

    pub fn num_players(&self) -> usize {
        self.player_dims.len()
    }

    /// Total strategy dimension `n`.
    pub fn n(&self) -> usize {
        self.player_dims.iter().sum()
    }

    /// Total parameter dimension `n'`.
    pub fn n_params(&self) -> usize {
        self.param_dims.iter().sum()
    }

    pub fn signal_dim(&self) -> usize {
        self.signal_dim
    }

    pub fn num_inequalities(&self) -> usize {
        self.num_ineq
    }

    pub fn num_equalities(&self) -> usize {
        self.num_eq
    }

    pub fn domain(&self) -> &ThetaBox {
        &self.domain
    }

    pub fn model(&self) -> &dyn GameModel {
        self.model.as_ref()
    }

    pub fn check_strategy(&self, x: &DVector<f64>) -> Result<()> {
        check_len("strategy vector", self.n(), x.len())
    }

    pub fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        check_len("parameter vector", self.n_params(), theta.len())
    }

    pub fn check_signal(&self, u: &Signal) -> Result<()> {
        check_len("signal", self.signal_dim, u.len())?;
        self.model.check_signal(u)
    }

    /// `(M, c)` with `F(x, u, θ) = Mᵀθ + c`.
    pub fn basis_matrices(&self, x: &DVector<f64>, u: &Signal) -> Result<(DMatrix<f64>, DVector<f64>)> {
        self.check_strategy(x)?;
        self.check_signal(u)?;
        let (m, c) = self.model.basis(x, u);
        debug_assert_eq!(m.shape(), (self.n_params(), self.n()));
        debug_assert_eq!(c.len(), self.n());
        Ok((m, c))
    }

    /// Stack of each player's own-strategy cost gradient.
    pub fn pseudo_gradient(&self, x: &DVector<f64>, u: &Signal, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        let (m, c) = self.basis_matrices(x, u)?;
        Ok(m.tr_mul(theta) + c)
    }

    pub fn constraint_eval(&self, x: &DVector<f64>, u: &Signal) -> Result<ConstraintEval> {
        self.check_strategy(x)?;
        self.check_signal(u)?;
        let (h, grad_h) = self.model.inequalities(x, u);
        let (g, grad_g) = self.model.equalities(x, u);
        debug_assert_eq!(grad_h.shape(), (self.n(), self.num_ineq));
        debug_assert_eq!(grad_g.shape(), (self.n(), self.num_eq));
        Ok(ConstraintEval { h, g, grad_h, grad_g })
    }

    /// Euclidean projection onto the shared feasible set `X(u)`.
    pub fn project(&self, x: &DVector<f64>, u: &Signal) -> Result<DVector<f64>> {
        self.check_strategy(x)?;
        self.check_signal(u)?;
        self.model.project(x, u)
    }

    /// Row and column ranges of player `v`'s block in `M`.
    pub fn block_ranges(&self, v: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let r0: usize = self.param_dims[..v].iter().sum();
        let c0: usize = self.player_dims[..v].iter().sum();
        (r0..r0 + self.param_dims[v], c0..c0 + self.player_dims[v])
    }

    /// True when every entry of `M` outside the player blocks is zero.
    pub fn is_block_diagonal(&self, m: &DMatrix<f64>) -> bool {
        let mut owner_row = Vec::with_capacity(self.n_params());
        let mut owner_col = Vec::with_capacity(self.n());
        for (v, (&np, &ns)) in self.param_dims.iter().zip(&self.player_dims).enumerate() {
            owner_row.extend(std::iter::repeat_n(v, np));
            owner_col.extend(std::iter::repeat_n(v, ns));
        }
        (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| owner_row[i] == owner_col[j] || m[(i, j)] == 0.0))
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { what, expected, got });
    }
    Ok(())
}

/// The natural-gas Nash-Cournot market.
///
/// Player `v` sells `x_v` at price `a + b Σx` with unit cost `θ_v`; profit is
/// `(a + b Σx) x_v − θ_v x_v`. Games minimize costs, so the sign is flipped
/// here and nowhere else: the minimized cost is `θ_v x_v − (a + b Σx) x_v`,
/// whose own-strategy derivative is `θ_v − a − b Σx − b x_v`. The only shared
/// constraint is the minimum supply `q − Σx ≤ 0`.
#[derive(Debug, Clone, Copy)]
pub struct CournotModel {
    players: usize,
}

impl CournotModel {
    pub fn new(players: usize) -> CournotModel {
        CournotModel { players }
    }

    pub fn players(&self) -> usize {
        self.players
    }

    /// The negated profit, i.e. the cost player `v` minimizes.
    pub fn cost(&self, v: usize, x: &DVector<f64>, u: &Signal, theta_v: f64) -> f64 {
        let (a, b, _) = unpack(u);
        theta_v * x[v] - (a + b * x.sum()) * x[v]
    }
}

fn unpack(u: &Signal) -> (f64, f64, f64) {
    let s = u.as_slice();
    (s[0], s[1], s[2])
}

impl GameModel for CournotModel {
    fn basis(&self, x: &DVector<f64>, u: &Signal) -> (DMatrix<f64>, DVector<f64>) {
        let (a, b, _) = unpack(u);
        let total = x.sum();
        let c = x.map(|xv| -a - b * total - b * xv);
        (DMatrix::identity(self.players, self.players), c)
    }

    fn inequalities(&self, x: &DVector<f64>, u: &Signal) -> (DVector<f64>, DMatrix<f64>) {
        let (_, _, q) = unpack(u);
        let h = DVector::from_element(1, q - x.sum());
        (h, DMatrix::from_element(self.players, 1, -1.0))
    }

    fn equalities(&self, _x: &DVector<f64>, _u: &Signal) -> (DVector<f64>, DMatrix<f64>) {
        (DVector::zeros(0), DMatrix::zeros(self.players, 0))
    }

    fn project(&self, x: &DVector<f64>, u: &Signal) -> Result<DVector<f64>> {
        // halfspace {Σx >= q}
        let (_, _, q) = unpack(u);
        let deficit = q - x.sum();
        if deficit <= 0.0 {
            return Ok(x.clone());
        }
        Ok(x.add_scalar(deficit / self.players as f64))
    }

    fn check_signal(&self, u: &Signal) -> Result<()> {
        if u.as_slice()[1] == 0.0 {
            return Err(Error::InvalidSignal("Cournot demand slope b must be nonzero".into()));
        }
        Ok(())
    }
}

/// The `players`-company Cournot market with `Θ = [0, theta_max]^players`.
pub fn cournot_game(players: usize, theta_max: f64) -> Result<ParametricGame> {
    if players == 0 {
        return Err(Error::InvalidGame("a Cournot market needs at least one company".into()));
    }
    if !(theta_max.is_finite() && theta_max > 0.0) {
        return Err(Error::InvalidGame(format!("theta_max must be positive and finite, got {theta_max}")));
    }
    ParametricGame::new(
        "cournot",
        vec![1; players],
        vec![1; players],
        3,
        1,
        0,
        ThetaBox::uniform(players, 0.0, theta_max)?,
        Arc::new(CournotModel::new(players)),
    )
}

/// A game with affine pseudo-gradient and polyhedral shared constraints.
///
/// The pseudo-gradient is `F(x, θ) = Bᵀθ + G x + r` with `B` block diagonal;
/// the constraints are `A x ≤ u[..m]` and `E x = u[m..]`, so the signal carries
/// the right-hand sides. Monotonicity (and hence a unique variational
/// equilibrium) needs the symmetric part of `G` positive definite.
#[derive(Debug, Clone)]
pub struct PolyhedralGame {
    pub basis: DMatrix<f64>,
    pub coupling: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub ineq: DMatrix<f64>,
    pub eq: DMatrix<f64>,
}

impl PolyhedralGame {
    /// Validates the shapes against the player layout and wraps the model.
    pub fn into_game(self, player_dims: Vec<usize>, param_dims: Vec<usize>, domain: ThetaBox) -> Result<ParametricGame> {
        let n: usize = player_dims.iter().sum();
        let np: usize = param_dims.iter().sum();
        let m = self.ineq.nrows();
        let p = self.eq.nrows();
        if self.basis.shape() != (np, n) {
            return Err(Error::InvalidGame(format!("basis must be {np}x{n}")));
        }
        if self.coupling.shape() != (n, n) || self.offset.len() != n {
            return Err(Error::InvalidGame(format!("coupling must be {n}x{n} with offset of length {n}")));
        }
        if (m > 0 && self.ineq.ncols() != n) || (p > 0 && self.eq.ncols() != n) {
            return Err(Error::InvalidGame(format!("constraint rows must have {n} columns")));
        }
        let model = PolyhedralGame {
            ineq: if m == 0 { DMatrix::zeros(0, n) } else { self.ineq },
            eq: if p == 0 { DMatrix::zeros(0, n) } else { self.eq },
            ..self
        };
        let game = ParametricGame::new("polyhedral", player_dims, param_dims, m + p, m, p, domain, Arc::new(model))?;
        if !game.is_block_diagonal(&game.model_basis()) {
            return Err(Error::InvalidGame("basis matrix is not block diagonal".into()));
        }
        Ok(game)
    }
}

impl ParametricGame {
    fn model_basis(&self) -> DMatrix<f64> {
        let x = DVector::zeros(self.n());
        let u = Signal(DVector::zeros(self.signal_dim));
        self.model.basis(&x, &u).0
    }
}

const DYKSTRA_MAX_SWEEPS: usize = 200_000;
const DYKSTRA_TOL: f64 = 1e-13;

impl GameModel for PolyhedralGame {
    fn basis(&self, x: &DVector<f64>, _u: &Signal) -> (DMatrix<f64>, DVector<f64>) {
        (self.basis.clone(), &self.coupling * x + &self.offset)
    }

    fn inequalities(&self, x: &DVector<f64>, u: &Signal) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.ineq.nrows();
        let h = &self.ineq * x - u.values().rows(0, m);
        (h, self.ineq.transpose())
    }

    fn equalities(&self, x: &DVector<f64>, u: &Signal) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.ineq.nrows();
        let p = self.eq.nrows();
        let g = &self.eq * x - u.values().rows(m, p);
        (g, self.eq.transpose())
    }

    /// Dykstra's alternating projections over the halfspaces and the affine
    /// equality subspace.
    fn project(&self, x: &DVector<f64>, u: &Signal) -> Result<DVector<f64>> {
        let m = self.ineq.nrows();
        let p = self.eq.nrows();
        let rhs_h = u.values().rows(0, m).into_owned();
        let rhs_g = u.values().rows(m, p).into_owned();

        let affine = if p > 0 {
            let gram = &self.eq * self.eq.transpose();
            let chol = nalgebra::Cholesky::new(gram).ok_or(Error::Singular("equality constraint rows"))?;
            Some(chol)
        } else {
            None
        };
        let project_affine = |z: &DVector<f64>| -> DVector<f64> {
            match &affine {
                Some(chol) => {
                    let resid = &self.eq * z - &rhs_g;
                    z - self.eq.transpose() * chol.solve(&resid)
                }
                None => z.clone(),
            }
        };
        let project_half = |q: usize, z: &DVector<f64>| -> DVector<f64> {
            let a = self.ineq.row(q).transpose();
            let viol = a.dot(z) - rhs_h[q];
            if viol <= 0.0 {
                z.clone()
            } else {
                z - &a * (viol / a.norm_squared())
            }
        };

        let sets = m + usize::from(p > 0);
        if sets <= 1 {
            let z = if p > 0 { project_affine(x) } else { project_half(0, x) };
            return Ok(z);
        }

        let mut z = x.clone();
        let mut incr = vec![DVector::zeros(x.len()); sets];
        for _ in 0..DYKSTRA_MAX_SWEEPS {
            let prev = z.clone();
            for (s, inc) in incr.iter_mut().enumerate() {
                let y = &z + &*inc;
                let proj = if s < m { project_half(s, &y) } else { project_affine(&y) };
                *inc = y - &proj;
                z = proj;
            }
            let change = (&z - &prev).amax();
            let feas = self.max_violation(&z, &rhs_h, &rhs_g);
            if change <= DYKSTRA_TOL * (1.0 + z.amax()) && feas <= 1e-10 * (1.0 + z.amax()) {
                return Ok(z);
            }
        }
        let feas = self.max_violation(&z, &rhs_h, &rhs_g);
        if feas > 1e-6 * (1.0 + z.amax()) {
            return Err(Error::Infeasible(format!("alternating projections stalled with violation {feas:e}")));
        }
        Err(Error::NotConverged {
            method: "Dykstra projection",
            iterations: DYKSTRA_MAX_SWEEPS,
            residual: feas,
        })
    }
}

impl PolyhedralGame {
    fn max_violation(&self, z: &DVector<f64>, rhs_h: &DVector<f64>, rhs_g: &DVector<f64>) -> f64 {
        let hv = (&self.ineq * z - rhs_h).iter().fold(0.0_f64, |a, v| a.max(*v));
        let gv = (&self.eq * z - rhs_g).amax();
        hv.max(gv)
    }
}
