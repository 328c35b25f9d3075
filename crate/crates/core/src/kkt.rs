//! KKT-residual loss of a parameter vector at an observed equilibrium.
//!
//! At an observation `(y, u)` the loss of `θ` is the smallest squared KKT
//! residual achievable with admissible multipliers:
//!
//! ```text
//! l(θ; y, u) = min_{λ ≥ 0, ν} ‖F_θ + ∇h λ + ∇g ν‖² + ‖H λ‖² + ‖g‖²
//! ```
//!
//! with `F_θ = Mᵀθ + c` the pseudo-gradient at `y`, `H = diag(h(y, u))`.
//! Everything except `F_θ` is independent of `θ`, so [`KktData`] is assembled
//! once per observation and reused for every parameter evaluation.
//!
//! Two evaluation routes are provided. [`loss`] solves the joint
//! bound-constrained quadratic program in `z = (λ, ν)` directly.
//! [`reduced_loss`] eliminates `ν` through the projector
//! `R = I − ∇g(∇gᵀ∇g)⁻¹∇gᵀ` and evaluates the closed form in `P` and `Q`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::game::{ParametricGame, Signal, ThetaBox};
use crate::linalg;
use crate::qp;

/// Default tolerance on the inner QP optimality residual.
pub const INNER_TOL: f64 = 1e-10;
const FALLBACK_MAX_ITER: usize = 200_000;

/// Loss ingredients evaluated at one observation.
#[derive(Debug, Clone)]
pub struct KktData {
    basis: DMatrix<f64>,
    offset: DVector<f64>,
    grad_h: DMatrix<f64>,
    grad_g: DMatrix<f64>,
    h: DVector<f64>,
    g: DVector<f64>,
    rank: usize,
}

impl KktData {
    /// Builds loss data from raw matrices: `basis` is `n' × n`, `offset` has
    /// length `n`, `grad_h` is `n × m`, `grad_g` is `n × p`.
    pub fn from_parts(
        basis: DMatrix<f64>,
        offset: DVector<f64>,
        grad_h: DMatrix<f64>,
        h: DVector<f64>,
        grad_g: DMatrix<f64>,
        g: DVector<f64>,
    ) -> Result<KktData> {
        let n = offset.len();
        let check = |what, expected, got| {
            if expected != got {
                Err(Error::Dimension { what, expected, got })
            } else {
                Ok(())
            }
        };
        check("basis columns", n, basis.ncols())?;
        check("inequality gradient rows", n, grad_h.nrows())?;
        check("inequality values", grad_h.ncols(), h.len())?;
        check("equality gradient rows", n, grad_g.nrows())?;
        check("equality values", grad_g.ncols(), g.len())?;
        let rank = linalg::numerical_rank(&linalg::hstack(&grad_h, &grad_g));
        Ok(KktData { basis, offset, grad_h, grad_g, h, g, rank })
    }

    pub fn n(&self) -> usize {
        self.offset.len()
    }

    pub fn n_params(&self) -> usize {
        self.basis.nrows()
    }

    pub fn m(&self) -> usize {
        self.h.len()
    }

    pub fn p(&self) -> usize {
        self.g.len()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn grad_h(&self) -> &DMatrix<f64> {
        &self.grad_h
    }

    pub fn grad_g(&self) -> &DMatrix<f64> {
        &self.grad_g
    }

    pub fn h(&self) -> &DVector<f64> {
        &self.h
    }

    pub fn g(&self) -> &DVector<f64> {
        &self.g
    }

    /// `H = diag(h)`.
    pub fn h_diag(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.h)
    }

    /// Numerical rank of `[∇h, ∇g]`.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Whether `[∇h, ∇g]` has full column rank; gates the reduced form.
    pub fn full_rank(&self) -> bool {
        self.rank == self.m() + self.p()
    }

    /// `F_θ = Mᵀθ + c`.
    pub fn pseudo_gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        if theta.len() != self.n_params() {
            return Err(Error::Dimension { what: "parameter vector", expected: self.n_params(), got: theta.len() });
        }
        Ok(self.basis.tr_mul(theta) + &self.offset)
    }

    /// `[∇h, ∇g]`.
    pub fn constraint_jacobian(&self) -> DMatrix<f64> {
        linalg::hstack(&self.grad_h, &self.grad_g)
    }

    /// Lemma-1 style Gram matrix `A = [∇h ∇g]ᵀ[∇h ∇g] + diag(h², 0)`.
    pub fn dual_gram(&self) -> DMatrix<f64> {
        self.weighted_dual_gram(None)
    }

    /// `[∇h ∇g]ᵀ W [∇h ∇g] + diag(h², 0)`; `W = I` when `None`.
    pub(crate) fn weighted_dual_gram(&self, weight: Option<&DMatrix<f64>>) -> DMatrix<f64> {
        let b = self.constraint_jacobian();
        let mut a = match weight {
            Some(w) => b.transpose() * w * &b,
            None => b.transpose() * &b,
        };
        for q in 0..self.m() {
            a[(q, q)] += self.h[q] * self.h[q];
        }
        a
    }

    /// Evaluates the inner objective at given multipliers.
    pub fn objective(&self, theta: &DVector<f64>, lambda: &DVector<f64>, nu: &DVector<f64>) -> Result<f64> {
        let r = self.stationarity(theta, lambda, nu)?;
        let comp = self.h.component_mul(lambda);
        Ok(r.norm_squared() + comp.norm_squared() + self.g.norm_squared())
    }

    /// `F_θ + ∇h λ + ∇g ν`.
    pub fn stationarity(&self, theta: &DVector<f64>, lambda: &DVector<f64>, nu: &DVector<f64>) -> Result<DVector<f64>> {
        if lambda.len() != self.m() || nu.len() != self.p() {
            return Err(Error::Dimension { what: "multipliers", expected: self.m() + self.p(), got: lambda.len() + nu.len() });
        }
        Ok(self.pseudo_gradient(theta)? + &self.grad_h * lambda + &self.grad_g * nu)
    }
}

/// Evaluates basis, offset and constraints of `game` at `(y, u)`.
pub fn assemble_kkt(game: &ParametricGame, y: &DVector<f64>, u: &Signal) -> Result<KktData> {
    let (basis, offset) = game.basis_matrices(y, u)?;
    let ce = game.constraint_eval(y, u)?;
    KktData::from_parts(basis, offset, ce.grad_h, ce.h, ce.grad_g, ce.g)
}

/// How the inner multipliers were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerMethod {
    ActiveSet,
    ProjectedGradient,
}

#[derive(Debug, Clone)]
pub struct InnerDuals {
    pub lambda: DVector<f64>,
    pub nu: DVector<f64>,
    pub residual: f64,
    pub method: InnerMethod,
}

/// Solves the multiplier problem for the squared residual measured in the
/// metric `W` (identity for the plain loss). `F` is the pseudo-gradient.
pub(crate) fn solve_duals(
    kkt: &KktData,
    f_theta: &DVector<f64>,
    weight: Option<&DMatrix<f64>>,
    tol: f64,
) -> Result<InnerDuals> {
    let m = kkt.m();
    let p = kkt.p();
    if m + p == 0 {
        return Ok(InnerDuals {
            lambda: DVector::zeros(0),
            nu: DVector::zeros(0),
            residual: 0.0,
            method: InnerMethod::ActiveSet,
        });
    }
    let b = kkt.constraint_jacobian();
    let hess = kkt.weighted_dual_gram(weight) * 2.0;
    let lin = match weight {
        Some(w) => b.transpose() * (w * f_theta) * 2.0,
        None => b.tr_mul(f_theta) * 2.0,
    };
    let (sol, method) = if kkt.full_rank() {
        match qp::solve_active_set(&hess, &lin, m, tol) {
            Ok(sol) => (sol, InnerMethod::ActiveSet),
            Err(Error::Singular(_)) => (
                qp::solve_projected(&hess, &lin, m, tol, FALLBACK_MAX_ITER)?,
                InnerMethod::ProjectedGradient,
            ),
            Err(e) => return Err(e),
        }
    } else {
        (qp::solve_projected(&hess, &lin, m, tol, FALLBACK_MAX_ITER)?, InnerMethod::ProjectedGradient)
    };
    Ok(InnerDuals {
        lambda: sol.z.rows(0, m).into_owned(),
        nu: sol.z.rows(m, p).into_owned(),
        residual: sol.residual,
        method,
    })
}

/// Minimizing multipliers `(λ*, ν*)` of the inner problem at `θ`.
///
/// Uses the active-set method when `[∇h, ∇g]` has full column rank (the
/// joint Gram matrix is then positive definite) and accelerated projected
/// gradient over `(λ, ν)` otherwise.
pub fn inner_dual_solve(kkt: &KktData, theta: &DVector<f64>, tol: f64) -> Result<InnerDuals> {
    let f = kkt.pseudo_gradient(theta)?;
    solve_duals(kkt, &f, None, tol)
}

/// Loss value together with its minimizing multipliers.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub lambda: DVector<f64>,
    pub nu: DVector<f64>,
}

/// KKT-residual loss `l(θ; y, u)` via the joint multiplier problem.
pub fn loss(kkt: &KktData, theta: &DVector<f64>) -> Result<LossValue> {
    let duals = inner_dual_solve(kkt, theta, INNER_TOL)?;
    let value = kkt.objective(theta, &duals.lambda, &duals.nu)?;
    Ok(LossValue { value, lambda: duals.lambda, nu: duals.nu })
}

/// The matrices of the `ν`-eliminated form.
#[derive(Debug, Clone)]
pub struct ReducedForm {
    /// `I − ∇g(∇gᵀ∇g)⁻¹∇gᵀ`.
    pub r: DMatrix<f64>,
    /// `∇hᵀR∇h + H²`.
    pub p: DMatrix<f64>,
    /// `R − R∇h P⁻¹ ∇hᵀR`.
    pub q: DMatrix<f64>,
}

pub fn reduced_form(kkt: &KktData) -> Result<ReducedForm> {
    if !kkt.full_rank() {
        return Err(Error::RankDeficient { rank: kkt.rank(), expected: kkt.m() + kkt.p() });
    }
    let r = linalg::complement_projector(kkt.grad_g())?;
    let rh = &r * kkt.grad_h();
    let mut p = kkt.grad_h().transpose() * &rh;
    for i in 0..kkt.m() {
        p[(i, i)] += kkt.h()[i] * kkt.h()[i];
    }
    let q = if kkt.m() == 0 {
        r.clone()
    } else {
        let p_inv = linalg::spd_inverse(&p, "reduced-form P")?;
        &r - &rh * p_inv * rh.transpose()
    };
    Ok(ReducedForm { r, p, q })
}

/// Loss through the `ν`-eliminated closed form:
///
/// ```text
/// min_{λ ≥ 0} (λ + P⁻¹∇hᵀR F)ᵀ P (λ + P⁻¹∇hᵀR F) + Fᵀ Q F + gᵀg
/// ```
///
/// Errors with [`Error::RankDeficient`] when `[∇h, ∇g]` lacks full column rank.
pub fn reduced_loss(kkt: &KktData, theta: &DVector<f64>) -> Result<LossValue> {
    let form = reduced_form(kkt)?;
    let f = kkt.pseudo_gradient(theta)?;
    let m = kkt.m();
    let g_term = kkt.g().norm_squared();
    let quad = f.dot(&(&form.q * &f));
    let rf = &form.r * &f;
    let lambda = if m == 0 {
        DVector::zeros(0)
    } else {
        let d = kkt.grad_h().tr_mul(&rf);
        qp::solve_active_set(&(&form.p * 2.0), &(&d * 2.0), m, INNER_TOL)?.z
    };
    let value = if m == 0 {
        quad + g_term
    } else {
        let d = kkt.grad_h().tr_mul(&rf);
        let shift = linalg::spd_solve_vec(&form.p, &d, "reduced-form P")?;
        let e = &lambda + shift;
        e.dot(&(&form.p * &e)) + quad + g_term
    };
    let nu = if kkt.p() == 0 {
        DVector::zeros(0)
    } else {
        let gg = kkt.grad_g().transpose() * kkt.grad_g();
        let rhs = kkt.grad_g().tr_mul(&(&f + kkt.grad_h() * &lambda));
        -linalg::spd_solve_vec(&gg, &rhs, "equality-gradient Gram matrix")?
    };
    Ok(LossValue { value, lambda, nu })
}

/// Envelope subgradient `2 M (F_θ + ∇h λ* + ∇g ν*)` at the loss's own multipliers.
pub fn subgradient_at(kkt: &KktData, theta: &DVector<f64>, at: &LossValue) -> Result<DVector<f64>> {
    let r = kkt.stationarity(theta, &at.lambda, &at.nu)?;
    Ok(kkt.basis() * r * 2.0)
}

/// A subgradient of `l(·; y, u)` at `θ`.
pub fn subgradient(kkt: &KktData, theta: &DVector<f64>) -> Result<DVector<f64>> {
    let at = loss(kkt, theta)?;
    subgradient_at(kkt, theta, &at)
}

pub fn loss_and_subgradient(kkt: &KktData, theta: &DVector<f64>) -> Result<(LossValue, DVector<f64>)> {
    let at = loss(kkt, theta)?;
    let s = subgradient_at(kkt, theta, &at)?;
    Ok((at, s))
}

/// Numerical checks of the matrix structure behind convexity and Lipschitzness.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport {
    pub min_eig_a: f64,
    /// `‖R² − R‖_F`; `None` when `R` cannot be formed.
    pub r_idempotence: Option<f64>,
    pub min_eig_r: Option<f64>,
    pub min_eig_p: Option<f64>,
    pub min_eig_q: Option<f64>,
    pub rank: usize,
    pub expected_rank: usize,
}

impl CertificateReport {
    pub fn reduced_enabled(&self) -> bool {
        self.rank == self.expected_rank
    }

    /// All reduced-form certificates hold at the documented tolerances.
    pub fn passes(&self) -> bool {
        self.reduced_enabled()
            && self.min_eig_a > 0.0
            && self.r_idempotence.is_some_and(|v| v <= 1e-9)
            && self.min_eig_r.is_some_and(|v| v >= -1e-9)
            && self.min_eig_p.is_some_and(|v| v > 0.0)
            && self.min_eig_q.is_some_and(|v| v >= -1e-9)
    }

    pub const CSV_HEADER: &'static str =
        "round,min_eig_a,r_idempotence,min_eig_r,min_eig_p,min_eig_q,rank,expected_rank,reduced_enabled";

    pub fn csv_row(&self, round: usize) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
        format!(
            "{round},{},{},{},{},{},{},{},{}",
            self.min_eig_a,
            opt(self.r_idempotence),
            opt(self.min_eig_r),
            opt(self.min_eig_p),
            opt(self.min_eig_q),
            self.rank,
            self.expected_rank,
            self.reduced_enabled()
        )
    }
}

/// Reports (never fails) the eigenvalue and rank certificates at one observation.
pub fn matrix_certificates(kkt: &KktData) -> CertificateReport {
    let min_eig_a = linalg::sym_min_eig(&kkt.dual_gram());
    let expected_rank = kkt.m() + kkt.p();
    let mut report = CertificateReport {
        min_eig_a,
        r_idempotence: None,
        min_eig_r: None,
        min_eig_p: None,
        min_eig_q: None,
        rank: kkt.rank(),
        expected_rank,
    };
    if let Ok(r) = linalg::complement_projector(kkt.grad_g()) {
        report.r_idempotence = Some((&r * &r - &r).norm());
        report.min_eig_r = Some(linalg::sym_min_eig(&r));
    }
    if let Ok(form) = reduced_form(kkt) {
        report.min_eig_p = Some(linalg::sym_min_eig(&form.p));
        report.min_eig_q = Some(linalg::sym_min_eig(&form.q));
    }
    report
}

/// A priori bound `‖(λ*, ν*)‖ ≤ ‖[∇h ∇g]ᵀF_θ‖ / λ_min(A)`; infinite when `A` is singular.
pub fn dual_norm_bound(kkt: &KktData, theta: &DVector<f64>) -> Result<f64> {
    let f = kkt.pseudo_gradient(theta)?;
    let bf = kkt.constraint_jacobian().tr_mul(&f);
    let min_eig = linalg::sym_min_eig(&kkt.dual_gram());
    if min_eig <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(bf.norm() / min_eig)
}

/// Empirical Lipschitz constant of the loss over `domain`.
///
/// Takes the maximum of `|l(θ₁) − l(θ₂)| / ‖θ₁ − θ₂‖` over `budget` random
/// pairs (each on a randomly chosen observation), over all vertex pairs, and of
/// the subgradient norm at every vertex, which is the limiting ratio of
/// infinitesimally close pairs. Pairs with `θ₁ = θ₂` are skipped.
pub fn lipschitz_probe<R: Rng + ?Sized>(
    observations: &[KktData],
    domain: &ThetaBox,
    budget: usize,
    rng: &mut R,
) -> Result<f64> {
    if observations.is_empty() {
        return Ok(0.0);
    }
    let mut best = 0.0_f64;
    let mut consider = |kkt: &KktData, a: &DVector<f64>, b: &DVector<f64>| -> Result<()> {
        let dist = (a - b).norm();
        if dist == 0.0 {
            return Ok(());
        }
        let la = loss(kkt, a)?.value;
        let lb = loss(kkt, b)?.value;
        best = best.max((la - lb).abs() / dist);
        Ok(())
    };
    for _ in 0..budget {
        let kkt = &observations[rng.random_range(0..observations.len())];
        let a = domain.sample(rng);
        let b = domain.sample(rng);
        consider(kkt, &a, &b)?;
    }
    if domain.dim() <= 10 {
        let verts = domain.vertices();
        for kkt in observations {
            for (i, a) in verts.iter().enumerate() {
                for b in &verts[i + 1..] {
                    consider(kkt, a, b)?;
                }
            }
        }
        for kkt in observations {
            for v in &verts {
                best = best.max(subgradient(kkt, v)?.norm());
            }
        }
    }
    Ok(best)
}

/// Empirical Lipschitz constant of the multiplier map `θ ↦ (λ*, ν*)`, plus the
/// largest multiplier norm seen, over `budget` random pairs.
pub fn dual_lipschitz_probe<R: Rng + ?Sized>(
    observations: &[KktData],
    domain: &ThetaBox,
    budget: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let mut ratio = 0.0_f64;
    let mut largest = 0.0_f64;
    if observations.is_empty() {
        return Ok((ratio, largest));
    }
    for _ in 0..budget {
        let kkt = &observations[rng.random_range(0..observations.len())];
        let a = domain.sample(rng);
        let b = domain.sample(rng);
        let la = loss(kkt, &a)?;
        let lb = loss(kkt, &b)?;
        largest = largest.max(la.lambda.norm()).max(la.nu.norm()).max(lb.lambda.norm()).max(lb.nu.norm());
        let dist = (&a - &b).norm();
        if dist > 0.0 {
            let dz = ((&la.lambda - &lb.lambda).norm_squared() + (&la.nu - &lb.nu).norm_squared()).sqrt();
            ratio = ratio.max(dz / dist);
        }
    }
    Ok((ratio, largest))
}
