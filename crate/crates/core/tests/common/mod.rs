#![allow(dead_code)]

use invgame::game::Signal;
use invgame::kkt::KktData;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(v)
}

pub fn theta_true() -> DVector<f64> {
    dv(&[10.0, 7.5, 6.0])
}

/// Cournot signal from the default ranges with a negated slope.
pub fn random_cournot_signal<R: Rng>(rng: &mut R) -> Signal {
    loop {
        let a = rng.random_range(15.0..=1800.0);
        let b = -rng.random_range(1.0..=120.0);
        let q = rng.random_range(5.0..=600.0);
        if a + b * q > 0.0 {
            return Signal::cournot(a, b, q).unwrap();
        }
    }
}

/// Largest cost reduction any company can get by a unilateral feasible change
/// of its own output, searched on a grid around `x`.
pub fn best_response_gap(u: &Signal, theta: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let (a, b, q) = (u.as_slice()[0], u.as_slice()[1], u.as_slice()[2]);
    let total: f64 = x.iter().sum();
    let mut worst = 0.0_f64;
    for v in 0..x.len() {
        let others = total - x[v];
        let cost = |xv: f64| theta[v] * xv - (a + b * (others + xv)) * xv;
        let here = cost(x[v]);
        let width = 10.0_f64.max(x[v].abs());
        let lo = (q - others).max(x[v] - width);
        let hi = x[v] + width;
        let steps = 4000;
        for i in 0..=steps {
            let xv = lo + (hi - lo) * i as f64 / steps as f64;
            worst = worst.max(here - cost(xv));
        }
        for d in [1e-3, 1e-2, 1e-1] {
            for xv in [x[v] - d, x[v] + d] {
                if others + xv >= q {
                    worst = worst.max(here - cost(xv));
                }
            }
        }
    }
    worst
}

/// Raw loss data; the oracles below work from these matrices directly.
#[derive(Debug, Clone)]
pub struct Raw {
    pub basis: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub grad_h: DMatrix<f64>,
    pub h: DVector<f64>,
    pub grad_g: DMatrix<f64>,
    pub g: DVector<f64>,
}

impl Raw {
    pub fn kkt(&self) -> KktData {
        KktData::from_parts(
            self.basis.clone(),
            self.offset.clone(),
            self.grad_h.clone(),
            self.h.clone(),
            self.grad_g.clone(),
            self.g.clone(),
        )
        .unwrap()
    }

    pub fn m(&self) -> usize {
        self.h.len()
    }

    pub fn p(&self) -> usize {
        self.g.len()
    }

    pub fn f(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.basis.tr_mul(theta) + &self.offset
    }

    pub fn objective(&self, theta: &DVector<f64>, lambda: &DVector<f64>, nu: &DVector<f64>) -> f64 {
        let r = self.f(theta) + &self.grad_h * lambda + &self.grad_g * nu;
        r.norm_squared() + self.h.component_mul(lambda).norm_squared() + self.g.norm_squared()
    }
}

/// Random instance with `m` inequalities and `p` equalities in dimension `n`.
pub fn random_raw<R: Rng>(rng: &mut R, n: usize, m: usize, p: usize) -> Raw {
    let mut u = |r: std::ops::Range<f64>| rng.random_range(r);
    let basis = DMatrix::from_fn(n, n, |_, _| u(-1.0..1.0));
    let offset = DVector::from_fn(n, |_, _| u(-5.0..5.0));
    let grad_h = DMatrix::from_fn(n, m, |_, _| u(-1.0..1.0));
    let h = DVector::from_fn(m, |_, _| if u(0.0..1.0) < 0.3 { 0.0 } else { u(-2.0..0.5) });
    let grad_g = DMatrix::from_fn(n, p, |_, _| u(-1.0..1.0));
    let g = DVector::from_fn(p, |_, _| u(-0.1..0.1));
    Raw { basis, offset, grad_h, h, grad_g, g }
}

/// Inner minimum over `λ ≥ 0, ν` by a grid over the a priori box
/// `[0, ‖BᵀF‖ / λ_min(A)]^m` followed by compass-search polishing. `ν` is
/// eliminated exactly by least squares.
pub fn brute_force_inner(raw: &Raw, theta: &DVector<f64>) -> f64 {
    let (m, p) = (raw.m(), raw.p());
    let f = raw.f(theta);
    let nu_of = |lambda: &DVector<f64>| -> DVector<f64> {
        if p == 0 {
            return DVector::zeros(0);
        }
        let rhs = -(&f + &raw.grad_h * lambda);
        raw.grad_g.clone().svd(true, true).solve(&rhs, 1e-12).unwrap()
    };
    let value = |lambda: &DVector<f64>| raw.objective(theta, lambda, &nu_of(lambda));
    if m == 0 {
        return value(&DVector::zeros(0));
    }
    let b = DMatrix::from_fn(f.len(), m + p, |i, j| if j < m { raw.grad_h[(i, j)] } else { raw.grad_g[(i, j - m)] });
    let mut a = b.transpose() * &b;
    for q in 0..m {
        a[(q, q)] += raw.h[q] * raw.h[q];
    }
    let min_eig = a.symmetric_eigenvalues().min();
    let reach = if min_eig > 1e-9 { (b.tr_mul(&f)).norm() / min_eig } else { 1e4 };
    let reach = reach.max(1e-6) * 1.01;

    let per_axis = if m == 1 { 4001 } else { 301 };
    let mut best = (f64::INFINITY, DVector::zeros(m));
    let mut idx = vec![0usize; m];
    loop {
        let lambda = DVector::from_fn(m, |i, _| reach * idx[i] as f64 / (per_axis - 1) as f64);
        let v = value(&lambda);
        if v < best.0 {
            best = (v, lambda);
        }
        let mut d = 0;
        while d < m {
            idx[d] += 1;
            if idx[d] < per_axis {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
        if d == m {
            break;
        }
    }
    let (mut val, mut lambda) = best;
    let mut step = reach / (per_axis - 1) as f64;
    while step > 1e-13 * (1.0 + reach) {
        let mut improved = false;
        for i in 0..m {
            for dir in [-1.0, 1.0] {
                let mut trial = lambda.clone();
                trial[i] = (trial[i] + dir * step).max(0.0);
                let v = value(&trial);
                if v < val {
                    val = v;
                    lambda = trial;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    val
}

/// Minimizer of `½‖θ − θᵏ‖² + μ L(θ, λ, ν)` over `θ, ν` free and `λ ≥ 0` by
/// Jacobi-preconditioned accelerated projected gradient from `starts` random
/// points; returns the best `(θ, λ, ν)`.
pub fn brute_force_update<R: Rng>(
    raw: &Raw,
    theta_k: &DVector<f64>,
    mu: f64,
    starts: usize,
    rng: &mut R,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let (np, n, m, p) = (raw.basis.nrows(), raw.basis.ncols(), raw.m(), raw.p());
    let dim = np + m + p;
    // residual r = Jw + r0 with w = (θ, λ, ν)
    let mut jac = DMatrix::zeros(n, dim);
    jac.view_mut((0, 0), (n, np)).copy_from(&raw.basis.transpose());
    jac.view_mut((0, np), (n, m)).copy_from(&raw.grad_h);
    jac.view_mut((0, np + m), (n, p)).copy_from(&raw.grad_g);
    let mut hess = jac.transpose() * &jac * (2.0 * mu);
    for i in 0..np {
        hess[(i, i)] += 1.0;
    }
    for q in 0..m {
        hess[(np + q, np + q)] += 2.0 * mu * raw.h[q] * raw.h[q];
    }
    let mut lin = jac.tr_mul(&raw.offset) * (2.0 * mu);
    for i in 0..np {
        lin[i] -= theta_k[i];
    }
    let scale = DVector::from_fn(dim, |i, _| 1.0 / hess[(i, i)].max(1e-300).sqrt());
    let hs = DMatrix::from_fn(dim, dim, |i, j| hess[(i, j)] * scale[i] * scale[j]);
    let ls = lin.component_mul(&scale);
    let step = 1.0 / hs.symmetric_eigenvalues().max();
    let project = |v: &mut DVector<f64>| {
        for q in np..np + m {
            v[q] = v[q].max(0.0);
        }
    };
    let objective = |v: &DVector<f64>| 0.5 * v.dot(&(&hs * v)) + ls.dot(v);
    let pg_norm = |v: &DVector<f64>| {
        let mut t = v - (&hs * v + &ls);
        project(&mut t);
        (v - t).amax()
    };
    let tol = 1e-10 * (1.0 + ls.amax());

    let mut best: Option<(f64, DVector<f64>)> = None;
    for _ in 0..starts {
        let mut z = DVector::from_fn(dim, |_, _| rng.random_range(-10.0..10.0));
        project(&mut z);
        let mut y = z.clone();
        let mut t = 1.0_f64;
        for it in 0..5_000_000 {
            let mut next = &y - (&hs * &y + &ls) * step;
            project(&mut next);
            if objective(&next) > objective(&z) {
                t = 1.0;
                next = &z - (&hs * &z + &ls) * step;
                project(&mut next);
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &next + (&next - &z) * ((t - 1.0) / t_next);
            z = next;
            t = t_next;
            if it % 32 == 0 && pg_norm(&z) <= tol {
                break;
            }
        }
        let obj = objective(&z);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, z));
        }
    }
    let w = best.unwrap().1.component_mul(&scale);
    (w.rows(0, np).into_owned(), w.rows(np, m).into_owned(), w.rows(np + m, p).into_owned())
}

/// Central finite-difference gradient.
pub fn finite_diff_grad(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, step: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[i] += step;
        lo[i] -= step;
        (f(&hi) - f(&lo)) / (2.0 * step)
    })
}
