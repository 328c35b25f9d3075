//! Convex quadratic programs with nonnegativity on a leading block of variables.
//!
//! ```text
//! minimize ½ zᵀ G z + fᵀ z   subject to z[i] ≥ 0 for i < bounded
//! ```
//!
//! The remaining variables are free. With `G` positive definite the primal
//! active-set method below (Lawson–Hanson style, free variables permanently
//! in the passive set) terminates finitely. [`solve_projected`] handles the
//! positive-semidefinite case.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Solution of a bound-constrained QP.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Infinity norm of the projected-gradient optimality residual.
    pub residual: f64,
    pub iterations: usize,
}

/// Projected-gradient optimality residual: `|min(z_i, ∇_i)|` on bounded
/// coordinates and `|∇_i|` on free ones.
pub fn kkt_residual(g: &DMatrix<f64>, f: &DVector<f64>, z: &DVector<f64>, bounded: usize) -> f64 {
    let grad = g * z + f;
    grad.iter()
        .enumerate()
        .map(|(i, gi)| if i < bounded { (z[i] - (z[i] - gi).max(0.0)).abs() } else { gi.abs() })
        .fold(0.0, f64::max)
}

fn solve_passive(g: &DMatrix<f64>, f: &DVector<f64>, passive: &[usize]) -> Result<DVector<f64>> {
    let k = passive.len();
    let mut s = DVector::zeros(g.nrows());
    if k == 0 {
        return Ok(s);
    }
    let gp = DMatrix::from_fn(k, k, |i, j| g[(passive[i], passive[j])]);
    let fp = DVector::from_fn(k, |i, _| -f[passive[i]]);
    let sol = linalg::spd_solve_vec(&gp, &fp, "active-set reduced Hessian")?;
    for (i, &p) in passive.iter().enumerate() {
        s[p] = sol[i];
    }
    Ok(s)
}

/// Active-set solve; requires `G` symmetric positive definite.
pub fn solve_active_set(g: &DMatrix<f64>, f: &DVector<f64>, bounded: usize, tol: f64) -> Result<QpSolution> {
    let n = f.len();
    if g.shape() != (n, n) || bounded > n {
        return Err(Error::Dimension { what: "QP Hessian", expected: n, got: g.nrows() });
    }
    let scale = 1.0 + f.amax() + g.amax();
    let mut in_passive = vec![false; n];
    for p in in_passive.iter_mut().skip(bounded) {
        *p = true;
    }
    let passive_list = |flags: &[bool]| -> Vec<usize> { (0..n).filter(|&i| flags[i]).collect() };

    let mut z = solve_passive(g, f, &passive_list(&in_passive))?;
    let max_outer = 3 * n + 10;
    let mut iterations = 0;
    loop {
        iterations += 1;
        if iterations > max_outer {
            let residual = kkt_residual(g, f, &z, bounded);
            return Err(Error::NotConverged { method: "active-set QP", iterations, residual });
        }
        let w = -(g * &z + f);
        let candidate = (0..bounded)
            .filter(|&i| !in_passive[i])
            .max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let entering = match candidate {
            Some(i) if w[i] > tol * scale => i,
            _ => break,
        };
        in_passive[entering] = true;
        let trial = solve_passive(g, f, &passive_list(&in_passive))?;
        if trial[entering] <= 0.0 {
            // the multiplier is positive only at rounding level
            in_passive[entering] = false;
            break;
        }
        // inner loop: restore feasibility of the passive bounded variables
        for _ in 0..=n {
            let s = solve_passive(g, f, &passive_list(&in_passive))?;
            let zero_tol = 1e-14 * (1.0 + z.amax().max(s.amax()));
            let blocking = (0..bounded).filter(|&i| in_passive[i] && s[i] <= zero_tol);
            let mut alpha = 1.0_f64;
            let mut any = false;
            for i in blocking {
                any = true;
                let denom = z[i] - s[i];
                if denom > 0.0 {
                    alpha = alpha.min(z[i] / denom);
                } else {
                    alpha = 0.0;
                }
            }
            if !any {
                z = s;
                break;
            }
            z += (s - &z) * alpha;
            let zero_tol = 1e-14 * (1.0 + z.amax());
            for i in 0..bounded {
                if in_passive[i] && z[i] <= zero_tol {
                    in_passive[i] = false;
                    z[i] = 0.0;
                }
            }
        }
    }
    for zi in z.iter_mut().take(bounded) {
        if *zi < 0.0 {
            *zi = 0.0;
        }
    }
    let residual = kkt_residual(g, f, &z, bounded);
    Ok(QpSolution { z, residual, iterations })
}

/// Accelerated projected gradient with adaptive restart; works for
/// positive-semidefinite `G`. Stops when the optimality residual drops below
/// `tol` times the problem scale.
pub fn solve_projected(
    g: &DMatrix<f64>,
    f: &DVector<f64>,
    bounded: usize,
    tol: f64,
    max_iter: usize,
) -> Result<QpSolution> {
    let n = f.len();
    let lipschitz = linalg::sym_max_eig(g).max(1e-300);
    let step = 1.0 / lipschitz;
    let scale = 1.0 + f.amax() + g.amax();
    let project = |v: &mut DVector<f64>| {
        for vi in v.iter_mut().take(bounded) {
            *vi = vi.max(0.0);
        }
    };
    let objective = |z: &DVector<f64>| 0.5 * z.dot(&(g * z)) + f.dot(z);

    let mut z = DVector::zeros(n);
    let mut y = z.clone();
    let mut t = 1.0_f64;
    let mut prev_obj = objective(&z);
    for it in 1..=max_iter {
        let mut next = &y - (g * &y + f) * step;
        project(&mut next);
        let mut obj = objective(&next);
        if obj > prev_obj {
            // restart momentum with a plain projected step from z
            t = 1.0;
            next = &z - (g * &z + f) * step;
            project(&mut next);
            obj = objective(&next);
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + (&next - &z) * ((t - 1.0) / t_next);
        z = next;
        t = t_next;
        prev_obj = obj;
        if it % 16 == 0 || it == max_iter {
            let residual = kkt_residual(g, f, &z, bounded);
            if residual <= tol * scale {
                return Ok(QpSolution { z, residual, iterations: it });
            }
        }
    }
    let residual = kkt_residual(g, f, &z, bounded);
    if residual <= tol * scale {
        return Ok(QpSolution { z, residual, iterations: max_iter });
    }
    Err(Error::NotConverged { method: "projected-gradient QP", iterations: max_iter, residual })
}
