//! Hindsight reference: batch minimizers of the summed loss, regret and the
//! deviation between online and batch estimates.

use std::io::{BufRead, Write};
use std::time::Instant;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::game::ThetaBox;
use crate::kkt::{self, KktData};
use crate::linalg;
use crate::online::{csv_err, TrajectoryRecord};

#[derive(Debug, Clone, Copy)]
pub struct BatchOptions {
    /// Bound on the projected-gradient residual of the mean loss.
    pub tol: f64,
    pub max_iter: usize,
    pub starts: usize,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions { tol: 1e-8, max_iter: 20_000, starts: 5 }
    }
}

#[derive(Debug, Clone)]
pub struct BatchSolution {
    pub theta: DVector<f64>,
    /// `Σ_k l(θ; yᵏ, uᵏ)`.
    pub value: f64,
    /// `‖θ − Π(θ − ∇f/K)‖∞` with `f` the summed loss.
    pub residual: f64,
    pub iterations: usize,
}

/// Summed loss and its gradient.
pub fn summed_loss(kkts: &[KktData], theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    let mut value = 0.0;
    let mut grad = DVector::zeros(theta.len());
    for data in kkts {
        let (l, s) = kkt::loss_and_subgradient(data, theta)?;
        value += l.value;
        grad += s;
    }
    Ok((value, grad))
}

fn pg_residual(domain: &ThetaBox, theta: &DVector<f64>, grad: &DVector<f64>, count: usize) -> f64 {
    linalg::inf_norm(&(theta - domain.project(&(theta - grad / count as f64))))
}

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while i > 0 {
        out += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    out
}

const PRIMES: [usize; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// `index`-th Halton point (1-based) mapped into the box.
pub fn halton_point(domain: &ThetaBox, index: usize) -> DVector<f64> {
    DVector::from_fn(domain.dim(), |i, _| {
        let t = radical_inverse(index, PRIMES[i % PRIMES.len()] + 56 * (i / PRIMES.len()));
        domain.lower()[i] + t * (domain.upper()[i] - domain.lower()[i])
    })
}

/// Deterministic start list: the warm start if any, the box midpoint, then Halton points.
pub fn start_points(domain: &ThetaBox, warm: Option<&DVector<f64>>, count: usize) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(count);
    if let Some(w) = warm {
        out.push(domain.project(w));
    }
    out.push(domain.midpoint());
    let mut idx = 1;
    while out.len() < count {
        out.push(halton_point(domain, idx));
        idx += 1;
    }
    out.truncate(count.max(1));
    out
}

/// Projected gradient with Barzilai–Borwein steps and Armijo backtracking
/// from a single start.
pub fn solve_from(kkts: &[KktData], domain: &ThetaBox, start: &DVector<f64>, opts: &BatchOptions) -> Result<BatchSolution> {
    let count = kkts.len();
    let lipschitz: f64 = 2.0 * kkts.iter().map(|d| linalg::sym_max_eig(&(d.basis() * d.basis().transpose()))).sum::<f64>();
    let mut step = 1.0 / lipschitz.max(1e-12);
    let mut theta = domain.project(start);
    let (mut f, mut g) = summed_loss(kkts, &theta)?;
    let mut residual = pg_residual(domain, &theta, &g, count);
    for it in 0..opts.max_iter {
        if residual <= opts.tol {
            return Ok(BatchSolution { theta, value: f, residual, iterations: it });
        }
        let slack = 4.0 * f64::EPSILON * (1.0 + f.abs());
        let mut trial = step;
        let (next, f_next, g_next) = loop {
            let next = domain.project(&(&theta - &g * trial));
            let (fn_, gn) = summed_loss(kkts, &next)?;
            if fn_ <= f + 1e-4 * g.dot(&(&next - &theta)) + slack {
                break (next, fn_, gn);
            }
            trial *= 0.5;
            if trial < 1e-20 {
                return Err(Error::NotConverged { method: "batch line search", iterations: it, residual });
            }
        };
        let s = &next - &theta;
        let y = &g_next - &g;
        let sy = s.dot(&y);
        step = if sy > 0.0 { (s.norm_squared() / sy).clamp(1e-12, 1e12) } else { trial * 2.0 };
        theta = next;
        f = f_next;
        g = g_next;
        residual = pg_residual(domain, &theta, &g, count);
    }
    if residual <= opts.tol {
        return Ok(BatchSolution { theta, value: f, residual, iterations: opts.max_iter });
    }
    Err(Error::NotConverged { method: "batch projected gradient", iterations: opts.max_iter, residual })
}

/// Minimizer of the summed loss over the box, best of several starts.
pub fn batch_solve(kkts: &[KktData], domain: &ThetaBox, opts: &BatchOptions, warm: Option<&DVector<f64>>) -> Result<BatchSolution> {
    if kkts.is_empty() {
        return Err(Error::InvalidArgument("batch solve needs at least one observation".into()));
    }
    if let Some(d) = kkts.iter().find(|d| d.n_params() != domain.dim()) {
        return Err(Error::Dimension { what: "parameter box", expected: d.n_params(), got: domain.dim() });
    }
    let mut best: Option<BatchSolution> = None;
    for start in start_points(domain, warm, opts.starts) {
        let sol = solve_from(kkts, domain, &start, opts)?;
        if best.as_ref().is_none_or(|b| sol.value < b.value) {
            best = Some(sol);
        }
    }
    Ok(best.expect("at least one start"))
}

#[derive(Debug, Clone)]
pub struct PrefixSolution {
    pub solution: BatchSolution,
    pub wall_time: f64,
}

/// Batch solutions `θ*ᵏ` for every prefix `1..=k`, each warm-started from the previous one.
pub fn prefix_batch(kkts: &[KktData], domain: &ThetaBox, opts: &BatchOptions) -> Result<Vec<PrefixSolution>> {
    let mut out: Vec<PrefixSolution> = Vec::with_capacity(kkts.len());
    for k in 1..=kkts.len() {
        let warm = out.last().map(|p| p.solution.theta.clone());
        let start = Instant::now();
        let solution = batch_solve(&kkts[..k], domain, opts, warm.as_ref()).map_err(|e| e.at_round(k))?;
        out.push(PrefixSolution { solution, wall_time: start.elapsed().as_secs_f64() });
    }
    Ok(out)
}

/// `‖θᵏ − θ*ᵏ‖` per round.
pub fn deviation_curve(trajectory: &[TrajectoryRecord], prefix: &[PrefixSolution]) -> Result<Vec<f64>> {
    if trajectory.len() != prefix.len() {
        return Err(Error::Dimension { what: "prefix solutions", expected: trajectory.len(), got: prefix.len() });
    }
    Ok(trajectory.iter().zip(prefix).map(|(r, p)| (&r.theta - &p.solution.theta).norm()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretRow {
    pub k: usize,
    pub cumulative_online_loss: f64,
    pub cumulative_batch_loss: f64,
    pub regret: f64,
    pub avg_regret: f64,
    pub deviation: f64,
    pub bound: f64,
    pub batch_wall_time: f64,
    pub online_wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretReport {
    pub mu1: f64,
    pub b1: f64,
    pub c_hat: f64,
    pub rows: Vec<RegretRow>,
}

/// `(2 B₁² / μ₁ + μ₁ C²) √k`.
pub fn regret_bound(k: usize, mu1: f64, b1: f64, c_hat: f64) -> f64 {
    (2.0 * b1 * b1 / mu1 + mu1 * c_hat * c_hat) * (k as f64).sqrt()
}

/// Regret `R_k = Σ_{j≤k} l_j(θʲ) − Σ_{j≤k} l_j(θ*ᵏ)` for every prefix, with the
/// deviation curve and bound.
pub fn regret(
    trajectory: &[TrajectoryRecord],
    kkts: &[KktData],
    prefix: &[PrefixSolution],
    mu1: f64,
    b1: f64,
    c_hat: f64,
) -> Result<RegretReport> {
    if trajectory.len() != kkts.len() {
        return Err(Error::Dimension { what: "observations", expected: trajectory.len(), got: kkts.len() });
    }
    let deviation = deviation_curve(trajectory, prefix)?;
    let mut rows = Vec::with_capacity(kkts.len());
    let mut online = 0.0;
    for (i, rec) in trajectory.iter().enumerate() {
        let k = i + 1;
        if rec.round != k {
            return Err(Error::InvalidArgument(format!("trajectory round {} at position {k}", rec.round)));
        }
        online += kkt::loss(&kkts[i], &rec.theta)?.value;
        let batch = summed_loss(&kkts[..k], &prefix[i].solution.theta)?.0;
        let r = online - batch;
        rows.push(RegretRow {
            k,
            cumulative_online_loss: online,
            cumulative_batch_loss: batch,
            regret: r,
            avg_regret: r / k as f64,
            deviation: deviation[i],
            bound: regret_bound(k, mu1, b1, c_hat),
            batch_wall_time: prefix[i].wall_time,
            online_wall_time: rec.wall_time,
        });
    }
    Ok(RegretReport { mu1, b1, c_hat, rows })
}

/// Rounds whose regret exceeds the bound for the given constants.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub failures: Vec<usize>,
}

impl BoundCheck {
    pub fn passes(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn bound_check(report: &RegretReport, mu1: f64, b1: f64, c_hat: f64) -> BoundCheck {
    let failures = report
        .rows
        .iter()
        .filter(|r| r.regret > regret_bound(r.k, mu1, b1, c_hat))
        .map(|r| r.k)
        .collect();
    BoundCheck { failures }
}

pub const REPORT_HEADER: &str = "k,cumulative_online_loss,cumulative_batch_loss,regret,avg_regret,deviation,bound,batch_wall_time_s,online_wall_time_s";

impl RegretReport {
    pub fn final_avg_regret(&self) -> Option<f64> {
        self.rows.last().map(|r| r.avg_regret)
    }

    /// Writes a versioned comment line followed by the CSV table.
    pub fn write_csv<W: Write>(&self, stream: &str, out: W) -> Result<()> {
        let mut out = out;
        writeln!(out, "# invgame regret-report v1 mu1={} stream={} b1={} c={}", self.mu1, stream, self.b1, self.c_hat)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_HEADER.split(',')).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.k.to_string(),
                r.cumulative_online_loss.to_string(),
                r.cumulative_batch_loss.to_string(),
                r.regret.to_string(),
                r.avg_regret.to_string(),
                r.deviation.to_string(),
                r.bound.to_string(),
                r.batch_wall_time.to_string(),
                r.online_wall_time.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses a report written by [`RegretReport::write_csv`]; returns it with its stream digest.
    pub fn read_csv<R: BufRead>(input: R, path: &str) -> Result<(RegretReport, String)> {
        let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_string(), line, msg };
        let mut lines = input.lines();
        let first = lines.next().ok_or_else(|| parse_err(1, "empty report".into()))??;
        let meta = first
            .strip_prefix("# invgame regret-report v1 ")
            .ok_or_else(|| parse_err(1, "missing report version line".into()))?;
        let (mut mu1, mut b1, mut c_hat, mut stream) = (None, None, None, None);
        for field in meta.split_whitespace() {
            let (key, value) = field.split_once('=').ok_or_else(|| parse_err(1, format!("bad field {field:?}")))?;
            let num = || value.parse::<f64>().map_err(|e| parse_err(1, format!("{key}: {e}")));
            match key {
                "mu1" => mu1 = Some(num()?),
                "b1" => b1 = Some(num()?),
                "c" => c_hat = Some(num()?),
                "stream" => stream = Some(value.to_string()),
                _ => return Err(parse_err(1, format!("unknown field {key:?}"))),
            }
        }
        let missing = |what: &str| parse_err(1, format!("missing {what}"));
        let header = lines.next().ok_or_else(|| parse_err(2, "missing header".into()))??;
        if header.trim() != REPORT_HEADER {
            return Err(parse_err(2, format!("unexpected header {header:?}")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 3;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 9 {
                return Err(parse_err(lineno, format!("expected 9 columns, found {}", cells.len())));
            }
            let f = |j: usize| cells[j].trim().parse::<f64>().map_err(|e| parse_err(lineno, format!("column {}: {e}", j + 1)));
            let k = cells[0].trim().parse::<usize>().map_err(|e| parse_err(lineno, format!("column 1: {e}")))?;
            rows.push(RegretRow {
                k,
                cumulative_online_loss: f(1)?,
                cumulative_batch_loss: f(2)?,
                regret: f(3)?,
                avg_regret: f(4)?,
                deviation: f(5)?,
                bound: f(6)?,
                batch_wall_time: f(7)?,
                online_wall_time: f(8)?,
            });
        }
        let report = RegretReport {
            mu1: mu1.ok_or_else(|| missing("mu1"))?,
            b1: b1.ok_or_else(|| missing("b1"))?,
            c_hat: c_hat.ok_or_else(|| missing("c"))?,
            rows,
        };
        Ok((report, stream.ok_or_else(|| missing("stream"))?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{cournot_closed_form, observe};
    use crate::game::{cournot_game, Signal};
    use crate::online::run_online;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    fn theta_true() -> DVector<f64> {
        dv(&[10.0, 7.5, 6.0])
    }

    fn stream(seed: u64, rounds: usize, noise: f64) -> Vec<crate::forward::Observation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        while out.len() < rounds {
            let a = rng.random_range(15.0..1800.0);
            let b = -rng.random_range(1.0..120.0);
            let q = rng.random_range(5.0..600.0);
            if let Ok(u) = Signal::cournot(a, b, q) {
                let eq = cournot_closed_form(&u, &theta_true()).unwrap();
                out.push(observe(&eq, &u, out.len() + 1, &mut rng, noise));
            }
        }
        out
    }

    fn kkts(obs: &[crate::forward::Observation]) -> Vec<KktData> {
        let game = cournot_game(3, 100.0).unwrap();
        obs.iter().map(|o| kkt::assemble_kkt(&game, &o.y, &o.u).unwrap()).collect()
    }

    #[test]
    fn halton_points_are_in_the_box_and_distinct() {
        let domain = ThetaBox::uniform(3, 0.0, 100.0).unwrap();
        let pts = start_points(&domain, None, 5);
        assert_eq!(pts.len(), 5);
        assert_eq!(pts[0], domain.midpoint());
        assert!((halton_point(&domain, 1) - dv(&[50.0, 100.0 / 3.0, 20.0])).amax() < 1e-12);
        for (i, p) in pts.iter().enumerate() {
            assert!(domain.contains(p));
            assert!(pts[..i].iter().all(|q| q != p));
        }
    }

    #[test]
    fn single_inactive_observation_recovers_truth() {
        let u = Signal::cournot(500.0, -2.0, 5.0).unwrap();
        let eq = cournot_closed_form(&u, &theta_true()).unwrap();
        assert_eq!(eq.lambda[0], 0.0);
        let obs = observe(&eq, &u, 1, &mut ChaCha8Rng::seed_from_u64(0), 0.0);
        let data = kkts(&[obs]);
        let domain = ThetaBox::uniform(3, 0.0, 100.0).unwrap();
        let sol = batch_solve(&data, &domain, &BatchOptions::default(), None).unwrap();
        assert!((&sol.theta - theta_true()).amax() < 1e-6);
    }

    #[test]
    fn noiseless_batch_is_truth() {
        let data = kkts(&stream(1, 20, 0.0));
        let domain = ThetaBox::uniform(3, 0.0, 100.0).unwrap();
        let sol = batch_solve(&data, &domain, &BatchOptions::default(), None).unwrap();
        assert!((&sol.theta - theta_true()).amax() < 1e-6);
        assert!(sol.value < 1e-10);
    }

    #[test]
    fn batch_beats_every_trajectory_point() {
        let obs = stream(2, 30, 1.0);
        let data = kkts(&obs);
        let game = cournot_game(3, 100.0).unwrap();
        let state = run_online(&game, &obs, &game.domain().midpoint(), 0.1).unwrap();
        let sol = batch_solve(&data, game.domain(), &BatchOptions::default(), None).unwrap();
        assert!(sol.residual <= 1e-8);
        for r in state.trajectory() {
            assert!(sol.value <= summed_loss(&data, &r.theta).unwrap().0 + 1e-9);
        }
    }

    #[test]
    fn fixed_point_run_has_zero_regret() {
        let obs = stream(3, 15, 0.0);
        let data = kkts(&obs);
        let game = cournot_game(3, 100.0).unwrap();
        let state = run_online(&game, &obs, &theta_true(), 0.1).unwrap();
        let prefix = prefix_batch(&data, game.domain(), &BatchOptions::default()).unwrap();
        let report = regret(state.trajectory(), &data, &prefix, 0.1, game.domain().max_norm(), 1.0).unwrap();
        for row in &report.rows {
            assert!(row.regret.abs() < 1e-9);
            assert!(row.deviation < 1e-6);
        }
        assert!(bound_check(&report, 0.1, game.domain().max_norm(), 1.0).passes());
    }

    #[test]
    fn understated_constant_fails_the_bound() {
        let row = |k: usize, regret: f64| RegretRow {
            k,
            cumulative_online_loss: regret,
            cumulative_batch_loss: 0.0,
            regret,
            avg_regret: regret / k as f64,
            deviation: 0.0,
            bound: 0.0,
            batch_wall_time: 0.0,
            online_wall_time: 0.0,
        };
        let report = RegretReport { mu1: 10.0, b1: 1.0, c_hat: 100.0, rows: vec![row(1, 5.0e4), row(4, 9.0e4)] };
        assert!(bound_check(&report, 10.0, 1.0, 100.0).passes());
        assert_eq!(bound_check(&report, 10.0, 1.0, 1.0).failures, vec![1, 4]);
    }

    #[test]
    fn regret_sum_order_invariance() {
        let obs = stream(4, 25, 1.0);
        let data = kkts(&obs);
        let theta = dv(&[20.0, 30.0, 40.0]);
        let forward = summed_loss(&data, &theta).unwrap().0;
        let rev: Vec<_> = data.iter().rev().cloned().collect();
        let backward = summed_loss(&rev, &theta).unwrap().0;
        assert!((forward - backward).abs() <= 1e-9 * (1.0 + forward));
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let obs = stream(5, 3, 1.0);
        let data = kkts(&obs);
        let game = cournot_game(3, 100.0).unwrap();
        let state = run_online(&game, &obs, &theta_true(), 0.1).unwrap();
        let prefix = prefix_batch(&data[..2], game.domain(), &BatchOptions::default()).unwrap();
        assert!(regret(state.trajectory(), &data, &prefix, 0.1, 1.0, 1.0).is_err());
        assert!(regret(state.trajectory(), &data[..2], &prefix, 0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn report_csv_round_trip() {
        let report = RegretReport {
            mu1: 0.1,
            b1: 173.2,
            c_hat: 12.5,
            rows: vec![RegretRow {
                k: 1,
                cumulative_online_loss: 3.25,
                cumulative_batch_loss: 1.0,
                regret: 2.25,
                avg_regret: 2.25,
                deviation: 0.5,
                bound: 1e6,
                batch_wall_time: 0.01,
                online_wall_time: 0.001,
            }],
        };
        let mut buf = Vec::new();
        report.write_csv("abc", &mut buf).unwrap();
        let (back, digest) = RegretReport::read_csv(&buf[..], "mem").unwrap();
        assert_eq!(back, report);
        assert_eq!(digest, "abc");
    }
}
