//! Config-driven experiment harness: signal sampling, observation streams,
//! online and batch identification, metric files.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::batch::{self, BatchOptions, PrefixSolution, RegretReport};
use crate::error::{Error, Result};
use crate::forward::{self, Observation};
use crate::game::{cournot_game, ParametricGame, Signal};
use crate::kkt::{self, CertificateReport, KktData};
use crate::online::{self, IdentifierState};

pub const STREAM_SIGNALS: u64 = 0;
pub const STREAM_NOISE: u64 = 1;
pub const STREAM_PROBE: u64 = 2;

const SIGNAL_RESAMPLE_CAP: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlopeSign {
    /// Sample `|b|` from the range and use `b = −|b|`.
    Negate,
    /// Use the sampled value as is.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForwardSolver {
    ClosedForm,
    Generic,
}

/// Experiment settings; every key is optional and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub game: String,
    pub players: usize,
    pub theta_true: Vec<f64>,
    pub theta_max: f64,
    pub rounds: usize,
    pub mu1: Vec<f64>,
    pub seed: u64,
    pub noise_scale: f64,
    pub theta_init: Option<Vec<f64>>,
    pub slope_sign: SlopeSign,
    pub a_range: [f64; 2],
    pub b_range: [f64; 2],
    pub q_range: [f64; 2],
    pub out_dir: PathBuf,
    pub lipschitz_samples: usize,
    pub forward_solver: ForwardSolver,
    pub batch_starts: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            game: "cournot".into(),
            players: 3,
            theta_true: vec![10.0, 7.5, 6.0],
            theta_max: 100.0,
            rounds: 100,
            mu1: vec![0.1],
            seed: 0,
            noise_scale: 1.0,
            theta_init: None,
            slope_sign: SlopeSign::Negate,
            a_range: [15.0, 1800.0],
            b_range: [1.0, 120.0],
            q_range: [5.0, 600.0],
            out_dir: PathBuf::from("out"),
            lipschitz_samples: 2000,
            forward_solver: ForwardSolver::ClosedForm,
            batch_starts: 5,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)?;
        ExperimentConfig::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.game != "cournot" {
            return bad(format!("unknown game {:?}; supported: \"cournot\"", self.game));
        }
        if self.players == 0 {
            return bad("players must be at least 1".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.mu1.is_empty() {
            return bad("mu1 list is empty".into());
        }
        if let Some(m) = self.mu1.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
            return bad(format!("mu1 values must be positive, got {m}"));
        }
        if !(self.theta_max > 0.0 && self.theta_max.is_finite()) {
            return bad(format!("theta_max must be positive, got {}", self.theta_max));
        }
        if self.theta_true.len() != self.players {
            return bad(format!("theta_true has {} entries for {} players", self.theta_true.len(), self.players));
        }
        let in_box = |v: &[f64]| v.iter().all(|t| (0.0..=self.theta_max).contains(t));
        if !in_box(&self.theta_true) {
            return bad(format!("theta_true must lie in [0, {}]", self.theta_max));
        }
        if let Some(init) = &self.theta_init {
            if init.len() != self.players || !in_box(init) {
                return bad(format!("theta_init must have {} entries in [0, {}]", self.players, self.theta_max));
            }
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale must be nonnegative, got {}", self.noise_scale));
        }
        for (name, r) in [("a_range", self.a_range), ("b_range", self.b_range), ("q_range", self.q_range)] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return bad(format!("{name} must satisfy lo <= hi, got {r:?}"));
            }
        }
        if self.batch_starts == 0 {
            return bad("batch_starts must be at least 1".into());
        }
        Ok(())
    }

    pub fn game(&self) -> Result<ParametricGame> {
        cournot_game(self.players, self.theta_max)
    }

    pub fn theta_true(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta_true)
    }

    /// Configured initial estimate, or the box midpoint.
    pub fn theta_init(&self) -> DVector<f64> {
        match &self.theta_init {
            Some(v) => DVector::from_column_slice(v),
            None => DVector::from_element(self.players, 0.5 * self.theta_max),
        }
    }

    pub fn signal_ranges(&self) -> SignalRanges {
        SignalRanges { a: self.a_range, b: self.b_range, q: self.q_range, slope_sign: self.slope_sign }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalRanges {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub q: [f64; 2],
    pub slope_sign: SlopeSign,
}

impl Default for SignalRanges {
    fn default() -> Self {
        let c = ExperimentConfig::default();
        c.signal_ranges()
    }
}

/// Draws a Cournot signal, resampling until the price is positive at the supply floor.
pub fn sample_signal<R: Rng + ?Sized>(rng: &mut R, ranges: &SignalRanges) -> Result<Signal> {
    for _ in 0..SIGNAL_RESAMPLE_CAP {
        let a = rng.random_range(ranges.a[0]..=ranges.a[1]);
        let magnitude = rng.random_range(ranges.b[0]..=ranges.b[1]);
        let q = rng.random_range(ranges.q[0]..=ranges.q[1]);
        match ranges.slope_sign {
            SlopeSign::Negate => {
                if let Ok(u) = Signal::cournot(a, -magnitude, q) {
                    return Ok(u);
                }
            }
            SlopeSign::Literal => {
                if a > 0.0 && q > 0.0 && magnitude != 0.0 && a + magnitude * q > 0.0 {
                    return Signal::new(vec![a, magnitude, q]);
                }
            }
        }
    }
    Err(Error::Config(format!("no admissible signal in {SIGNAL_RESAMPLE_CAP} draws; check the signal ranges")))
}

fn sub_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The `rounds`-long observation stream for a config.
pub fn generate_stream(config: &ExperimentConfig) -> Result<Vec<Observation>> {
    config.validate()?;
    let game = config.game()?;
    let theta = config.theta_true();
    let ranges = config.signal_ranges();
    let mut signals = sub_stream(config.seed, STREAM_SIGNALS);
    let mut noise = sub_stream(config.seed, STREAM_NOISE);
    let mut out = Vec::with_capacity(config.rounds);
    for k in 1..=config.rounds {
        let u = sample_signal(&mut signals, &ranges).map_err(|e| e.at_round(k))?;
        let eq = match config.forward_solver {
            ForwardSolver::ClosedForm => forward::cournot_closed_form(&u, &theta),
            ForwardSolver::Generic => forward::solve_ve(&game, &u, &theta, 1e-10),
        }
        .map_err(|e| e.at_round(k))?;
        out.push(forward::observe(&eq, &u, k, &mut noise, config.noise_scale));
    }
    Ok(out)
}

pub const OBSERVATIONS_VERSION_LINE: &str = "# invgame observations v1";

/// Writes `round,u_1..u_d,y_1..y_n`.
pub fn write_observations<W: Write>(observations: &[Observation], out: W) -> Result<()> {
    let mut out = out;
    let (d, n) = observations.first().map_or((3, 3), |o| (o.u.len(), o.y.len()));
    writeln!(out, "{OBSERVATIONS_VERSION_LINE}")?;
    let mut header = String::from("round");
    for i in 1..=d {
        write!(header, ",u_{i}").unwrap();
    }
    for i in 1..=n {
        write!(header, ",y_{i}").unwrap();
    }
    writeln!(out, "{header}")?;
    for o in observations {
        let mut line = o.round.to_string();
        for v in o.u.as_slice().iter().chain(o.y.iter()) {
            write!(line, ",{v}").unwrap();
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// SHA-256 of the serialized stream, hex encoded.
pub fn stream_digest(observations: &[Observation]) -> String {
    let mut buf = Vec::new();
    write_observations(observations, &mut buf).expect("writing to memory");
    hex::encode(Sha256::digest(&buf))
}

/// Parses an observation file. Lines starting with `#` are ignored.
pub fn ingest_stream(path: &Path) -> Result<Vec<Observation>> {
    let file = fs::File::open(path)?;
    read_observations(BufReader::new(file), &path.display().to_string())
}

pub fn read_observations<R: BufRead>(input: R, path: &str) -> Result<Vec<Observation>> {
    let err = |line: usize, msg: String| Error::Parse { path: path.to_string(), line, msg };
    let mut layout: Option<(usize, usize)> = None;
    let mut out: Vec<Observation> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = text.split(',').map(str::trim).collect();
        let Some((d, n)) = layout else {
            layout = Some(parse_header(&cells).map_err(|m| err(lineno, m))?);
            continue;
        };
        if cells.len() != 1 + d + n {
            return Err(err(lineno, format!("expected {} columns, found {}", 1 + d + n, cells.len())));
        }
        let round: usize = cells[0].parse().map_err(|e| err(lineno, format!("round: {e}")))?;
        let mut values = Vec::with_capacity(d + n);
        for (j, c) in cells[1..].iter().enumerate() {
            let v: f64 = c.parse().map_err(|e| err(lineno, format!("column {}: {e}", j + 2)))?;
            if !v.is_finite() {
                return Err(err(lineno, format!("column {} is not finite", j + 2)));
            }
            values.push(v);
        }
        let prev = out.last().map_or(0, |o| o.round);
        if round <= prev {
            return Err(err(lineno, format!("round {round} does not follow round {prev}")));
        }
        let u = Signal::new(values[..d].to_vec()).map_err(|e| err(lineno, e.to_string()))?;
        let y = DVector::from_column_slice(&values[d..]);
        out.push(Observation { round, u, y });
    }
    if layout.is_none() {
        return Err(err(1, "missing header line".into()));
    }
    Ok(out)
}

fn parse_header(cells: &[&str]) -> std::result::Result<(usize, usize), String> {
    if cells.first() != Some(&"round") {
        return Err("header must start with `round`".into());
    }
    let mut d = 0;
    let mut n = 0;
    for (j, c) in cells[1..].iter().enumerate() {
        let expect_u = format!("u_{}", d + 1);
        let expect_y = format!("y_{}", n + 1);
        if n == 0 && *c == expect_u {
            d += 1;
        } else if *c == expect_y {
            n += 1;
        } else {
            return Err(format!("unexpected header column {} `{c}`", j + 2));
        }
    }
    if d == 0 || n == 0 {
        return Err("header needs u_ and y_ columns".into());
    }
    Ok((d, n))
}

/// Identifier settings applied to an existing stream.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub mu1: Vec<f64>,
    pub theta_init: DVector<f64>,
    pub seed: u64,
    pub lipschitz_samples: usize,
    pub batch: BatchOptions,
}

impl RunSettings {
    pub fn from_config(config: &ExperimentConfig) -> RunSettings {
        RunSettings {
            mu1: config.mu1.clone(),
            theta_init: config.theta_init(),
            seed: config.seed,
            lipschitz_samples: config.lipschitz_samples,
            batch: BatchOptions { starts: config.batch_starts, ..BatchOptions::default() },
        }
    }
}

#[derive(Debug, Clone)]
pub struct MuRun {
    pub mu1: f64,
    pub state: IdentifierState,
    pub report: RegretReport,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub observations: Vec<Observation>,
    pub digest: String,
    pub certificates: Vec<CertificateReport>,
    pub b1: f64,
    pub c_hat: f64,
    pub prefix: Vec<PrefixSolution>,
    pub runs: Vec<MuRun>,
}

/// Assembles the KKT data of every round.
pub fn assemble_all(game: &ParametricGame, observations: &[Observation]) -> Result<Vec<KktData>> {
    observations
        .iter()
        .map(|o| kkt::assemble_kkt(game, &o.y, &o.u).map_err(|e| e.at_round(o.round)))
        .collect()
}

/// Certificate log for every round.
pub fn certify_stream(game: &ParametricGame, observations: &[Observation]) -> Result<Vec<CertificateReport>> {
    Ok(assemble_all(game, observations)?.iter().map(kkt::matrix_certificates).collect())
}

pub fn write_certificates<W: Write>(observations: &[Observation], certs: &[CertificateReport], out: W) -> Result<()> {
    let mut out = out;
    writeln!(out, "# invgame certificates v1")?;
    writeln!(out, "{}", CertificateReport::CSV_HEADER)?;
    for (o, c) in observations.iter().zip(certs) {
        writeln!(out, "{}", c.csv_row(o.round))?;
    }
    out.flush()?;
    Ok(())
}

/// Online runs for every learning rate plus the shared batch reference.
pub fn run_on_stream(game: &ParametricGame, observations: Vec<Observation>, settings: &RunSettings) -> Result<ExperimentOutcome> {
    let digest = stream_digest(&observations);
    let kkts = assemble_all(game, &observations)?;
    let certificates = kkts.iter().map(kkt::matrix_certificates).collect();
    let b1 = game.domain().max_norm();
    let mut probe_rng = sub_stream(settings.seed, STREAM_PROBE);
    let c_hat = kkt::lipschitz_probe(&kkts, game.domain(), settings.lipschitz_samples, &mut probe_rng)?;
    let prefix = batch::prefix_batch(&kkts, game.domain(), &settings.batch)?;
    let mut runs = Vec::with_capacity(settings.mu1.len());
    for &mu1 in &settings.mu1 {
        let state = online::run_online(game, &observations, &settings.theta_init, mu1)?;
        let report = batch::regret(state.trajectory(), &kkts, &prefix, mu1, b1, c_hat)?;
        runs.push(MuRun { mu1, state, report });
    }
    Ok(ExperimentOutcome { observations, digest, certificates, b1, c_hat, prefix, runs })
}

/// Generates the stream of `config` and runs every learning rate on it.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let game = config.game()?;
    let observations = generate_stream(config)?;
    run_on_stream(&game, observations, &RunSettings::from_config(config))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(dir.join(name))?))
}

/// File name stem for a learning rate, e.g. `mu0.1`.
pub fn mu_tag(mu1: f64) -> String {
    format!("mu{mu1}")
}

/// Writes observations, certificates and per-rate trajectory and report files.
pub fn write_outcome(outcome: &ExperimentOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    write_observations(&outcome.observations, create(dir, "observations.csv")?)?;
    written.push(dir.join("observations.csv"));
    write_certificates(&outcome.observations, &outcome.certificates, create(dir, "certificates.csv")?)?;
    written.push(dir.join("certificates.csv"));
    let dim = outcome.runs.first().map_or(0, |r| r.state.theta().len());
    for run in &outcome.runs {
        let tag = mu_tag(run.mu1);
        let traj = format!("trajectory_{tag}.csv");
        online::write_trajectory_csv(run.state.trajectory(), dim, create(dir, &traj)?)?;
        written.push(dir.join(traj));
        let rep = format!("report_{tag}.csv");
        run.report.write_csv(&outcome.digest, create(dir, &rep)?)?;
        written.push(dir.join(rep));
    }
    Ok(written)
}

/// Runs `config` and writes its files stage by stage, so a failure leaves
/// everything computed before it on disk.
pub fn run_and_write(config: &ExperimentConfig, dir: &Path) -> Result<ExperimentOutcome> {
    fs::create_dir_all(dir)?;
    let game = config.game()?;
    let observations = generate_stream(config)?;
    write_observations(&observations, create(dir, "observations.csv")?)?;
    let outcome = run_on_stream(&game, observations, &RunSettings::from_config(config))?;
    write_outcome(&outcome, dir)?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearningRateSummary {
    /// `(μ₁, final average regret)` in input order.
    pub entries: Vec<(f64, f64)>,
    /// Learning rates sorted by increasing final average regret.
    pub ordering: Vec<f64>,
    /// Final average regret strictly decreases as `μ₁` grows.
    pub larger_is_better: bool,
}

/// Final average regret per learning rate on one shared stream.
pub fn compare_learning_rates(reports: &[(RegretReport, String)]) -> Result<LearningRateSummary> {
    if reports.len() < 2 {
        return Err(Error::InvalidArgument("need at least two reports to compare".into()));
    }
    let digest = &reports[0].1;
    if let Some((r, d)) = reports.iter().find(|(_, d)| d != digest) {
        return Err(Error::InvalidArgument(format!("report for mu1={} comes from stream {d}, expected {digest}", r.mu1)));
    }
    let mut entries = Vec::with_capacity(reports.len());
    for (r, _) in reports {
        let avg = r
            .final_avg_regret()
            .ok_or_else(|| Error::InvalidArgument(format!("report for mu1={} has no rows", r.mu1)))?;
        entries.push((r.mu1, avg));
    }
    let mut by_regret = entries.clone();
    by_regret.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
    let mut by_mu = entries.clone();
    by_mu.sort_by(|a, b| a.0.total_cmp(&b.0));
    let larger_is_better = by_mu.windows(2).all(|w| w[0].0 < w[1].0 && w[1].1 < w[0].1);
    Ok(LearningRateSummary { entries, ordering: by_regret.into_iter().map(|e| e.0).collect(), larger_is_better })
}

/// Fraction of seeds in which a larger learning rate gives a lower final average regret.
pub fn ensemble_fraction(summaries: &[LearningRateSummary]) -> f64 {
    if summaries.is_empty() {
        return 0.0;
    }
    summaries.iter().filter(|s| s.larger_is_better).count() as f64 / summaries.len() as f64
}

/// Reads a report file written by [`write_outcome`].
pub fn read_report(path: &Path) -> Result<(RegretReport, String)> {
    let file = fs::File::open(path)?;
    RegretReport::read_csv(BufReader::new(file), &path.display().to_string())
}
