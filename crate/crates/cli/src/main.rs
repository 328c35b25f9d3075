use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use invgame::experiment::{
    certify_stream, compare_learning_rates, ensemble_fraction, ingest_stream, read_report, run_and_write,
    run_on_stream, write_certificates, write_outcome, ExperimentConfig, ExperimentOutcome, RunSettings,
};
use invgame::RegretReport;

#[derive(Debug, Parser)]
#[command(name = "invgame", version, about = "Online identification of Cournot cost parameters from noisy equilibria")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a stream from a config file and run every learning rate on it.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the identifier on an existing observation file.
    IngestRun {
        observations: PathBuf,
        /// Game and identifier settings; defaults are used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write the per-round matrix certificate log of an observation file.
    Certify {
        observations: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for certificates.csv; stdout when absent.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Summarize final average regret over report files.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Group reports by stream and print the fraction of streams where a larger mu1 wins.
        #[arg(long)]
        ensemble: bool,
    },
}

#[derive(Debug, Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Learning rate; repeat for several runs on one stream.
    #[arg(long)]
    mu1: Vec<f64>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Initial estimate as comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    theta_init: Option<Vec<f64>>,
}

impl Overrides {
    fn apply(&self, config: &mut ExperimentConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(rounds) = self.rounds {
            config.rounds = rounds;
        }
        if !self.mu1.is_empty() {
            config.mu1 = self.mu1.clone();
        }
        if let Some(scale) = self.noise_scale {
            config.noise_scale = scale;
        }
        if let Some(dir) = &self.out_dir {
            config.out_dir = dir.clone();
        }
        if let Some(init) = &self.theta_init {
            config.theta_init = Some(init.clone());
        }
        config.validate()?;
        Ok(())
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn print_outcome(outcome: &ExperimentOutcome, dir: &Path) {
    println!("stream {} ({} rounds)", outcome.digest, outcome.observations.len());
    println!("B1 = {:.6e}, C_hat = {:.6e}", outcome.b1, outcome.c_hat);
    let failing = outcome.certificates.iter().filter(|c| c.reduced_enabled() && !c.passes()).count();
    println!("certificate failures: {failing}");
    println!("mu1,final_avg_regret,final_regret,bound_violations");
    for run in &outcome.runs {
        let last = run.report.rows.last();
        let violations = run.report.rows.iter().filter(|r| r.regret > r.bound).count();
        println!(
            "{},{:.6e},{:.6e},{violations}",
            run.mu1,
            last.map_or(f64::NAN, |r| r.avg_regret),
            last.map_or(f64::NAN, |r| r.regret)
        );
    }
    println!("outputs in {}", dir.display());
}

fn run(config: &Path, overrides: &Overrides) -> Result<()> {
    let mut config = ExperimentConfig::load(config)?;
    overrides.apply(&mut config)?;
    let dir = config.out_dir.clone();
    let outcome = run_and_write(&config, &dir).with_context(|| format!("run failed; partial outputs in {}", dir.display()))?;
    print_outcome(&outcome, &dir);
    Ok(())
}

fn ingest_run(observations: &Path, config: Option<&Path>, overrides: &Overrides) -> Result<()> {
    if overrides.rounds.is_some() || overrides.noise_scale.is_some() {
        bail!("--rounds and --noise-scale only apply to generated streams");
    }
    let mut config = load_config(config)?;
    overrides.apply(&mut config)?;
    let stream = ingest_stream(observations)?;
    if stream.is_empty() {
        bail!("{} holds no observations", observations.display());
    }
    let game = config.game()?;
    let outcome = run_on_stream(&game, stream, &RunSettings::from_config(&config))?;
    write_outcome(&outcome, &config.out_dir)?;
    print_outcome(&outcome, &config.out_dir);
    Ok(())
}

fn certify(observations: &Path, config: Option<&Path>, out_dir: Option<&Path>) -> Result<()> {
    let config = load_config(config)?;
    let stream = ingest_stream(observations)?;
    let certs = certify_stream(&config.game()?, &stream)?;
    match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("certificates.csv");
            write_certificates(&stream, &certs, BufWriter::new(fs::File::create(&path)?))?;
            let failing = certs.iter().filter(|c| c.reduced_enabled() && !c.passes()).count();
            let disabled = certs.iter().filter(|c| !c.reduced_enabled()).count();
            println!("{} rounds, {failing} failing, {disabled} without reduced form; wrote {}", certs.len(), path.display());
        }
        None => write_certificates(&stream, &certs, io::stdout().lock())?,
    }
    Ok(())
}

fn print_summary(reports: &[(RegretReport, String)]) -> Result<invgame::experiment::LearningRateSummary> {
    let summary = compare_learning_rates(reports)?;
    println!("stream {}", reports[0].1);
    println!("mu1,final_avg_regret");
    for (mu, avg) in &summary.entries {
        println!("{mu},{avg:.6e}");
    }
    let order: Vec<String> = summary.ordering.iter().map(f64::to_string).collect();
    println!("ordering (lowest regret first): {}", order.join(" < "));
    println!("larger mu1 is better: {}", summary.larger_is_better);
    Ok(summary)
}

fn compare(paths: &[PathBuf], ensemble: bool) -> Result<()> {
    let mut reports = Vec::with_capacity(paths.len());
    for p in paths {
        reports.push(read_report(p)?);
    }
    if !ensemble {
        print_summary(&reports)?;
        return Ok(());
    }
    let mut groups: BTreeMap<String, Vec<(RegretReport, String)>> = BTreeMap::new();
    for r in reports {
        groups.entry(r.1.clone()).or_default().push(r);
    }
    let mut summaries = Vec::with_capacity(groups.len());
    for group in groups.values() {
        summaries.push(print_summary(group)?);
        println!();
    }
    println!("streams: {}, fraction with larger mu1 better: {:.3}", summaries.len(), ensemble_fraction(&summaries));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, overrides } => run(config, overrides),
        Command::IngestRun { observations, config, overrides } => ingest_run(observations, config.as_deref(), overrides),
        Command::Certify { observations, config, out_dir } => certify(observations, config.as_deref(), out_dir.as_deref()),
        Command::Compare { reports, ensemble } => compare(reports, *ensemble),
    };
    let _ = io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
