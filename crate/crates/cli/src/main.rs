use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use backsense::harness::{
    emit_plots, infer, naive_estimate, relative_error, run_algorithm, run_experiment, Algorithm, ExperimentConfig,
    TrialSetup,
};
use backsense::selftest::run_selftest;
use backsense::simulator::{encode_and_transmit, sample_field};
use backsense::{ChannelConfig, Error, ObservationSet, SensingPrior};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "backsense", version, about = "Backscatter sensing simulator and reader inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one field and write the received samples as a text dump.
    Simulate {
        #[command(flatten)]
        scenario: Scenario,
        /// Dump destination (stdout when omitted).
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Also write the true field and active counts as JSON.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run one inference algorithm on a dump or on a fresh simulation.
    Infer {
        /// EM-ML, EM-MAP, GEM-ML, GEM-MAP, VI, EXACT-EM or NAIVE.
        #[arg(long, short)]
        algorithm: Algorithm,
        /// Observation dump written by `simulate`; simulates afresh when omitted.
        #[arg(long, short)]
        input: Option<PathBuf>,
        #[command(flatten)]
        scenario: Scenario,
        /// Write the per-iteration trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Known channel amplitude for NAIVE on a dump.
        #[arg(long)]
        oracle_h: Option<f64>,
    },
    /// Run a sweep described by a JSON config; writes CSV, summary and SVG.
    Experiment {
        config: PathBuf,
        #[arg(long, short, default_value = "results")]
        out_dir: PathBuf,
        /// Override the trial count of the config.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Run the built-in oracle and invariant checks.
    Selftest,
}

/// Scenario parameters; defaults follow the reference simulation setup.
#[derive(Args, Clone)]
struct Scenario {
    #[arg(long, default_value_t = 4)]
    sensors: usize,
    #[arg(long, default_value_t = 4)]
    antennas: usize,
    #[arg(long, default_value_t = 100)]
    slots: usize,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, default_value_t = 10.0)]
    snr_db: f64,
    #[arg(long, default_value_t = 0.0)]
    delta2: f64,
    #[arg(long, default_value_t = 25.0)]
    mu: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_h2: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_w2: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Scenario {
    fn prior(&self, sensors: usize) -> Result<SensingPrior> {
        Ok(SensingPrior::homogeneous(sensors, self.mu, self.sigma, self.rho).map_err(as_config)?)
    }

    fn setup(&self) -> Result<TrialSetup> {
        let prior = self.prior(self.sensors)?;
        let channel = ChannelConfig::new(
            self.antennas,
            self.sensors,
            self.slots,
            self.sigma_h2,
            self.sigma_w2,
            self.snr_db,
        )
        .map_err(as_config)?;
        let field = sample_field(&prior, self.delta2, self.slots, self.seed).map_err(as_config)?;
        Ok(TrialSetup {
            prior,
            field,
            channel,
            seed: self.seed,
        })
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn simulate(scenario: &Scenario, out: Option<&Path>, truth: Option<&Path>) -> Result<()> {
    let setup = scenario.setup()?;
    let obs = encode_and_transmit(&setup.field, &setup.channel, setup.seed)?;
    match out {
        Some(path) => {
            let mut w = create(path)?;
            obs.write_dump(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            obs.write_dump(&mut w)?;
            w.flush()?;
        }
    }
    if let Some(path) = truth {
        let true_t = obs.diagnostics.as_ref().map(|d| d.true_t.clone()).unwrap_or_default();
        let doc = serde_json::json!({ "x": setup.field.x, "true_t": true_t });
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &doc)?;
        writeln!(w)?;
        w.flush()?;
    }
    log::info!("true field {:?}", setup.field.x);
    Ok(())
}

fn load_dump(path: &Path) -> Result<ObservationSet> {
    let file = File::open(path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    Ok(ObservationSet::read_dump(BufReader::new(file)).map_err(as_config)?)
}

fn infer_cmd(
    algorithm: Algorithm,
    input: Option<&Path>,
    scenario: &Scenario,
    trace: Option<&Path>,
    oracle_h: Option<f64>,
) -> Result<()> {
    let (estimate, truth) = match input {
        Some(path) => {
            let obs = load_dump(path)?;
            let prior = scenario.prior(obs.sensors)?;
            let estimate = if algorithm == Algorithm::Naive {
                let h = oracle_h.ok_or_else(|| Error::Config("NAIVE on a dump needs --oracle-h".into()))?;
                let theta = naive_estimate(&obs, h)?;
                let x_hat = prior
                    .mu
                    .iter()
                    .zip(&prior.sigma)
                    .map(|(&mu, &s)| backsense::distributions::inverse_map(theta, mu, s))
                    .collect::<backsense::Result<Vec<f64>>>()?;
                backsense::harness::Estimate {
                    x_hat,
                    iters: 1,
                    trace: None,
                }
            } else {
                infer(algorithm, &obs, &prior, scenario.seed)?
            };
            (estimate, None)
        }
        None => {
            let setup = scenario.setup()?;
            let estimate = run_algorithm(algorithm, &setup)?;
            (estimate, Some(setup.field.x))
        }
    };
    if let (Some(path), Some(t)) = (trace, estimate.trace.as_ref()) {
        let mut w = create(path)?;
        t.write_text(&mut w)?;
        w.flush()?;
    }
    let rel_error = match &truth {
        Some(x) => Some(relative_error(&estimate.x_hat, x)?),
        None => None,
    };
    let doc = serde_json::json!({
        "algorithm": algorithm.name(),
        "x_hat": estimate.x_hat,
        "iterations": estimate.iters,
        "converged": estimate.trace.as_ref().map(|t| t.converged),
        "x_true": truth,
        "rel_error": rel_error,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn experiment(config: &Path, out_dir: &Path, trials: Option<usize>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(t) = trials {
        cfg.trials = t;
        cfg.validate()?;
    }
    std::fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let csv_path = out_dir.join(format!("{}.csv", cfg.name));
    let mut csv = create(&csv_path)?;
    let rows = run_experiment(&cfg, Some(&mut csv))?;
    csv.flush()?;
    drop(csv);
    let failures = rows.iter().filter(|r| r.failed()).count();
    if failures > 0 {
        log::warn!("{failures} of {} cells failed", rows.len());
    }
    for path in emit_plots(&rows, out_dir, &cfg.name)? {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn selftest() -> Result<bool> {
    let mut ok = true;
    for c in run_selftest() {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    Ok(ok)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) | Some(Error::Parse { .. }) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match &cli.command {
        Command::Simulate { scenario, out, truth } => simulate(scenario, out.as_deref(), truth.as_deref()),
        Command::Infer {
            algorithm,
            input,
            scenario,
            trace,
            oracle_h,
        } => infer_cmd(*algorithm, input.as_deref(), scenario, trace.as_deref(), *oracle_h),
        Command::Experiment {
            config,
            out_dir,
            trials,
        } => experiment(config, out_dir, *trials),
        Command::Selftest => match selftest() {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
