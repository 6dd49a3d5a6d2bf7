use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::distributions::{inverse_map, SensingPrior};
use crate::em_uniform::{self, Criterion, EmConfig, UniformParams};
use crate::error::{Error, Result};
use crate::gem_hetero::{run_hetero, GemConfig, HeteroParams};
use crate::simulator::{
    encode_and_transmit, encode_fixed_channel, sample_field, ChannelConfig, FieldRealization, ObservationSet,
};
use crate::trace::EmTrace;
use crate::vi_noisy::{exact_em_noisy_oracle, run_vi, NoisyParams, ViConfig};

use super::config::{Algorithm, ExperimentConfig, PointConfig};
use super::metrics::{naive_estimate, relative_error};

pub const CSV_HEADER: &str = "sweep_name,sweep_value,algorithm,M,seed,rel_error,iters,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub sweep_name: String,
    pub sweep_value: f64,
    pub algorithm: Algorithm,
    pub antennas: usize,
    pub seed: u64,
    /// `NaN` when the algorithm failed on this trial.
    pub rel_error: f64,
    pub iters: usize,
    pub wall_ms: f64,
}

impl ResultRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.sweep_name,
            self.sweep_value,
            self.algorithm,
            self.antennas,
            self.seed,
            self.rel_error,
            self.iters,
            self.wall_ms
        )
    }

    pub fn failed(&self) -> bool {
        self.rel_error.is_nan()
    }
}

/// Everything an algorithm run needs for one trial at one sweep point.
#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub prior: SensingPrior,
    pub field: FieldRealization,
    pub channel: ChannelConfig,
    pub seed: u64,
}

impl TrialSetup {
    pub fn new(cfg: &ExperimentConfig, point: &PointConfig, antennas: usize, seed: u64) -> Result<Self> {
        let prior = cfg.prior(point.rho)?;
        let field = sample_field(&prior, point.delta2, point.slots, seed)?;
        let channel = ChannelConfig::new(
            antennas,
            point.sensors,
            point.slots,
            cfg.sigma_h2,
            cfg.sigma_w2,
            point.snr_db,
        )?;
        Ok(Self {
            prior,
            field,
            channel,
            seed,
        })
    }
}

/// Field estimate of one algorithm run.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub x_hat: Vec<f64>,
    pub iters: usize,
    /// Iteration log; `None` for the one-shot baseline.
    pub trace: Option<EmTrace>,
}

fn broadcast(theta: f64, prior: &SensingPrior) -> Result<Vec<f64>> {
    prior
        .mu
        .iter()
        .zip(&prior.sigma)
        .map(|(&mu, &s)| inverse_map(theta, mu, s))
        .collect()
}

fn criterion_of(algorithm: Algorithm) -> Criterion {
    match algorithm {
        Algorithm::EmMap | Algorithm::GemMap => Criterion::Map,
        _ => Criterion::Ml,
    }
}

/// Runs one of the iterative algorithms on an observation set. `seed` drives
/// the Monte-Carlo draws of VI. The sample-mean baseline needs a known
/// channel gain and is rejected here; see [`naive_estimate`].
pub fn infer(algorithm: Algorithm, obs: &ObservationSet, prior: &SensingPrior, seed: u64) -> Result<Estimate> {
    if prior.len() != obs.sensors {
        return Err(Error::DimensionMismatch {
            what: "prior",
            expected: obs.sensors,
            got: prior.len(),
        });
    }
    let (x_hat, trace) = match algorithm {
        Algorithm::EmMl | Algorithm::EmMap => {
            let r = em_uniform::run(obs, criterion_of(algorithm), UniformParams::initial(obs), &EmConfig::default())?;
            (broadcast(r.params.theta, prior)?, r.trace)
        }
        Algorithm::GemMl | Algorithm::GemMap => {
            let init = HeteroParams::initial(obs);
            let r = run_hetero(obs, criterion_of(algorithm), prior, init, &GemConfig::default())?;
            (r.x_hat, r.em.trace)
        }
        Algorithm::Vi => {
            let r = run_vi(obs, prior, NoisyParams::initial(obs, prior), &ViConfig::default(), seed)?;
            (r.params.x, r.trace)
        }
        Algorithm::ExactEm => {
            let vi = ViConfig::default();
            let init = NoisyParams::initial(obs, prior);
            let r = exact_em_noisy_oracle(obs, prior, init, vi.grid_nodes, vi.tol, vi.max_iter)?;
            (r.params.x, r.trace)
        }
        Algorithm::Naive => {
            return Err(Error::Config(
                "NAIVE needs the known channel gain; use naive_estimate".into(),
            ))
        }
    };
    Ok(Estimate {
        x_hat,
        iters: trace.iterations(),
        trace: Some(trace),
    })
}

/// Simulates the trial's observations and runs `algorithm` on them.
pub fn run_algorithm(algorithm: Algorithm, setup: &TrialSetup) -> Result<Estimate> {
    if algorithm == Algorithm::Naive {
        let gain = setup.channel.sigma_h2.sqrt();
        let obs = encode_fixed_channel(&setup.field, &setup.channel, gain, setup.seed)?;
        let h = setup.channel.tx_scale * setup.channel.rho_bar * gain;
        let theta = naive_estimate(&obs, h)?;
        return Ok(Estimate {
            x_hat: broadcast(theta, &setup.prior)?,
            iters: 1,
            trace: None,
        });
    }
    let obs = encode_and_transmit(&setup.field, &setup.channel, setup.seed)?;
    infer(algorithm, &obs, &setup.prior, setup.seed)
}

fn trial_rows(cfg: &ExperimentConfig, value: f64, trial: usize) -> Vec<ResultRow> {
    let seed = cfg.seed_base + trial as u64;
    let point = cfg.point(value);
    let mut rows = Vec::with_capacity(cfg.antennas.len() * cfg.algorithms.len());
    for &antennas in &cfg.antennas {
        let setup = TrialSetup::new(cfg, &point, antennas, seed);
        for &algorithm in &cfg.algorithms {
            let start = Instant::now();
            let outcome = match &setup {
                Ok(s) => run_algorithm(algorithm, s)
                    .and_then(|e| relative_error(&e.x_hat, &s.field.x).map(|err| (err, e.iters))),
                Err(e) => Err(Error::Config(format!("trial setup failed: {e}"))),
            };
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            let (rel_error, iters) = match outcome {
                Ok(v) => v,
                Err(e) => {
                    log::warn!("{algorithm} failed at {}={value}, seed {seed}: {e}", cfg.sweep.variable.name());
                    (f64::NAN, 0)
                }
            };
            rows.push(ResultRow {
                sweep_name: cfg.sweep.variable.name().to_string(),
                sweep_value: value,
                algorithm,
                antennas,
                seed,
                rel_error,
                iters,
                wall_ms,
            });
        }
    }
    rows
}

/// Runs every (sweep value, trial, antenna count, algorithm) cell. Trials run
/// in parallel; rows are produced in a fixed order and, when `csv` is given,
/// written there one sweep value at a time.
pub fn run_experiment(cfg: &ExperimentConfig, mut csv: Option<&mut dyn Write>) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    if let Some(out) = csv.as_mut() {
        writeln!(out, "{CSV_HEADER}")?;
    }
    let mut all = Vec::new();
    for &value in &cfg.sweep.values {
        let rows: Vec<ResultRow> = (0..cfg.trials)
            .into_par_iter()
            .map(|trial| trial_rows(cfg, value, trial))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect();
        if let Some(out) = csv.as_mut() {
            for row in &rows {
                writeln!(out, "{}", row.csv_line())?;
            }
            out.flush()?;
        }
        log::info!("{} = {value}: {} rows", cfg.sweep.variable.name(), rows.len());
        all.extend(rows);
    }
    Ok(all)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub sweep_name: String,
    pub sweep_value: f64,
    pub algorithm: Algorithm,
    pub antennas: usize,
    /// Median over successful trials; `NaN` if none succeeded.
    pub median: f64,
    pub trials: usize,
    pub failures: usize,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

/// Median error per (sweep value, algorithm, antenna count), in first-seen order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(f64, Algorithm, usize)> = Vec::new();
    for r in rows {
        let key = (r.sweep_value, r.algorithm, r.antennas);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(value, algorithm, antennas)| {
            let cell: Vec<&ResultRow> = rows
                .iter()
                .filter(|r| r.sweep_value == value && r.algorithm == algorithm && r.antennas == antennas)
                .collect();
            let mut ok: Vec<f64> = cell.iter().filter(|r| !r.failed()).map(|r| r.rel_error).collect();
            SummaryRow {
                sweep_name: cell[0].sweep_name.clone(),
                sweep_value: value,
                algorithm,
                antennas,
                failures: cell.len() - ok.len(),
                trials: cell.len(),
                median: median(&mut ok),
            }
        })
        .collect()
}

pub fn write_summary<W: Write>(summary: &[SummaryRow], mut out: W) -> Result<()> {
    writeln!(out, "sweep_name,sweep_value,algorithm,M,median_rel_error,trials,failures")?;
    for s in summary {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.sweep_name, s.sweep_value, s.algorithm, s.antennas, s.median, s.trials, s.failures
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn one_trial_one_value_gives_one_row_per_algorithm() {
        let cfg = ExperimentConfig::from_json(
            r#"{"sweep": {"variable": "L", "values": [30]}, "trials": 1,
                "algorithms": ["EM-ML", "EM-MAP", "GEM-ML", "NAIVE"]}"#,
        )
        .unwrap();
        let mut buf = Vec::new();
        let rows = run_experiment(&cfg, Some(&mut buf)).unwrap();
        assert_eq!(rows.len(), 4);
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(text.lines().count(), 5);
    }
}
