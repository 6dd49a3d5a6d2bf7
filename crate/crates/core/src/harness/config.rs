use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distributions::SensingPrior;
use crate::error::{Error, Result};
use crate::vi_noisy::ORACLE_MAX_SENSORS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "EM-ML")]
    EmMl,
    #[serde(rename = "EM-MAP")]
    EmMap,
    #[serde(rename = "GEM-ML")]
    GemMl,
    #[serde(rename = "GEM-MAP")]
    GemMap,
    #[serde(rename = "VI")]
    Vi,
    #[serde(rename = "EXACT-EM")]
    ExactEm,
    #[serde(rename = "NAIVE")]
    Naive,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::EmMl,
        Algorithm::EmMap,
        Algorithm::GemMl,
        Algorithm::GemMap,
        Algorithm::Vi,
        Algorithm::ExactEm,
        Algorithm::Naive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::EmMl => "EM-ML",
            Algorithm::EmMap => "EM-MAP",
            Algorithm::GemMl => "GEM-ML",
            Algorithm::GemMap => "GEM-MAP",
            Algorithm::Vi => "VI",
            Algorithm::ExactEm => "EXACT-EM",
            Algorithm::Naive => "NAIVE",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepVariable {
    L,
    #[serde(rename = "rho")]
    Rho,
    #[serde(rename = "snr_db")]
    SnrDb,
    #[serde(rename = "delta2")]
    Delta2,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::L => "L",
            SweepVariable::Rho => "rho",
            SweepVariable::SnrDb => "snr_db",
            SweepVariable::Delta2 => "delta2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_antennas() -> Vec<usize> {
    vec![4]
}
fn default_sensors() -> usize {
    4
}
fn default_slots() -> usize {
    100
}
fn default_rho() -> f64 {
    0.5
}
fn default_snr_db() -> f64 {
    10.0
}
fn default_mu() -> f64 {
    25.0
}
fn default_one() -> f64 {
    1.0
}
fn default_trials() -> usize {
    100
}
fn default_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::EmMl, Algorithm::EmMap]
}

/// One trend study: a sweep over a single variable with everything else fixed.
/// Missing fields take the defaults of the reference simulation setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub sweep: Sweep,
    /// Receive antenna counts `M`; each one is a separate series.
    #[serde(default = "default_antennas")]
    pub antennas: Vec<usize>,
    #[serde(default = "default_sensors")]
    pub sensors: usize,
    #[serde(default = "default_slots")]
    pub slots: usize,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_snr_db")]
    pub snr_db: f64,
    /// Measurement-noise variance of the simulated field (0 = noise-free).
    #[serde(default)]
    pub delta2: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_one")]
    pub sigma: f64,
    #[serde(default = "default_one")]
    pub sigma_h2: f64,
    #[serde(default = "default_one")]
    pub sigma_w2: f64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed_base: u64,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.sweep.values.is_empty() {
            return fail("sweep.values must not be empty".into());
        }
        if self.trials == 0 {
            return fail("trials must be at least 1".into());
        }
        if self.algorithms.is_empty() {
            return fail("algorithms must not be empty".into());
        }
        if self.antennas.is_empty() || self.antennas.contains(&0) {
            return fail("antennas must be a non-empty list of positive counts".into());
        }
        if self.sensors == 0 || self.slots == 0 {
            return fail("sensors and slots must be positive".into());
        }
        if self.algorithms.contains(&Algorithm::ExactEm) && self.sensors > ORACLE_MAX_SENSORS {
            return fail(format!("EXACT-EM supports at most {ORACLE_MAX_SENSORS} sensors"));
        }
        let positive = [("sigma", self.sigma), ("sigma_h2", self.sigma_h2), ("sigma_w2", self.sigma_w2)];
        for (what, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{what} must be positive"));
            }
        }
        if !self.mu.is_finite() || !self.snr_db.is_finite() {
            return fail("mu and snr_db must be finite".into());
        }
        check_rho(self.rho)?;
        check_delta2(self.delta2)?;
        for &v in &self.sweep.values {
            match self.sweep.variable {
                SweepVariable::L => {
                    if !(v >= 1.0 && v.fract() == 0.0) {
                        return fail(format!("L values must be positive integers, got {v}"));
                    }
                }
                SweepVariable::Rho => check_rho(v)?,
                SweepVariable::SnrDb => {
                    if !v.is_finite() {
                        return fail("snr_db values must be finite".into());
                    }
                }
                SweepVariable::Delta2 => check_delta2(v)?,
            }
        }
        Ok(())
    }

    /// Fixed parameters with the sweep variable set to `value`.
    pub fn point(&self, value: f64) -> PointConfig {
        let mut p = PointConfig {
            sensors: self.sensors,
            slots: self.slots,
            rho: self.rho,
            snr_db: self.snr_db,
            delta2: self.delta2,
        };
        match self.sweep.variable {
            SweepVariable::L => p.slots = value as usize,
            SweepVariable::Rho => p.rho = value,
            SweepVariable::SnrDb => p.snr_db = value,
            SweepVariable::Delta2 => p.delta2 = value,
        }
        p
    }

    pub fn prior(&self, rho: f64) -> Result<SensingPrior> {
        SensingPrior::homogeneous(self.sensors, self.mu, self.sigma, rho)
    }
}

/// Parameters of one sweep point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointConfig {
    pub sensors: usize,
    pub slots: usize,
    pub rho: f64,
    pub snr_db: f64,
    pub delta2: f64,
}

fn check_rho(rho: f64) -> Result<()> {
    if (0.0..1.0).contains(&rho) {
        Ok(())
    } else {
        Err(Error::Config(format!("rho must lie in [0, 1), got {rho}")))
    }
}

fn check_delta2(delta2: f64) -> Result<()> {
    if delta2 >= 0.0 && delta2.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("delta2 must be non-negative, got {delta2}")))
    }
}
