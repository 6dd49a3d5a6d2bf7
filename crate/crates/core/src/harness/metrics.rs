use crate::distributions::clamp_theta;
use crate::error::{Error, Result};
use crate::simulator::ObservationSet;

/// `||x_hat - x|| / ||x||`
pub fn relative_error(x_hat: &[f64], x: &[f64]) -> Result<f64> {
    if x_hat.len() != x.len() {
        return Err(Error::DimensionMismatch {
            what: "x_hat",
            expected: x.len(),
            got: x_hat.len(),
        });
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::OutOfDomain {
            what: "||x||",
            value: 0.0,
            domain: "(0, inf)",
        });
    }
    let diff = x_hat.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(diff / norm)
}

/// Sample-mean estimate of a common `theta` from fixed-channel observations
/// with known real gain `oracle_h`: the average real part of every received
/// sample, divided by `oracle_h * N`.
pub fn naive_estimate(obs: &ObservationSet, oracle_h: f64) -> Result<f64> {
    if oracle_h == 0.0 || !oracle_h.is_finite() {
        return Err(Error::OutOfDomain {
            what: "oracle_h",
            value: oracle_h,
            domain: "nonzero",
        });
    }
    if obs.y.is_empty() {
        return Err(Error::Config("naive estimate needs raw samples, not norms".into()));
    }
    let count = (obs.slots() * obs.antennas) as f64;
    let total: f64 = obs.y.iter().flatten().map(|v| v.re).sum();
    Ok(clamp_theta(total / (count * oracle_h * obs.sensors as f64)))
}
