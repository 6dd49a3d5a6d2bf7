//! Per-iteration record of an EM-family run and its text serialisation.

use std::io::Write;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Tolerance,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Incomplete-data log-likelihood at the parameters produced by this
    /// cycle (for variational runs: the evidence lower bound).
    pub loglik: f64,
    /// Log-likelihood after the closed-form M-step but before the
    /// `(sigma_h2, sigma_w2)` regression projection, when available.
    pub loglik_pre_projection: Option<f64>,
    /// Value the stopping rule tracks: log-likelihood, plus log-prior for MAP.
    pub objective: f64,
    pub theta: Vec<f64>,
    pub sigma_h2: f64,
    pub sigma_w2: f64,
    /// Root of the printed MAP stationarity equation, kept for comparison.
    pub map_root: Option<f64>,
    /// GEM line search exhausted its halvings this cycle.
    pub line_search_failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmTrace {
    /// Objective at the initial parameters, before any M-step.
    pub initial_objective: f64,
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    pub reason: StopReason,
}

impl EmTrace {
    pub(crate) fn new(initial_objective: f64) -> Self {
        Self {
            initial_objective,
            records: Vec::new(),
            converged: false,
            reason: StopReason::MaxIterations,
        }
    }

    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    /// Writes one whitespace-separated row per iteration:
    /// `iteration loglik theta sigma_h2 sigma_w2`. Vector-valued theta is
    /// written as `;`-joined components.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iteration loglik theta sigma_h2 sigma_w2")?;
        for r in &self.records {
            let theta = r
                .theta
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(";");
            writeln!(
                out,
                "{} {} {} {} {}",
                r.iteration, r.loglik, theta, r.sigma_h2, r.sigma_w2
            )?;
        }
        Ok(())
    }
}

/// Relative change used by every stopping rule.
pub(crate) fn relative_change(old: f64, new: f64) -> f64 {
    (new - old).abs() / old.abs().max(1.0)
}
