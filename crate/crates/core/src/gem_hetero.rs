//! Generalised EM for sensors with individual mapped values `theta_n`.
//!
//! The E-step is unchanged apart from a Poisson-Binomial prior on the count.
//! The `theta` objective only sees the posterior through the column sums
//! `W_m = sum_i q[i][m]`, so the M-step is a projected gradient ascent with
//! Armijo backtracking that increases it without maximising it.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::f64::consts::PI;

use crate::distributions::{
    clamp_theta, floor_ln, inverse_map, leave_one_out_pmfs, ln_theta_prior_hetero, poibin_pmf, SensingPrior,
    ThetaVector, DENSITY_FLOOR,
};
use crate::em_uniform::{
    initial_variances, ln_pmf, m_step_sigma, posterior_from_variances, validate_variances, Criterion, EmResult,
    SIGMA_W2_FLOOR,
};
use crate::error::{Error, Result};
use crate::posterior::PosteriorT;
use crate::simulator::ObservationSet;
use crate::trace::{relative_change, EmTrace, IterationRecord, StopReason};

#[derive(Debug, Clone, PartialEq)]
pub struct HeteroParams {
    pub theta: Vec<f64>,
    pub sigma_h2: f64,
    pub sigma_w2: f64,
}

impl HeteroParams {
    pub fn new(theta: Vec<f64>, sigma_h2: f64, sigma_w2: f64) -> Result<Self> {
        let p = Self {
            theta,
            sigma_h2,
            sigma_w2,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for &t in &self.theta {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::OutOfDomain {
                    what: "theta",
                    value: t,
                    domain: "[0, 1]",
                });
            }
        }
        validate_variances(self.sigma_h2, self.sigma_w2)
    }

    pub fn initial(obs: &ObservationSet) -> Self {
        let (sigma_h2, sigma_w2) = initial_variances(obs, 0.5);
        Self {
            theta: vec![0.5; obs.sensors],
            sigma_h2,
            sigma_w2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GemConfig {
    /// Initial step length of each line search.
    pub step: f64,
    /// Gradient steps per M-step.
    pub inner_steps: usize,
    pub backtrack: f64,
    pub armijo: f64,
    pub max_halvings: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub projection_slack: f64,
}

impl Default for GemConfig {
    fn default() -> Self {
        Self {
            step: 0.1,
            inner_steps: 10,
            backtrack: 0.5,
            armijo: 1e-4,
            max_halvings: 50,
            tol: 1e-6,
            max_iter: 500,
            projection_slack: 1e-3,
        }
    }
}

/// E-step with a Poisson-Binomial count prior; also returns the log-likelihood.
pub fn e_step_hetero(obs: &ObservationSet, params: &HeteroParams) -> Result<(PosteriorT, f64)> {
    params.validate()?;
    if params.theta.len() != obs.sensors {
        return Err(Error::DimensionMismatch {
            what: "theta",
            expected: obs.sensors,
            got: params.theta.len(),
        });
    }
    let ln_prior: Vec<f64> = poibin_pmf(&params.theta).probabilities().iter().map(|&p| ln_pmf(p)).collect();
    let variances: Vec<f64> = (0..=obs.sensors)
        .map(|m| params.sigma_h2 * m as f64 + params.sigma_w2)
        .collect();
    posterior_from_variances(&obs.y_norm2, obs.antennas, &ln_prior, &variances)
}

/// The `theta` part of the expected complete-data objective.
#[derive(Debug, Clone)]
pub struct ThetaObjective<'a> {
    weights: Vec<f64>,
    criterion: Criterion,
    prior: &'a SensingPrior,
    precision: Option<DMatrix<f64>>,
}

impl<'a> ThetaObjective<'a> {
    /// `weights[m]` is the posterior mass on count `m` summed over slots.
    pub fn new(weights: Vec<f64>, criterion: Criterion, prior: &'a SensingPrior) -> Result<Self> {
        let precision = match criterion {
            Criterion::Ml => None,
            Criterion::Map => Some(prior.precision()?),
        };
        Ok(Self {
            weights,
            criterion,
            prior,
            precision,
        })
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let pmf = poibin_pmf(theta);
        let scale = (self.weights.len() as f64).ln();
        let data: f64 = self
            .weights
            .iter()
            .zip(pmf.probabilities())
            .map(|(&w, &p)| w * (scale + floor_ln(p)))
            .sum();
        match self.criterion {
            Criterion::Ml => data,
            Criterion::Map => {
                let t = ThetaVector::clamped(theta.to_vec());
                data + ln_theta_prior_hetero(&t, self.prior).unwrap_or(f64::NEG_INFINITY)
            }
        }
    }

    /// Gradient from leave-one-out PMFs: `d pmf(m) / d theta_n = a_n(m-1) - a_n(m)`.
    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let pmf = poibin_pmf(theta);
        let loo = leave_one_out_pmfs(theta);
        let mut grad: Vec<f64> = loo
            .iter()
            .map(|a| {
                let at = |m: usize| a.get(m).copied().unwrap_or(0.0);
                self.weights
                    .iter()
                    .zip(pmf.probabilities())
                    .enumerate()
                    .filter(|&(_, (_, &p))| p > DENSITY_FLOOR)
                    .map(|(m, (&w, &p))| {
                        let below = if m == 0 { 0.0 } else { at(m - 1) };
                        w * (below - at(m)) / p
                    })
                    .sum()
            })
            .collect();
        if let Some(precision) = &self.precision {
            self.add_prior_gradient(theta, precision, &mut grad);
        }
        grad
    }

    fn add_prior_gradient(&self, theta: &[f64], precision: &DMatrix<f64>, grad: &mut [f64]) {
        let r = DVector::from_vec(self.prior.centred(theta));
        let pr = precision * r;
        for (n, g) in grad.iter_mut().enumerate() {
            let t = clamp_theta(theta[n]);
            let v = t * (1.0 - t);
            *g += -(1.0 - 2.0 * t) / v - self.prior.sigma[n] / v * pr[n];
        }
    }

    /// Same gradient evaluated through the DFT representation of the PMF.
    pub fn gradient_dft(&self, theta: &[f64]) -> Vec<f64> {
        let n = theta.len();
        let size = n + 1;
        let roots: Vec<Complex64> = (0..size)
            .map(|l| Complex64::from_polar(1.0, 2.0 * PI * l as f64 / size as f64))
            .collect();
        let factor = |l: usize, t: f64| 1.0 + (roots[l] - 1.0) * t;
        let full: Vec<Complex64> = (0..size)
            .map(|l| theta.iter().fold(Complex64::new(1.0, 0.0), |acc, &t| acc * factor(l, t)))
            .collect();
        let inverse = |m: usize, spectrum: &dyn Fn(usize) -> Complex64| -> f64 {
            let s: Complex64 = (0..size).map(|l| roots[(l * m) % size].conj() * spectrum(l)).sum();
            s.re / size as f64
        };
        let pmf: Vec<f64> = (0..size).map(|m| inverse(m, &|l| full[l]).max(0.0)).collect();
        let mut grad: Vec<f64> = (0..n)
            .map(|k| {
                let partial: Vec<Complex64> = (0..size)
                    .map(|l| {
                        let others = theta
                            .iter()
                            .enumerate()
                            .filter(|&(j, _)| j != k)
                            .fold(Complex64::new(1.0, 0.0), |acc, (_, &t)| acc * factor(l, t));
                        (roots[l] - 1.0) * others
                    })
                    .collect();
                (0..size)
                    .filter(|&m| pmf[m] > DENSITY_FLOOR)
                    .map(|m| self.weights[m] * inverse(m, &|l| partial[l]) / pmf[m])
                    .sum()
            })
            .collect();
        if let Some(precision) = &self.precision {
            self.add_prior_gradient(theta, precision, &mut grad);
        }
        grad
    }
}

/// Projected gradient ascent on `objective` starting from `theta`.
/// Returns the new point and whether a line search ran out of halvings.
pub fn m_step_theta_gem(objective: &ThetaObjective, theta: &[f64], cfg: &GemConfig) -> (Vec<f64>, bool) {
    let mut current: Vec<f64> = theta.iter().map(|&t| clamp_theta(t)).collect();
    let mut value = objective.value(&current);
    for _ in 0..cfg.inner_steps {
        let grad = objective.gradient(&current);
        if grad.iter().all(|g| g.abs() < 1e-12) {
            break;
        }
        let mut alpha = cfg.step;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let candidate: Vec<f64> = current
                .iter()
                .zip(&grad)
                .map(|(&t, &g)| clamp_theta(t + alpha * g))
                .collect();
            let ascent: f64 = candidate.iter().zip(&current).zip(&grad).map(|((c, t), g)| g * (c - t)).sum();
            let cand_value = objective.value(&candidate);
            if ascent > 0.0 && cand_value >= value + cfg.armijo * ascent {
                accepted = Some((candidate, cand_value));
                break;
            }
            alpha *= cfg.backtrack;
        }
        match accepted {
            Some((c, v)) => {
                current = c;
                value = v;
            }
            None => return (current, true),
        }
    }
    (current, false)
}

#[derive(Debug, Clone)]
pub struct HeteroResult {
    pub em: EmResult<HeteroParams>,
    /// Field estimate obtained by inverting the sigmoid map per sensor.
    pub x_hat: Vec<f64>,
}

pub fn run_hetero(
    obs: &ObservationSet,
    criterion: Criterion,
    prior: &SensingPrior,
    init: HeteroParams,
    cfg: &GemConfig,
) -> Result<HeteroResult> {
    if prior.len() != obs.sensors {
        return Err(Error::DimensionMismatch {
            what: "prior",
            expected: obs.sensors,
            got: prior.len(),
        });
    }
    let slots = obs.slots() as f64;
    let mut params = init;
    let (mut q, ll) = e_step_hetero(obs, &params)?;
    let prior_term = |theta: &[f64]| match criterion {
        Criterion::Ml => Ok(0.0),
        Criterion::Map => ln_theta_prior_hetero(&ThetaVector::clamped(theta.to_vec()), prior),
    };
    let mut objective = ll + prior_term(&params.theta)?;
    let mut trace = EmTrace::new(objective);

    for iteration in 1..=cfg.max_iter {
        let theta_objective = ThetaObjective::new(q.column_sums(), criterion, prior)?;
        let (theta, failed) = m_step_theta_gem(&theta_objective, &params.theta, cfg);
        if failed {
            log::debug!("GEM cycle {iteration}: line search exhausted");
        }
        let sigma = m_step_sigma(&q, &obs.y_norm2, obs.antennas)?;

        let free: Vec<f64> = sigma
            .per_count
            .iter()
            .enumerate()
            .map(|(m, v)| v.unwrap_or(params.sigma_h2 * m as f64 + params.sigma_w2).max(SIGMA_W2_FLOOR))
            .collect();
        let ln_prior: Vec<f64> = poibin_pmf(&theta).probabilities().iter().map(|&p| ln_pmf(p)).collect();
        let (_, ll_pre) = posterior_from_variances(&obs.y_norm2, obs.antennas, &ln_prior, &free)?;

        let next = HeteroParams {
            theta,
            sigma_h2: sigma.sigma_h2,
            sigma_w2: sigma.sigma_w2,
        };
        let (q_next, ll) = e_step_hetero(obs, &next)?;
        if !ll.is_finite() {
            return Err(Error::NonFiniteLikelihood { iteration });
        }
        let next_objective = ll + prior_term(&next.theta)?;
        if next_objective < objective - cfg.projection_slack * slots {
            log::warn!(
                "GEM cycle {iteration}: objective fell by {:.3e} nats after the variance projection",
                objective - next_objective
            );
        }
        trace.records.push(IterationRecord {
            iteration,
            loglik: ll,
            loglik_pre_projection: Some(ll_pre),
            objective: next_objective,
            theta: next.theta.clone(),
            sigma_h2: next.sigma_h2,
            sigma_w2: next.sigma_w2,
            map_root: None,
            line_search_failed: failed,
        });
        params = next;
        q = q_next;
        let change = relative_change(objective, next_objective);
        objective = next_objective;
        if change < cfg.tol {
            trace.converged = true;
            trace.reason = StopReason::Tolerance;
            break;
        }
    }
    let x_hat = params
        .theta
        .iter()
        .zip(prior.mu.iter().zip(&prior.sigma))
        .map(|(&t, (&mu, &s))| inverse_map(clamp_theta(t), mu, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(HeteroResult {
        em: EmResult {
            params,
            posterior: q,
            trace,
        },
        x_hat,
    })
}
