//! Exact EM for a field whose sensors all share one mapped value `theta`.
//!
//! The latent variable per slot is the active count `T`, whose prior is
//! Binomial(N, theta). The E-step is Bayes over `N + 1` hypotheses; the
//! M-step has a closed form for `theta` (ML) or a 1-D concave search (MAP),
//! and the channel variances come from per-count variance estimates followed
//! by a straight-line fit `Sigma_m = sigma_w2 + m sigma_h2`.

use serde::{Deserialize, Serialize};

use crate::distributions::{binomial_pmf, clamp_theta, ln_theta_prior_uniform, logit, THETA_EPS};
use crate::error::{Error, Result};
use crate::posterior::{normalise_log_row, PosteriorT};
use crate::quadrature::{bisect, golden_section_max};
use crate::simulator::ObservationSet;
use crate::trace::{relative_change, EmTrace, IterationRecord, StopReason};

pub const SIGMA_W2_FLOOR: f64 = 1e-8;
/// Active counts whose effective slot count falls below this are left out of
/// the variance regression.
pub const EMPTY_SUPPORT: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Criterion {
    #[serde(rename = "ML")]
    Ml,
    #[serde(rename = "MAP")]
    Map,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformParams {
    pub theta: f64,
    pub sigma_h2: f64,
    pub sigma_w2: f64,
}

impl UniformParams {
    pub fn new(theta: f64, sigma_h2: f64, sigma_w2: f64) -> Result<Self> {
        let p = Self {
            theta,
            sigma_h2,
            sigma_w2,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::OutOfDomain {
                what: "theta",
                value: self.theta,
                domain: "[0, 1]",
            });
        }
        validate_variances(self.sigma_h2, self.sigma_w2)
    }

    /// Moment-matched starting point: `theta = 1/2`, noise from the quietest
    /// slot, channel variance from the average excess energy.
    pub fn initial(obs: &ObservationSet) -> Self {
        let (sigma_h2, sigma_w2) = initial_variances(obs, 0.5);
        Self {
            theta: 0.5,
            sigma_h2,
            sigma_w2,
        }
    }
}

pub(crate) fn validate_variances(sigma_h2: f64, sigma_w2: f64) -> Result<()> {
    if !(sigma_h2 >= 0.0 && sigma_h2.is_finite()) {
        return Err(Error::OutOfDomain {
            what: "sigma_h2",
            value: sigma_h2,
            domain: "[0, inf)",
        });
    }
    if !(sigma_w2 > 0.0 && sigma_w2.is_finite()) {
        return Err(Error::OutOfDomain {
            what: "sigma_w2",
            value: sigma_w2,
            domain: "(0, inf)",
        });
    }
    Ok(())
}

pub(crate) fn initial_variances(obs: &ObservationSet, theta0: f64) -> (f64, f64) {
    let two_m = 2.0 * obs.antennas as f64;
    let per_slot = obs.y_norm2.iter().map(|v| v / two_m);
    let sigma_w2 = per_slot.clone().fold(f64::INFINITY, f64::min).max(SIGMA_W2_FLOOR);
    let mean = per_slot.sum::<f64>() / obs.slots().max(1) as f64;
    let sigma_h2 = (mean - sigma_w2).max(SIGMA_W2_FLOOR) / (obs.sensors as f64 * theta0).max(1.0);
    (sigma_h2, sigma_w2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    /// Stop once the relative change of the objective falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Allowed log-likelihood drop per slot caused by the variance projection.
    pub projection_slack: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
            projection_slack: 1e-3,
        }
    }
}

#[inline]
pub(crate) fn ln_pmf(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else {
        p.max(1e-300).ln()
    }
}

/// Posterior over the active count for every slot given per-count variances
/// and a prior PMF (in log form). Also returns the incomplete-data
/// log-likelihood `sum_i ln sum_m p(y_i | m) p(m)`.
pub(crate) fn posterior_from_variances(
    y_norm2: &[f64],
    antennas: usize,
    ln_prior: &[f64],
    variances: &[f64],
) -> Result<(PosteriorT, f64)> {
    let width = ln_prior.len();
    let mut offset = Vec::with_capacity(width);
    let mut inv2 = Vec::with_capacity(width);
    for (m, &var) in variances.iter().enumerate() {
        if !(var > 0.0 && var.is_finite()) {
            return Err(Error::OutOfDomain {
                what: "sigma_h2 * m + sigma_w2",
                value: var,
                domain: "(0, inf)",
            });
        }
        offset.push(ln_prior[m] - antennas as f64 * (LN_2PI + var.ln()));
        inv2.push(0.5 / var);
    }
    let mut q = PosteriorT::zeros(y_norm2.len(), width - 1);
    let mut loglik = 0.0;
    for (i, &y) in y_norm2.iter().enumerate() {
        let row = q.row_mut(i);
        for m in 0..width {
            row[m] = offset[m] - y * inv2[m];
        }
        loglik += normalise_log_row(row).ok_or(Error::Underflow { slot: i })?;
    }
    Ok((q, loglik))
}

pub(crate) fn linear_variances(sigma_h2: f64, sigma_w2: f64, sensors: usize) -> Vec<f64> {
    (0..=sensors).map(|m| sigma_h2 * m as f64 + sigma_w2).collect()
}

/// E-step together with the incomplete-data log-likelihood at `params`.
pub fn e_step_with_loglik(obs: &ObservationSet, params: &UniformParams) -> Result<(PosteriorT, f64)> {
    params.validate()?;
    let ln_prior: Vec<f64> = binomial_pmf(params.theta, obs.sensors)
        .probabilities()
        .iter()
        .map(|&p| ln_pmf(p))
        .collect();
    let variances = linear_variances(params.sigma_h2, params.sigma_w2, obs.sensors);
    posterior_from_variances(&obs.y_norm2, obs.antennas, &ln_prior, &variances)
}

pub fn e_step(obs: &ObservationSet, params: &UniformParams) -> Result<PosteriorT> {
    e_step_with_loglik(obs, params).map(|(q, _)| q)
}

pub fn incomplete_loglik(obs: &ObservationSet, params: &UniformParams) -> Result<f64> {
    e_step_with_loglik(obs, params).map(|(_, ll)| ll)
}

/// Closed-form ML update: mean posterior active count divided by `N`.
pub fn m_step_theta_ml(q: &PosteriorT, sensors: usize) -> f64 {
    let total = (q.slots() * sensors) as f64;
    clamp_theta(q.expected_active_total() / total)
}

/// Expected complete-data log-likelihood as a function of `theta` (ML form).
pub fn ml_theta_objective(q: &PosteriorT, sensors: usize, theta: f64) -> f64 {
    let a = q.expected_active_total();
    let b = (q.slots() * sensors) as f64 - a;
    a * theta.ln() + b * (1.0 - theta).ln()
}

/// ML objective plus the log-prior of `theta` (up to constants).
pub fn map_theta_objective(q: &PosteriorT, sensors: usize, theta: f64) -> f64 {
    let l = logit(theta);
    ml_theta_objective(q, sensors, theta) - (theta * (1.0 - theta)).ln() - 0.5 * l * l
}

/// MAP update for `theta`: coarse grid in logit space, then golden-section refinement.
pub fn m_step_theta_map(q: &PosteriorT, sensors: usize) -> f64 {
    let a = q.expected_active_total();
    let b = (q.slots() * sensors) as f64 - a;
    // Objective rewritten in u = logit(theta).
    let f = |u: f64| {
        let ln_s = -(-u).exp().ln_1p();
        let ln_1s = -u.exp().ln_1p();
        let (ln_s, ln_1s) = if u.abs() > 700.0 {
            (u.min(0.0), (-u).min(0.0))
        } else {
            (ln_s, ln_1s)
        };
        (a - 1.0) * ln_s + (b - 1.0) * ln_1s - 0.5 * u * u
    };
    let lo = logit(THETA_EPS);
    let hi = -lo;
    let steps = 400;
    let h = (hi - lo) / steps as f64;
    let best = (0..=steps)
        .map(|k| lo + k as f64 * h)
        .map(|u| (u, f(u)))
        .fold((lo, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
    let u = golden_section_max(f, (best.0 - h).max(lo), (best.0 + h).min(hi), 1e-10);
    clamp_theta(1.0 / (1.0 + (-u).exp()))
}

/// Root of the printed stationarity condition `e^{(LN-2) theta} = a (1/theta - 1)`
/// with `a = exp(sum q m - 1)`, found by bisection.
pub fn map_stationarity_root(q: &PosteriorT, sensors: usize) -> Option<f64> {
    let a = q.expected_active_total();
    let ln_total = (q.slots() * sensors) as f64;
    bisect(
        |t| (ln_total - 2.0) * t - (a - 1.0) + logit(t),
        THETA_EPS,
        1.0 - THETA_EPS,
        1e-14,
    )
}

/// Result of the variance part of the M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaUpdate {
    pub sigma_h2: f64,
    pub sigma_w2: f64,
    /// Unconstrained optimum for each active count; `None` where the count
    /// carries no posterior mass.
    pub per_count: Vec<Option<f64>>,
}

/// Expected complete-data log-likelihood restricted to the variance of count `m`.
pub fn sigma_objective(q: &PosteriorT, y_norm2: &[f64], antennas: usize, m: usize, variance: f64) -> f64 {
    q.rows()
        .zip(y_norm2)
        .map(|(row, &y)| row[m] * (-(antennas as f64) * variance.ln() - y / (2.0 * variance)))
        .sum()
}

/// Per-count variance optimum followed by the least-squares line through it.
pub fn m_step_sigma(q: &PosteriorT, y_norm2: &[f64], antennas: usize) -> Result<SigmaUpdate> {
    let width = q.sensors() + 1;
    let mut weight = vec![0.0; width];
    let mut energy = vec![0.0; width];
    for (row, &y) in q.rows().zip(y_norm2) {
        for m in 0..width {
            weight[m] += row[m];
            energy[m] += row[m] * y;
        }
    }
    let per_count: Vec<Option<f64>> = (0..width)
        .map(|m| (weight[m] >= EMPTY_SUPPORT).then(|| energy[m] / (2.0 * antennas as f64 * weight[m])))
        .collect();
    let points: Vec<(f64, f64)> = per_count
        .iter()
        .enumerate()
        .filter_map(|(m, v)| v.map(|v| (m as f64, v)))
        .collect();
    if points.len() < 2 {
        return Err(Error::DegenerateRegression {
            supported: points.len(),
        });
    }
    let n = points.len() as f64;
    let m_bar = points.iter().map(|p| p.0).sum::<f64>() / n;
    let s_bar = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(m, s)| (m - m_bar) * (s - s_bar)).sum();
    let sxx: f64 = points.iter().map(|(m, _)| (m - m_bar).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = s_bar - m_bar * slope;
    Ok(SigmaUpdate {
        sigma_h2: slope.max(0.0),
        sigma_w2: intercept.max(SIGMA_W2_FLOOR),
        per_count,
    })
}

#[derive(Debug, Clone)]
pub struct EmResult<P> {
    pub params: P,
    pub posterior: PosteriorT,
    pub trace: EmTrace,
}

fn ln_prior_term(criterion: Criterion, theta: f64) -> f64 {
    match criterion {
        Criterion::Ml => 0.0,
        Criterion::Map => ln_theta_prior_uniform(clamp_theta(theta)).unwrap_or(f64::NEG_INFINITY),
    }
}

/// Alternates E- and M-steps until the objective settles or `max_iter` cycles ran.
pub fn run(
    obs: &ObservationSet,
    criterion: Criterion,
    init: UniformParams,
    cfg: &EmConfig,
) -> Result<EmResult<UniformParams>> {
    init.validate()?;
    let sensors = obs.sensors;
    let slots = obs.slots() as f64;
    let mut params = init;
    let (mut q, ll) = e_step_with_loglik(obs, &params)?;
    let mut objective = ll + ln_prior_term(criterion, params.theta);
    let mut trace = EmTrace::new(objective);

    for iteration in 1..=cfg.max_iter {
        let (theta, map_root) = match criterion {
            Criterion::Ml => (m_step_theta_ml(&q, sensors), None),
            Criterion::Map => (m_step_theta_map(&q, sensors), map_stationarity_root(&q, sensors)),
        };
        let sigma = m_step_sigma(&q, &obs.y_norm2, obs.antennas)?;

        let free: Vec<f64> = sigma
            .per_count
            .iter()
            .enumerate()
            .map(|(m, v)| v.unwrap_or(params.sigma_h2 * m as f64 + params.sigma_w2).max(SIGMA_W2_FLOOR))
            .collect();
        let ln_prior: Vec<f64> = binomial_pmf(theta, sensors)
            .probabilities()
            .iter()
            .map(|&p| ln_pmf(p))
            .collect();
        let (_, ll_pre) = posterior_from_variances(&obs.y_norm2, obs.antennas, &ln_prior, &free)?;

        let next = UniformParams {
            theta,
            sigma_h2: sigma.sigma_h2,
            sigma_w2: sigma.sigma_w2,
        };
        let (q_next, ll) = e_step_with_loglik(obs, &next)?;
        if !ll.is_finite() {
            return Err(Error::NonFiniteLikelihood { iteration });
        }
        let next_objective = ll + ln_prior_term(criterion, theta);
        if next_objective < objective - cfg.projection_slack * slots {
            log::warn!(
                "EM cycle {iteration}: objective fell by {:.3e} nats after the variance projection",
                objective - next_objective
            );
        }
        trace.records.push(IterationRecord {
            iteration,
            loglik: ll,
            loglik_pre_projection: Some(ll_pre),
            objective: next_objective,
            theta: vec![theta],
            sigma_h2: next.sigma_h2,
            sigma_w2: next.sigma_w2,
            map_root,
            line_search_failed: false,
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
    Ok(EmResult {
        params,
        posterior: q,
        trace,
    })
}
