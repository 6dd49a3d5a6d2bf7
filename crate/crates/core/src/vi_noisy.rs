//! Approximate EM for noisy sensing measurements using mean-field variational
//! inference, plus a brute-force exact EM on a tensor grid for `N <= 3`.
//!
//! Each slot carries `q(T) prod_n q(theta_n)`. The `theta_n` factors live on a
//! Gauss-Legendre grid in `(0, 1)`. Expectations of the log Poisson-Binomial
//! PMF are Monte-Carlo estimates with common random numbers that stay fixed
//! for the whole run, so the inner fixed-point iteration is deterministic.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    clamp_theta, ln_theta_cond_marginal, logit, poibin_pmf_into, SensingPrior, DENSITY_FLOOR, THETA_EPS,
};
use crate::em_uniform::{initial_variances, m_step_sigma, validate_variances};
use crate::error::{ensure_positive, Error, Result};
use crate::posterior::{normalise_log_row, PosteriorT};
use crate::quadrature::gauss_legendre_on;
use crate::simulator::{stream_rng, ObservationSet, Stream};
use crate::trace::{EmTrace, IterationRecord, StopReason};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[inline]
fn ln_floor(v: f64) -> f64 {
    v.max(DENSITY_FLOOR).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyParams {
    pub x: Vec<f64>,
    pub delta2: f64,
    pub sigma_h2: f64,
    pub sigma_w2: f64,
}

impl NoisyParams {
    pub fn new(x: Vec<f64>, delta2: f64, sigma_h2: f64, sigma_w2: f64) -> Result<Self> {
        let p = Self {
            x,
            delta2,
            sigma_h2,
            sigma_w2,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for &v in &self.x {
            crate::error::ensure_finite("x", v)?;
        }
        ensure_positive("delta2", self.delta2)?;
        validate_variances(self.sigma_h2, self.sigma_w2)
    }

    /// `x = mu`, `delta2 = 1`, channel variances from the received energy.
    pub fn initial(obs: &ObservationSet, prior: &SensingPrior) -> Self {
        let (sigma_h2, sigma_w2) = initial_variances(obs, 0.5);
        Self {
            x: prior.mu.clone(),
            delta2: 1.0,
            sigma_h2,
            sigma_w2,
        }
    }

    fn max_relative_change(&self, other: &Self) -> f64 {
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(1.0);
        self.x
            .iter()
            .zip(&other.x)
            .map(|(&a, &b)| rel(a, b))
            .chain([
                rel(self.delta2, other.delta2),
                rel(self.sigma_h2, other.sigma_h2),
                rel(self.sigma_w2, other.sigma_w2),
            ])
            .fold(0.0, f64::max)
    }
}

/// Grid densities for every `(slot, sensor)` factor `q(theta_n^(i))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    slots: usize,
    sensors: usize,
    values: Vec<f64>,
}

impl ThetaGrid {
    /// `k` Gauss-Legendre nodes on `(eps, 1 - eps)` with flat densities.
    pub fn new(k: usize, slots: usize, sensors: usize) -> Self {
        let (nodes, weights) = gauss_legendre_on(k, THETA_EPS, 1.0 - THETA_EPS);
        let flat = 1.0 / weights.iter().sum::<f64>();
        Self {
            nodes,
            weights,
            slots,
            sensors,
            values: vec![flat; k * slots * sensors],
        }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn sensors(&self) -> usize {
        self.sensors
    }

    fn offset(&self, slot: usize, sensor: usize) -> usize {
        (slot * self.sensors + sensor) * self.nodes.len()
    }

    pub fn density(&self, slot: usize, sensor: usize) -> &[f64] {
        let o = self.offset(slot, sensor);
        &self.values[o..o + self.nodes.len()]
    }

    /// Replaces one density after normalising it against the quadrature weights.
    pub fn set_density(&mut self, slot: usize, sensor: usize, values: &[f64]) -> Result<()> {
        let k = self.nodes.len();
        if values.len() != k {
            return Err(Error::DimensionMismatch {
                what: "grid density",
                expected: k,
                got: values.len(),
            });
        }
        let total: f64 = values.iter().zip(&self.weights).map(|(v, w)| v * w).sum();
        if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || !(total > 0.0) {
            return Err(Error::GridUnderflow { slot, sensor });
        }
        let o = self.offset(slot, sensor);
        for (dst, v) in self.values[o..o + k].iter_mut().zip(values) {
            *dst = v / total;
        }
        Ok(())
    }

    /// Concentrates the density on node `index`.
    pub fn set_point_mass(&mut self, slot: usize, sensor: usize, index: usize) {
        let o = self.offset(slot, sensor);
        let k = self.nodes.len();
        self.values[o..o + k].fill(0.0);
        self.values[o + index] = 1.0 / self.weights[index];
    }

    /// Probability carried by each node, `w_k q_k`.
    pub fn masses(&self, slot: usize, sensor: usize) -> Vec<f64> {
        self.density(slot, sensor).iter().zip(&self.weights).map(|(v, w)| v * w).collect()
    }

    pub fn expect<F: Fn(f64) -> f64>(&self, slot: usize, sensor: usize, f: F) -> f64 {
        self.density(slot, sensor)
            .iter()
            .zip(&self.weights)
            .zip(&self.nodes)
            .map(|((v, w), &z)| if *v > 0.0 { v * w * f(z) } else { 0.0 })
            .sum()
    }

    /// Differential entropy of one factor.
    pub fn entropy(&self, slot: usize, sensor: usize) -> f64 {
        -self
            .density(slot, sensor)
            .iter()
            .zip(&self.weights)
            .filter(|(v, _)| **v > 0.0)
            .map(|(v, w)| w * v * v.ln())
            .sum::<f64>()
    }

    pub fn max_normalisation_defect(&self) -> f64 {
        (0..self.slots)
            .flat_map(|i| (0..self.sensors).map(move |n| (i, n)))
            .map(|(i, n)| (self.masses(i, n).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub q_t: PosteriorT,
    pub q_theta: ThetaGrid,
    /// Surrogate evidence lower bound after each inner round of the latest E-step.
    pub elbo_trace: Vec<f64>,
}

/// Serializable view of [`VariationalState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalSnapshot {
    pub q_t: Vec<Vec<f64>>,
    pub q_theta: ThetaGrid,
    pub elbo_trace: Vec<f64>,
}

impl VariationalState {
    /// Flat `q(T)` and `q(theta_n)` set to the conditional prior given `params.x`.
    pub fn initial(obs: &ObservationSet, prior: &SensingPrior, params: &NoisyParams, k: usize) -> Result<Self> {
        let n = obs.sensors;
        let mut q_theta = ThetaGrid::new(k, obs.slots(), n);
        for sensor in 0..n {
            let values = q_theta
                .nodes()
                .iter()
                .map(|&z| {
                    ln_theta_cond_marginal(z, params.x[sensor], prior.mu[sensor], prior.sigma[sensor], params.delta2)
                        .map(f64::exp)
                })
                .collect::<Result<Vec<_>>>()?;
            for slot in 0..obs.slots() {
                q_theta.set_density(slot, sensor, &values)?;
            }
        }
        let q_t = PosteriorT::from_rows(vec![vec![1.0 / (n + 1) as f64; n + 1]; obs.slots()])?;
        Ok(Self {
            q_t,
            q_theta,
            elbo_trace: Vec::new(),
        })
    }

    pub fn snapshot(&self) -> VariationalSnapshot {
        VariationalSnapshot {
            q_t: self.q_t.rows().map(<[f64]>::to_vec).collect(),
            q_theta: self.q_theta.clone(),
            elbo_trace: self.elbo_trace.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViConfig {
    pub grid_nodes: usize,
    pub samples: usize,
    /// Inner rounds stop once no probability moves by more than this.
    pub inner_tol: f64,
    pub inner_max: usize,
    /// Use a unit exponent on the variance factor of `q(T)` instead of `M`.
    pub literal_exponent: bool,
    /// Outer loop stops when no parameter moves by more than this (relative).
    pub tol: f64,
    pub max_iter: usize,
    /// Counts with less posterior mass than this are skipped in `theta` updates.
    pub count_skip: f64,
}

impl Default for ViConfig {
    fn default() -> Self {
        Self {
            grid_nodes: 64,
            samples: 256,
            inner_tol: 1e-4,
            inner_max: 20,
            literal_exponent: false,
            tol: 1e-3,
            max_iter: 20,
            count_skip: 1e-12,
        }
    }
}

/// Uniform draws for one slot, `sensors x samples`, fixed for a whole run.
fn slot_uniforms(seed: u64, slot: usize, sensors: usize, samples: usize) -> Vec<f64> {
    let mut u = Vec::with_capacity(sensors * samples);
    for n in 0..sensors {
        let mut rng = stream_rng(seed, Stream::Variational, slot, n);
        u.extend((0..samples).map(|_| rng.random::<f64>()));
    }
    u
}

/// Inverse-CDF sampling of node indices.
struct NodeSampler {
    cum: Vec<f64>,
}

impl NodeSampler {
    fn new(masses: &[f64]) -> Self {
        let mut acc = 0.0;
        let cum = masses
            .iter()
            .map(|m| {
                acc += m;
                acc
            })
            .collect();
        Self { cum }
    }

    fn draw(&self, u: f64) -> usize {
        let target = u * self.cum.last().copied().unwrap_or(0.0);
        self.cum.partition_point(|&c| c <= target).min(self.cum.len() - 1)
    }
}

/// Weighted support points for a joint draw of the listed sensors: exact
/// enumeration when the grid is small enough, Monte-Carlo otherwise.
fn joint_support(masses: &[Vec<f64>], sensors: &[usize], uniforms: &[f64], samples: usize) -> Vec<(f64, Vec<usize>)> {
    let k = masses.first().map_or(0, Vec::len);
    if sensors.is_empty() {
        return vec![(1.0, Vec::new())];
    }
    let exact = (k as f64).powi(sensors.len() as i32) <= samples as f64;
    if exact {
        let mut out = vec![(1.0, Vec::new())];
        for &n in sensors {
            out = out
                .into_iter()
                .flat_map(|(w, idx)| {
                    masses[n].iter().enumerate().filter(|(_, &m)| m > 0.0).map(move |(j, &m)| {
                        let mut next = idx.clone();
                        next.push(j);
                        (w * m, next)
                    })
                })
                .collect();
        }
        return out;
    }
    let samplers: Vec<NodeSampler> = sensors.iter().map(|&n| NodeSampler::new(&masses[n])).collect();
    let w = 1.0 / samples as f64;
    (0..samples)
        .map(|s| {
            let idx = sensors
                .iter()
                .zip(&samplers)
                .map(|(&n, sampler)| sampler.draw(uniforms[n * samples + s]))
                .collect();
            (w, idx)
        })
        .collect()
}

/// `ln F1(m)` for every count together with its Monte-Carlo standard error.
struct F1Estimate {
    ln_f1: Vec<f64>,
    std_err: Vec<f64>,
    clamps: usize,
}

fn ln_f1_slot(nodes: &[f64], masses: &[Vec<f64>], uniforms: &[f64], samples: usize) -> F1Estimate {
    let n = masses.len();
    let all: Vec<usize> = (0..n).collect();
    let support = joint_support(masses, &all, uniforms, samples);
    let scale = ((n + 1) as f64).ln();
    let mut mean = vec![0.0; n + 1];
    let mut second = vec![0.0; n + 1];
    let mut clamps = 0;
    let mut theta = vec![0.0; n];
    let mut pmf = Vec::with_capacity(n + 1);
    for (w, idx) in &support {
        for (t, &j) in theta.iter_mut().zip(idx) {
            *t = nodes[j];
        }
        poibin_pmf_into(&theta, &mut pmf);
        for m in 0..=n {
            if pmf[m] <= DENSITY_FLOOR {
                clamps += 1;
            }
            let v = scale + ln_floor(pmf[m]);
            mean[m] += w * v;
            second[m] += w * v * v;
        }
    }
    let exact = (nodes.len() as f64).powi(n as i32) <= samples as f64;
    let std_err = mean
        .iter()
        .zip(&second)
        .map(|(&a, &b)| if exact { 0.0 } else { ((b - a * a).max(0.0) / samples as f64).sqrt() })
        .collect();
    F1Estimate {
        ln_f1: mean,
        std_err,
        clamps,
    }
}

/// `ln F2(z)` for sensor `n` at each point of `zs`.
#[allow(clippy::too_many_arguments)]
fn ln_f2_slot(
    nodes: &[f64],
    masses: &[Vec<f64>],
    n: usize,
    q_t_row: &[f64],
    zs: &[f64],
    uniforms: &[f64],
    samples: usize,
    skip: f64,
) -> Vec<f64> {
    let sensors = masses.len();
    let others: Vec<usize> = (0..sensors).filter(|&j| j != n).collect();
    let support = joint_support(masses, &others, uniforms, samples);
    let active: Vec<usize> = (0..=sensors).filter(|&m| q_t_row[m] >= skip).collect();
    let active_mass: f64 = active.iter().map(|&m| q_t_row[m]).sum();
    let base = ((sensors + 1) as f64).ln() * active_mass;
    let mut out = vec![base; zs.len()];
    let mut theta = Vec::with_capacity(others.len());
    let mut loo = Vec::with_capacity(sensors);
    let exact = (nodes.len() as f64).powi(others.len() as i32) <= samples as f64;
    if exact {
        let mut pairs = Vec::with_capacity(active.len());
        for (w, idx) in &support {
            theta.clear();
            theta.extend(idx.iter().map(|&j| nodes[j]));
            poibin_pmf_into(&theta, &mut loo);
            pairs.clear();
            pairs.extend(active.iter().map(|&m| {
                let here = loo.get(m).copied().unwrap_or(0.0);
                let below = if m == 0 { 0.0 } else { loo[m - 1] };
                (w * q_t_row[m], here, below)
            }));
            for (acc, &z) in out.iter_mut().zip(zs) {
                let off = 1.0 - z;
                let mut s = 0.0;
                for &(c, here, below) in &pairs {
                    s += c * ln_floor(off * here + z * below);
                }
                *acc += s;
            }
        }
        return out;
    }

    // Monte-Carlo draws: accumulate products and take one logarithm per run
    // of factors instead of one per factor.
    let t = support.len();
    let mut here = vec![0.0; active.len() * t];
    let mut below = vec![0.0; active.len() * t];
    for (s, (_, idx)) in support.iter().enumerate() {
        theta.clear();
        theta.extend(idx.iter().map(|&j| nodes[j]));
        poibin_pmf_into(&theta, &mut loo);
        for (j, &m) in active.iter().enumerate() {
            here[j * t + s] = loo.get(m).copied().unwrap_or(0.0);
            below[j * t + s] = if m == 0 { 0.0 } else { loo[m - 1] };
        }
    }
    let unit = 1.0 / samples as f64;
    for (acc_z, &z) in out.iter_mut().zip(zs) {
        let off = 1.0 - z;
        for (j, &m) in active.iter().enumerate() {
            let (h, b) = (&here[j * t..(j + 1) * t], &below[j * t..(j + 1) * t]);
            *acc_z += q_t_row[m] * unit * sum_ln_linear(off, z, h, b);
        }
    }
    out
}

/// `sum_s ln(max(off h_s + z b_s, floor))`, taking one logarithm per run of
/// factors whose product stays in the normal range.
fn sum_ln_linear(off: f64, z: f64, h: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut prod = 1.0_f64;
    for (hc, bc) in h.chunks(4).zip(b.chunks(4)) {
        let mut block = 1.0;
        let mut small = false;
        for (&hv, &bv) in hc.iter().zip(bc) {
            let v = off * hv + z * bv;
            block *= v;
            small |= v < 1e-18;
        }
        if small {
            acc += hc.iter().zip(bc).map(|(&hv, &bv)| ln_floor(off * hv + z * bv)).sum::<f64>();
        } else {
            if prod < 1e-15 {
                acc += prod.ln();
                prod = 1.0;
            }
            prod *= block;
        }
    }
    acc + prod.ln()
}

fn variance_exponent(antennas: usize, literal: bool) -> f64 {
    if literal {
        1.0
    } else {
        antennas as f64
    }
}

/// Unnormalised `ln g_a(m)` without the `F1` term.
fn ln_obs_terms(y_norm2: f64, sensors: usize, params: &NoisyParams, exponent: f64) -> Vec<f64> {
    (0..=sensors)
        .map(|m| {
            let var = params.sigma_h2 * m as f64 + params.sigma_w2;
            -exponent * (LN_2PI + var.ln()) - y_norm2 / (2.0 * var)
        })
        .collect()
}

fn q_t_from(ln_f1: &[f64], obs_terms: &[f64], slot: usize) -> Result<Vec<f64>> {
    let mut row: Vec<f64> = ln_f1.iter().zip(obs_terms).map(|(a, b)| a + b).collect();
    normalise_log_row(&mut row).ok_or(Error::Underflow { slot })?;
    Ok(row)
}

/// Normalised grid density from `ln F2` and the conditional prior of `theta_n`.
fn q_theta_from(
    weights: &[f64],
    ln_f2: &[f64],
    ln_prior: &[f64],
    slot: usize,
    sensor: usize,
) -> Result<Vec<f64>> {
    let lg: Vec<f64> = ln_f2.iter().zip(ln_prior).map(|(a, b)| a + b).collect();
    let max = lg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::GridUnderflow { slot, sensor });
    }
    let mut v: Vec<f64> = lg.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = v.iter().zip(weights).map(|(a, w)| a * w).sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::GridUnderflow { slot, sensor });
    }
    for x in &mut v {
        *x /= total;
    }
    Ok(v)
}

/// `ln p(z_k | x_n)` on the grid: Jacobian times Gaussian in the sensing domain.
fn ln_cond_prior_on_grid(nodes: &[f64], x: f64, mu: f64, sigma: f64, delta2: f64) -> Vec<f64> {
    nodes
        .iter()
        .map(|&z| {
            let dev = sigma * logit(z) + mu - x;
            sigma.ln() - (z * (1.0 - z)).ln() - 0.5 * (LN_2PI + delta2.ln()) - dev * dev / (2.0 * delta2)
        })
        .collect()
}

fn all_masses(grid: &ThetaGrid, slot: usize) -> Vec<Vec<f64>> {
    (0..grid.sensors()).map(|n| grid.masses(slot, n)).collect()
}

/// Monte-Carlo estimate of `F1(m) = exp E[ln((N+1) pmf(m; theta))]` for one slot.
pub fn expectation_f1(m: usize, q_theta: &ThetaGrid, slot: usize, samples: usize, seed: u64) -> f64 {
    let u = slot_uniforms(seed, slot, q_theta.sensors(), samples);
    let est = ln_f1_slot(q_theta.nodes(), &all_masses(q_theta, slot), &u, samples);
    est.ln_f1[m].exp()
}

/// `F2(z)` for sensor `n`: `theta_n` pinned at `z`, expectation over `T` and the other sensors.
pub fn expectation_f2(
    n: usize,
    z: f64,
    q_t_row: &[f64],
    q_theta: &ThetaGrid,
    slot: usize,
    samples: usize,
    seed: u64,
) -> f64 {
    let u = slot_uniforms(seed, slot, q_theta.sensors(), samples);
    ln_f2_slot(
        q_theta.nodes(),
        &all_masses(q_theta, slot),
        n,
        q_t_row,
        &[z],
        &u,
        samples,
        0.0,
    )[0]
    .exp()
}

/// Coordinate update of `q(T)` for one slot.
pub fn update_q_t(
    obs: &ObservationSet,
    slot: usize,
    params: &NoisyParams,
    q_theta: &ThetaGrid,
    mc: &McConfig,
    literal_exponent: bool,
) -> Result<Vec<f64>> {
    let u = slot_uniforms(mc.seed, slot, obs.sensors, mc.samples);
    let est = ln_f1_slot(q_theta.nodes(), &all_masses(q_theta, slot), &u, mc.samples);
    let exponent = variance_exponent(obs.antennas, literal_exponent);
    q_t_from(&est.ln_f1, &ln_obs_terms(obs.y_norm2[slot], obs.sensors, params, exponent), slot)
}

/// Coordinate update of `q(theta_n)` for one slot, returned as grid densities.
pub fn update_q_theta(
    n: usize,
    slot: usize,
    params: &NoisyParams,
    q_t_row: &[f64],
    q_theta: &ThetaGrid,
    prior: &SensingPrior,
    mc: &McConfig,
) -> Result<Vec<f64>> {
    ensure_positive("delta2", params.delta2)?;
    let u = slot_uniforms(mc.seed, slot, q_theta.sensors(), mc.samples);
    let nodes = q_theta.nodes();
    let ln_f2 = ln_f2_slot(nodes, &all_masses(q_theta, slot), n, q_t_row, nodes, &u, mc.samples, 1e-12);
    let ln_prior = ln_cond_prior_on_grid(nodes, params.x[n], prior.mu[n], prior.sigma[n], params.delta2);
    q_theta_from(q_theta.weights(), &ln_f2, &ln_prior, slot, n)
}

/// Variational M-step: closed-form `x`, `delta2` and the channel variances.
pub fn m_step_noisy(state: &VariationalState, obs: &ObservationSet, prior: &SensingPrior) -> Result<NoisyParams> {
    let grid = &state.q_theta;
    let slots = grid.slots() as f64;
    let sensors = grid.sensors();
    let x: Vec<f64> = (0..sensors)
        .map(|n| {
            let s = prior.sigma[n];
            let mean: f64 = (0..grid.slots()).map(|i| grid.expect(i, n, |z| s * logit(z))).sum::<f64>() / slots;
            prior.mu[n] + mean
        })
        .collect();
    let mut spread = 0.0;
    for n in 0..sensors {
        let (s, mu) = (prior.sigma[n], prior.mu[n]);
        for i in 0..grid.slots() {
            spread += grid.expect(i, n, |z| (s * logit(z) + mu - x[n]).powi(2));
        }
    }
    let delta2 = (spread / (slots * sensors as f64)).max(1e-12);
    let sigma = m_step_sigma(&state.q_t, &obs.y_norm2, obs.antennas)?;
    Ok(NoisyParams {
        x,
        delta2,
        sigma_h2: sigma.sigma_h2,
        sigma_w2: sigma.sigma_w2,
    })
}

/// Outcome of one slot's inner coordinate-ascent loop.
struct SlotUpdate {
    q_t: Vec<f64>,
    q_theta: Vec<Vec<f64>>,
    elbo: Vec<f64>,
    violations: usize,
}

#[allow(clippy::too_many_arguments)]
fn slot_elbo(
    q_t: &[f64],
    ln_f1: &[f64],
    obs_terms: &[f64],
    masses: &[Vec<f64>],
    weights: &[f64],
    ln_priors: &[Vec<f64>],
) -> f64 {
    let n = masses.len();
    let scale = ((n + 1) as f64).ln();
    let mut elbo = 0.0;
    for m in 0..=n {
        if q_t[m] > 0.0 {
            elbo += q_t[m] * (obs_terms[m] + ln_f1[m] - scale - q_t[m].ln());
        }
    }
    for (sensor, mass) in masses.iter().enumerate() {
        for (k, &p) in mass.iter().enumerate() {
            if p > 0.0 {
                let density = p / weights[k];
                elbo += p * (ln_priors[sensor][k] - density.ln());
            }
        }
    }
    elbo
}

#[allow(clippy::too_many_arguments)]
fn inner_loop_slot(
    slot: usize,
    y_norm2: f64,
    params: &NoisyParams,
    grid: &ThetaGrid,
    q_t_start: &[f64],
    ln_priors: &[Vec<f64>],
    exponent: f64,
    cfg: &ViConfig,
    uniforms: &[f64],
) -> Result<SlotUpdate> {
    let nodes = grid.nodes();
    let weights = grid.weights();
    let sensors = grid.sensors();
    let obs_terms = ln_obs_terms(y_norm2, sensors, params, exponent);
    let mut masses = all_masses(grid, slot);
    let mut q_t = q_t_start.to_vec();
    let mut f1 = ln_f1_slot(nodes, &masses, uniforms, cfg.samples);
    let mut elbo = Vec::new();
    let mut previous = slot_elbo(&q_t, &f1.ln_f1, &obs_terms, &masses, weights, ln_priors);
    let mut violations = 0;
    for _ in 0..cfg.inner_max {
        let mut change: f64 = 0.0;
        let next_t = q_t_from(&f1.ln_f1, &obs_terms, slot)?;
        for (a, b) in next_t.iter().zip(&q_t) {
            change = change.max((a - b).abs());
        }
        q_t = next_t;
        for n in 0..sensors {
            let ln_f2 = ln_f2_slot(nodes, &masses, n, &q_t, nodes, uniforms, cfg.samples, cfg.count_skip);
            let density = q_theta_from(weights, &ln_f2, &ln_priors[n], slot, n)?;
            let next: Vec<f64> = density.iter().zip(weights).map(|(v, w)| v * w).collect();
            for (a, b) in next.iter().zip(&masses[n]) {
                change = change.max((a - b).abs());
            }
            masses[n] = next;
        }
        f1 = ln_f1_slot(nodes, &masses, uniforms, cfg.samples);
        let value = slot_elbo(&q_t, &f1.ln_f1, &obs_terms, &masses, weights, ln_priors);
        let floor = 3.0 * f1.std_err.iter().zip(&q_t).map(|(s, q)| s * q).sum::<f64>();
        if value < previous - floor - 1e-9 * previous.abs() {
            violations += 1;
            log::debug!(
                "slot {slot}: surrogate bound fell by {:.3e} (noise floor {:.3e})",
                previous - value,
                floor
            );
        }
        previous = value;
        elbo.push(value);
        if change < cfg.inner_tol {
            break;
        }
    }
    if f1.clamps > 0 {
        log::trace!("slot {slot}: {} PMF evaluations clamped", f1.clamps);
    }
    let q_theta = masses
        .iter()
        .map(|m| m.iter().zip(weights).map(|(p, w)| p / w).collect())
        .collect();
    Ok(SlotUpdate {
        q_t,
        q_theta,
        elbo,
        violations,
    })
}

/// Summary of one variational E-step.
#[derive(Debug, Clone, PartialEq)]
pub struct EStepReport {
    /// Surrogate bound summed over slots after the final inner round.
    pub elbo: f64,
    pub max_rounds: usize,
    /// Inner rounds whose bound fell by more than the Monte-Carlo noise floor.
    pub violations: usize,
}

/// Runs the inner coordinate-ascent loop for every slot at fixed parameters.
pub fn variational_e_step(
    obs: &ObservationSet,
    prior: &SensingPrior,
    params: &NoisyParams,
    state: &mut VariationalState,
    cfg: &ViConfig,
    seed: u64,
) -> Result<EStepReport> {
    let grid = &state.q_theta;
    let sensors = obs.sensors;
    let ln_priors: Vec<Vec<f64>> = (0..sensors)
        .map(|n| ln_cond_prior_on_grid(grid.nodes(), params.x[n], prior.mu[n], prior.sigma[n], params.delta2))
        .collect();
    let exponent = variance_exponent(obs.antennas, cfg.literal_exponent);
    let updates: Vec<SlotUpdate> = (0..obs.slots())
        .into_par_iter()
        .map(|slot| {
            let u = slot_uniforms(seed, slot, sensors, cfg.samples);
            inner_loop_slot(
                slot,
                obs.y_norm2[slot],
                params,
                grid,
                state.q_t.row(slot),
                &ln_priors,
                exponent,
                cfg,
                &u,
            )
        })
        .collect::<Result<_>>()?;
    let max_rounds = updates.iter().map(|u| u.elbo.len()).max().unwrap_or(0);
    let mut elbo_trace = vec![0.0; max_rounds];
    let mut violations = 0;
    for (slot, update) in updates.into_iter().enumerate() {
        state.q_t.row_mut(slot).copy_from_slice(&update.q_t);
        for (n, density) in update.q_theta.iter().enumerate() {
            let o = state.q_theta.offset(slot, n);
            let k = state.q_theta.len_nodes();
            state.q_theta.values[o..o + k].copy_from_slice(density);
        }
        let last = update.elbo.last().copied().unwrap_or(0.0);
        for (r, total) in elbo_trace.iter_mut().enumerate() {
            *total += update.elbo.get(r).copied().unwrap_or(last);
        }
        violations += update.violations;
    }
    if violations > 0 {
        log::info!("{violations} inner rounds fell below the Monte-Carlo noise floor");
    }
    let elbo = elbo_trace.last().copied().unwrap_or(f64::NAN);
    state.elbo_trace = elbo_trace;
    Ok(EStepReport {
        elbo,
        max_rounds,
        violations,
    })
}

#[derive(Debug, Clone)]
pub struct ViResult {
    pub params: NoisyParams,
    pub state: VariationalState,
    pub trace: EmTrace,
    pub violations: usize,
}

fn mapped(params: &NoisyParams, prior: &SensingPrior) -> Vec<f64> {
    params
        .x
        .iter()
        .zip(prior.mu.iter().zip(&prior.sigma))
        .map(|(&x, (&mu, &s))| clamp_theta(1.0 / (1.0 + (-(x - mu) / s).exp())))
        .collect()
}

/// Variational EM: alternate the inner E-step loop with the closed-form M-step.
pub fn run_vi(
    obs: &ObservationSet,
    prior: &SensingPrior,
    init: NoisyParams,
    cfg: &ViConfig,
    seed: u64,
) -> Result<ViResult> {
    init.validate()?;
    for (what, got) in [("prior", prior.len()), ("x", init.x.len())] {
        if got != obs.sensors {
            return Err(Error::DimensionMismatch {
                what,
                expected: obs.sensors,
                got,
            });
        }
    }
    let mut params = init;
    let mut state = VariationalState::initial(obs, prior, &params, cfg.grid_nodes)?;
    let mut trace = EmTrace::new(f64::NEG_INFINITY);
    let mut violations = 0;
    for iteration in 1..=cfg.max_iter {
        let report = variational_e_step(obs, prior, &params, &mut state, cfg, seed)?;
        log::debug!("outer {iteration}: {} inner rounds", report.max_rounds);
        violations += report.violations;
        if !report.elbo.is_finite() {
            return Err(Error::NonFiniteLikelihood { iteration });
        }
        if iteration == 1 {
            trace.initial_objective = state.elbo_trace.first().copied().unwrap_or(report.elbo);
        }
        let next = m_step_noisy(&state, obs, prior)?;
        let change = params.max_relative_change(&next);
        params = next;
        trace.records.push(IterationRecord {
            iteration,
            loglik: report.elbo,
            loglik_pre_projection: None,
            objective: report.elbo,
            theta: mapped(&params, prior),
            sigma_h2: params.sigma_h2,
            sigma_w2: params.sigma_w2,
            map_root: None,
            line_search_failed: false,
        });
        if change < cfg.tol {
            trace.converged = true;
            trace.reason = StopReason::Tolerance;
            break;
        }
    }
    Ok(ViResult {
        params,
        state,
        trace,
        violations,
    })
}

/// Largest sensor count the tensor-grid oracle accepts.
pub const ORACLE_MAX_SENSORS: usize = 3;

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub params: NoisyParams,
    pub posterior: PosteriorT,
    pub trace: EmTrace,
}

/// Exact EM on a `K^N` tensor grid: the joint posterior over `(T, theta)` is
/// never factorised. Feasible for `N <= 3`.
pub fn exact_em_noisy_oracle(
    obs: &ObservationSet,
    prior: &SensingPrior,
    init: NoisyParams,
    grid_nodes: usize,
    tol: f64,
    max_iter: usize,
) -> Result<OracleResult> {
    let n = obs.sensors;
    if n > ORACLE_MAX_SENSORS {
        return Err(Error::TooManySensors {
            max: ORACLE_MAX_SENSORS,
            got: n,
        });
    }
    init.validate()?;
    let (nodes, weights) = gauss_legendre_on(grid_nodes, THETA_EPS, 1.0 - THETA_EPS);
    let k = nodes.len();
    let points = k.pow(n as u32);
    let width = n + 1;

    // Multi-index, quadrature weight and PMF for every grid point.
    let mut index = vec![0usize; points * n];
    let mut pmf_table = vec![0.0; points * width];
    let mut theta = vec![0.0; n];
    let mut pmf = Vec::with_capacity(width);
    for g in 0..points {
        let mut rest = g;
        for j in 0..n {
            index[g * n + j] = rest % k;
            theta[j] = nodes[rest % k];
            rest /= k;
        }
        poibin_pmf_into(&theta, &mut pmf);
        pmf_table[g * width..(g + 1) * width].copy_from_slice(&pmf);
    }
    let r: Vec<Vec<f64>> = (0..n)
        .map(|j| nodes.iter().map(|&z| prior.sigma[j] * logit(z)).collect())
        .collect();

    let mut params = init;
    let mut trace = EmTrace::new(f64::NEG_INFINITY);
    let mut q = PosteriorT::zeros(obs.slots(), n);
    for iteration in 1..=max_iter {
        // Per-sensor prior factors on the grid, rescaled to avoid underflow.
        let mut ln_scale = 0.0;
        let factors: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let lp = ln_cond_prior_on_grid(&nodes, params.x[j], prior.mu[j], prior.sigma[j], params.delta2);
                let lw: Vec<f64> = lp.iter().zip(&weights).map(|(l, w)| l + w.ln()).collect();
                let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                ln_scale += max;
                lw.iter().map(|l| (l - max).exp()).collect()
            })
            .collect();
        let mut g_m = vec![0.0; width];
        let mut h1 = vec![0.0; width * n];
        let mut h2 = vec![0.0; width * n];
        for g in 0..points {
            let idx = &index[g * n..(g + 1) * n];
            let p: f64 = idx.iter().enumerate().map(|(j, &kk)| factors[j][kk]).product();
            if p == 0.0 {
                continue;
            }
            for m in 0..width {
                let c = p * pmf_table[g * width + m];
                g_m[m] += c;
                for j in 0..n {
                    let rv = r[j][idx[j]];
                    h1[m * n + j] += c * rv;
                    h2[m * n + j] += c * rv * rv;
                }
            }
        }
        let ln_g: Vec<f64> = g_m.iter().map(|&v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY }).collect();
        let mut loglik = 0.0;
        let mut e1 = vec![0.0; n];
        let mut e2 = vec![0.0; n];
        for slot in 0..obs.slots() {
            let row = q.row_mut(slot);
            let terms = ln_obs_terms(obs.y_norm2[slot], n, &params, obs.antennas as f64);
            for m in 0..width {
                row[m] = terms[m] + ln_g[m];
            }
            loglik += normalise_log_row(row).ok_or(Error::Underflow { slot })? + ln_scale;
            for m in 0..width {
                if row[m] > 0.0 && g_m[m] > 0.0 {
                    for j in 0..n {
                        e1[j] += row[m] * h1[m * n + j] / g_m[m];
                        e2[j] += row[m] * h2[m * n + j] / g_m[m];
                    }
                }
            }
        }
        let slots = obs.slots() as f64;
        let x: Vec<f64> = (0..n).map(|j| prior.mu[j] + e1[j] / slots).collect();
        let spread: f64 = (0..n)
            .map(|j| {
                let c = prior.mu[j] - x[j];
                e2[j] + 2.0 * c * e1[j] + slots * c * c
            })
            .sum();
        let delta2 = (spread / (slots * n as f64)).max(1e-12);
        let sigma = m_step_sigma(&q, &obs.y_norm2, obs.antennas)?;
        let next = NoisyParams {
            x,
            delta2,
            sigma_h2: sigma.sigma_h2,
            sigma_w2: sigma.sigma_w2,
        };
        if iteration == 1 {
            trace.initial_objective = loglik;
        }
        let change = params.max_relative_change(&next);
        params = next;
        trace.records.push(IterationRecord {
            iteration,
            loglik,
            loglik_pre_projection: None,
            objective: loglik,
            theta: mapped(&params, prior),
            sigma_h2: params.sigma_h2,
            sigma_w2: params.sigma_w2,
            map_root: None,
            line_search_failed: false,
        });
        if change < tol {
            trace.converged = true;
            trace.reason = StopReason::Tolerance;
            break;
        }
    }
    Ok(OracleResult {
        params,
        posterior: q,
        trace,
    })
}
