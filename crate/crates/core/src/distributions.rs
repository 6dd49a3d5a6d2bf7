//! Probability laws of the randomized on/off encoding.
//!
//! A sensing value `x` is squashed by a per-sensor sigmoid into a
//! transmission probability `theta`, each sensor then backscatters with
//! probability `theta` in every slot, and the reader sees a zero-mean complex
//! Gaussian whose per-component variance grows linearly in the number of
//! active sensors. Everything the inference modules need about those laws
//! lives here; log-space variants are the ones the inference code calls.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{ensure_finite, ensure_open_unit, ensure_positive, Error, Result};

/// Lower clamp applied to `theta` wherever the Jacobian `1 / (theta - theta^2)` is evaluated.
pub const THETA_EPS: f64 = 1e-9;

/// Densities are floored here before a logarithm is taken.
pub const DENSITY_FLOOR: f64 = 1e-300;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[inline]
pub fn clamp_theta(theta: f64) -> f64 {
    theta.clamp(THETA_EPS, 1.0 - THETA_EPS)
}

#[inline]
pub(crate) fn floor_ln(value: f64) -> f64 {
    value.max(DENSITY_FLOOR).ln()
}

/// `ln(theta / (1 - theta))`, accurate near both ends of the unit interval.
#[inline]
pub fn logit(theta: f64) -> f64 {
    theta.ln() - (-theta).ln_1p()
}

#[inline]
fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Maps a measured sensing value to its transmission probability.
pub fn sigmoid_map(x_tilde: f64, mu: f64, sigma: f64) -> Result<f64> {
    ensure_finite("x_tilde", x_tilde)?;
    ensure_finite("mu", mu)?;
    ensure_positive("sigma", sigma)?;
    Ok(logistic((x_tilde - mu) / sigma))
}

/// Exact functional inverse of [`sigmoid_map`]: `mu - sigma * ln(1/theta - 1)`.
pub fn inverse_map(theta: f64, mu: f64, sigma: f64) -> Result<f64> {
    ensure_open_unit("theta", theta)?;
    ensure_finite("mu", mu)?;
    ensure_positive("sigma", sigma)?;
    Ok(mu + sigma * logit(theta))
}

/// Prior over the sensing field: Gaussian with mean `mu` and covariance
/// `D^{1/2} C D^{1/2}`, where `C` is the LEAR correlation `rho^{|j-k|}`.
#[derive(Debug, Clone)]
pub struct SensingPrior {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub rho: f64,
    pub cov: DMatrix<f64>,
    /// Scalar prior used by the uniform-field algorithms.
    pub mu0: f64,
    pub sigma0: f64,
}

impl SensingPrior {
    pub fn lear(mu: Vec<f64>, sigma: Vec<f64>, rho: f64) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::DimensionMismatch {
                what: "prior sigma",
                expected: mu.len(),
                got: sigma.len(),
            });
        }
        if mu.is_empty() {
            return Err(Error::Config("prior needs at least one sensor".into()));
        }
        for &s in &sigma {
            ensure_positive("prior sigma", s)?;
        }
        for &m in &mu {
            ensure_finite("prior mu", m)?;
        }
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::OutOfDomain {
                what: "rho",
                value: rho,
                domain: "[0, 1)",
            });
        }
        let n = mu.len();
        let cov = DMatrix::from_fn(n, n, |j, k| {
            let lag = j.abs_diff(k) as i32;
            sigma[j] * sigma[k] * rho.powi(lag)
        });
        let mu0 = mu.iter().sum::<f64>() / n as f64;
        let sigma0 = sigma.iter().sum::<f64>() / n as f64;
        Ok(Self {
            mu,
            sigma,
            rho,
            cov,
            mu0,
            sigma0,
        })
    }

    /// Identical mean and spread at every sensor.
    pub fn homogeneous(n: usize, mu: f64, sigma: f64, rho: f64) -> Result<Self> {
        Self::lear(vec![mu; n], vec![sigma; n], rho)
    }

    /// Fully correlated field: every sensor observes the same `x ~ N(mu0, sigma0^2)`.
    /// The covariance is singular, so only sampling and the scalar prior are usable.
    pub fn uniform(n: usize, mu0: f64, sigma0: f64) -> Result<Self> {
        ensure_positive("sigma0", sigma0)?;
        ensure_finite("mu0", mu0)?;
        if n == 0 {
            return Err(Error::Config("prior needs at least one sensor".into()));
        }
        Ok(Self {
            mu: vec![mu0; n],
            sigma: vec![sigma0; n],
            rho: 1.0,
            cov: DMatrix::from_element(n, n, sigma0 * sigma0),
            mu0,
            sigma0,
        })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Inverse covariance; fails when the covariance is singular.
    pub fn precision(&self) -> Result<DMatrix<f64>> {
        let chol = self
            .cov
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { matrix: "Sigma_x" })?;
        Ok(chol.inverse())
    }

    /// `r(theta)_n = -sigma_n ln(1/theta_n - 1)`, the centred sensing value.
    pub fn centred(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.sigma)
            .map(|(&t, &s)| s * logit(clamp_theta(t)))
            .collect()
    }

    /// Lower-triangular factor `L` with `L L^T = Sigma_x`, tolerating
    /// semi-definite matrices (zero pivots yield zero columns).
    pub fn sampling_factor(&self) -> Result<DMatrix<f64>> {
        psd_cholesky(&self.cov, "Sigma_x")
    }
}

pub(crate) fn psd_cholesky(a: &DMatrix<f64>, name: &'static str) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let tol = 1e-12 * scale;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !d.is_finite() || d < -tol * 1e3 {
            return Err(Error::NotPositiveDefinite { matrix: name });
        }
        if d <= tol {
            continue;
        }
        let pivot = d.sqrt();
        l[(j, j)] = pivot;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / pivot;
        }
    }
    Ok(l)
}

/// Transmission probabilities, one per sensor, strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector(Vec<f64>);

impl ThetaVector {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        for &t in &theta {
            ensure_open_unit("theta", t)?;
        }
        Ok(Self(theta))
    }

    /// Builds a vector after clamping every entry into `[THETA_EPS, 1 - THETA_EPS]`.
    pub fn clamped(theta: Vec<f64>) -> Self {
        Self(theta.into_iter().map(clamp_theta).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for ThetaVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Law of the number of active sensors in one slot, indexed `0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveCountPmf(Vec<f64>);

impl ActiveCountPmf {
    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().enumerate().map(|(m, p)| m as f64 * p).sum()
    }

    pub fn sensors(&self) -> usize {
        self.0.len() - 1
    }
}

impl std::ops::Index<usize> for ActiveCountPmf {
    type Output = f64;

    fn index(&self, m: usize) -> &f64 {
        &self.0[m]
    }
}

fn jacobian_ln(theta: f64, sigma: f64) -> f64 {
    let t = clamp_theta(theta);
    sigma.ln() - (t * (1.0 - t)).ln()
}

/// Log of the joint density of `theta = F(x)` when `x ~ N(mu, Sigma_x)`.
pub fn ln_theta_prior_hetero(theta: &ThetaVector, prior: &SensingPrior) -> Result<f64> {
    let n = prior.len();
    if theta.len() != n {
        return Err(Error::DimensionMismatch {
            what: "theta",
            expected: n,
            got: theta.len(),
        });
    }
    let chol = prior
        .cov
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { matrix: "Sigma_x" })?;
    let r = DVector::from_vec(prior.centred(theta));
    let z = chol
        .l()
        .solve_lower_triangular(&r)
        .ok_or(Error::NotPositiveDefinite { matrix: "Sigma_x" })?;
    let ln_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let jac: f64 = theta
        .iter()
        .zip(&prior.sigma)
        .map(|(&t, &s)| jacobian_ln(t, s))
        .sum();
    Ok(jac - 0.5 * n as f64 * LN_2PI - 0.5 * ln_det - 0.5 * z.norm_squared())
}

pub fn theta_prior_hetero(theta: &ThetaVector, prior: &SensingPrior) -> Result<f64> {
    ln_theta_prior_hetero(theta, prior).map(f64::exp)
}

/// Log of the scalar mapped-value prior `p(theta)` for a uniform field.
pub fn ln_theta_prior_uniform(theta: f64) -> Result<f64> {
    ensure_open_unit("theta", theta)?;
    let l = logit(clamp_theta(theta));
    Ok(jacobian_ln(theta, 1.0) - 0.5 * LN_2PI - 0.5 * l * l)
}

pub fn theta_prior_uniform(theta: f64) -> Result<f64> {
    ln_theta_prior_uniform(theta).map(f64::exp)
}

/// Log of one factor of `p(theta | x)`: density of `theta_n = F(x_n + Delta)`
/// with `Delta ~ N(0, delta2)`.
pub fn ln_theta_cond_marginal(theta: f64, x: f64, mu: f64, sigma: f64, delta2: f64) -> Result<f64> {
    ensure_open_unit("theta", theta)?;
    ensure_positive("delta2", delta2)?;
    let dev = sigma * logit(clamp_theta(theta)) + mu - x;
    Ok(jacobian_ln(theta, sigma) - 0.5 * (LN_2PI + delta2.ln()) - dev * dev / (2.0 * delta2))
}

pub fn ln_theta_cond_given_x(
    theta: &ThetaVector,
    x: &[f64],
    delta2: f64,
    prior: &SensingPrior,
) -> Result<f64> {
    let n = prior.len();
    for (what, got) in [("theta", theta.len()), ("x", x.len())] {
        if got != n {
            return Err(Error::DimensionMismatch {
                what,
                expected: n,
                got,
            });
        }
    }
    let mut total = 0.0;
    for k in 0..n {
        total += ln_theta_cond_marginal(theta[k], x[k], prior.mu[k], prior.sigma[k], delta2)?;
    }
    Ok(total)
}

pub fn theta_cond_given_x(
    theta: &ThetaVector,
    x: &[f64],
    delta2: f64,
    prior: &SensingPrior,
) -> Result<f64> {
    ln_theta_cond_given_x(theta, x, delta2, prior).map(f64::exp)
}

/// Poisson-Binomial PMF by the O(N^2) convolution recursion, written into `out`
/// (resized to `N + 1`).
pub fn poibin_pmf_into(theta: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.resize(theta.len() + 1, 0.0);
    out[0] = 1.0;
    for (k, &t) in theta.iter().enumerate() {
        let off = 1.0 - t;
        out[k + 1] = out[k] * t;
        for m in (1..=k).rev() {
            out[m] = out[m] * off + out[m - 1] * t;
        }
        out[0] *= off;
    }
}

/// Law of the number of successes among independent Bernoulli(theta_n) trials.
pub fn poibin_pmf(theta: &[f64]) -> ActiveCountPmf {
    let mut out = Vec::with_capacity(theta.len() + 1);
    poibin_pmf_into(theta, &mut out);
    ActiveCountPmf(out)
}

/// Closed-form DFT evaluation of the Poisson-Binomial PMF. Returns the PMF
/// (real parts, negatives clamped to zero) and the largest imaginary residue.
pub fn poibin_pmf_dft(theta: &[f64]) -> (ActiveCountPmf, f64) {
    let n = theta.len();
    let size = n + 1;
    let products: Vec<Complex64> = (0..size)
        .map(|l| {
            let c = Complex64::from_polar(1.0, 2.0 * PI * l as f64 / size as f64);
            theta
                .iter()
                .fold(Complex64::new(1.0, 0.0), |acc, &t| acc * (1.0 + (c - 1.0) * t))
        })
        .collect();
    let mut residue = 0.0_f64;
    let pmf = (0..size)
        .map(|m| {
            let sum: Complex64 = products
                .iter()
                .enumerate()
                .map(|(l, p)| {
                    let angle = -2.0 * PI * ((l * m) % size) as f64 / size as f64;
                    Complex64::from_polar(1.0, angle) * p
                })
                .sum();
            let v = sum / size as f64;
            residue = residue.max(v.im.abs());
            v.re.max(0.0)
        })
        .collect();
    (ActiveCountPmf(pmf), residue)
}

/// PMFs of the active count with sensor `n` removed, for every `n`.
/// Each has length `N` (support `0..=N-1`).
pub fn leave_one_out_pmfs(theta: &[f64]) -> Vec<Vec<f64>> {
    let mut others = Vec::with_capacity(theta.len().saturating_sub(1));
    let mut buf = Vec::new();
    (0..theta.len())
        .map(|n| {
            others.clear();
            others.extend(
                theta
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != n)
                    .map(|(_, &t)| t),
            );
            poibin_pmf_into(&others, &mut buf);
            buf.clone()
        })
        .collect()
}

pub fn binomial_pmf(theta: f64, n: usize) -> ActiveCountPmf {
    let mut coeff = 1.0_f64;
    let pmf = (0..=n)
        .map(|m| {
            if m > 0 {
                coeff *= (n - m + 1) as f64 / m as f64;
            }
            coeff * theta.powi(m as i32) * (1.0 - theta).powi((n - m) as i32)
        })
        .collect();
    ActiveCountPmf(pmf)
}

/// Log density of a received slot vector with squared norm `y_norm2` over `antennas`
/// complex antennas, given `m` active sensors.
#[inline]
pub fn ln_obs_cond_density(
    y_norm2: f64,
    m: usize,
    sigma_h2: f64,
    sigma_w2: f64,
    antennas: usize,
) -> Result<f64> {
    let var = sigma_h2 * m as f64 + sigma_w2;
    if var.is_nan() || var <= 0.0 || var.is_infinite() {
        return Err(Error::OutOfDomain {
            what: "sigma_h2 * m + sigma_w2",
            value: var,
            domain: "(0, inf)",
        });
    }
    Ok(-(antennas as f64) * (LN_2PI + var.ln()) - y_norm2 / (2.0 * var))
}

pub fn obs_cond_density(
    y_norm2: f64,
    m: usize,
    sigma_h2: f64,
    sigma_w2: f64,
    antennas: usize,
) -> Result<f64> {
    ln_obs_cond_density(y_norm2, m, sigma_h2, sigma_w2, antennas).map(f64::exp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn brute_force_pmf(theta: &[f64]) -> Vec<f64> {
        let n = theta.len();
        let mut pmf = vec![0.0; n + 1];
        for mask in 0u32..(1 << n) {
            let mut p = 1.0;
            for (k, &t) in theta.iter().enumerate() {
                p *= if mask & (1 << k) != 0 { t } else { 1.0 - t };
            }
            pmf[mask.count_ones() as usize] += p;
        }
        pmf
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid_map(25.0, 25.0, 1.0).unwrap(), 0.5);
        assert_relative_eq!(
            sigmoid_map(26.0, 25.0, 1.0).unwrap(),
            1.0 / (1.0 + (-1.0f64).exp()),
            epsilon = 1e-15
        );
        assert!(sigmoid_map(-1e6, 25.0, 1.0).unwrap() < 1e-300);
        assert_eq!(sigmoid_map(1e6, 25.0, 1.0).unwrap(), 1.0);
        assert!(sigmoid_map(f64::NAN, 25.0, 1.0).is_err());
        assert!(sigmoid_map(1.0, f64::INFINITY, 1.0).is_err());
        assert!(sigmoid_map(1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(inverse_map(0.5, 25.0, 1.0).unwrap(), 25.0);
        let t = 1.0 / (1.0 + (-1.0f64).exp());
        assert_relative_eq!(inverse_map(t, 25.0, 1.0).unwrap(), 26.0, epsilon = 1e-12);
        assert!(inverse_map(0.0, 25.0, 1.0).is_err());
        assert!(inverse_map(1.0, 25.0, 1.0).is_err());
        assert!(inverse_map(1.5, 25.0, 1.0).is_err());
    }

    #[test]
    fn round_trip_across_standardised_range() {
        // Below t = 12 the f64 spacing of theta near 1 still resolves 1e-10 in x.
        for i in 0..=4200 {
            let t = -30.0 + i as f64 * 0.01;
            let x = 25.0 + 2.0 * t;
            let back = inverse_map(sigmoid_map(x, 25.0, 2.0).unwrap(), 25.0, 2.0).unwrap();
            assert!((back - x).abs() < 1e-10, "t = {t}: {back} vs {x}");
        }
    }

    #[test]
    fn uniform_prior_examples() {
        let expected = 4.0 / (2.0 * PI).sqrt();
        assert_relative_eq!(theta_prior_uniform(0.5).unwrap(), expected, epsilon = 1e-12);
        for &t in &[0.01, 0.2, 0.37, 0.49] {
            assert_relative_eq!(
                theta_prior_uniform(t).unwrap(),
                theta_prior_uniform(1.0 - t).unwrap(),
                max_relative = 1e-12
            );
        }
        assert!(theta_prior_uniform(0.0).is_err());
    }

    #[test]
    fn hetero_prior_point_value() {
        let prior = SensingPrior::lear(vec![0.0], vec![1.0], 0.0).unwrap();
        let theta = ThetaVector::new(vec![0.5]).unwrap();
        assert_relative_eq!(
            theta_prior_hetero(&theta, &prior).unwrap(),
            4.0 / (2.0 * PI).sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn hetero_prior_factorises_without_correlation() {
        let prior = SensingPrior::lear(vec![25.0, 20.0, 30.0], vec![1.0, 2.0, 0.5], 0.0).unwrap();
        let theta = ThetaVector::new(vec![0.2, 0.55, 0.9]).unwrap();
        let joint = theta_prior_hetero(&theta, &prior).unwrap();
        let product: f64 = theta.iter().map(|&t| theta_prior_uniform(t).unwrap()).product();
        assert_relative_eq!(joint, product, max_relative = 1e-10);
    }

    #[test]
    fn singular_covariance_is_rejected() {
        let prior = SensingPrior::uniform(3, 25.0, 1.0).unwrap();
        let theta = ThetaVector::new(vec![0.5; 3]).unwrap();
        assert!(matches!(
            theta_prior_hetero(&theta, &prior),
            Err(Error::NotPositiveDefinite { .. })
        ));
        assert!(prior.sampling_factor().is_ok());
    }

    #[test]
    fn conditional_density_examples() {
        let prior = SensingPrior::lear(vec![25.0], vec![1.0], 0.0).unwrap();
        let theta = ThetaVector::new(vec![0.5]).unwrap();
        assert_relative_eq!(
            theta_cond_given_x(&theta, &[25.0], 1.0, &prior).unwrap(),
            4.0 / (2.0 * PI).sqrt(),
            epsilon = 1e-12
        );
        assert!(theta_cond_given_x(&theta, &[25.0], 0.0, &prior).is_err());

        let prior = SensingPrior::lear(vec![25.0, 24.0], vec![1.0, 1.5], 0.3).unwrap();
        let theta = ThetaVector::new(vec![0.3, 0.8]).unwrap();
        let x = [25.5, 23.0];
        let joint = theta_cond_given_x(&theta, &x, 0.7, &prior).unwrap();
        let prod = (0..2)
            .map(|k| {
                ln_theta_cond_marginal(theta[k], x[k], prior.mu[k], prior.sigma[k], 0.7)
                    .unwrap()
                    .exp()
            })
            .product::<f64>();
        assert_relative_eq!(joint, prod, max_relative = 1e-14);
    }

    #[test]
    fn poibin_small_examples() {
        let pmf = poibin_pmf(&[0.3, 0.6]);
        for (a, b) in pmf.probabilities().iter().zip([0.28, 0.54, 0.18]) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
        let pmf = poibin_pmf(&[0.5; 4]);
        for (m, w) in [1.0, 4.0, 6.0, 4.0, 1.0].iter().enumerate() {
            assert_relative_eq!(pmf[m], w / 16.0, epsilon = 1e-15);
        }
        assert_eq!(poibin_pmf(&[]).probabilities(), &[1.0]);
    }

    #[test]
    fn binomial_examples() {
        assert_eq!(binomial_pmf(0.0, 3).probabilities(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(binomial_pmf(1.0, 3).probabilities(), &[0.0, 0.0, 0.0, 1.0]);
        let pmf = binomial_pmf(0.5, 4);
        for (m, w) in [1.0, 4.0, 6.0, 4.0, 1.0].iter().enumerate() {
            assert_relative_eq!(pmf[m], w / 16.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn poibin_matches_enumeration_and_dft() {
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for n in 1..=12 {
            let theta: Vec<f64> = (0..n).map(|_| next()).collect();
            let dp = poibin_pmf(&theta);
            let brute = brute_force_pmf(&theta);
            for (a, b) in dp.probabilities().iter().zip(&brute) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        for n in [1, 5, 17, 40, 64] {
            let theta: Vec<f64> = (0..n).map(|_| next()).collect();
            let dp = poibin_pmf(&theta);
            let (dft, residue) = poibin_pmf_dft(&theta);
            assert!(residue < 1e-8);
            for (a, b) in dp.probabilities().iter().zip(dft.probabilities()) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn leave_one_out_recombines() {
        let theta = [0.1, 0.45, 0.8, 0.33];
        let full = poibin_pmf(&theta);
        for (n, loo) in leave_one_out_pmfs(&theta).iter().enumerate() {
            for m in 0..=theta.len() {
                let lo = if m < loo.len() { loo[m] } else { 0.0 };
                let hi = if m > 0 { loo[m - 1] } else { 0.0 };
                assert_relative_eq!(
                    full[m],
                    (1.0 - theta[n]) * lo + theta[n] * hi,
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn obs_density_examples() {
        for m in 0..4 {
            let d = obs_cond_density(0.0, m, 1.0, 1.0, 2).unwrap();
            let want = (2.0 * PI * (m as f64 + 1.0)).powi(-2);
            assert_relative_eq!(d, want, max_relative = 1e-13);
        }
        let pure = obs_cond_density(3.0, 0, 5.0, 0.7, 3).unwrap();
        let noise_only = obs_cond_density(3.0, 7, 0.0, 0.7, 3).unwrap();
        assert_relative_eq!(pure, noise_only, max_relative = 1e-15);
        let ln = ln_obs_cond_density(12.0, 2, 0.5, 0.3, 4).unwrap();
        assert_relative_eq!(
            ln,
            obs_cond_density(12.0, 2, 0.5, 0.3, 4).unwrap().ln(),
            epsilon = 1e-12
        );
        assert!(obs_cond_density(1.0, 1, 0.0, 0.0, 1).is_err());
        assert!(
            obs_cond_density(1.0, 2, 1.0, 1.0, 2).unwrap()
                > obs_cond_density(2.0, 2, 1.0, 1.0, 2).unwrap()
        );
    }

    #[test]
    fn lear_structure() {
        let prior = SensingPrior::lear(vec![25.0; 4], vec![1.0, 2.0, 1.0, 0.5], 0.5).unwrap();
        assert_relative_eq!(prior.cov[(0, 2)], 1.0 * 1.0 * 0.25);
        assert_relative_eq!(prior.cov[(1, 3)], 2.0 * 0.5 * 0.25);
        assert_relative_eq!(prior.cov[(3, 3)], 0.25);
        let diag = SensingPrior::lear(vec![0.0; 3], vec![1.0, 2.0, 3.0], 0.0).unwrap();
        for j in 0..3 {
            for k in 0..3 {
                let want = if j == k { diag.sigma[j].powi(2) } else { 0.0 };
                assert_eq!(diag.cov[(j, k)], want);
            }
        }
        assert!(SensingPrior::lear(vec![0.0], vec![1.0], 1.0).is_err());
        assert!(SensingPrior::lear(vec![0.0], vec![-1.0], 0.1).is_err());
    }
}
