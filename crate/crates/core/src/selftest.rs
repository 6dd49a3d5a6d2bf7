//! Fast oracle checks bundled with the library, run by `backsense selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distributions::{
    inverse_map, leave_one_out_pmfs, poibin_pmf, poibin_pmf_dft, sigmoid_map, SensingPrior,
};
use crate::em_uniform::{self, m_step_theta_ml, ml_theta_objective, Criterion, EmConfig, UniformParams};
use crate::gem_hetero::ThetaObjective;
use crate::posterior::PosteriorT;
use crate::quadrature::{gauss_legendre, golden_section_max};
use crate::simulator::{encode_and_transmit, sample_field, ChannelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, error: f64, tol: f64) -> CheckResult {
    CheckResult {
        name,
        passed: error.is_finite() && error < tol,
        detail: format!("max error {error:.3e} (tolerance {tol:.0e})"),
    }
}

fn random_theta(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.01..0.99)).collect()
}

fn brute_force(theta: &[f64]) -> Vec<f64> {
    let n = theta.len();
    let mut pmf = vec![0.0; n + 1];
    for mask in 0u32..(1 << n) {
        let p: f64 = theta
            .iter()
            .enumerate()
            .map(|(k, &t)| if mask >> k & 1 == 1 { t } else { 1.0 - t })
            .product();
        pmf[mask.count_ones() as usize] += p;
    }
    pmf
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn run_selftest() -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();

    let mut err: f64 = 0.0;
    for n in 1..=12 {
        let theta = random_theta(&mut rng, n);
        err = err.max(max_diff(poibin_pmf(&theta).probabilities(), &brute_force(&theta)));
    }
    out.push(check("poisson-binomial recursion vs enumeration", err, 1e-10));

    let mut err: f64 = 0.0;
    for n in [5, 16, 64] {
        let theta = random_theta(&mut rng, n);
        let (dft, _) = poibin_pmf_dft(&theta);
        err = err.max(max_diff(poibin_pmf(&theta).probabilities(), dft.probabilities()));
    }
    out.push(check("poisson-binomial recursion vs DFT", err, 1e-8));

    let theta = random_theta(&mut rng, 7);
    let full = poibin_pmf(&theta);
    let mut err: f64 = 0.0;
    for (n, a) in leave_one_out_pmfs(&theta).iter().enumerate() {
        for m in 0..=7 {
            let here = a.get(m).copied().unwrap_or(0.0);
            let below = if m == 0 { 0.0 } else { a[m - 1] };
            err = err.max((full[m] - ((1.0 - theta[n]) * here + theta[n] * below)).abs());
        }
    }
    out.push(check("leave-one-out recombination", err, 1e-12));

    let (x, w) = gauss_legendre(64);
    let err = (0..40)
        .map(|d| {
            let got: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(d)).sum();
            let want = if d % 2 == 1 { 0.0 } else { 2.0 / (d as f64 + 1.0) };
            (got - want).abs()
        })
        .fold(0.0, f64::max);
    out.push(check("Gauss-Legendre exactness", err, 1e-12));

    let err = (-300..=240)
        .map(|i| {
            let x = 25.0 + 0.05 * i as f64;
            let back = sigmoid_map(x, 25.0, 1.0).and_then(|t| inverse_map(t, 25.0, 1.0));
            back.map_or(f64::INFINITY, |b| (b - x).abs())
        })
        .fold(0.0, f64::max);
    out.push(check("sigmoid map round trip", err, 1e-10));

    let mut err: f64 = 0.0;
    for _ in 0..20 {
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| {
                let r: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            })
            .collect();
        let q = PosteriorT::from_rows(rows).expect("rows have equal length");
        let closed = m_step_theta_ml(&q, 3);
        let numeric = golden_section_max(|t| ml_theta_objective(&q, 3, t), 1e-9, 1.0 - 1e-9, 1e-12);
        err = err.max((closed - numeric).abs());
    }
    out.push(check("closed-form theta update vs golden section", err, 1e-6));

    let prior = SensingPrior::homogeneous(4, 25.0, 1.0, 0.5).expect("valid prior");
    let mut err: f64 = 0.0;
    for criterion in [Criterion::Ml, Criterion::Map] {
        let weights: Vec<f64> = (0..5).map(|_| rng.random_range(1.0..20.0)).collect();
        let obj = ThetaObjective::new(weights, criterion, &prior).expect("prior is positive definite");
        let theta = random_theta(&mut rng, 4);
        let grad = obj.gradient(&theta);
        for n in 0..4 {
            let h = 1e-6;
            let mut up = theta.clone();
            let mut down = theta.clone();
            up[n] += h;
            down[n] -= h;
            let fd = (obj.value(&up) - obj.value(&down)) / (2.0 * h);
            err = err.max((grad[n] - fd).abs() / fd.abs().max(1.0));
        }
    }
    out.push(check("GEM gradient vs finite differences", err, 1e-5));

    let monotone = (|| {
        let field = sample_field(&prior, 0.0, 100, 11)?;
        let cfg = ChannelConfig::new(4, 4, 100, 1.0, 1.0, 10.0)?;
        let obs = encode_and_transmit(&field, &cfg, 11)?;
        let r = em_uniform::run(&obs, Criterion::Ml, UniformParams::initial(&obs), &EmConfig::default())?;
        let mut worst: f64 = 0.0;
        let mut previous = r.trace.initial_objective;
        for rec in &r.trace.records {
            let pre = rec.loglik_pre_projection.unwrap_or(rec.loglik);
            worst = worst.max(previous - pre);
            previous = rec.loglik;
        }
        Ok::<f64, crate::Error>(worst.max(0.0))
    })()
    .unwrap_or(f64::INFINITY);
    out.push(check("EM pre-projection monotonicity", monotone, 1e-6));

    out
}

#[cfg(test)]
mod tests {
    #[test]
    fn selftest_passes() {
        for c in super::run_selftest() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
