use backsense::distributions::{
    binomial_pmf, inverse_map, leave_one_out_pmfs, poibin_pmf, poibin_pmf_dft, sigmoid_map,
};
use backsense::em_uniform::{self, e_step, m_step_sigma, m_step_theta_map, m_step_theta_ml, EmConfig};
use backsense::gem_hetero::{e_step_hetero, m_step_theta_gem, ThetaObjective};
use backsense::harness::relative_error;
use backsense::vi_noisy::ThetaGrid;
use backsense::{Criterion, GemConfig, HeteroParams, ObservationSet, PosteriorT, SensingPrior, UniformParams};
use proptest::prelude::*;

fn brute_force(theta: &[f64]) -> Vec<f64> {
    let n = theta.len();
    let mut pmf = vec![0.0; n + 1];
    for mask in 0u32..(1 << n) {
        let p: f64 = (0..n)
            .map(|j| if mask >> j & 1 == 1 { theta[j] } else { 1.0 - theta[j] })
            .product();
        pmf[mask.count_ones() as usize] += p;
    }
    pmf
}

fn posterior_rows(width: usize, slots: usize) -> impl Strategy<Value = PosteriorT> {
    prop::collection::vec(prop::collection::vec(0.01f64..1.0, width), slots).prop_map(|rows| {
        let rows = rows
            .into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect();
        PosteriorT::from_rows(rows).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn poibin_is_a_distribution(theta in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let pmf = poibin_pmf(&theta);
        let p = pmf.probabilities();
        prop_assert_eq!(p.len(), theta.len() + 1);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((pmf.mean() - theta.iter().sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn poibin_matches_enumeration(theta in prop::collection::vec(0.0f64..=1.0, 1..=10)) {
        let exact = brute_force(&theta);
        for (a, b) in poibin_pmf(&theta).probabilities().iter().zip(&exact) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let (dft, _) = poibin_pmf_dft(&theta);
        for (a, b) in dft.probabilities().iter().zip(&exact) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn poibin_is_permutation_invariant(mut theta in prop::collection::vec(0.0f64..=1.0, 2..16)) {
        let a = poibin_pmf(&theta);
        theta.reverse();
        let b = poibin_pmf(&theta);
        for (x, y) in a.probabilities().iter().zip(b.probabilities()) {
            prop_assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn equal_probabilities_reduce_to_binomial(t in 0.0f64..=1.0, n in 1usize..30) {
        let a = poibin_pmf(&vec![t; n]);
        let b = binomial_pmf(t, n);
        for (x, y) in a.probabilities().iter().zip(b.probabilities()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn leave_one_out_recombines(theta in prop::collection::vec(0.0f64..=1.0, 1..20)) {
        let full = poibin_pmf(&theta);
        for (n, a) in leave_one_out_pmfs(&theta).iter().enumerate() {
            for m in 0..=theta.len() {
                let below = if m == 0 { 0.0 } else { a[m - 1] };
                let here = a.get(m).copied().unwrap_or(0.0);
                let v = (1.0 - theta[n]) * here + theta[n] * below;
                prop_assert!((v - full.probabilities()[m]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_map_round_trips(x in 15.0f64..35.0, mu in 20.0f64..30.0, sigma in 0.5f64..3.0) {
        let theta = sigmoid_map(x, mu, sigma).unwrap();
        prop_assert!(theta > 0.0 && theta < 1.0);
        let back = inverse_map(theta, mu, sigma).unwrap();
        prop_assert!((back - x).abs() < 1e-8);
    }

    #[test]
    fn sigmoid_map_is_monotone(a in -10.0f64..10.0, d in 1e-3f64..5.0) {
        prop_assert!(sigmoid_map(a + d, 0.0, 1.0).unwrap() > sigmoid_map(a, 0.0, 1.0).unwrap());
    }

    #[test]
    fn e_step_rows_are_stochastic(
        norms in prop::collection::vec(0.0f64..200.0, 1..30),
        theta in 0.0f64..=1.0,
        sigma_h2 in 0.0f64..20.0,
        sigma_w2 in 1e-3f64..5.0,
        antennas in 1usize..6,
        sensors in 1usize..8,
    ) {
        let obs = ObservationSet::from_norms(norms, antennas, sensors).unwrap();
        let q = e_step(&obs, &UniformParams::new(theta, sigma_h2, sigma_w2).unwrap()).unwrap();
        prop_assert!(q.max_row_defect() < 1e-12);
        prop_assert!(q.rows().flatten().all(|&v| v >= 0.0));
    }

    #[test]
    fn hetero_e_step_rows_are_stochastic(
        norms in prop::collection::vec(0.0f64..200.0, 1..30),
        theta in prop::collection::vec(0.0f64..=1.0, 1..8),
        sigma_h2 in 0.0f64..20.0,
        sigma_w2 in 1e-3f64..5.0,
    ) {
        let obs = ObservationSet::from_norms(norms, 2, theta.len()).unwrap();
        let params = HeteroParams::new(theta, sigma_h2, sigma_w2).unwrap();
        let (q, ll) = e_step_hetero(&obs, &params).unwrap();
        prop_assert!(ll.is_finite());
        prop_assert!(q.max_row_defect() < 1e-12);
    }

    #[test]
    fn theta_updates_stay_in_the_unit_interval(q in posterior_rows(5, 12)) {
        for theta in [m_step_theta_ml(&q, 4), m_step_theta_map(&q, 4)] {
            prop_assert!((0.0..=1.0).contains(&theta));
        }
    }

    #[test]
    fn map_update_is_pulled_toward_one_half(q in posterior_rows(5, 12)) {
        let ml = m_step_theta_ml(&q, 4);
        let map = m_step_theta_map(&q, 4);
        prop_assert!((map - 0.5).abs() <= (ml - 0.5).abs() + 1e-6);
    }

    #[test]
    fn variance_update_respects_floors(
        q in posterior_rows(4, 10),
        norms in prop::collection::vec(0.0f64..100.0, 10),
    ) {
        let s = m_step_sigma(&q, &norms, 3).unwrap();
        prop_assert!(s.sigma_h2 >= 0.0);
        prop_assert!(s.sigma_w2 >= 1e-8);
        prop_assert_eq!(s.per_count.len(), 4);
    }

    #[test]
    fn gem_m_step_never_decreases_the_surrogate(
        weights in prop::collection::vec(0.0f64..50.0, 5),
        theta in prop::collection::vec(0.01f64..0.99, 4),
        rho in 0.0f64..0.9,
        map in any::<bool>(),
    ) {
        let prior = SensingPrior::homogeneous(4, 25.0, 1.0, rho).unwrap();
        let criterion = if map { Criterion::Map } else { Criterion::Ml };
        let obj = ThetaObjective::new(weights, criterion, &prior).unwrap();
        let (next, _) = m_step_theta_gem(&obj, &theta, &GemConfig::default());
        prop_assert!(obj.value(&next) >= obj.value(&theta) - 1e-12);
        prop_assert!(next.iter().all(|&t| t > 0.0 && t < 1.0));
    }

    #[test]
    fn grid_densities_are_normalised(values in prop::collection::vec(0.0f64..10.0, 16)) {
        prop_assume!(values.iter().any(|&v| v > 1e-6));
        let mut grid = ThetaGrid::new(16, 1, 1);
        grid.set_density(0, 0, &values).unwrap();
        prop_assert!(grid.max_normalisation_defect() < 1e-12);
        prop_assert!((grid.masses(0, 0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relative_error_is_a_scaled_distance(
        x in prop::collection::vec(1.0f64..50.0, 1..8),
        shift in -5.0f64..5.0,
    ) {
        let x_hat: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let e = relative_error(&x_hat, &x).unwrap();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(e >= 0.0);
        prop_assert!((e - shift.abs() * (x.len() as f64).sqrt() / norm).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn em_pre_projection_loglik_never_decreases(
        norms in prop::collection::vec(0.0f64..80.0, 20..60),
    ) {
        let obs = ObservationSet::from_norms(norms, 2, 3).unwrap();
        let cfg = EmConfig { max_iter: 30, ..EmConfig::default() };
        let r = em_uniform::run(&obs, Criterion::Ml, UniformParams::initial(&obs), &cfg).unwrap();
        let mut prev = em_uniform::incomplete_loglik(&obs, &UniformParams::initial(&obs)).unwrap();
        for rec in &r.trace.records {
            let pre = rec.loglik_pre_projection.unwrap();
            prop_assert!(pre >= prev - 1e-8 * prev.abs().max(1.0), "{pre} < {prev}");
            prev = rec.loglik;
        }
    }
}
