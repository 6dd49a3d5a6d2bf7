use backsense::distributions::{logit, poibin_pmf};
use backsense::gem_hetero::{e_step_hetero, run_hetero};
use backsense::harness::median;
use backsense::simulator::{encode_and_transmit, field_given_x, sample_field};
use backsense::vi_noisy::{
    exact_em_noisy_oracle, expectation_f1, expectation_f2, m_step_noisy, run_vi, update_q_t, update_q_theta,
    variational_e_step, McConfig, VariationalSnapshot,
};
use backsense::{
    ChannelConfig, Criterion, Error, GemConfig, HeteroParams, NoisyParams, ObservationSet, SensingPrior, ThetaGrid,
    VariationalState, ViConfig,
};

fn scenario(n: usize, delta2: f64, slots: usize, seed: u64) -> (SensingPrior, Vec<f64>, ObservationSet) {
    let prior = SensingPrior::homogeneous(n, 25.0, 1.0, 0.5).unwrap();
    let field = sample_field(&prior, delta2, slots, seed).unwrap();
    let cfg = ChannelConfig::new(4, n, slots, 1.0, 1.0, 10.0).unwrap();
    let obs = encode_and_transmit(&field, &cfg, seed).unwrap();
    (prior, field.x, obs)
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[test]
fn single_sensor_posteriors_match_the_exact_oracle() {
    let (prior, _, obs) = scenario(1, 1.0, 100, 41);
    let cfg = ViConfig::default();
    let init = NoisyParams::initial(&obs, &prior);
    let vi = run_vi(&obs, &prior, init.clone(), &cfg, 41).unwrap();
    let exact = exact_em_noisy_oracle(&obs, &prior, init, cfg.grid_nodes, cfg.tol, cfg.max_iter).unwrap();
    let dists: Vec<f64> = (0..obs.slots())
        .map(|i| tv(vi.state.q_t.row(i), exact.posterior.row(i)))
        .collect();
    let mean = dists.iter().sum::<f64>() / dists.len() as f64;
    let max = dists.iter().copied().fold(0.0, f64::max);
    println!("N=1 total variation: mean {mean:.4}, max {max:.4}");
    assert!(max < 0.05, "max total variation {max}");
}

#[test]
fn near_noise_free_vi_agrees_with_gem() {
    let mut gaps = Vec::new();
    for seed in 0..50 {
        let (prior, _, obs) = scenario(2, 1e-6, 100, 300 + seed);
        let vi = run_vi(&obs, &prior, NoisyParams::initial(&obs, &prior), &ViConfig::default(), seed).unwrap();
        let gem = run_hetero(&obs, Criterion::Ml, &prior, HeteroParams::initial(&obs), &GemConfig::default()).unwrap();
        let diff = vi.params.x.iter().zip(&gem.x_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = gem.x_hat.iter().map(|v| v * v).sum::<f64>().sqrt();
        gaps.push(diff / norm);
    }
    let med = median(&mut gaps);
    assert!(med < 0.1, "median relative gap {med}");
}

#[test]
fn grid_entropy_shrinks_with_measurement_noise() {
    let (prior, x, obs) = scenario(3, 0.5, 40, 12);
    let cfg = ViConfig::default();
    let mut last = f64::INFINITY;
    for delta2 in [10.0, 1.0, 0.1, 0.01] {
        let params = NoisyParams::new(x.clone(), delta2, 10.0, 1.0).unwrap();
        let mut state = VariationalState::initial(&obs, &prior, &params, cfg.grid_nodes).unwrap();
        variational_e_step(&obs, &prior, &params, &mut state, &cfg, 3).unwrap();
        let g = &state.q_theta;
        let h: f64 = (0..g.slots())
            .flat_map(|i| (0..g.sensors()).map(move |n| (i, n)))
            .map(|(i, n)| g.entropy(i, n))
            .sum::<f64>()
            / (g.slots() * g.sensors()) as f64;
        assert!(h < last, "entropy {h} at delta2 = {delta2} not below {last}");
        last = h;
    }
}

#[test]
fn doubling_the_grid_barely_moves_the_estimate() {
    let cfg64 = ViConfig::default();
    let cfg128 = ViConfig {
        grid_nodes: 128,
        ..ViConfig::default()
    };
    // Single sensor: both grids fit within the sample budget, so F1/F2 are exact sums.
    let (prior, _, obs) = scenario(1, 1.0, 100, 55);
    let init = NoisyParams::initial(&obs, &prior);
    let a = run_vi(&obs, &prior, init.clone(), &cfg64, 1).unwrap();
    let b = run_vi(&obs, &prior, init, &cfg128, 1).unwrap();
    assert!((a.params.x[0] - b.params.x[0]).abs() < 1e-3, "{:?} vs {:?}", a.params.x, b.params.x);
    let (prior, _, obs) = scenario(2, 1.0, 60, 56);
    let init = NoisyParams::initial(&obs, &prior);
    let a = exact_em_noisy_oracle(&obs, &prior, init.clone(), 64, 1e-8, 200).unwrap();
    let b = exact_em_noisy_oracle(&obs, &prior, init, 128, 1e-8, 200).unwrap();
    for (u, v) in a.params.x.iter().zip(&b.params.x) {
        assert!((u - v).abs() < 1e-3, "{u} vs {v}");
    }
}

#[test]
fn infinite_tolerance_runs_one_outer_cycle() {
    let (prior, _, obs) = scenario(2, 1.0, 30, 2);
    let cfg = ViConfig {
        tol: f64::INFINITY,
        ..ViConfig::default()
    };
    let r = run_vi(&obs, &prior, NoisyParams::initial(&obs, &prior), &cfg, 0).unwrap();
    assert_eq!(r.trace.iterations(), 1);
    let o = exact_em_noisy_oracle(&obs, &prior, NoisyParams::initial(&obs, &prior), 32, f64::INFINITY, 50).unwrap();
    assert_eq!(o.trace.iterations(), 1);
}

#[test]
fn densities_stay_normalised_and_the_bound_is_stable() {
    let (prior, _, obs) = scenario(4, 1.0, 50, 9);
    let cfg = ViConfig {
        max_iter: 3,
        ..ViConfig::default()
    };
    let mut params = NoisyParams::initial(&obs, &prior);
    let mut state = VariationalState::initial(&obs, &prior, &params, cfg.grid_nodes).unwrap();
    let mut rounds = 0;
    let mut violations = 0;
    for _ in 0..cfg.max_iter {
        let report = variational_e_step(&obs, &prior, &params, &mut state, &cfg, 9).unwrap();
        assert!(state.q_t.max_row_defect() < 1e-12);
        assert!(state.q_theta.max_normalisation_defect() < 1e-9);
        rounds += report.max_rounds * obs.slots();
        violations += report.violations;
        params = m_step_noisy(&state, &obs, &prior).unwrap();
        assert!(params.delta2 >= 0.0);
    }
    assert!(violations * 20 <= rounds, "{violations} violations in {rounds} rounds");
}

#[test]
fn oracle_rejects_more_than_three_sensors() {
    let (prior, _, obs) = scenario(4, 1.0, 10, 1);
    let r = exact_em_noisy_oracle(&obs, &prior, NoisyParams::initial(&obs, &prior), 16, 1e-3, 5);
    assert!(matches!(r, Err(Error::TooManySensors { max: 3, got: 4 })));
}

#[test]
fn f1_on_a_two_node_grid_matches_the_hand_sum() {
    let mut g = ThetaGrid::new(2, 1, 1);
    g.set_density(0, 0, &[1.0, 3.0]).unwrap();
    let masses = g.masses(0, 0);
    let z = g.nodes().to_vec();
    for m in 0..=1 {
        let p = |t: f64| if m == 1 { t } else { 1.0 - t };
        let want = (masses[0] * (2.0 * p(z[0])).ln() + masses[1] * (2.0 * p(z[1])).ln()).exp();
        assert!((expectation_f1(m, &g, 0, 256, 5) - want).abs() < 1e-12);
    }
}

#[test]
fn f1_monte_carlo_error_is_within_its_error_bar() {
    // 8^3 joint nodes exceed 256 samples, so this goes through the sampler.
    let k = 8;
    let mut g = ThetaGrid::new(k, 1, 3);
    for n in 0..3 {
        let values: Vec<f64> = (0..k).map(|j| 1.0 + ((j + n) % 3) as f64).collect();
        g.set_density(0, n, &values).unwrap();
    }
    let masses: Vec<Vec<f64>> = (0..3).map(|n| g.masses(0, n)).collect();
    let z = g.nodes().to_vec();
    for m in 0..=3 {
        let (mut mean, mut second) = (0.0, 0.0);
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    let w = masses[0][a] * masses[1][b] * masses[2][c];
                    let v = (4.0 * poibin_pmf(&[z[a], z[b], z[c]]).probabilities()[m]).ln();
                    mean += w * v;
                    second += w * v * v;
                }
            }
        }
        let sd = (second - mean * mean).sqrt();
        let bar = sd / 256f64.sqrt();
        let e1 = expectation_f1(m, &g, 0, 256, 11).ln();
        let e2 = expectation_f1(m, &g, 0, 256, 12).ln();
        assert!((e1 - mean).abs() < 4.0 * bar, "m = {m}: {e1} vs {mean} (bar {bar})");
        assert!((e1 - e2).abs() < 3.0 * 2f64.sqrt() * bar, "m = {m}: seeds differ by {}", (e1 - e2).abs());
    }
}

#[test]
fn f2_on_two_node_grids_matches_enumeration() {
    let mut g = ThetaGrid::new(2, 1, 2);
    g.set_density(0, 0, &[2.0, 1.0]).unwrap();
    g.set_density(0, 1, &[1.0, 4.0]).unwrap();
    let row = [0.2, 0.5, 0.3];
    let other = g.masses(0, 1);
    let nodes = g.nodes().to_vec();
    for &zz in &[0.15, 0.6] {
        let mut ln = 0.0;
        for (k, &w) in other.iter().enumerate() {
            let pmf = poibin_pmf(&[zz, nodes[k]]);
            for m in 0..3 {
                ln += w * row[m] * (3.0 * pmf.probabilities()[m]).ln();
            }
        }
        let got = expectation_f2(0, zz, &row, &g, 0, 256, 3);
        assert!((got.ln() - ln).abs() < 1e-12);
    }
}

#[test]
fn f2_with_point_masses_is_a_pmf_evaluation() {
    let mut g = ThetaGrid::new(64, 1, 3);
    g.set_point_mass(0, 1, 12);
    g.set_point_mass(0, 2, 40);
    let row = [0.0, 0.0, 1.0, 0.0];
    let z = 0.3;
    let want = 4.0 * poibin_pmf(&[z, g.nodes()[12], g.nodes()[40]]).probabilities()[2];
    assert!((expectation_f2(0, z, &row, &g, 0, 256, 8) / want - 1.0).abs() < 1e-12);
}

#[test]
fn q_t_update_reduces_to_the_noise_free_posterior() {
    let (prior, x, obs) = scenario(3, 0.0, 20, 4);
    let params = NoisyParams::new(x, 1.0, 9.0, 1.2).unwrap();
    let mut state = VariationalState::initial(&obs, &prior, &params, 64).unwrap();
    let picks = [10, 31, 50];
    for i in 0..obs.slots() {
        for (n, &k) in picks.iter().enumerate() {
            state.q_theta.set_point_mass(i, n, k);
        }
    }
    let theta: Vec<f64> = picks.iter().map(|&k| state.q_theta.nodes()[k]).collect();
    let (q, _) = e_step_hetero(&obs, &HeteroParams::new(theta, 9.0, 1.2).unwrap()).unwrap();
    let mc = McConfig { samples: 256, seed: 5 };
    for i in 0..obs.slots() {
        let row = update_q_t(&obs, i, &params, &state.q_theta, &mc, false).unwrap();
        for (a, b) in row.iter().zip(q.row(i)) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn flat_channel_makes_q_t_proportional_to_f1() {
    let (prior, _, obs) = scenario(2, 1.0, 5, 6);
    let params = NoisyParams::new(vec![25.0, 25.0], 1.0, 0.0, 1.0).unwrap();
    let state = VariationalState::initial(&obs, &prior, &params, 64).unwrap();
    let mc = McConfig { samples: 256, seed: 2 };
    let row = update_q_t(&obs, 0, &params, &state.q_theta, &mc, false).unwrap();
    let f1: Vec<f64> = (0..3).map(|m| expectation_f1(m, &state.q_theta, 0, 256, 2)).collect();
    let total: f64 = f1.iter().sum();
    for (a, b) in row.iter().zip(&f1) {
        assert!((a - b / total).abs() < 1e-12);
    }
}

#[test]
fn huge_noise_leaves_the_pmf_term_shape() {
    let (prior, _, obs) = scenario(2, 1.0, 3, 7);
    let params = NoisyParams::new(vec![25.0, 25.0], 1e12, 5.0, 1.0).unwrap();
    let state = VariationalState::initial(&obs, &prior, &params, 64).unwrap();
    let row = [0.1, 0.3, 0.6];
    let mc = McConfig { samples: 256, seed: 4 };
    let got = update_q_theta(0, 1, &params, &row, &state.q_theta, &prior, &mc).unwrap();
    let g = &state.q_theta;
    let shape: Vec<f64> = g
        .nodes()
        .iter()
        .map(|&z| expectation_f2(0, z, &row, g, 1, 256, 4) / (z * (1.0 - z)))
        .collect();
    let norm: f64 = shape.iter().zip(g.weights()).map(|(s, w)| s * w).sum();
    for (a, b) in got.iter().zip(&shape) {
        assert!((a - b / norm).abs() < 1e-4 * (b / norm).max(1.0));
    }
    let mass: f64 = got.iter().zip(g.weights()).map(|(v, w)| v * w).sum();
    assert!((mass - 1.0).abs() < 1e-6);
}

#[test]
fn symmetric_grid_density_maps_back_to_the_prior_mean() {
    let prior = SensingPrior::lear(vec![25.0, 18.0], vec![1.0, 2.0], 0.3).unwrap();
    let obs = ObservationSet::from_norms(vec![2.0, 6.0], 2, 2).unwrap();
    let params = NoisyParams::initial(&obs, &prior);
    let mut state = VariationalState::initial(&obs, &prior, &params, 64).unwrap();
    let z = state.q_theta.nodes().to_vec();
    let values: Vec<f64> = z.iter().map(|&t| (-(logit(t)).powi(2)).exp() + 0.1).collect();
    for i in 0..2 {
        for n in 0..2 {
            state.q_theta.set_density(i, n, &values).unwrap();
        }
    }
    let p = m_step_noisy(&state, &obs, &prior).unwrap();
    assert!((p.x[0] - 25.0).abs() < 1e-9);
    assert!((p.x[1] - 18.0).abs() < 1e-9);
    assert!(p.delta2 > 0.0);
}

#[test]
fn snapshot_round_trips_through_json() {
    let (prior, _, obs) = scenario(2, 1.0, 4, 3);
    let params = NoisyParams::initial(&obs, &prior);
    let state = VariationalState::initial(&obs, &prior, &params, 16).unwrap();
    let snap = state.snapshot();
    let text = serde_json::to_string(&snap).unwrap();
    let back: VariationalSnapshot = serde_json::from_str(&text).unwrap();
    assert_eq!(back, snap);
}

#[test]
fn literal_exponent_is_selectable() {
    let (prior, x, obs) = scenario(2, 0.0, 10, 5);
    let field_x = field_given_x(x.clone(), &prior, 0.0, 10, 5).unwrap().x;
    let params = NoisyParams::new(field_x, 1.0, 8.0, 1.0).unwrap();
    let state = VariationalState::initial(&obs, &prior, &params, 64).unwrap();
    let mc = McConfig { samples: 256, seed: 1 };
    let a = update_q_t(&obs, 0, &params, &state.q_theta, &mc, false).unwrap();
    let b = update_q_t(&obs, 0, &params, &state.q_theta, &mc, true).unwrap();
    assert!(tv(&a, &b) > 1e-6);
    assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
