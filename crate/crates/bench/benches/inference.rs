use std::hint::black_box;

use backsense::distributions::{poibin_pmf, poibin_pmf_dft};
use backsense::em_uniform::e_step;
use backsense::gem_hetero::{e_step_hetero, m_step_theta_gem, ThetaObjective};
use backsense::simulator::{encode_and_transmit, sample_field};
use backsense::vi_noisy::variational_e_step;
use backsense::{
    ChannelConfig, Criterion as Crit, GemConfig, HeteroParams, NoisyParams, ObservationSet, SensingPrior,
    UniformParams, VariationalState, ViConfig,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn observations(sensors: usize, delta2: f64) -> (SensingPrior, ObservationSet) {
    let prior = SensingPrior::homogeneous(sensors, 25.0, 1.0, 0.5).unwrap();
    let field = sample_field(&prior, delta2, 100, 1).unwrap();
    let cfg = ChannelConfig::new(4, sensors, 100, 1.0, 1.0, 10.0).unwrap();
    (prior.clone(), encode_and_transmit(&field, &cfg, 1).unwrap())
}

fn poisson_binomial(c: &mut Criterion) {
    let mut group = c.benchmark_group("poibin");
    for n in [4, 16, 64] {
        let theta: Vec<f64> = (0..n).map(|j| (j as f64 + 0.5) / n as f64).collect();
        group.bench_with_input(BenchmarkId::new("recursion", n), &theta, |b, t| b.iter(|| poibin_pmf(black_box(t))));
        group.bench_with_input(BenchmarkId::new("dft", n), &theta, |b, t| b.iter(|| poibin_pmf_dft(black_box(t))));
    }
    group.finish();
}

fn e_steps(c: &mut Criterion) {
    let (_, obs) = observations(4, 0.0);
    let uniform = UniformParams::new(0.5, 1.0, 1.0).unwrap();
    let hetero = HeteroParams::new(vec![0.3, 0.4, 0.6, 0.7], 1.0, 1.0).unwrap();
    c.bench_function("e_step_uniform", |b| b.iter(|| e_step(black_box(&obs), &uniform).unwrap()));
    c.bench_function("e_step_hetero", |b| b.iter(|| e_step_hetero(black_box(&obs), &hetero).unwrap()));
}

fn gem_m_step(c: &mut Criterion) {
    let (prior, obs) = observations(4, 0.0);
    let params = HeteroParams::new(vec![0.3, 0.4, 0.6, 0.7], 1.0, 1.0).unwrap();
    let (q, _) = e_step_hetero(&obs, &params).unwrap();
    let obj = ThetaObjective::new(q.column_sums(), Crit::Map, &prior).unwrap();
    let cfg = GemConfig::default();
    c.bench_function("gem_m_step_map", |b| b.iter(|| m_step_theta_gem(&obj, black_box(&params.theta), &cfg)));
}

fn vi_e_step(c: &mut Criterion) {
    let (prior, obs) = observations(4, 1.0);
    let params = NoisyParams::initial(&obs, &prior);
    let cfg = ViConfig::default();
    let mut group = c.benchmark_group("vi");
    group.sample_size(10);
    group.bench_function("variational_e_step_n4", |b| {
        b.iter_batched(
            || VariationalState::initial(&obs, &prior, &params, cfg.grid_nodes).unwrap(),
            |mut state| variational_e_step(&obs, &prior, &params, &mut state, &cfg, 0).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, poisson_binomial, e_steps, gem_m_step, vi_e_step);
criterion_main!(benches);
