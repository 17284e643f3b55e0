//! With the exact null-graph sampler in place of a trained model, replicate
//! p-values must be super-uniform.

use cedm_core::diffusion::{AnalyticScores, DiffusionSchedule};
use cedm_core::inference::{cedmi_statistics, monte_carlo_p, EdgeHypothesis};
use cedm_core::rng::StreamKey;
use cedm_core::sampler::OracleModel;
use cedm_core::scm::{build_benchmark, Benchmark, BenchmarkParams, Nonlinearity};

/// One-sided KS distance sup_u (F_n(u) − u).
fn excess_over_uniform(p: &mut [f64]) -> f64 {
    p.sort_by(f64::total_cmp);
    let n = p.len() as f64;
    p.iter().enumerate().map(|(i, &u)| (i + 1) as f64 / n - u).fold(0.0, f64::max)
}

fn null_p_values(bench: Benchmark, hyp: EdgeHypothesis) -> Vec<f64> {
    let params = BenchmarkParams { nonlinearity: Nonlinearity::Linear, slate_dim: Some(1), seed: 2, ..Default::default() };
    let spec = build_benchmark(bench, &params).unwrap();
    let working = spec.dag().add_edges(&hyp.edges()).unwrap();
    let oracle = OracleModel::raw(AnalyticScores::new(spec.clone()).unwrap(), DiffusionSchedule { n_steps: 100, ..Default::default() });
    (0..100u64)
        .map(|rep| {
            let infer = spec.sample_observational(200, 10_000 + rep).unwrap();
            let (obs, nulls, _) = cedmi_statistics(&infer, &working, &hyp, &oracle, 49, StreamKey::new(rep)).unwrap();
            monte_carlo_p(obs, &nulls)
        })
        .collect()
}

#[test]
fn chain_null_is_super_uniform() {
    let mut p = null_p_values(Benchmark::Chain3, EdgeHypothesis::single(0, 2));
    let crit = (-(0.01f64).ln() / (2.0 * p.len() as f64)).sqrt();
    let d = excess_over_uniform(&mut p);
    assert!(d <= crit, "D+ = {d} > {crit}");
}

#[test]
fn fork_null_is_super_uniform() {
    let mut p = null_p_values(Benchmark::Fork, EdgeHypothesis::single(1, 2));
    let crit = (-(0.01f64).ln() / (2.0 * p.len() as f64)).sqrt();
    let d = excess_over_uniform(&mut p);
    assert!(d <= crit, "D+ = {d} > {crit}");
}
