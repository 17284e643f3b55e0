use ndarray::{Array2, ArrayView2};

use super::{alpha_sigma, net_input, ConditionalScore, DiffusionError, DiffusionSchedule, ModelError, Weighting};
use crate::nn::MlpParams;
use crate::rng::StreamKey;
use crate::scm::{ScmError, ScmSpec};

/// Denoising loss `mean_i w(t_i) ‖ε̂(α x_i + σ ε_i, pa_i, t_i) − ε_i‖²` of one
/// node's noise network, with its gradient. `eps` holds the caller's draws.
pub fn dsm_minibatch_loss(
    net: &MlpParams,
    x: ArrayView2<f64>,
    pa: ArrayView2<f64>,
    t: &[f64],
    eps: ArrayView2<f64>,
    weighting: Weighting,
    schedule: &DiffusionSchedule,
) -> Result<(f64, MlpParams), ModelError> {
    if t.len() != x.nrows() || eps.dim() != x.dim() || pa.nrows() != x.nrows() {
        return Err(ModelError::DataShape("batch, time and noise shapes disagree".into()));
    }
    if let Some(&bad) = t.iter().find(|&&t| !(schedule.t0..=schedule.t_end).contains(&t)) {
        return Err(DiffusionError::Range { t: bad, t_end: schedule.t_end }.into());
    }
    let mut noisy = Array2::zeros(x.dim());
    for i in 0..x.nrows() {
        let (a, s) = alpha_sigma(t[i]);
        for k in 0..x.ncols() {
            noisy[[i, k]] = a * x[[i, k]] + s * eps[[i, k]];
        }
    }
    let input = net_input(noisy.view(), pa, t);
    let weights: Vec<f64> = t.iter().map(|&t| weighting.weight(t)).collect();
    let rw = (weighting != Weighting::Unweighted).then_some(weights.as_slice());
    Ok(net.loss_and_grad(input.view(), eps, rw)?)
}

/// Paired per-draw Monte Carlo terms of the integrated score-matching risk R
/// and the denoising loss L (with w = 1/σ²), summed over nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskEstimate {
    pub r: Vec<f64>,
    pub l: Vec<f64>,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

impl RiskEstimate {
    /// Estimate and standard error of R.
    pub fn risk(&self) -> (f64, f64) {
        mean_se(&self.r)
    }

    /// Estimate and standard error of L.
    pub fn loss(&self) -> (f64, f64) {
        mean_se(&self.l)
    }

    /// Estimate and standard error of R − L.
    pub fn gap(&self) -> (f64, f64) {
        let d: Vec<f64> = self.r.iter().zip(&self.l).map(|(r, l)| r - l).collect();
        mean_se(&d)
    }

    /// Difference of two gaps computed on common draws, with its standard
    /// error from the paired differences.
    pub fn gap_difference(&self, other: &RiskEstimate) -> (f64, f64) {
        let d: Vec<f64> = (0..self.r.len())
            .map(|i| (self.r[i] - self.l[i]) - (other.r[i] - other.l[i]))
            .collect();
        mean_se(&d)
    }
}

/// Monte Carlo estimate of R(s) = Σ_j E ‖s_j(X'_j, X_pa, t) − ∇ log p_t(X'_j | X_pa)‖²
/// with t ~ U[t0, T] drawn independently per node, next to the matching
/// denoising loss on the same draws. Scores live in the SCM's coordinates.
pub fn estimate_population_risk<S: ConditionalScore + ?Sized>(
    score: &S,
    spec: &ScmSpec,
    schedule: &DiffusionSchedule,
    n_mc: usize,
    key: StreamKey,
) -> Result<RiskEstimate, ScmError> {
    if !spec.is_linear_gaussian() {
        let j = (0..spec.dag().num_nodes()).find(|&j| !spec.mechanism(j).is_linear()).unwrap();
        return Err(ScmError::NotLinearGaussian(j));
    }
    if n_mc < 2 {
        return Err(ScmError::Dimension("need at least 2 Monte Carlo draws".into()));
    }
    let dag = spec.dag();
    let data = spec.sample_observational_keyed(n_mc, key.substream("data", 0))?;
    let mut r = vec![0.0; n_mc];
    let mut l = vec![0.0; n_mc];
    for j in 0..dag.num_nodes() {
        let d = dag.dim(j);
        let xj = data.block(j);
        let pa_all = data.blocks(dag.parents(j));
        let mut s = key.substream("node", j as u64).stream();
        for i in 0..n_mc {
            let t = s.uniform_range(schedule.t0, schedule.t_end);
            let eps = s.gaussian(d);
            let (a, sg) = alpha_sigma(t);
            let xp: Vec<f64> = (0..d).map(|k| a * xj[[i, k]] + sg * eps[k]).collect();
            let xv = ArrayView2::from_shape((1, d), &xp).expect("row");
            let pv = pa_all.slice(ndarray::s![i..i + 1, ..]);
            let est = score.score(j, xv, pv, t);
            let truth = spec.analytic_score_batch(j, xv, pv, t)?;
            for k in 0..d {
                let e = est[[0, k]];
                r[i] += (e - truth[[0, k]]).powi(2);
                l[i] += (e + eps[k] / sg).powi(2);
            }
        }
    }
    Ok(RiskEstimate { r, l })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{AffineScore, AnalyticScores, ZeroScore};
    use crate::scm::{build_benchmark, Benchmark, BenchmarkParams, Nonlinearity};
    use ndarray::array;

    fn spec() -> ScmSpec {
        let p = BenchmarkParams { nonlinearity: Nonlinearity::Linear, slate_dim: Some(2), seed: 3, ..Default::default() };
        build_benchmark(Benchmark::Chain3, &p).unwrap()
    }

    #[test]
    fn analytic_score_has_zero_risk() {
        let sp = spec();
        let a = AnalyticScores::new(sp.clone()).unwrap();
        let est = estimate_population_risk(&a, &sp, &DiffusionSchedule::default(), 2000, StreamKey::new(1)).unwrap();
        let (r, _) = est.risk();
        assert!(r.abs() < 1e-20, "{r}");
    }

    #[test]
    fn zero_score_risk_is_mean_true_score_norm() {
        let sp = spec();
        let sched = DiffusionSchedule::default();
        let est = estimate_population_risk(&ZeroScore, &sp, &sched, 500, StreamKey::new(2)).unwrap();
        let a = AnalyticScores::new(sp.clone()).unwrap();
        let shifted = AffineScore { inner: &a, scale: 0.0, shift: 0.0 };
        let same = estimate_population_risk(&shifted, &sp, &sched, 500, StreamKey::new(2)).unwrap();
        assert_eq!(est, same);
        assert!(est.risk().0 > 0.0);
    }

    #[test]
    fn teacher_forced_loss_is_zero() {
        let net = MlpParams::from_layers(vec![Array2::zeros((1, 4))], vec![array![0.0]]).unwrap();
        // A zero network predicts ε̂ = 0, so the loss is the mean of ε².
        let x = array![[0.3], [1.2]];
        let pa = Array2::zeros((2, 0));
        let eps = array![[0.0], [0.0]];
        let (loss, _) =
            dsm_minibatch_loss(&net, x.view(), pa.view(), &[0.5, 1.0], eps.view(), Weighting::Unweighted, &DiffusionSchedule::default())
                .unwrap();
        assert_eq!(loss, 0.0);
        let dup = array![[0.3], [0.3]];
        let e2 = array![[0.7], [0.7]];
        let (l1, _) = dsm_minibatch_loss(&net, dup.slice(ndarray::s![..1, ..]), Array2::zeros((1, 0)).view(), &[0.5], e2.slice(ndarray::s![..1, ..]), Weighting::Unweighted, &DiffusionSchedule::default()).unwrap();
        let (l2, _) = dsm_minibatch_loss(&net, dup.view(), pa.view(), &[0.5, 0.5], e2.view(), Weighting::Unweighted, &DiffusionSchedule::default()).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn time_outside_schedule_rejected() {
        let net = MlpParams::from_layers(vec![Array2::zeros((1, 4))], vec![array![0.0]]).unwrap();
        let x = array![[0.3]];
        let err = dsm_minibatch_loss(&net, x.view(), Array2::zeros((1, 0)).view(), &[6.0], x.view(), Weighting::InverseVariance, &DiffusionSchedule::default())
            .unwrap_err();
        assert!(matches!(err, ModelError::Schedule(DiffusionError::Range { .. })));
    }

    #[test]
    fn oracle_loss_is_positive() {
        let sp = spec();
        let a = AnalyticScores::new(sp.clone()).unwrap();
        let est = estimate_population_risk(&a, &sp, &DiffusionSchedule::default(), 2000, StreamKey::new(4)).unwrap();
        assert!(est.loss().0 > 0.0);
    }

    #[test]
    fn gap_does_not_depend_on_score() {
        let sp = spec();
        let sched = DiffusionSchedule::default();
        let a = AnalyticScores::new(sp.clone()).unwrap();
        let key = StreamKey::new(9);
        let e0 = estimate_population_risk(&a, &sp, &sched, 20_000, key).unwrap();
        let e1 = estimate_population_risk(&ZeroScore, &sp, &sched, 20_000, key).unwrap();
        let bent = AffineScore { inner: &a, scale: 0.5, shift: 0.3 };
        let e2 = estimate_population_risk(&bent, &sp, &sched, 20_000, key).unwrap();
        for other in [&e1, &e2] {
            let (d, se) = e0.gap_difference(other);
            assert!(d.abs() <= 3.0 * se, "{d} ± {se}");
        }
    }

    #[test]
    fn nonlinear_spec_rejected() {
        let sp = build_benchmark(Benchmark::Chain3, &BenchmarkParams { slate_dim: Some(2), ..Default::default() }).unwrap();
        assert!(matches!(
            estimate_population_risk(&ZeroScore, &sp, &DiffusionSchedule::default(), 10, StreamKey::new(0)),
            Err(ScmError::NotLinearGaussian(_))
        ));
    }
}
