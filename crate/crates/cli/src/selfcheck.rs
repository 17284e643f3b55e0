//! Fast invariant suite behind `cedm selfcheck`.

use cedm_core::codec::codec_scalar;
use cedm_core::diffusion::{AnalyticScores, DiffusionSchedule};
use cedm_core::inference::{benjamini_hochberg, holm, monte_carlo_p};
use cedm_core::metrics::squared_mmd;
use cedm_core::nn::{finite_diff_check, MlpParams};
use cedm_core::rng::StreamKey;
use cedm_core::sampler::{estimate_do_expectation, OracleModel};
use cedm_core::scm::{build_benchmark, Benchmark, BenchmarkParams, Intervention, Nonlinearity};
use ndarray::Array2;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn gradients() -> Check {
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let key = StreamKey::new(i).substream("selfcheck-grad", 0);
        let mut s = key.stream();
        let dims = [3 + (i as usize % 3), 6, 5, 2];
        let mut net = MlpParams::init(&dims, key.substream("init", 0)).expect("valid dims");
        for b in net.blocks_mut().into_iter().skip(1).step_by(2) {
            for v in b.iter_mut() {
                *v = 0.1 * s.standard_normal();
            }
        }
        let x = s.gaussian_matrix(7, dims[0]);
        let y = s.gaussian_matrix(7, 2);
        match finite_diff_check(&net, x.view(), y.view(), 1e-6, 30, key.substream("coords", 0)) {
            Ok(e) => worst = worst.max(e),
            Err(e) => return check("gradient", false, e.to_string()),
        }
    }
    check("gradient", worst <= 1e-4, format!("max relative error {worst:.2e}"))
}

fn codec_hand_case() -> Check {
    let y = [10.0, 20.0, 30.0];
    let x = Array2::from_shape_vec((3, 1), vec![1.0, 2.0, 3.0]).unwrap();
    let v = codec_scalar(&y, x.view(), Array2::zeros((3, 0)).view(), StreamKey::new(0));
    let ok = matches!(v, Ok(v) if v == -0.5 || v == 0.0);
    check("codec n=3", ok, format!("{v:?}"))
}

fn corrections() -> Check {
    let p = [0.01, 0.04, 0.30];
    let ok = holm(&p) == [0.03, 0.08, 0.30] && benjamini_hochberg(&p) == [0.03, 0.06, 0.30];
    let nulls = vec![0.0; 100];
    let ok = ok && monte_carlo_p(1.0, &nulls) == 1.0 / 101.0;
    check("p-values and corrections", ok, String::new())
}

fn mmd_identity() -> Check {
    let a = StreamKey::new(3).stream().gaussian_matrix(100, 2);
    let r = squared_mmd(a.view(), a.view(), 1.0).map(|r| r.statistic);
    check("mmd identical sets", matches!(r, Ok(s) if s <= 1e-12), format!("{r:?}"))
}

fn oracle_do_means() -> Check {
    let p = BenchmarkParams { nonlinearity: Nonlinearity::Linear, slate_dim: Some(1), seed: 1, ..Default::default() };
    let spec = match build_benchmark(Benchmark::Chain3, &p) {
        Ok(s) => s,
        Err(e) => return check("oracle do-sampling", false, e.to_string()),
    };
    let oracle = OracleModel::raw(AnalyticScores::new(spec.clone()).expect("linear"), DiffusionSchedule::default());
    let iv = Intervention::new(spec.dag(), vec![1], vec![vec![1.0]]).expect("valid");
    let (m, se) = match estimate_do_expectation(&oracle, &iv, 4000, 5) {
        Ok(v) => v,
        Err(e) => return check("oracle do-sampling", false, e.to_string()),
    };
    let truth = spec.sample_interventional(&iv, 40_000, 6).expect("oracle");
    let (tm, tse) = cedm_core::sampler::column_mean_se(truth.values());
    let ok = (0..3).all(|c| (m[c] - tm[c]).abs() <= 4.0 * (se[c].powi(2) + tse[c].powi(2)).sqrt() + 1e-12);
    check("oracle do-sampling", ok, format!("means {m:?} vs {tm:?}"))
}

pub fn run() -> Vec<Check> {
    vec![gradients(), codec_hand_case(), corrections(), mmd_identity(), oracle_do_means()]
}
