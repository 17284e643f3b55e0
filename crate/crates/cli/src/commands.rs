//! Subcommand implementations. Each writes its outputs under `out_dir` and
//! returns a summary for the caller to print.

use std::path::{Path, PathBuf};

use cedm_core::dag::Dag;
use cedm_core::diffusion::{CedmModel, NormStats};
use cedm_core::inference::{cedmi_multi, permutation_reference, Correction, EdgeHypothesis, MultiReport, TestReport};
use cedm_core::metrics::{median_bandwidth, squared_mmd};
use cedm_core::rng::StreamKey;
use cedm_core::sampler::{sample_do, sample_joint};
use cedm_core::scm::{
    build_benchmark, default_intervention, sachs_super_dag, Benchmark, Dataset, DatasetMeta, Intervention, Provenance,
    SACHS_PROTEINS,
};
use ndarray::{concatenate, Axis};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, GraphFile};
use crate::error::CliError;
use crate::io::{fmt_float, read_dataset, read_matrix, save_archive, write_dataset, write_file, write_json, write_table};

/// Shared state for every subcommand.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
}

impl Context {
    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn key(&self, tag: &str, index: u64) -> StreamKey {
        StreamKey::new(self.seed()).substream(tag, index)
    }
}

fn describe(path: &Path) -> String {
    path.display().to_string()
}

pub fn simulate(ctx: &Context, interventional: bool) -> Result<Vec<String>, CliError> {
    let cfg = &ctx.config;
    let spec = cfg.scm()?;
    let obs = spec.sample_observational(cfg.graph.n, ctx.key("simulate", 0).derive_seed())?;
    let obs_path = ctx.out("observational.csv");
    write_dataset(&obs_path, &obs, "simulate", ctx.seed(), None)?;
    let graph_path = ctx.out("graph.toml");
    let gf = toml::to_string(&GraphFile::from_dag(spec.dag())).map_err(|e| CliError::Data(e.to_string()))?;
    write_file(&graph_path, gf.as_bytes())?;
    let mut lines = vec![
        format!("wrote {} ({} rows x {} columns)", describe(&obs_path), obs.n(), obs.values().ncols()),
        format!("wrote {}", describe(&graph_path)),
    ];
    if interventional {
        let iv = default_intervention(&spec, cfg.graph.benchmark, ctx.seed())?;
        let data = spec.sample_interventional(&iv, cfg.evaluation.reference_size, ctx.key("simulate", 1).derive_seed())?;
        let p = ctx.out("interventional.csv");
        write_dataset(&p, &data, "simulate", ctx.seed(), None)?;
        lines.push(format!("wrote {} ({} rows)", describe(&p), data.n()));
    }
    Ok(lines)
}

pub fn train(ctx: &Context, data_path: &Path) -> Result<(CedmModel, Vec<String>), CliError> {
    let cfg = &ctx.config;
    let dag = cfg.dag()?;
    let data = read_dataset(data_path, &dag)?;
    let model = CedmModel::train(&data, &dag, cfg.schedule, &cfg.train, ctx.seed())?;
    let archive = ctx.out("model.cedm");
    save_archive(&archive, &model)?;
    let mut rows = Vec::new();
    let mut lines = vec![format!("wrote {}", describe(&archive))];
    for (j, curve) in model.meta().loss_curves.iter().enumerate() {
        for (e, l) in curve.iter().enumerate() {
            rows.push(vec![dag.label(j).to_string(), e.to_string(), fmt_float(*l)]);
        }
        if let Some(last) = curve.last() {
            lines.push(format!("node {}: final loss {last:.6}", dag.label(j)));
        }
    }
    let curves = ctx.out("loss_curves.csv");
    write_table(&curves, &["node", "epoch", "loss"], &rows)?;
    lines.push(format!("wrote {}", describe(&curves)));
    Ok((model, lines))
}

/// Parses `label=v1,v2,...`; several assignments may be joined with ';'.
pub fn parse_do(dag: &Dag, specs: &[String]) -> Result<Intervention, CliError> {
    let mut targets = Vec::new();
    let mut values = Vec::new();
    for part in specs.iter().flat_map(|s| s.split(';')).map(str::trim).filter(|s| !s.is_empty()) {
        let (label, vals) =
            part.split_once('=').ok_or_else(|| CliError::Usage(format!("--do {part:?}: expected label=v1,v2,...")))?;
        let node = dag
            .index_of(label.trim())
            .map_err(|_| CliError::Usage(format!("--do: unknown node label {:?} (nodes: {})", label.trim(), dag.labels().join(", "))))?;
        let v = vals
            .split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("--do {part:?}: cannot parse {x:?}"))))
            .collect::<Result<Vec<f64>, _>>()?;
        if v.len() != dag.dim(node) {
            return Err(CliError::Usage(format!(
                "--do {part:?}: node {} has dimension {}, got {} values",
                dag.label(node),
                dag.dim(node),
                v.len()
            )));
        }
        targets.push(node);
        values.push(v);
    }
    Ok(Intervention::new(dag, targets, values)?)
}

pub fn sample(ctx: &Context, model: &CedmModel, n: usize, do_specs: &[String]) -> Result<Vec<String>, CliError> {
    let iv = parse_do(model.dag(), do_specs)?;
    let seed = ctx.seed();
    let data = if iv.is_empty() { sample_joint(model, n, seed)? } else { sample_do(model, &iv, n, seed)? };
    let p = ctx.out("samples.csv");
    write_dataset(&p, &data, "sample", seed, Some(model.fingerprint()))?;
    Ok(vec![format!("wrote {} ({} rows)", describe(&p), data.n())])
}

/// Parses `A->B`, `A→B` or `(A,B)->C` against the graph's labels.
pub fn parse_edge(dag: &Dag, text: &str) -> Result<EdgeHypothesis, CliError> {
    let norm = text.replace('→', "->");
    let (lhs, rhs) = norm.split_once("->").ok_or_else(|| CliError::Usage(format!("--edge {text:?}: expected FROM->TO")))?;
    let lookup = |l: &str| {
        dag.index_of(l.trim())
            .map_err(|_| CliError::Usage(format!("--edge {text:?}: unknown node label {:?} (nodes: {})", l.trim(), dag.labels().join(", "))))
    };
    let lhs = lhs.trim();
    let inner = lhs.strip_prefix('(').and_then(|s| s.strip_suffix(')')).unwrap_or(lhs);
    let parents = inner.split(',').map(lookup).collect::<Result<Vec<_>, _>>()?;
    let child = lookup(rhs)?;
    if parents.contains(&child) {
        return Err(CliError::Usage(format!("--edge {text:?}: self-loop")));
    }
    Ok(EdgeHypothesis { parents, child })
}

/// Working graph E' ∪ H.
fn working_graph(dag: &Dag, hyps: &[EdgeHypothesis]) -> Result<Dag, CliError> {
    let extra: Vec<(usize, usize)> =
        hyps.iter().flat_map(|h| h.edges()).filter(|&(a, b)| !dag.has_edge(a, b)).collect();
    Ok(dag.add_edges(&extra)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTestRun {
    pub replicate: usize,
    pub result: MultiReport,
}

pub const REPORT_HEADER: [&str; 12] =
    ["replicate", "hypothesis", "observed", "p_value", "adjusted_p", "diagnostic_mmd_p", "n1", "n2", "m_mc", "seed", "correction", "reject"];

fn report_rows(runs: &[EdgeTestRun], alpha: f64) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let mut rows = Vec::new();
    let mut nulls = Vec::new();
    for run in runs {
        for (r, adj) in run.result.reports.iter().zip(&run.result.adjusted) {
            rows.push(vec![
                run.replicate.to_string(),
                r.hypothesis.clone(),
                fmt_float(r.observed),
                fmt_float(r.p_value),
                fmt_float(*adj),
                r.diagnostic_mmd_p.map(fmt_float).unwrap_or_default(),
                r.n1.to_string(),
                r.n2.to_string(),
                r.m_mc.to_string(),
                r.seed.to_string(),
                run.result.correction.to_string(),
                (*adj <= alpha).to_string(),
            ]);
            for (m, s) in r.null_stats.iter().enumerate() {
                nulls.push(vec![run.replicate.to_string(), r.hypothesis.clone(), m.to_string(), fmt_float(*s)]);
            }
        }
    }
    (rows, nulls)
}

/// Runs the edge tests on `data` (or, with `replicates > 0`, on that many
/// freshly simulated datasets of n1 + n2 rows) and writes the report and
/// null-statistic dump.
pub fn test_edge(
    ctx: &Context,
    data_path: Option<&Path>,
    edges: &[String],
    correction: Option<Correction>,
    replicates: usize,
) -> Result<(Vec<EdgeTestRun>, Vec<String>), CliError> {
    let cfg = &ctx.config;
    if edges.is_empty() {
        return Err(CliError::Usage("at least one --edge is required".into()));
    }
    let base = cfg.dag()?;
    let hyps = edges.iter().map(|e| parse_edge(&base, e)).collect::<Result<Vec<_>, _>>()?;
    let working = working_graph(&base, &hyps)?;
    let correction = correction.unwrap_or(cfg.inference.correction);
    let cedmi = cfg.cedmi();
    let runs: Vec<EdgeTestRun> = match (data_path, replicates) {
        (Some(p), 0) => {
            let data = read_dataset(p, &base)?;
            vec![EdgeTestRun { replicate: 0, result: cedmi_multi(&data, &working, &hyps, correction, &cedmi, ctx.seed())? }]
        }
        (Some(_), _) => return Err(CliError::Usage("--replicates simulates its own data; drop --data".into())),
        (None, 0) => return Err(CliError::Usage("give --data or --replicates".into())),
        (None, r) => {
            let spec = cfg.scm()?;
            if spec.dag().layout() != base.layout() {
                return Err(CliError::Usage("--replicates needs the benchmark graph, not a graph file".into()));
            }
            let n = cfg.inference.n1 + cfg.inference.n2;
            (0..r)
                .map(|rep| {
                    let data = spec.sample_observational(n, ctx.key("replicate-data", rep as u64).derive_seed())?;
                    let seed = ctx.key("replicate-test", rep as u64).derive_seed();
                    Ok(EdgeTestRun { replicate: rep, result: cedmi_multi(&data, &working, &hyps, correction, &cedmi, seed)? })
                })
                .collect::<Result<_, CliError>>()?
        }
    };
    let (rows, nulls) = report_rows(&runs, cfg.inference.alpha);
    let report = ctx.out("test_report.csv");
    let dump = ctx.out("null_stats.csv");
    write_table(&report, &REPORT_HEADER, &rows)?;
    write_table(&dump, &["replicate", "hypothesis", "m", "statistic"], &nulls)?;
    let mut lines = Vec::new();
    for (h, hyp) in hyps.iter().enumerate() {
        let label = hyp.describe(&working);
        let ps: Vec<f64> = runs.iter().map(|r| r.result.adjusted[h]).collect();
        if ps.len() == 1 {
            lines.push(format!("{label}: p = {:.4} ({correction})", ps[0]));
        } else {
            let rate = ps.iter().filter(|&&p| p <= cfg.inference.alpha).count() as f64 / ps.len() as f64;
            lines.push(format!("{label}: rejection rate {rate:.3} at alpha {} over {} replicates", cfg.inference.alpha, ps.len()));
        }
    }
    lines.push(format!("wrote {} and {}", describe(&report), describe(&dump)));
    Ok((runs, lines))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub graph: Benchmark,
    pub n: usize,
    pub repetition: usize,
    pub mmd: Option<f64>,
    pub bandwidth: Option<f64>,
    pub seed: u64,
    pub status: String,
}

fn benchmark_job(ctx: &Context, graph: Benchmark, n: usize, seed: u64) -> Result<(f64, f64), CliError> {
    let cfg = &ctx.config;
    let spec = build_benchmark(graph, &cfg.graph.params)?;
    let key = StreamKey::new(seed);
    let data = spec.sample_observational(n, key.substream("data", 0).derive_seed())?;
    let model = CedmModel::train(&data, spec.dag(), cfg.schedule, &cfg.train, key.substream("train", 0).derive_seed())?;
    let iv = default_intervention(&spec, graph, cfg.seed)?;
    let m = cfg.evaluation.reference_size;
    let synth = sample_do(&model, &iv, m, key.substream("sample", 0).derive_seed())?;
    let reference = spec.sample_interventional(&iv, m, key.substream("reference", 0).derive_seed())?;
    let pooled = concatenate![Axis(0), synth.values(), reference.values()];
    let h = median_bandwidth(pooled.view())?;
    let r = squared_mmd(synth.values(), reference.values(), h)?;
    Ok((r.statistic, h))
}

/// Distribution-recovery study: simulate, train, do-sample and compare with
/// a fresh oracle interventional sample, for every (graph, n, repetition).
pub fn benchmark(ctx: &Context) -> Result<(Vec<BenchmarkRow>, Vec<String>), CliError> {
    let ev = &ctx.config.evaluation;
    let mut jobs = Vec::new();
    for &g in &ev.graphs {
        for &n in &ev.sizes {
            for rep in 0..ev.reps {
                let seed = StreamKey::new(ctx.seed())
                    .substream(&g.to_string(), 0)
                    .substream("n", n as u64)
                    .substream("rep", rep as u64)
                    .derive_seed();
                jobs.push((g, n, rep, seed));
            }
        }
    }
    let mut rows: Vec<BenchmarkRow> = jobs
        .par_iter()
        .map(|&(graph, n, repetition, seed)| {
            let (mmd, bandwidth, status) = match benchmark_job(ctx, graph, n, seed) {
                Ok((m, h)) => (Some(m), Some(h), "ok".to_string()),
                Err(e) => (None, None, format!("error: {e}")),
            };
            BenchmarkRow { graph, n, repetition, mmd, bandwidth, seed, status }
        })
        .collect();
    rows.sort_by_key(|r| (r.graph.to_string(), r.n, r.repetition));
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.graph.to_string(),
                "cedm".into(),
                r.n.to_string(),
                r.repetition.to_string(),
                r.mmd.map(fmt_float).unwrap_or_default(),
                r.bandwidth.map(fmt_float).unwrap_or_default(),
                r.seed.to_string(),
                r.status.clone(),
            ]
        })
        .collect();
    let p = ctx.out("benchmark.csv");
    write_table(&p, &["graph", "method", "n", "repetition", "mmd", "bandwidth", "seed", "status"], &table)?;
    let mut lines = Vec::new();
    for &g in &ev.graphs {
        for &n in &ev.sizes {
            let mut v: Vec<f64> = rows.iter().filter(|r| r.graph == g && r.n == n).filter_map(|r| r.mmd).collect();
            if !v.is_empty() {
                lines.push(format!("{g} n={n}: median squared MMD {:.5} over {} runs", median(&mut v), v.len()));
            }
        }
    }
    let failed = rows.iter().filter(|r| r.mmd.is_none()).count();
    if failed > 0 {
        lines.push(format!("{failed} repetitions failed; see the status column"));
    }
    lines.push(format!("wrote {}", describe(&p)));
    Ok((rows, lines))
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// The four contested linkages of the protein network.
pub const DISPUTED_LINKAGES: [&str; 4] = ["(PIP2,PLCg)->PKC", "PKC->PKA", "PIP3->Akt", "Erk->Akt"];

/// Linkages whose child has no other parent, so a permutation reference
/// test is available.
pub const PERMUTATION_LINKAGES: [&str; 2] = ["(PIP2,PLCg)->PKC", "PKC->PKA"];

/// Reads the protein table (any column order, extra columns ignored) and
/// standardises every column.
pub fn load_cytometry(path: &Path) -> Result<Dataset, CliError> {
    let (header, values) = read_matrix(path)?;
    let missing: Vec<&str> = SACHS_PROTEINS.iter().copied().filter(|p| !header.iter().any(|h| h == p)).collect();
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "{}: missing protein columns [{}]; expected all of [{}]",
            path.display(),
            missing.join(","),
            SACHS_PROTEINS.join(",")
        )));
    }
    let cols: Vec<usize> = SACHS_PROTEINS.iter().map(|p| header.iter().position(|h| h == p).expect("checked")).collect();
    let raw = values.select(Axis(1), &cols);
    let z = NormStats::fit(raw.view()).standardize(raw.view());
    let dag = sachs_super_dag();
    Ok(Dataset::new(z, dag.layout().clone(), DatasetMeta { seed: None, provenance: Provenance::External })?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CytometryResult {
    pub cedmi: MultiReport,
    pub permutation: Vec<TestReport>,
}

pub fn cytometry_tests(ctx: &Context, data: &Dataset, m_mc: usize, n1: usize) -> Result<CytometryResult, CliError> {
    let dag = sachs_super_dag();
    let hyps = DISPUTED_LINKAGES.iter().map(|e| parse_edge(&dag, e)).collect::<Result<Vec<_>, _>>()?;
    let mut cfg = ctx.config.cedmi();
    cfg.m_mc = m_mc;
    cfg.n1 = n1;
    let cedmi = cedmi_multi(data, &dag, &hyps, Correction::None, &cfg, ctx.seed())?;
    let permutation = PERMUTATION_LINKAGES
        .iter()
        .map(|e| Ok(permutation_reference(data, &dag, &parse_edge(&dag, e)?, m_mc, ctx.seed())?))
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(CytometryResult { cedmi, permutation })
}

/// Default training share for the cytometry split.
pub fn default_cytometry_n1(n: usize) -> usize {
    (n * 3 / 5).clamp(1, n.saturating_sub(1).max(1))
}

pub fn cytometry(
    ctx: &Context,
    path: &Path,
    m_mc: usize,
    n1: Option<usize>,
    subsample: Option<(usize, usize)>,
) -> Result<Vec<String>, CliError> {
    let full = load_cytometry(path)?;
    let alpha = ctx.config.inference.alpha;
    let mut lines = Vec::new();
    match subsample {
        None => {
            let n1 = n1.unwrap_or_else(|| default_cytometry_n1(full.n()));
            let res = cytometry_tests(ctx, &full, m_mc, n1)?;
            let mut rows = Vec::new();
            for r in &res.cedmi.reports {
                rows.push(cyto_row("cedmi", r, alpha));
                lines.push(format!("CEDMI {}: p = {:.4} -> {}", r.hypothesis, r.p_value, verdict(r.p_value, alpha)));
            }
            for r in &res.permutation {
                rows.push(cyto_row("permutation", r, alpha));
                lines.push(format!("permutation {}: p = {:.4} -> {}", r.hypothesis, r.p_value, verdict(r.p_value, alpha)));
            }
            let p = ctx.out("cytometry_report.csv");
            write_table(&p, &["method", "hypothesis", "observed", "p_value", "n1", "n2", "m_mc", "seed", "reject"], &rows)?;
            lines.push(format!("wrote {}", describe(&p)));
        }
        Some((n, reps)) => {
            if n < 10 || n > full.n() {
                return Err(CliError::Usage(format!("--subsample {n}: must lie in [10, {}]", full.n())));
            }
            let mut counts = [0usize; 4];
            let mut rows = Vec::new();
            for rep in 0..reps {
                let perm = ctx.key("subsample", rep as u64).stream().permutation(full.n());
                let mut idx = perm[..n].to_vec();
                idx.sort_unstable();
                let sub = full.select_rows(&idx);
                let sub_ctx = Context { config: ExperimentConfig { seed: ctx.key("subsample-test", rep as u64).derive_seed(), ..ctx.config.clone() }, out_dir: ctx.out_dir.clone() };
                let res = cytometry_tests(&sub_ctx, &sub, m_mc, n1.unwrap_or_else(|| default_cytometry_n1(n)))?;
                for (h, r) in res.cedmi.reports.iter().enumerate() {
                    if r.p_value <= alpha {
                        counts[h] += 1;
                    }
                    let mut row = cyto_row("cedmi", r, alpha);
                    row.insert(0, rep.to_string());
                    rows.push(row);
                }
            }
            for (h, e) in DISPUTED_LINKAGES.iter().enumerate() {
                lines.push(format!("{e}: rejection rate {:.3} over {reps} subsamples of {n}", counts[h] as f64 / reps.max(1) as f64));
            }
            let p = ctx.out("cytometry_stability.csv");
            write_table(&p, &["subsample", "method", "hypothesis", "observed", "p_value", "n1", "n2", "m_mc", "seed", "reject"], &rows)?;
            lines.push(format!("wrote {}", describe(&p)));
        }
    }
    Ok(lines)
}

fn verdict(p: f64, alpha: f64) -> &'static str {
    if p <= alpha {
        "reject"
    } else {
        "do not reject"
    }
}

fn cyto_row(method: &str, r: &TestReport, alpha: f64) -> Vec<String> {
    vec![
        method.into(),
        r.hypothesis.clone(),
        fmt_float(r.observed),
        fmt_float(r.p_value),
        r.n1.to_string(),
        r.n2.to_string(),
        r.m_mc.to_string(),
        r.seed.to_string(),
        (r.p_value <= alpha).to_string(),
    ]
}

/// Writes the effective configuration next to the outputs.
pub fn write_config(ctx: &Context) -> Result<(), CliError> {
    write_file(&ctx.out("config.toml"), ctx.config.emit().as_bytes())
}

pub fn write_summary<T: serde::Serialize>(ctx: &Context, name: &str, value: &T) -> Result<(), CliError> {
    write_json(&ctx.out(name), value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_syntax() {
        let dag = sachs_super_dag();
        let h = parse_edge(&dag, "(PIP2, PLCg)->PKC").unwrap();
        assert_eq!(h.child, dag.index_of("PKC").unwrap());
        assert_eq!(h.parents.len(), 2);
        assert_eq!(parse_edge(&dag, "Erk→Akt").unwrap(), parse_edge(&dag, "Erk -> Akt").unwrap());
        let err = parse_edge(&dag, "Erk->Foo").unwrap_err();
        assert!(err.to_string().contains("\"Foo\""), "{err}");
        assert_eq!(err.exit_code(), 2);
        assert!(parse_edge(&dag, "Erk").is_err());
    }

    #[test]
    fn do_syntax() {
        let dag = Dag::with_labels(vec![1, 2], vec!["A".into(), "B".into()], [(0, 1)]).unwrap();
        let iv = parse_do(&dag, &["B=1,2".into(), "A=0.5".into()]).unwrap();
        assert_eq!(iv.targets(), &[1, 0]);
        assert!(parse_do(&dag, &["B=1".into()]).unwrap_err().to_string().contains("dimension 2"));
        assert!(parse_do(&dag, &["C=1".into()]).is_err());
        assert!(parse_do(&dag, &[]).unwrap().is_empty());
        assert_eq!(parse_do(&dag, &["A=1;B=2,3".into()]).unwrap().targets().len(), 2);
    }

    #[test]
    fn working_graph_adds_missing_edges_only() {
        let dag = Dag::new(vec![1, 1, 1], [(0, 1), (1, 2)]).unwrap();
        let w = working_graph(&dag, &[EdgeHypothesis::single(0, 2), EdgeHypothesis::single(1, 2)]).unwrap();
        assert_eq!(w.num_edges(), 3);
    }

    #[test]
    fn cytometry_split_default() {
        assert_eq!(default_cytometry_n1(1755), 1053);
        assert_eq!(default_cytometry_n1(100), 60);
    }
}
