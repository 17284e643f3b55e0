use std::path::PathBuf;
use std::process::ExitCode;

use cedm_cli::commands::{self, Context};
use cedm_cli::config::ExperimentConfig;
use cedm_cli::error::CliError;
use cedm_cli::io::load_archive;
use cedm_cli::selfcheck;
use cedm_core::inference::Correction;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cedm", version, about = "Causality-encoded diffusion models: simulate, train, sample and test edges")]
struct Cli {
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for all outputs.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a benchmark dataset (plus an oracle interventional sample).
    Simulate {
        #[arg(long)]
        interventional: bool,
        /// Rows to draw (overrides graph.n).
        #[arg(short)]
        n: Option<usize>,
        /// Benchmark name (overrides graph.benchmark).
        #[arg(long)]
        benchmark: Option<String>,
    },
    /// Fit per-node score networks and write a model archive.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Sample from a trained model, optionally under do-interventions.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(short, default_value_t = 1000)]
        n: usize,
        /// `label=v1,v2,...`; repeat or separate with ';'.
        #[arg(long = "do")]
        interventions: Vec<String>,
    },
    /// Resampling test of one or more hypothesised edges.
    TestEdge {
        #[arg(long)]
        data: Option<PathBuf>,
        /// `FROM->TO` or `(A,B)->TO`; repeatable.
        #[arg(long = "edge", required = true)]
        edges: Vec<String>,
        #[arg(long)]
        correction: Option<String>,
        /// Simulate this many benchmark datasets instead of reading --data.
        #[arg(long, default_value_t = 0)]
        replicates: usize,
    },
    /// Distribution-recovery study over graphs, sample sizes and repetitions.
    Benchmark {
        /// Repetitions per (graph, n) (overrides evaluation.reps).
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Edge tests on the protein-signalling cytometry table.
    Cytometry {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 500)]
        m_mc: usize,
        /// Training rows (default: 60% of the rows).
        #[arg(long)]
        n1: Option<usize>,
        /// Stability mode: subsample size.
        #[arg(long)]
        subsample: Option<usize>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
    },
    /// Gradient, oracle and formula checks; nonzero exit on failure.
    Selfcheck,
}

fn run(cli: Cli) -> Result<Vec<String>, CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let mut ctx = Context { config, out_dir: cli.out_dir };
    match cli.command {
        Command::Simulate { interventional, n, benchmark } => {
            if let Some(n) = n {
                ctx.config.graph.n = n;
            }
            if let Some(b) = benchmark {
                ctx.config.graph.benchmark = b.parse().map_err(|e: cedm_core::scm::ScmError| CliError::Usage(e.to_string()))?;
            }
            commands::write_config(&ctx)?;
            commands::simulate(&ctx, interventional)
        }
        Command::Train { data } => {
            commands::write_config(&ctx)?;
            commands::train(&ctx, &data).map(|(_, lines)| lines)
        }
        Command::Sample { model, n, interventions } => {
            let m = load_archive(&model)?;
            commands::sample(&ctx, &m, n, &interventions)
        }
        Command::TestEdge { data, edges, correction, replicates } => {
            let correction = correction
                .map(|c| c.parse::<Correction>().map_err(|e| CliError::Usage(e.to_string())))
                .transpose()?;
            commands::write_config(&ctx)?;
            commands::test_edge(&ctx, data.as_deref(), &edges, correction, replicates).map(|(_, lines)| lines)
        }
        Command::Benchmark { reps } => {
            if let Some(r) = reps {
                ctx.config.evaluation.reps = r;
            }
            commands::write_config(&ctx)?;
            commands::benchmark(&ctx).map(|(_, lines)| lines)
        }
        Command::Cytometry { data, m_mc, n1, subsample, reps } => {
            commands::write_config(&ctx)?;
            commands::cytometry(&ctx, &data, m_mc, n1, subsample.map(|n| (n, reps)))
        }
        Command::Selfcheck => {
            let checks = selfcheck::run();
            let mut lines = Vec::new();
            for c in &checks {
                lines.push(format!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
            }
            if checks.iter().any(|c| !c.passed) {
                for l in &lines {
                    println!("{l}");
                }
                return Err(CliError::Numeric("selfcheck failed".into()));
            }
            Ok(lines)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
