use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cropmesh_core::experiment::{cmd_fit, cmd_oracle_gap, cmd_run, cmd_sweep, RunError};
use cropmesh_core::{PolicyId, RunConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Farm mesh simulator and traffic engineering experiments.
#[derive(Parser)]
#[command(name = "cropmesh", version)]
struct Cli {
    /// Output root for run directories.
    #[arg(long, global = true, env = "CROPMESH_OUT", default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit throughput curves from a trace and write models.json.
    Fit {
        /// Trace CSV with mode,distance_m,throughput_mbps columns; bundled trace if omitted.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Simulate one configuration.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<PolicyId>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the generated workload and a config that replays it.
        #[arg(long)]
        emit_workload: bool,
    },
    /// Run every policy on every seed and aggregate.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated policies; the first is the ratio baseline.
        #[arg(long, value_delimiter = ',', default_value = "naive,flowsched,apselect,central")]
        policies: Vec<PolicyId>,
        /// Comma-separated seeds or a half-open range such as 0..10.
        #[arg(long, default_value = "0..10")]
        seeds: String,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Compare the greedy engine against the exhaustive optimum on tiny instances.
    OracleGap {
        #[arg(long, default_value_t = 100)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    trace: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, RunError> {
        let mut cfg = match &self.config {
            Some(p) => {
                let mut c = RunConfig::load(p)?;
                let base = p.parent().unwrap_or(Path::new("."));
                for f in [&mut c.trace, &mut c.workload.file].into_iter().flatten() {
                    if f.is_relative() {
                        *f = base.join(&*f);
                    }
                }
                c
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.scale {
            cfg.workload.scale = s;
        }
        if let Some(t) = &self.trace {
            cfg.trace = Some(t.clone());
        }
        Ok(cfg)
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| format!("bad seed range {s:?}"))?;
        let b: u64 = b.trim().parse().map_err(|_| format!("bad seed range {s:?}"))?;
        return Ok((a..b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| format!("bad seed {x:?}"))).collect()
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.cmd {
        Command::Fit { trace } => {
            let fit = cmd_fit(trace.as_deref(), &cli.out)?;
            for m in &fit.missing {
                eprintln!("warning: no samples for mode {}", m.as_str());
            }
            for a in &fit.anchors {
                println!(
                    "{:<12} expected {:>8.2}  model {:>8.2}  residual {:+.1}%",
                    a.label,
                    a.expected,
                    a.model,
                    100.0 * a.relative_error
                );
            }
            println!("{}", cli.out.join("models.json").display());
        }
        Command::Run { common, policy, seed, emit_workload } => {
            let mut cfg = common.load()?;
            if let Some(p) = policy {
                cfg.policy = p;
            }
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            let out = cmd_run(&cfg, &cli.out, emit_workload)?;
            let s = &out.summary;
            println!(
                "{} total {:.1} MB (realtime {:.1}, collection {:.1}), median normalized {:.3}, violations {}",
                s.policy, s.total_mb, s.realtime_mb, s.collection_mb, s.normalized_throughput.q50, s.violations
            );
            println!("{}", out.dir.display());
        }
        Command::Sweep { common, policies, seeds, threads } => {
            let cfg = common.load()?;
            let seeds = parse_seeds(&seeds).map_err(|e| RunError::Config(cropmesh_core::ConfigError::Invalid(e)))?;
            let rows = cmd_sweep(&cfg, &policies, &seeds, &cli.out, threads)?;
            println!("policy      total_mb  ratio  norm_q50  norm_mean");
            for r in rows.iter().filter(|r| r.seed.is_none()) {
                println!(
                    "{:<10} {:>9.1} {:>6.3} {:>9.3} {:>10.3}",
                    r.policy.as_str(),
                    r.total_mb,
                    r.total_ratio.unwrap_or(f64::NAN),
                    r.norm_q50,
                    r.norm_mean
                );
            }
        }
        Command::OracleGap { count, seed, trace } => {
            let cfg = RunConfig { trace, ..RunConfig::default() };
            cfg.validate()?;
            let model = cfg.model()?;
            let r = cmd_oracle_gap(count, seed, &cli.out, &model)?;
            println!(
                "{} instances: median greedy/optimal {:.3}, naive/optimal {:.3}, above optimal {}, greedy below naive {}",
                r.rows.len(),
                r.median_greedy_ratio,
                r.median_naive_ratio,
                r.above_optimal,
                r.greedy_below_naive
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}
