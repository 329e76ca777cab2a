//! Experiment orchestration: fitting, single runs, sweeps and oracle gap
//! reports, each writing plain CSV/JSON artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{planner_for, PolicyId};
use crate::capacity::write_ledger_rows;
use crate::config::{ConfigError, RunConfig};
use crate::oracle::{oracle_gap, GapReport, OracleError};
use crate::propagation::{read_trace, Mode, PropagationError, ThroughputModel, TracePoint, BUNDLED_TRACE};
use crate::sim::{median, quantile, run_observed, FlowSummary, SimError, SimReport};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Trace(#[from] PropagationError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("sweep needs at least one seed and one policy")]
    EmptySweep,
}

impl RunError {
    /// True for errors caused by the user's input rather than the run itself.
    pub fn is_config(&self) -> bool {
        matches!(self, RunError::Config(_) | RunError::EmptySweep)
    }
}

/// Measured anchor versus the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorResidual {
    pub label: String,
    pub expected: f64,
    pub model: f64,
    pub relative_error: f64,
}

fn anchor(label: &str, expected: f64, model: f64) -> AnchorResidual {
    AnchorResidual { label: label.into(), expected, model, relative_error: (model - expected) / expected }
}

/// Field anchors the fitted curves should reproduce.
pub fn anchor_residuals(m: &ThroughputModel) -> Vec<AnchorResidual> {
    let mut out = Vec::new();
    let t = |mode, d| m.throughput(mode, d).ok();
    if let Some(v) = t(Mode::AC5, 80.0) {
        out.push(anchor("ac5@80m", 100.0, v));
    }
    if let Some(v) = t(Mode::UC24, 80.0) {
        out.push(anchor("uc24@80m", 7.5, v));
    }
    if let Ok(c) = m.cutoff(Mode::UC5) {
        out.push(anchor("uc5 cutoff", 40.0, c));
    }
    if let (Some(a24), Some(a5)) = (t(Mode::AC24, 100.0), t(Mode::AC5, 100.0)) {
        out.push(anchor("ac24@100m", a5 / 2.5, a24));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutput {
    pub model: ThroughputModel,
    pub anchors: Vec<AnchorResidual>,
    pub missing: Vec<Mode>,
}

/// Fits every mode in `trace` (the bundled trace when `None`) and writes `models.json` under `out`.
pub fn cmd_fit(trace: Option<&Path>, out: &Path) -> Result<FitOutput, RunError> {
    let samples: Vec<(Mode, TracePoint)> = match trace {
        Some(p) => read_trace(File::open(p)?)?,
        None => read_trace(BUNDLED_TRACE.as_bytes())?,
    };
    let model = ThroughputModel::fit_all(&samples)?;
    let missing: Vec<Mode> = Mode::ALL.into_iter().filter(|m| !model.curves.contains_key(m)).collect();
    for m in &missing {
        tracing::warn!("trace has no samples for {}", m.as_str());
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("models.json"), serde_json::to_string_pretty(&model)? + "\n")?;
    let anchors = anchor_residuals(&model);
    Ok(FitOutput { model, anchors, missing })
}

/// Summary statistics of per-flow normalized throughput.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub mean: f64,
    pub q10: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q90: f64,
}

impl Quantiles {
    pub fn of(v: &[f64]) -> Self {
        Quantiles {
            mean: if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 },
            q10: quantile(v, 0.1),
            q25: quantile(v, 0.25),
            q50: quantile(v, 0.5),
            q75: quantile(v, 0.75),
            q90: quantile(v, 0.9),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub policy: PolicyId,
    pub seed: u64,
    pub config_hash: String,
    pub horizon: u32,
    pub epoch_length_s: f64,
    pub total_mb: f64,
    pub realtime_mb: f64,
    pub collection_mb: f64,
    pub violations: u32,
    pub normalized_throughput: Quantiles,
    pub flows: Vec<FlowSummary>,
}

impl RunSummary {
    pub fn new(cfg: &RunConfig, r: &SimReport) -> Self {
        RunSummary {
            policy: cfg.policy,
            seed: cfg.seed(),
            config_hash: cfg.hash(),
            horizon: r.horizon,
            epoch_length_s: r.epoch_length_s,
            total_mb: r.total_mb,
            realtime_mb: r.realtime_mb,
            collection_mb: r.collection_mb,
            violations: r.violations,
            normalized_throughput: Quantiles::of(&r.normalized_throughputs()),
            flows: r.flows.clone(),
        }
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub report: SimReport,
}

/// Validates `cfg`, simulates it and writes the run directory under `root`.
pub fn cmd_run(cfg: &RunConfig, root: &Path, emit_workload: bool) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let model = cfg.model()?;
    let scenario = cfg.scenario(&model)?;
    let dir = root.join(cfg.run_name());
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), cfg.to_json() + "\n")?;
    if emit_workload {
        let wl = dir.join("workload.json");
        fs::write(&wl, serde_json::to_string_pretty(&scenario.to_file())? + "\n")?;
        let mut replay = cfg.clone();
        replay.workload.file = Some(PathBuf::from("workload.json"));
        fs::write(dir.join("replay.json"), replay.to_json() + "\n")?;
    }

    let planner = planner_for(cfg.policy, cfg.te);
    let mut plans = BufWriter::new(File::create(dir.join("plans.jsonl"))?);
    let mut plan_err: Option<std::io::Error> = None;
    let report = run_observed(&scenario, &planner, &cfg.sim, &model, &mut |rec| {
        if let Some(p) = rec.invocation {
            let line = serde_json::to_string(p).expect("plan serializes");
            if let Err(e) = writeln!(plans, "{line}") {
                plan_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = plan_err {
        return Err(e.into());
    }
    plans.flush()?;

    let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
    w.write_record(["flow_id", "epoch", "assigned_mbps", "delivered_mbps"])?;
    for row in &report.series {
        w.write_record([
            row.flow_id.0.to_string(),
            row.epoch.to_string(),
            row.assigned_mbps.to_string(),
            row.delivered_mbps.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("ledger.csv"))?;
    w.write_record(["epoch", "node", "slot", "units"])?;
    let mut rows = report.utilization.iter().peekable();
    while let Some(first) = rows.peek() {
        let epoch = first.epoch;
        let mut batch = Vec::new();
        while let Some(r) = rows.next_if(|r| r.epoch == epoch) {
            batch.push(((r.node, r.slot), r.units));
        }
        write_ledger_rows(&mut w, epoch, batch.into_iter())?;
    }
    w.flush()?;

    let summary = RunSummary::new(cfg, &report);
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    tracing::info!(dir = %dir.display(), total_mb = report.total_mb, "run finished");
    Ok(RunOutput { dir, summary, report })
}

/// One line of the sweep table; `seed` is empty on per-policy median rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub row: String,
    pub policy: PolicyId,
    pub seed: Option<u64>,
    pub total_mb: f64,
    pub realtime_mb: f64,
    pub collection_mb: f64,
    pub norm_mean: f64,
    pub norm_q10: f64,
    pub norm_q50: f64,
    pub norm_q90: f64,
    pub violations: f64,
    /// Median paired ratio of total data against the first policy.
    pub total_ratio: Option<f64>,
}

/// Runs every (policy, seed) pair and writes `sweep.csv` under `root`.
pub fn cmd_sweep(
    base: &RunConfig,
    policies: &[PolicyId],
    seeds: &[u64],
    root: &Path,
    threads: Option<usize>,
) -> Result<Vec<SweepRow>, RunError> {
    if seeds.is_empty() || policies.is_empty() {
        return Err(RunError::EmptySweep);
    }
    base.validate()?;
    let jobs: Vec<(PolicyId, u64)> = policies.iter().flat_map(|&p| seeds.iter().map(move |&s| (p, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| RunError::Io(std::io::Error::other(e)))?;
    let results: Vec<Result<RunSummary, RunError>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(p, s)| {
                let mut cfg = base.clone().with_seed(s);
                cfg.policy = p;
                cmd_run(&cfg, root, false).map(|o| o.summary)
            })
            .collect()
    });
    let summaries = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut rows: Vec<SweepRow> = summaries
        .iter()
        .map(|s| SweepRow {
            row: "run".into(),
            policy: s.policy,
            seed: Some(s.seed),
            total_mb: s.total_mb,
            realtime_mb: s.realtime_mb,
            collection_mb: s.collection_mb,
            norm_mean: s.normalized_throughput.mean,
            norm_q10: s.normalized_throughput.q10,
            norm_q50: s.normalized_throughput.q50,
            norm_q90: s.normalized_throughput.q90,
            violations: s.violations as f64,
            total_ratio: None,
        })
        .collect();
    let baseline: Vec<f64> = summaries.iter().filter(|s| s.policy == policies[0]).map(|s| s.total_mb).collect();
    for &p in policies {
        let mine: Vec<&RunSummary> = summaries.iter().filter(|s| s.policy == p).collect();
        let col = |f: fn(&RunSummary) -> f64| median(&mine.iter().map(|s| f(s)).collect::<Vec<_>>());
        let ratios: Vec<f64> =
            mine.iter().zip(&baseline).filter(|(_, b)| **b > 0.0).map(|(s, b)| s.total_mb / b).collect();
        rows.push(SweepRow {
            row: "median".into(),
            policy: p,
            seed: None,
            total_mb: col(|s| s.total_mb),
            realtime_mb: col(|s| s.realtime_mb),
            collection_mb: col(|s| s.collection_mb),
            norm_mean: col(|s| s.normalized_throughput.mean),
            norm_q10: col(|s| s.normalized_throughput.q10),
            norm_q50: col(|s| s.normalized_throughput.q50),
            norm_q90: col(|s| s.normalized_throughput.q90),
            violations: col(|s| s.violations as f64),
            total_ratio: (!ratios.is_empty()).then(|| median(&ratios)),
        });
    }
    fs::create_dir_all(root)?;
    let mut w = csv::Writer::from_path(root.join(format!("sweep-{}.csv", base.hash())))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Greedy-versus-optimal report over generated tiny instances, written as JSON under `root`.
pub fn cmd_oracle_gap(count: u64, seed: u64, root: &Path, model: &ThroughputModel) -> Result<GapReport, RunError> {
    let report = oracle_gap(count, seed, model)?;
    fs::create_dir_all(root)?;
    fs::write(root.join(format!("oracle-gap-n{count}-s{seed}.json")), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}
