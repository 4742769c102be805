//! Latency harness: warmup runs, timed runs, and median / p10 / p90 wall-clock per executor.

use crate::error::{Error, Result};
use crate::graph::{
    executor_flops, run_branched_with_stats, run_deep_ensemble, run_mcdo, run_vanilla, split_at, ExecutorKind, ModelGraph,
};
use crate::stochastic::DropoutSpec;
use crate::tensor::{Shape, Tensor};
use crate::train::{build_mini_wrn, ArchConfig, ArchFamily};
use serde::{Deserialize, Serialize};
use std::time::Instant;

pub const MIN_TIMED_ITERS: usize = 10;

/// Reference latencies in seconds measured on an embedded GPU board, for
/// context in emitted reports only.
pub fn reference_seconds(kind: ExecutorKind) -> Option<f64> {
    match kind {
        ExecutorKind::Vanilla => Some(0.9),
        ExecutorKind::DeepEnsemble => Some(2.7),
        ExecutorKind::McdoSequential => Some(2.8),
        ExecutorKind::McdoBranched => Some(1.4),
        ExecutorKind::McdoBranchedFused => None,
    }
}

/// Mini-WRN (k=2, 8 base channels, one block per stage) whose dropout-sites
/// start at the last stage, so the deterministic backbone holds roughly 70%
/// of the multiply-adds.
pub fn default_toy_arch() -> ArchConfig {
    ArchConfig {
        family: ArchFamily::MiniWrn,
        depth_blocks: 1,
        widening_factor: 2,
        base_channels: 8,
        first_stochastic_layer: 5,
        num_classes: 10,
        in_channels: 3,
    }
}

pub const DEFAULT_TOY_INPUT: Shape = Shape { n: 1, c: 3, h: 32, w: 32 };

pub fn default_toy_model(dropout: DropoutSpec, init_seed: u64) -> Result<ModelGraph> {
    build_mini_wrn(&default_toy_arch(), dropout, init_seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub executors: Vec<ExecutorKind>,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timed_iters < MIN_TIMED_ITERS {
            return Err(Error::Config(format!("timed_iters must be >= {MIN_TIMED_ITERS}")));
        }
        if self.executors.is_empty() {
            return Err(Error::Config("bench executor list is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub executor: ExecutorKind,
    pub m: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    /// Median relative to the vanilla median.
    pub overhead: f64,
    /// Analytic multiply-accumulates of one call.
    pub flops: u64,
    pub flop_ratio: f64,
    pub reference_seconds: Option<f64>,
}

pub const LATENCY_CSV_COLUMNS: [&str; 9] =
    ["executor", "m", "median_ms", "p10_ms", "p90_ms", "overhead", "flops", "flop_ratio", "reference_seconds"];

impl LatencyRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.executor,
            self.m,
            self.median_ms,
            self.p10_ms,
            self.p90_ms,
            self.overhead,
            self.flops,
            self.flop_ratio,
            self.reference_seconds.map(|v| v.to_string()).unwrap_or_default()
        )
    }
}

/// Linear-interpolated quantile of ascending `sorted` samples.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of no samples");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Wall-clock milliseconds of `timed` calls after `warmup` discarded calls, ascending.
pub fn time_calls(warmup: usize, timed: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    for _ in 0..warmup {
        f()?;
    }
    let mut out = Vec::with_capacity(timed);
    for _ in 0..timed {
        let t = Instant::now();
        f()?;
        out.push(t.elapsed().as_secs_f64() * 1e3);
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// A model prepared for one executor.
pub struct Runner<'a> {
    kind: ExecutorKind,
    graph: &'a ModelGraph,
    members: Vec<ModelGraph>,
    branched: Option<crate::graph::BranchedModel>,
    m: usize,
    seed: u64,
}

impl<'a> Runner<'a> {
    /// `members` are deep-ensemble weights; when fewer than `m` are supplied
    /// the remainder are copies of `graph` (identical cost).
    pub fn new(kind: ExecutorKind, graph: &'a ModelGraph, members: &[ModelGraph], m: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("number of samples must be >= 1".into()));
        }
        let branched = if kind.needs_dropout_site() { Some(split_at(graph, m)?) } else { None };
        let members = if kind == ExecutorKind::DeepEnsemble {
            (0..m).map(|i| members.get(i).cloned().unwrap_or_else(|| graph.fork())).collect()
        } else {
            Vec::new()
        };
        Ok(Runner { kind, graph, members, branched, m, seed })
    }

    pub fn run(&self, input: &Tensor) -> Result<()> {
        match self.kind {
            ExecutorKind::Vanilla => run_vanilla(self.graph, input).map(drop),
            ExecutorKind::DeepEnsemble => run_deep_ensemble(&self.members, input).map(drop),
            ExecutorKind::McdoSequential => run_mcdo(self.graph, input, self.m, self.seed).map(drop),
            ExecutorKind::McdoBranched | ExecutorKind::McdoBranchedFused => {
                let fused = self.kind == ExecutorKind::McdoBranchedFused;
                run_branched_with_stats(self.branched.as_ref().expect("built in new"), input, self.seed, fused).map(drop)
            }
        }
    }
}

/// Times every executor in `config` (vanilla always runs first to anchor the overhead column).
pub fn run_bench(
    graph: &ModelGraph,
    members: &[ModelGraph],
    input: &Tensor,
    config: &BenchConfig,
    m: usize,
    seed: u64,
) -> Result<Vec<LatencyRecord>> {
    config.validate()?;
    let mut kinds = vec![ExecutorKind::Vanilla];
    kinds.extend(config.executors.iter().copied().filter(|&k| k != ExecutorKind::Vanilla));
    let vanilla_flops = executor_flops(graph, input.shape(), ExecutorKind::Vanilla, 1, seed)?;
    let mut records: Vec<LatencyRecord> = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let runner = Runner::new(kind, graph, members, m, seed)?;
        let times = time_calls(config.warmup_iters, config.timed_iters, || runner.run(input))?;
        let median = quantile(&times, 0.5);
        let overhead = match records.first() {
            Some(v) => median / v.median_ms,
            None => 1.0,
        };
        let samples = if kind == ExecutorKind::Vanilla { 1 } else { m };
        let flops = executor_flops(graph, input.shape(), kind, samples, seed)?;
        records.push(LatencyRecord {
            executor: kind,
            m: samples,
            median_ms: median,
            p10_ms: quantile(&times, 0.1),
            p90_ms: quantile(&times, 0.9),
            overhead,
            flops,
            flop_ratio: flops as f64 / vanilla_flops as f64,
            reference_seconds: reference_seconds(kind),
        });
    }
    Ok(records)
}
