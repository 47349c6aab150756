//! Benchmark harness: runs segment-tree range queries across a parameter
//! grid, verifies every output against the dense oracle, and emits versioned
//! CSV with measured flops, wall time, the routed strategy, and crossover
//! annotations.

use std::path::Path;
use std::time::Instant;

use cascade_core::seeding::{derive_seed, rng_from_seed};
use cascade_core::segtree_matrix::{MatrixSegTree, QueryStrategy};
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::commands::{CmdError, CmdResult};

/// Parameter grid for `bench`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchGrid {
    pub n: Vec<usize>,
    pub k: Vec<usize>,
    pub b: Vec<usize>,
    pub ranks: RankPattern,
    pub intervals: IntervalMode,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankPattern {
    /// Every adapter has this rank.
    Constant(usize),
    /// Explicit per-order ranks; the length must equal `k`.
    PerOrder(Vec<usize>),
}

impl RankPattern {
    fn materialize(&self, k: usize) -> CmdResult<Vec<usize>> {
        match self {
            RankPattern::Constant(r) => {
                if *r == 0 {
                    return Err(CmdError::Other(anyhow::anyhow!("rank must be positive")));
                }
                Ok(vec![*r; k])
            }
            RankPattern::PerOrder(list) => {
                if list.len() != k || list.contains(&0) {
                    return Err(CmdError::Other(anyhow::anyhow!(
                        "per_order ranks must list {k} positive values"
                    )));
                }
                Ok(list.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMode {
    /// Always the full range `[1, k]`.
    Full,
    /// One seeded random interval per grid point.
    Random,
    /// Deterministic set: full range, first half, single middle index.
    Sweep,
}

impl IntervalMode {
    fn intervals(&self, k: usize, seed: u64) -> Vec<(usize, usize)> {
        match self {
            IntervalMode::Full => vec![(1, k)],
            IntervalMode::Random => {
                let mut rng = rng_from_seed(seed);
                let lo = rng.gen_range(1..=k);
                let hi = rng.gen_range(lo..=k);
                vec![(lo, hi)]
            }
            IntervalMode::Sweep => {
                let mid = k.div_ceil(2);
                let mut out = vec![(1, k), (1, mid), (mid, mid)];
                out.dedup();
                out
            }
        }
    }
}

impl BenchGrid {
    pub fn validate(&self) -> CmdResult<()> {
        if self.n.is_empty() || self.k.is_empty() || self.b.is_empty() {
            return Err(CmdError::Other(anyhow::anyhow!(
                "grid needs at least one n, k, and b value"
            )));
        }
        if self.n.iter().chain(&self.k).chain(&self.b).any(|&v| v == 0) {
            return Err(CmdError::Other(anyhow::anyhow!(
                "grid values must be positive"
            )));
        }
        if self.trials == 0 {
            return Err(CmdError::Other(anyhow::anyhow!("trials must be >= 1")));
        }
        Ok(())
    }
}

/// One emitted measurement row. `trial` is a trial index or `"median"`.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub k: usize,
    pub b: usize,
    pub lo: usize,
    pub hi: usize,
    pub ranks: Vec<usize>,
    pub trial: String,
    pub strategy_chosen: &'static str,
    pub flops_tree: u64,
    pub flops_otf: u64,
    pub wall_time_ns: u64,
    pub max_rel_err: f64,
    /// True on the first batch size where the routed strategy differs from
    /// the previous batch size at fixed (n, k, ranks, interval).
    pub crossover: bool,
}

pub const CSV_SCHEMA: &str = "schema=1";
pub const CSV_HEADER: &str =
    "n,k,b,lo,hi,ranks,trial,strategy_chosen,flops_tree,flops_otf,wall_time_ns,max_rel_err,crossover";

/// Runs the grid. Every query output (Auto plus both forced strategies) is
/// checked against the dense oracle; any row whose error exceeds `1e-8`
/// aborts the run. With `timing` off, wall times are written as zero so the
/// CSV is byte-identical across runs.
pub fn run_grid(grid: &BenchGrid, timing: bool) -> CmdResult<Vec<BenchRow>> {
    grid.validate()?;
    let mut rows = Vec::new();
    for &n in &grid.n {
        for &k in &grid.k {
            let ranks = grid.ranks.materialize(k)?;
            let point_seed = derive_seed(grid.seed, (n * 31 + k) as u64);
            let adapters: Vec<(DMatrix<f64>, DMatrix<f64>)> = ranks
                .iter()
                .enumerate()
                .map(|(i, &r)| {
                    let mut rng = rng_from_seed(derive_seed(point_seed, i as u64));
                    (
                        DMatrix::from_fn(n, r, |_, _| rng.gen::<f64>() - 0.5),
                        DMatrix::from_fn(r, n, |_, _| rng.gen::<f64>() - 0.5),
                    )
                })
                .collect();
            let tree = MatrixSegTree::init(adapters.clone())?;
            for (lo, hi) in grid.intervals.intervals(k, derive_seed(point_seed, 0x1f)) {
                let mut dense = DMatrix::zeros(n, n);
                for (a, b) in &adapters[lo - 1..hi] {
                    dense += a * b;
                }
                let mut prev_choice: Option<QueryStrategy> = None;
                for &b in &grid.b {
                    let mut rng = rng_from_seed(derive_seed(point_seed, 0x100 + b as u64));
                    let x = DMatrix::from_fn(n, b, |_, _| rng.gen::<f64>() - 0.5);
                    let oracle = &dense * &x;
                    let scale = oracle.amax().max(1e-300);

                    let report = tree.cost_model(lo, hi, b)?;
                    let crossover = prev_choice.map(|p| p != report.chosen).unwrap_or(false);
                    prev_choice = Some(report.chosen);

                    let mut times = Vec::with_capacity(grid.trials);
                    let mut worst = 0.0f64;
                    let mut flops_tree = 0;
                    let mut flops_otf = 0;
                    for _ in 0..grid.trials {
                        let started = Instant::now();
                        let auto = tree.query(lo, hi, &x, QueryStrategy::Auto)?;
                        let elapsed = started.elapsed().as_nanos() as u64;
                        let forced_tree = tree.query(lo, hi, &x, QueryStrategy::Tree)?;
                        let forced_otf = tree.query(lo, hi, &x, QueryStrategy::OnTheFly)?;
                        flops_tree = forced_tree.flops;
                        flops_otf = forced_otf.flops;
                        if auto.flops != flops_tree.min(flops_otf) {
                            return Err(CmdError::Oracle(format!(
                                "routing picked {} flops, minimum is {}",
                                auto.flops,
                                flops_tree.min(flops_otf)
                            )));
                        }
                        for out in [&auto.output, &forced_tree.output, &forced_otf.output] {
                            worst = worst.max((out - &oracle).amax() / scale);
                        }
                        times.push(if timing { elapsed } else { 0 });
                    }
                    if worst > 1e-8 {
                        return Err(CmdError::Oracle(format!(
                            "bench row n={n} k={k} b={b} [{lo},{hi}] error {worst:.3e} exceeds 1e-8"
                        )));
                    }
                    let mut sorted = times.clone();
                    sorted.sort_unstable();
                    let median = sorted[sorted.len() / 2];
                    for (t, wall) in times.iter().enumerate() {
                        rows.push(BenchRow {
                            n,
                            k,
                            b,
                            lo,
                            hi,
                            ranks: ranks.clone(),
                            trial: t.to_string(),
                            strategy_chosen: report.chosen.name(),
                            flops_tree,
                            flops_otf,
                            wall_time_ns: *wall,
                            max_rel_err: worst,
                            crossover,
                        });
                    }
                    rows.push(BenchRow {
                        n,
                        k,
                        b,
                        lo,
                        hi,
                        ranks: ranks.clone(),
                        trial: "median".into(),
                        strategy_chosen: report.chosen.name(),
                        flops_tree,
                        flops_otf,
                        wall_time_ns: median,
                        max_rel_err: worst,
                        crossover,
                    });
                }
            }
        }
    }
    Ok(rows)
}

fn format_row(row: &BenchRow) -> String {
    let ranks = row
        .ranks
        .iter()
        .map(|r| r.to_string())
        .collect::<Vec<_>>()
        .join(";");
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{:e},{}",
        row.n,
        row.k,
        row.b,
        row.lo,
        row.hi,
        ranks,
        row.trial,
        row.strategy_chosen,
        row.flops_tree,
        row.flops_otf,
        row.wall_time_ns,
        row.max_rel_err,
        row.crossover
    )
}

/// Writes the versioned CSV: a `schema=1` line, the header, then the rows in
/// grid order.
pub fn write_csv(rows: &[BenchRow], path: &Path) -> CmdResult<()> {
    let mut text = String::new();
    text.push_str(CSV_SCHEMA);
    text.push('\n');
    text.push_str(CSV_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&format_row(row));
        text.push('\n');
    }
    std::fs::write(path, text)
        .map_err(|e| CmdError::Other(anyhow::anyhow!("writing {}: {e}", path.display())))?;
    Ok(())
}

/// Number of grid points whose routed strategy flipped relative to the
/// previous batch size.
pub fn crossover_count(rows: &[BenchRow]) -> usize {
    rows.iter()
        .filter(|r| r.trial == "median" && r.crossover)
        .count()
}
