use std::path::PathBuf;
use std::process::ExitCode;

use cascade_cli::bench::{crossover_count, run_grid, write_csv, BenchGrid};
use cascade_cli::commands::{
    cmd_construct, cmd_eval, cmd_gen, cmd_segtree_query, cmd_tseg_query, cmd_verify, CmdError,
    GenKind, GlobalOpts,
};
use cascade_core::segtree_matrix::QueryStrategy;
use clap::{Args, Parser, Subcommand};

/// Constructs and verifies derivative rank-dynamics instances, evaluates
/// cascading low-rank models, and benchmarks low-rank segment-tree range
/// queries.
#[derive(Parser)]
#[command(name = "cascade", version, disable_help_subcommand = true)]
struct Cli {
    /// Base seed for every random draw.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Override the relative singular-value cutoff used for rank estimation.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Number of random sample points for generic-rank estimation.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Print the full report as JSON instead of a summary line.
    #[arg(long, global = true)]
    json: bool,
    /// Print the report as a flat two-line CSV (header row, value row).
    #[arg(long, global = true, conflicts_with = "json")]
    csv: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a rank-dynamics instance from a spec file and verify it.
    Construct {
        /// Construction spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Prefix for the emitted .l1.json and .report.json files.
        #[arg(long, default_value = "construct_out")]
        out_prefix: String,
    },
    /// Measure an existing exp-polynomial matrix function.
    Verify {
        /// ExpPolyMatrix JSON file.
        #[arg(long)]
        input: PathBuf,
        /// Number of derivative orders to measure.
        #[arg(long)]
        k: usize,
    },
    /// Evaluate a cascade model on a batch and emit every order.
    Eval {
        /// Model manifest (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Input batch (LRMX).
        #[arg(long)]
        input: PathBuf,
        /// Prefix for G_0..G_k LRMX outputs and the flop report.
        #[arg(long, default_value = "G")]
        out_prefix: String,
    },
    /// Matrix segment-tree range queries.
    Segtree {
        #[command(subcommand)]
        cmd: SegtreeCmd,
    },
    /// Tensor segment-tree range queries.
    Tseg {
        #[command(subcommand)]
        cmd: TsegCmd,
    },
    /// Run a benchmark grid and emit CSV.
    Bench {
        /// Grid description (JSON).
        #[arg(long)]
        grid: PathBuf,
        /// Output CSV path.
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
        /// Write zero wall times for byte-identical output across runs.
        #[arg(long)]
        no_timing: bool,
    },
    /// Generate seeded random fixtures: model, bundle, tbundle, or input.
    Gen {
        /// model, bundle, tbundle, or input.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        /// Rank of every adapter or factor.
        #[arg(long, default_value_t = 2)]
        rank: usize,
        /// Batch size (input kind only).
        #[arg(long, default_value_t = 4)]
        b: usize,
        /// Output directory.
        #[arg(long, default_value = ".")]
        dir: PathBuf,
        /// File stem for the emitted fixture.
        #[arg(long, default_value = "fixture")]
        stem: String,
    },
}

#[derive(Subcommand)]
enum SegtreeCmd {
    /// Exact range sum (sum over [lo, hi] of A_i B_i) X.
    Query(SegQueryArgs),
}

#[derive(Subcommand)]
enum TsegCmd {
    /// Exact range contraction returning an n x n x b tensor.
    Query(TsegQueryArgs),
}

#[derive(Args)]
struct SegQueryArgs {
    /// Adapter bundle manifest (JSON).
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    lo: usize,
    #[arg(long)]
    hi: usize,
    /// Input batch (LRMX).
    #[arg(long)]
    input: PathBuf,
    /// auto, tree, or onthefly.
    #[arg(long, default_value = "auto")]
    strategy: String,
    /// Include the cost-model prediction in the report.
    #[arg(long)]
    emit_cost: bool,
    /// Write the query output to this LRMX path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TsegQueryArgs {
    /// Factor bundle manifest (JSON).
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    lo: usize,
    #[arg(long)]
    hi: usize,
    /// Input batch (LRMX).
    #[arg(long)]
    input: PathBuf,
    /// auto, tree, or onthefly.
    #[arg(long, default_value = "auto")]
    strategy: String,
    /// Write the (n^2) x b unfolded output to this LRMX path.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Writes a line to stdout, ignoring broken pipes from early-terminated
/// consumers.
fn emit(line: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

#[derive(Clone, Copy)]
enum ReportFormat {
    Summary,
    Json,
    Csv,
}

/// Flattens a JSON report into one CSV header row and one value row. Nested
/// objects use dotted keys, arrays of objects get indexed keys, and arrays
/// of scalars join with ';'.
fn flatten_csv(value: &serde_json::Value) -> String {
    fn scalar(v: &serde_json::Value) -> String {
        match v {
            serde_json::Value::String(s) => s.replace(',', ";"),
            other => other.to_string(),
        }
    }
    fn walk(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, inner) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, inner, out);
                }
            }
            serde_json::Value::Array(items)
                if items.iter().any(|i| i.is_object() || i.is_array()) =>
            {
                for (idx, inner) in items.iter().enumerate() {
                    walk(&format!("{prefix}.{idx}"), inner, out);
                }
            }
            serde_json::Value::Array(items) => {
                let joined = items.iter().map(scalar).collect::<Vec<_>>().join(";");
                out.push((prefix.to_string(), joined));
            }
            other => out.push((prefix.to_string(), scalar(other))),
        }
    }
    let mut fields = Vec::new();
    walk("", value, &mut fields);
    let header: Vec<_> = fields.iter().map(|(k, _)| k.clone()).collect();
    let row: Vec<_> = fields.into_iter().map(|(_, v)| v).collect();
    format!("{}\n{}", header.join(","), row.join(","))
}

fn print_report<T: serde::Serialize>(report: &T, summary: String, format: ReportFormat) {
    match format {
        ReportFormat::Json => {
            emit(&serde_json::to_string_pretty(report).unwrap_or_else(|_| "{}".into()))
        }
        ReportFormat::Csv => {
            let value = serde_json::to_value(report).unwrap_or(serde_json::Value::Null);
            emit(&flatten_csv(&value));
        }
        ReportFormat::Summary => emit(&summary),
    }
}

fn run(cli: Cli) -> Result<(), CmdError> {
    let opts = GlobalOpts {
        seed: cli.seed,
        tol: cli.tol,
        samples: cli.samples,
    };
    let format = if cli.json {
        ReportFormat::Json
    } else if cli.csv {
        ReportFormat::Csv
    } else {
        ReportFormat::Summary
    };
    match cli.cmd {
        Cmd::Construct { spec, out_prefix } => {
            let report = cmd_construct(&spec, &out_prefix, &opts)?;
            let summary = format!(
                "construct {}: measured ranks {:?}, leibniz {}, pass {} -> {}.l1.json",
                report.kind,
                report.measured_ranks,
                if report.leibniz.pass {
                    "ok"
                } else {
                    "VIOLATED"
                },
                report.pass,
                out_prefix
            );
            print_report(&report, summary, format);
            if !report.pass {
                return Err(CmdError::Oracle(format!(
                    "construction verification failed: measured {:?} target {:?}",
                    report.measured_ranks, report.target_q
                )));
            }
            Ok(())
        }
        Cmd::Verify { input, k } => {
            let report = cmd_verify(&input, k, &opts)?;
            let summary = format!(
                "verify: measured ranks {:?}, ranks at 0 {:?}, leibniz {}",
                report.measured_ranks,
                report.ranks_at_zero.as_deref().unwrap_or(&[]),
                if report.leibniz.pass {
                    "ok"
                } else {
                    "VIOLATED"
                }
            );
            print_report(&report, summary, format);
            if !report.pass {
                return Err(CmdError::Oracle("Leibniz bounds violated".into()));
            }
            Ok(())
        }
        Cmd::Eval {
            model,
            input,
            out_prefix,
        } => {
            let report = cmd_eval(&model, &input, &out_prefix)?;
            let summary = format!(
                "eval: {} orders, cascade {} flops vs naive {} flops, max rel err {:.2e}",
                report.outputs.len(),
                report.cascade_flops,
                report.naive_flops,
                report.max_rel_err
            );
            print_report(&report, summary, format);
            Ok(())
        }
        Cmd::Segtree {
            cmd: SegtreeCmd::Query(args),
        } => {
            let strategy = QueryStrategy::from_name(&args.strategy)?;
            let report = cmd_segtree_query(
                &args.bundle,
                args.lo,
                args.hi,
                &args.input,
                strategy,
                args.emit_cost,
                args.out.as_deref(),
            )?;
            let mut summary = format!(
                "segtree query [{}, {}]: strategy {} ({} flops), err {:.2e}",
                report.lo, report.hi, report.strategy_used, report.flops_used, report.max_rel_err
            );
            if let (Some(t), Some(o)) = (report.cost_tree_flops, report.cost_onthefly_flops) {
                summary.push_str(&format!(" [cost tree {t}, onthefly {o}]"));
            }
            print_report(&report, summary, format);
            Ok(())
        }
        Cmd::Tseg {
            cmd: TsegCmd::Query(args),
        } => {
            let strategy = QueryStrategy::from_name(&args.strategy)?;
            let report = cmd_tseg_query(
                &args.bundle,
                args.lo,
                args.hi,
                &args.input,
                strategy,
                args.out.as_deref(),
            )?;
            let summary = format!(
                "tseg query [{}, {}]: strategy {} ({} flops), cross-strategy err {:.2e}",
                report.lo, report.hi, report.strategy_used, report.flops_used, report.max_rel_err
            );
            print_report(&report, summary, format);
            Ok(())
        }
        Cmd::Bench {
            grid,
            out,
            no_timing,
        } => {
            let text = std::fs::read_to_string(&grid)
                .map_err(|e| CmdError::Other(anyhow::anyhow!("reading {}: {e}", grid.display())))?;
            let grid: BenchGrid = serde_json::from_str(&text)
                .map_err(|e| CmdError::Other(anyhow::anyhow!("parsing grid: {e}")))?;
            let rows = run_grid(&grid, !no_timing)?;
            write_csv(&rows, &out)?;
            emit(&format!(
                "bench: {} rows -> {} ({} crossover points)",
                rows.len(),
                out.display(),
                crossover_count(&rows)
            ));
            Ok(())
        }
        Cmd::Gen {
            kind,
            n,
            k,
            rank,
            b,
            dir,
            stem,
        } => {
            let kind = GenKind::from_name(&kind)?;
            let path = cmd_gen(kind, n, k, rank, b, &dir, &stem, opts.seed)?;
            emit(&format!("gen: wrote {}", path.display()));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path with success
            // status; real usage errors exit 1
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
