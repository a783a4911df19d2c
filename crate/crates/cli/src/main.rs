//! Command-line runner for relaysync scenarios.
//!
//! Exit codes: 0 when every check passes, 1 on a protocol-property
//! violation, 2 on a usage or configuration error.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use num_traits::ToPrimitive;
use relaysync::analysis::{check_all, latency_stats, SyncReport, Violation};
use relaysync::relay::expected_byzantine_prefix;
use relaysync::sim::{run, Scenario, Trace};
use relaysync::sweep::{sweep, SweepOutcome};

#[derive(Parser)]
#[command(
    name = "relaysync",
    version,
    about = "Relay-based round synchronizer simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and check every invariant on its trace.
    Run(RunArgs),
    /// Run a scenario over many seeds in parallel and print a summary table.
    Sweep(SweepArgs),
    /// Print the exact expected Byzantine relay prefix (n+1)/(n-f+1).
    Expect {
        #[arg(long)]
        n: u32,
        #[arg(long)]
        f: u32,
    },
    /// Check the invariant suite over existing trace files.
    Verify {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Overrides {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    stop_time: Option<u64>,
    #[arg(long)]
    stop_after_syncs: Option<u32>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Overrides,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the trace and reports.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Overrides,
    /// Seeds as `A..B`, `A..=B` or a comma list; defaults to the scenario's seed.
    #[arg(long)]
    seeds: Option<SeedRange>,
    /// Process counts to sweep, each with f = (n-1)/3; defaults to the scenario's n.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<u32>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Output directory for reports (and traces with --keep-traces).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    keep_traces: bool,
}

#[derive(Clone, Debug)]
struct SeedRange(Vec<u64>);

impl std::str::FromStr for SeedRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let num = |x: &str| {
            x.trim()
                .parse::<u64>()
                .map_err(|e| format!("bad seed {x:?}: {e}"))
        };
        let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..=") {
            (num(a)?..=num(b)?).collect()
        } else if let Some((a, b)) = s.split_once("..") {
            (num(a)?..num(b)?).collect()
        } else {
            s.split(',').map(num).collect::<Result<_, _>>()?
        };
        if seeds.is_empty() {
            return Err(format!("seed range {s:?} is empty"));
        }
        Ok(SeedRange(seeds))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Expect { n, f } => cmd_expect(n, f),
        Command::Verify { traces } => cmd_verify(&traces),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_scenario(o: &Overrides) -> Result<Scenario> {
    let text = fs::read_to_string(&o.config).with_context(|| format!("reading {}", o.config.display()))?;
    let mut sc: Scenario =
        toml::from_str(&text).with_context(|| format!("parsing {}", o.config.display()))?;
    if let Some(t) = o.stop_time {
        sc.stop.max_time = Some(t);
    }
    if let Some(k) = o.stop_after_syncs {
        sc.stop.max_syncs = Some(k);
    }
    Ok(sc)
}

fn report_violations(label: &str, violations: &[Violation]) {
    for v in violations {
        eprintln!("{label}: violation of {v}");
    }
}

fn write_reports(dir: &Path, reports: &[&SyncReport]) -> Result<()> {
    let mut syncs = format!("{}\n", SyncReport::SYNC_CSV_HEADER);
    let mut samples = format!("{}\n", SyncReport::SAMPLE_CSV_HEADER);
    for r in reports {
        r.sync_csv_rows(&mut syncs);
        r.sample_csv_rows(&mut samples);
    }
    fs::write(dir.join("syncs.csv"), syncs)?;
    fs::write(dir.join("samples.csv"), samples)?;
    Ok(())
}

fn write_trace(path: &Path, trace: &Trace) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    trace.write_jsonl(BufWriter::new(file))?;
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<bool> {
    let mut sc = load_scenario(&args.common)?;
    if let Some(seed) = args.seed {
        sc.protocol.seed = seed;
    }
    let trace = run(&sc)?;
    let seed = sc.protocol.seed;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let trace_path = args.out.join(format!("trace-{seed}.jsonl"));
    write_trace(&trace_path, &trace)?;
    let report = SyncReport::from_trace(&trace);
    write_reports(&args.out, &[&report])?;
    let json = serde_json::to_string_pretty(&report).context("encoding report")?;
    fs::write(args.out.join(format!("report-{seed}.json")), json)?;

    let violations = check_all(&trace);
    println!(
        "seed {seed}: {} records until t={}, {} sync times, trace {}",
        trace.records.len(),
        trace.end,
        report.sync_times.len(),
        trace_path.display()
    );
    if violations.is_empty() {
        Ok(true)
    } else {
        report_violations(&format!("seed {seed}"), &violations);
        Ok(false)
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<bool> {
    let base = load_scenario(&args.common)?;
    base.validate()?;
    let seeds = args.seeds.map_or_else(|| vec![base.protocol.seed], |s| s.0);
    let sizes = if args.sizes.is_empty() {
        vec![base.protocol.n]
    } else {
        args.sizes.clone()
    };
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }

    let mut by_size: BTreeMap<u32, (u32, Vec<SweepOutcome>)> = BTreeMap::new();
    for &n in &sizes {
        let mut sc = base.clone();
        if !args.sizes.is_empty() {
            sc.protocol.n = n;
            sc.protocol.f = n.saturating_sub(1) / 3;
        }
        sc.validate()?;
        let outcomes = sweep(&seeds, args.jobs, args.keep_traces, |seed| {
            let mut s = sc.clone();
            s.protocol.seed = seed;
            s
        })?;
        by_size.insert(n, (sc.protocol.f, outcomes));
    }

    println!(
        "{:>5} {:>4} {:>6} {:>7} {:>14} {:>10} {:>8} {:>12} {:>8}",
        "n", "f", "seeds", "syncs", "msgs/sync/n", "E3 mean", "E3 se", "22δ+Δ", "E[X]"
    );
    let mut failed = false;
    for (&n, (f, outcomes)) in &by_size {
        let f = *f;
        let reports: Vec<SyncReport> = outcomes.iter().map(|o| o.report.clone()).collect();
        let syncs: usize = reports.iter().map(|r| r.sync_times.len()).sum();
        let stats = latency_stats(&reports).ok();
        let msgs = stats
            .as_ref()
            .and_then(|s| s.messages_per_sync_per_n)
            .map_or("-".into(), |e| format!("{:.3}", e.mean));
        let (e3, e3_se) = stats
            .as_ref()
            .and_then(|s| s.e3)
            .map_or(("-".into(), "-".into()), |e| {
                (format!("{:.1}", e.mean), format!("{:.2}", e.std_err))
            });
        let bound = 22 * base.protocol.delta + base.protocol.cap_delta;
        let ex = expected_byzantine_prefix(n, f).map(|q| q.to_f64().unwrap_or(f64::NAN))?;
        println!(
            "{n:>5} {f:>4} {:>6} {syncs:>7} {msgs:>14} {e3:>10} {e3_se:>8} {bound:>12} {ex:>8.4}",
            outcomes.len()
        );
        for o in outcomes {
            if !o.violations.is_empty() {
                failed = true;
                report_violations(&format!("n={n} seed {}", o.seed), &o.violations);
            }
        }
        if let Some(dir) = &args.out {
            let sub = if by_size.len() > 1 {
                dir.join(format!("n{n}"))
            } else {
                dir.clone()
            };
            fs::create_dir_all(&sub)?;
            write_reports(&sub, &reports.iter().collect::<Vec<_>>())?;
            for o in outcomes {
                if let Some(trace) = &o.trace {
                    write_trace(&sub.join(format!("trace-{}.jsonl", o.seed)), trace)?;
                }
            }
        }
    }
    Ok(!failed)
}

fn cmd_expect(n: u32, f: u32) -> Result<bool> {
    let q = expected_byzantine_prefix(n, f)?;
    let approx = q.to_f64().context("expectation does not fit in f64")?;
    println!("E[X] for n={n}, f={f}: {q} = {approx}");
    Ok(true)
}

fn cmd_verify(paths: &[PathBuf]) -> Result<bool> {
    let mut failed = false;
    for path in paths {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let trace =
            Trace::read_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
        let violations = check_all(&trace);
        if violations.is_empty() {
            println!("{}: ok ({} records)", path.display(), trace.records.len());
        } else {
            failed = true;
            report_violations(&path.display().to_string(), &violations);
        }
    }
    Ok(!failed)
}

#[cfg(test)]
mod tests {
    use super::SeedRange;

    #[test]
    fn seed_range_forms() {
        let p = |s: &str| s.parse::<SeedRange>().map(|r| r.0);
        assert_eq!(p("2..5").unwrap(), [2, 3, 4]);
        assert_eq!(p("2..=3").unwrap(), [2, 3]);
        assert_eq!(p("7, 1").unwrap(), [7, 1]);
        assert!(p("3..3").is_err());
        assert!(p("x").is_err());
    }
}
