// SPDX-License-Identifier: Apache-2.0

//! `gshare` command-line front end.
//!
//! Exit codes: 0 on success, 1 on invalid input, 2 when a runtime invariant
//! check fails.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use gshare_core::memory_model::{MemoryBook, MemorySpec, SharingMode};
use gshare_core::packer::{self, verify, GpuNode, MatchOutcome, PodRequest, Rect, RestructureOrder};
use gshare_core::profiles::{load_profiles, standard_grid};
use gshare_core::sim::{self, MetricsReport, Policy, RunOptions, Scenario, SimError};
use gshare_core::{FunctionId, PodId};

#[derive(Parser)]
#[command(name = "gshare", version, about = "Spatio-temporal GPU sharing scheduler simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Fast,
    Timeshare,
}

impl From<PolicyArg> for Policy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Fast => Policy::Fast,
            PolicyArg::Timeshare => Policy::Timeshare,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate profile files and print their RPR tables.
    ProfileCheck {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Simulate one or more scenarios.
    Run {
        #[arg(long = "scenario", required = true)]
        scenarios: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        /// Also write per-window backend tables as JSON lines.
        #[arg(long)]
        verbose: bool,
        /// Run independent scenarios on multiple threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Run a scenario under both policies and report them side by side.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Replay place/release/restructure events on one GPU and dump the free
    /// rectangles after each step.
    PackTrace {
        #[arg(long)]
        events: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Raised when a self-check fails; maps to exit code 2.
#[derive(Debug)]
struct InvariantBreach(String);

impl std::fmt::Display for InvariantBreach {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invariant breach: {}", self.0)
    }
}

impl std::error::Error for InvariantBreach {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GSHARE_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let invariant = e.downcast_ref::<InvariantBreach>().is_some()
                || e.downcast_ref::<SimError>().is_some_and(SimError::is_invariant);
            ExitCode::from(if invariant { 2 } else { 1 })
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::ProfileCheck { paths } => profile_check(&paths),
        Command::Run {
            scenarios,
            out,
            seed,
            policy,
            verbose,
            parallel,
        } => run(&scenarios, &out, seed, policy.map(Policy::from), verbose, parallel),
        Command::Compare { scenario, out, seed } => compare(&scenario, &out, seed),
        Command::PackTrace { events, out } => pack_trace(&events, out.as_deref()),
    }
}

fn profile_check(paths: &[PathBuf]) -> Result<()> {
    let grid = standard_grid();
    for path in paths {
        let profiles = load_profiles(path).with_context(|| format!("reading {}", path.display()))?;
        for p in &profiles {
            let warnings = p.monotonicity_warnings();
            println!("{}: {} points, {} warnings", p.function_id(), p.len(), warnings.len());
            let covered = grid.iter().filter(|g| p.entry(**g).is_some()).count();
            println!("  grid coverage: {covered}/{} standard points", grid.len());
            for w in &warnings {
                println!("  warning: {w}");
            }
            println!("  {:>6} {:>6} {:>10} {:>12}", "sm%", "quota", "rps", "rpr");
            for e in p.entries() {
                println!(
                    "  {:>6} {:>6} {:>10.3} {:>12.3}",
                    e.point.sm_partition(),
                    e.point.quota(),
                    e.throughput_rps,
                    p.rpr(e.point)?
                );
            }
        }
    }
    Ok(())
}

fn load_scenario(path: &Path, seed: Option<u64>, policy: Option<Policy>) -> Result<Scenario> {
    let mut sc = Scenario::from_json_path(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = seed {
        sc.seed = seed;
    }
    if let Some(policy) = policy {
        sc.policy = policy;
    }
    Ok(sc)
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv = File::create(dir.join("metrics.csv"))?;
    report.write_csv(BufWriter::new(csv))?;
    fs::write(dir.join("summary.json"), report.summary_json() + "\n")?;
    Ok(())
}

fn headline(name: &str, report: &MetricsReport) {
    let s = &report.summary;
    println!(
        "{name}: policy {}, GPUs used {}, mean utilization {:.3}, SLO violations {:.1}%",
        s.policy, s.peak_gpus_in_use, s.mean_utilization, s.violation_pct
    );
}

fn run(
    paths: &[PathBuf],
    out: &Path,
    seed: Option<u64>,
    policy: Option<Policy>,
    verbose: bool,
    parallel: bool,
) -> Result<()> {
    let scenarios = paths
        .iter()
        .map(|p| load_scenario(p, seed, policy))
        .collect::<Result<Vec<_>>>()?;
    let dirs: Vec<PathBuf> = if paths.len() == 1 {
        vec![out.to_path_buf()]
    } else {
        paths
            .iter()
            .map(|p| out.join(p.file_stem().unwrap_or_default()))
            .collect()
    };
    let outputs: Vec<Result<sim::RunOutput, SimError>> = if parallel && !verbose {
        sim::run_many(&scenarios)
            .into_iter()
            .map(|r| {
                r.map(|report| sim::RunOutput {
                    report,
                    backend_dumps: Vec::new(),
                })
            })
            .collect()
    } else {
        let opts = RunOptions { dump_backend: verbose };
        scenarios.iter().map(|s| sim::run_with(s, opts)).collect()
    };
    for ((path, dir), output) in paths.iter().zip(&dirs).zip(outputs) {
        let output = output.with_context(|| format!("simulating {}", path.display()))?;
        write_report(dir, &output.report)?;
        if verbose {
            let mut w = BufWriter::new(File::create(dir.join("backend.jsonl"))?);
            for dump in &output.backend_dumps {
                serde_json::to_writer(&mut w, dump)?;
                writeln!(w)?;
            }
            w.flush()?;
        }
        headline(&path.display().to_string(), &output.report);
    }
    Ok(())
}

#[derive(Serialize)]
struct PolicyRow<'a> {
    policy: &'a str,
    gpus_used: u64,
    mean_utilization: f64,
    mean_sm_occupancy: f64,
    violation_pct: f64,
}

impl<'a> PolicyRow<'a> {
    fn of(report: &'a MetricsReport) -> Self {
        let s = &report.summary;
        Self {
            policy: &s.policy,
            gpus_used: s.peak_gpus_in_use,
            mean_utilization: s.mean_utilization,
            mean_sm_occupancy: s.mean_sm_occupancy,
            violation_pct: s.violation_pct,
        }
    }
}

fn compare(path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let sc = load_scenario(path, seed, None)?;
    let cmp = sim::compare_policies(&sc)?;
    write_report(&out.join("fast"), &cmp.fast)?;
    write_report(&out.join("timeshare"), &cmp.timeshare)?;
    let rows = [PolicyRow::of(&cmp.fast), PolicyRow::of(&cmp.timeshare)];
    fs::write(out.join("comparison.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    println!(
        "{:<10} {:>9} {:>12} {:>13} {:>10}",
        "policy", "gpus_used", "utilization", "sm_occupancy", "slo_viol%"
    );
    for r in &rows {
        println!(
            "{:<10} {:>9} {:>12.3} {:>13.3} {:>10.2}",
            r.policy, r.gpus_used, r.mean_utilization, r.mean_sm_occupancy, r.violation_pct
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum TraceEvent {
    Place { pod: String, w: u32, h: u32 },
    Release { pod: String },
    Restructure {
        #[serde(default)]
        threshold: Option<usize>,
    },
}

#[derive(Serialize)]
struct TraceStep {
    step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    event: Option<TraceEvent>,
    ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rect: Option<Rect>,
    free_rects: Vec<Rect>,
    oracle: Vec<String>,
}

fn apply_event(node: &mut GpuNode, book: &MemoryBook, fid: &FunctionId, ev: &TraceEvent) -> Result<Option<Rect>> {
    match ev {
        TraceEvent::Place { pod, w, h } => {
            let req = PodRequest::new(PodId::new(pod.as_str()), fid.clone(), *w, *h)?;
            match packer::best_match(std::slice::from_ref(node), &req, book) {
                MatchOutcome::Found { rect, .. } => {
                    packer::place(node, rect, &req)?;
                    Ok(Some(node.placements[&req.pod_id].rect))
                }
                MatchOutcome::NewGpuRequired => bail!("pod {pod} ({w}x{h}) does not fit"),
            }
        }
        TraceEvent::Release { pod } => Ok(Some(packer::release(node, &PodId::new(pod.as_str()))?)),
        TraceEvent::Restructure { threshold } => {
            let t = threshold.unwrap_or(packer::DEFAULT_RESTRUCTURE_THRESHOLD);
            packer::restructure(node, t, RestructureOrder::DescendingArea)?;
            Ok(None)
        }
    }
}

fn pack_trace(events_path: &Path, out: Option<&Path>) -> Result<()> {
    let reader = BufReader::new(File::open(events_path).with_context(|| format!("opening {}", events_path.display()))?);
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: TraceEvent = serde_json::from_str(&line).with_context(|| format!("line {}", i + 1))?;
        events.push(ev);
    }

    let fid = FunctionId::new("trace");
    let book = MemoryBook::new(SharingMode::Shared).with_spec(fid.clone(), MemorySpec::default());
    let mut node = GpuNode::new(0, u64::MAX);
    let mut sink: Box<dyn Write> = match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut breaches = Vec::new();
    let mut emit = |step: usize, event: Option<TraceEvent>, res: Result<Option<Rect>>, node: &GpuNode| -> Result<()> {
        let oracle = verify::check_node(node);
        if !oracle.is_empty() {
            breaches.push(format!("step {step}: {}", oracle.join("; ")));
        }
        let (ok, error, rect) = match res {
            Ok(r) => (true, None, r),
            Err(e) => (false, Some(format!("{e:#}")), None),
        };
        let rec = TraceStep {
            step,
            event,
            ok,
            error,
            rect,
            free_rects: node.free_rects.clone(),
            oracle,
        };
        serde_json::to_writer(&mut sink, &rec)?;
        writeln!(sink)?;
        Ok(())
    };
    emit(0, None, Ok(None), &node)?;
    for (i, ev) in events.into_iter().enumerate() {
        let res = apply_event(&mut node, &book, &fid, &ev);
        emit(i + 1, Some(ev), res, &node)?;
    }
    sink.flush()?;
    if !breaches.is_empty() {
        return Err(InvariantBreach(breaches.join(" | ")).into());
    }
    Ok(())
}
