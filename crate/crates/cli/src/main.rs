//! `trigfarm`: validate, run, serve and replay farm scenarios.
//!
//! Exit codes: 0 clean completion, 1 configuration or usage error,
//! 2 conservation violation, 3 any other simulation failure.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use trigfarm_api::{router, DriverOptions, SimHandle};
use trigfarm_core::control::{parse_command_log, Speed};
use trigfarm_core::kernel::{RunError, TraceSink};
use trigfarm_core::metrics::RunReport;
use trigfarm_core::runner::{replay, ReplayError, Runner};
use trigfarm_core::scenario::{load_scenario, Scenario};
use trigfarm_core::sim::{SimError, Simulation};

#[derive(Parser)]
#[command(name = "trigfarm", version, about = "Trigger farm simulator with a hierarchical fault-management plane")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario and print it with every default filled in.
    Validate { scenario: PathBuf },
    /// Run a scenario to completion as fast as possible.
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        out: Outputs,
    },
    /// Run a scenario paced against the wall clock with the HTTP API live.
    Serve(ServeArgs),
    /// Re-run a scenario with a command log recorded by `serve`.
    Replay {
        scenario: PathBuf,
        command_log: PathBuf,
        #[command(flatten)]
        out: Outputs,
        // Accepted only to reject them with a clear message.
        #[arg(long, hide = true)]
        seed: Option<String>,
        #[arg(long, hide = true)]
        duration: Option<String>,
        #[arg(long, hide = true)]
        speed: Option<String>,
    },
    /// Print the headline numbers of a saved run report, one `key<TAB>value` per line.
    Report { report: PathBuf },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated seconds.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct Outputs {
    /// NDJSON event trace.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Run report JSON; stdout when absent.
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    scenario: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[command(flatten)]
    out: Outputs,
    /// Real-time factor, or `max`.
    #[arg(long, default_value = "1")]
    speed: Speed,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
    /// Directory served at `/` next to the API, e.g. the built console.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    /// Where to write the operator command log on exit.
    #[arg(long)]
    command_log: Option<PathBuf>,
    /// Wait for a resume command before advancing.
    #[arg(long)]
    paused: bool,
    /// Stop serving once the run reaches its end.
    #[arg(long)]
    exit_on_finish: bool,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Conservation(String),
    Sim(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Conservation(_) => 2,
            Failure::Sim(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Conservation(m) | Failure::Sim(m) => m,
        }
    }
}

impl From<RunError<SimError>> for Failure {
    fn from(e: RunError<SimError>) -> Self {
        match &e {
            RunError::Handler { source: SimError::Conservation(_), .. } => Failure::Conservation(e.to_string()),
            _ => Failure::Sim(e.to_string()),
        }
    }
}

fn config(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Validate { scenario } => validate(&scenario),
        Command::Run { scenario, overrides, out } => run(&scenario, &overrides, &out),
        Command::Serve(args) => serve(args),
        Command::Replay { scenario, command_log, out, seed, duration, speed } => {
            if seed.is_some() || duration.is_some() || speed.is_some() {
                Err(Failure::Config("replay takes no --seed, --duration or --speed overrides; the scenario and command log fix the run".into()))
            } else {
                replay_run(&scenario, &command_log, &out)
            }
        }
        Command::Report { report } => summarise(&report),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn load(path: &Path, overrides: &Overrides) -> Result<Scenario, Failure> {
    let mut scenario = load_scenario(path).map_err(config)?;
    if let Some(seed) = overrides.seed {
        scenario.seed = seed;
    }
    if let Some(d) = overrides.duration {
        scenario.duration_s = d;
    }
    scenario.validate().map_err(config)?;
    Ok(scenario)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| config(format!("cannot create {}: {e}", path.display())))
}

fn simulation(scenario: Scenario, out: &Outputs) -> Result<Simulation, Failure> {
    let sink = match &out.trace_out {
        Some(p) => TraceSink::to_writer(Box::new(create(p)?)),
        None => TraceSink::digest(),
    };
    Ok(Simulation::new(scenario).map_err(config)?.with_trace(sink))
}

/// Writes the report and trace whatever happened, then surfaces the run error.
fn finish(mut sim: Simulation, outcome: Result<(), Failure>, out: &Outputs) -> Result<(), Failure> {
    write_report(&sim.report(), out)?;
    if let Some(trace) = sim.take_trace() {
        let records = trace.records();
        let digest = trace.finish().map_err(|e| config(format!("trace write failed: {e}")))?;
        eprintln!("trace: {records} records, sha256 {digest}");
    }
    outcome
}

fn write_report(report: &RunReport, out: &Outputs) -> Result<(), Failure> {
    let text = report.to_json_pretty();
    match &out.report_out {
        Some(p) => {
            let mut w = create(p)?;
            writeln!(w, "{text}").and_then(|_| w.flush()).map_err(config)
        }
        None => writeln!(io::stdout(), "{text}").map_err(config),
    }
}

fn validate(path: &Path) -> Result<(), Failure> {
    let scenario = load_scenario(path).map_err(config)?;
    println!("{}", scenario.to_json_pretty());
    Ok(())
}

fn run(path: &Path, overrides: &Overrides, out: &Outputs) -> Result<(), Failure> {
    let mut sim = simulation(load(path, overrides)?, out)?;
    let outcome = sim.run_to_end().map(|_| ()).map_err(Failure::from);
    finish(sim, outcome, out)
}

fn replay_run(path: &Path, log_path: &Path, out: &Outputs) -> Result<(), Failure> {
    let scenario = load_scenario(path).map_err(config)?;
    let text = std::fs::read_to_string(log_path).map_err(|e| config(format!("cannot read {}: {e}", log_path.display())))?;
    let log = parse_command_log(&text).map_err(config)?;
    let mut sim = simulation(scenario, out)?;
    let outcome = match replay(&mut sim, &log) {
        Ok(_) => Ok(()),
        Err(ReplayError::Run(e)) => Err(Failure::from(e)),
        Err(e) => Err(config(e)),
    };
    finish(sim, outcome, out)
}

fn serve(args: ServeArgs) -> Result<(), Failure> {
    let sim = simulation(load(&args.scenario, &args.overrides)?, &args.out)?;
    let mut runner = Runner::new(sim, args.speed);
    if args.paused {
        runner = runner.start_paused();
    }
    let rt = tokio::runtime::Runtime::new().map_err(config)?;
    let stopped = rt.block_on(async {
        let listener = trigfarm_api::bind(&args.bind).await.map_err(config)?;
        let local = listener.local_addr().map_err(config)?;
        let handle = SimHandle::spawn(runner, DriverOptions::default());
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let server = tokio::spawn(trigfarm_api::serve(listener, router(handle.client(), args.static_dir.clone()), async {
            let _ = stop_rx.await;
        }));
        eprintln!("listening on http://{local}/v1");

        let client = handle.client();
        let exit_on_finish = args.exit_on_finish;
        tokio::select! {
            _ = tokio::signal::ctrl_c() => eprintln!("interrupted"),
            _ = async { if exit_on_finish { client.finished().await; } else { std::future::pending::<()>().await } } => {}
        }
        let _ = stop_tx.send(());
        // Event streams never end on their own, so give up on them quickly.
        let _ = tokio::time::timeout(Duration::from_secs(1), server).await;
        Ok::<_, Failure>(handle.shutdown())
    })?;
    rt.shutdown_timeout(Duration::from_millis(100));

    let runner = stopped.runner;
    if let Some(p) = &args.command_log {
        let mut w = create(p)?;
        for entry in runner.command_log() {
            writeln!(w, "{}", entry.to_line()).map_err(config)?;
        }
        w.flush().map_err(config)?;
    }
    let outcome = match (stopped.error, runner.sim().failure()) {
        (Some(e), _) => Err(Failure::from(e)),
        (None, Some(m)) if m.contains("conservation") => Err(Failure::Conservation(m.to_string())),
        (None, Some(m)) => Err(Failure::Sim(m.to_string())),
        (None, None) => Ok(()),
    };
    finish(runner.into_sim(), outcome, &args.out)
}

fn summarise(path: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| config(format!("cannot read {}: {e}", path.display())))?;
    let r: RunReport = serde_json::from_str(&text).map_err(|e| config(format!("{} is not a run report: {e}", path.display())))?;
    let mut out = io::stdout().lock();
    let mut line = |k: &str, v: String| writeln!(out, "{k}\t{v}");
    let latency = |l: &Option<trigfarm_core::metrics::LatencySummary>| match l {
        Some(l) => format!("n={} mean={:.3}s max={:.3}s", l.count, l.mean_s, l.max_s),
        None => "-".into(),
    };
    let write = (|| {
        line("scenario", r.scenario.clone())?;
        line("seed", r.seed.to_string())?;
        line("duration_s", r.duration_s.to_string())?;
        line("events", r.events_delivered.to_string())?;
        line("generated", r.crossings.generated.to_string())?;
        line("accepted_l3", r.crossings.accepted_l3.to_string())?;
        line("drop_fraction", format!("{:.3e}", r.drop_fraction))?;
        line("uptime", format!("{:.6}", r.uptime))?;
        line("utilization_l1", format!("{:.4}", r.utilization.l1))?;
        line("utilization_l23", format!("{:.4}", r.utilization.l23))?;
        line("faults", r.faults.len().to_string())?;
        line("detection", latency(&r.detection_latency))?;
        line("recovery", latency(&r.recovery_latency))?;
        line("escalations_to_regional", r.reports.escalations_to_regional.to_string())?;
        line("escalations_to_global", r.reports.escalations_to_global.to_string())?;
        line("directives", r.directives.len().to_string())?;
        for f in &r.faults {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
            line(&format!("fault.{}", f.id), format!("{} {} onset={:.3} detect={} recover={}", f.kind, f.target, f.onset_s, opt(f.detection_latency_s), opt(f.recovery_latency_s)))?;
        }
        Ok::<_, io::Error>(())
    })();
    write.map_err(config)
}
