use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use factor_route::domain::write_jsonl;
use factor_route::factor_config::{parse_factor_list, validate_factor_list, ConfigError, FactorList, GateKind, RetryPolicy};
use factor_route::router::DecisionTrace;
use factor_route::simulator::{
    availability_parallel, availability_serial, check_state_machine, expected_failures, reference_table, replay,
    run_sweep, Conformance, ReplayReport, RunOptions, Scenario, SimMode, SimRun, SweepRow,
};

#[derive(Parser)]
#[command(name = "factor-route", version, about = "Factor-list routing: validate, simulate, replay, explain, model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Expectation,
    Sampled,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a factor-list document.
    Validate {
        config: PathBuf,
        /// Treat lint warnings as violations.
        #[arg(long)]
        strict: bool,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Run a fault-injection scenario and check the preference state machine.
    Simulate {
        scenario: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, env = "FACTOR_ROUTE_SEED")]
        seed: Option<u64>,
        /// Directory for report, traces, events and completion series.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Re-drive a recorded event log through a candidate factor list.
    Replay {
        log: PathBuf,
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Narrate the decision traces of one request.
    Explain { traces: PathBuf, request_id: String },
    /// Closed-form outage and availability figures.
    Model {
        /// Print the five reference failover strategies.
        #[arg(long)]
        table2: bool,
        /// Availabilities for serial and (with two values) parallel composition.
        #[arg(long, num_args = 1..)]
        avail: Vec<f64>,
        /// Requests per minute.
        #[arg(long)]
        lambda: Option<f64>,
        /// Outage duration in minutes.
        #[arg(long)]
        duration: Option<f64>,
        /// Minutes until traffic moves to the secondary.
        #[arg(long)]
        switch: Option<f64>,
        #[arg(long)]
        pf: Option<f64>,
        #[arg(long)]
        ps: Option<f64>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

/// A command that ran but found a problem (exit 1), as opposed to a usage or
/// IO error (exit 2).
#[derive(Debug)]
struct Failed(String);

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failed {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = String::new();
    let result = match cli.command {
        Command::Validate { config, strict, format } => cmd_validate(&config, strict, format, &mut stdout),
        Command::Simulate { scenario, mode, seed, out, format } => cmd_simulate(&scenario, mode, seed, out.as_deref(), format, &mut stdout),
        Command::Replay { log, config, out, format } => cmd_replay(&log, &config, out.as_deref(), format, &mut stdout),
        Command::Explain { traces, request_id } => cmd_explain(&traces, &request_id, &mut stdout),
        Command::Model { table2, avail, lambda, duration, switch, pf, ps, format } => {
            cmd_model(table2, &avail, [lambda, duration, switch, pf, ps], format, &mut stdout)
        }
    };
    print!("{stdout}");
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Failed>() => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn lints(fl: &FactorList) -> Vec<String> {
    let mut out = Vec::new();
    if !fl.has_gate(GateKind::CircuitClosed) {
        out.push("no circuit_closed gate: open circuits will not exclude providers".to_string());
    }
    if fl.control.retry_policy != RetryPolicy::None && !fl.control.idempotent {
        out.push("retry policy set but operation is not idempotent: retries never fire".to_string());
    }
    for s in fl.scores.iter().filter(|s| s.weight == 0.0) {
        out.push(format!("factor `{}` has zero weight", s.name.as_str()));
    }
    out
}

#[derive(Serialize)]
struct ValidateOutput {
    ok: bool,
    version: Option<String>,
    violations: Vec<String>,
    warnings: Vec<String>,
}

fn cmd_validate(path: &Path, strict: bool, format: Format, out: &mut String) -> Result<()> {
    let text = read(path)?;
    let report = match parse_factor_list(&text) {
        Err(ConfigError::Syntax { line, column, message }) => {
            ValidateOutput { ok: false, version: None, violations: vec![format!("{}:{line}:{column}: {message}", path.display())], warnings: vec![] }
        }
        Err(e) => ValidateOutput { ok: false, version: None, violations: vec![format!("{}: {e}", path.display())], warnings: vec![] },
        Ok(fl) => {
            let violations: Vec<String> = match validate_factor_list(&fl) {
                Ok(()) => vec![],
                Err(vs) => vs.iter().map(|v| format!("{}: {v}", path.display())).collect(),
            };
            let warnings = lints(&fl);
            let ok = violations.is_empty() && !(strict && !warnings.is_empty());
            ValidateOutput { ok, version: Some(fl.version.clone()), violations, warnings }
        }
    };
    match format {
        Format::Json => out.push_str(&to_json(&report)),
        _ => {
            for v in &report.violations {
                writeln!(out, "violation: {v}")?;
            }
            for w in &report.warnings {
                writeln!(out, "{}: {w}", if strict { "violation (strict)" } else { "warning" })?;
            }
            if report.ok {
                writeln!(out, "OK, version {}", report.version.as_deref().unwrap_or(""))?;
            }
        }
    }
    if report.ok {
        Ok(())
    } else {
        Err(Failed(format!("{} is not valid", path.display())).into())
    }
}

#[derive(Serialize)]
struct SimOutput<'a> {
    row: Option<&'a SweepRow>,
    report: &'a factor_route::simulator::SimReport,
    conformance: &'a Conformance,
}

fn fmt_opt_ms(v: Option<u64>) -> String {
    v.map_or("none".to_string(), |ms| format!("{ms}ms"))
}

fn write_summary(out: &mut String, run: &SimRun, conformance: &Conformance) -> Result<()> {
    let r = &run.report;
    let mode = match r.mode {
        SimMode::Expectation => "expectation",
        SimMode::Sampled => "sampled",
    };
    writeln!(out, "scenario: {} (mode={mode}, seed={})", r.scenario, r.seed)?;
    writeln!(
        out,
        "  requests={} succeeded={} failed={} fallbacks={} completion_rate={:.4}",
        r.requests, r.succeeded_requests, r.failed_request_count, r.fallback_count, r.completion_rate
    )?;
    writeln!(
        out,
        "  failover_delay={} switches={} flaps={} cost_per_success={}",
        fmt_opt_ms(r.observed_failover_delay_ms),
        r.switch_timeline.len(),
        r.flap_count,
        r.cost_per_success.map_or("n/a".to_string(), |c| format!("{c:.6}"))
    )?;
    for (id, c) in &r.providers {
        writeln!(out, "  provider {id}: attempts={} successes={} failures={} cost={:.4}", c.attempts, c.successes, c.failures, c.cost_total)?;
    }
    let f = &r.failover;
    writeln!(
        out,
        "  failover bound: observed={} bound={}ms (detect={} publish={} aggregate={} refresh={} decision={}) {}",
        fmt_opt_ms(f.observed_ms),
        f.bound_ms,
        f.terms.detect_ms,
        f.terms.publish_ms,
        f.terms.aggregate_ms,
        f.terms.refresh_ms,
        f.terms.decision_ms,
        match (f.automatic, f.respected) {
            (false, _) => "n/a (operator-driven)",
            (true, true) => "respected",
            (true, false) => "VIOLATED",
        }
    )?;
    if let Some(a) = &r.analytical {
        let mut line = format!(
            "  analytical: expected_failures={:.0} simulated_failures={} (lambda={} D={:.3}min T={:.3}min p_f={} p_s={})",
            a.expected_failures, a.simulated_failures, a.lambda_per_min, a.duration_min, a.switch_min, a.p_f, a.p_s
        );
        if let Some(reference) = a.reference_failures {
            if (reference - a.expected_failures.round()).abs() > 0.5 {
                write!(line, " (reference table row: {reference:.0}, see README)")?;
            } else {
                write!(line, " (reference table row: {reference:.0})")?;
            }
        }
        writeln!(out, "{line}")?;
    }
    let labels: Vec<String> = conformance.transitions.iter().map(|t| format!("{}@{}:{}", t.label, t.region, t.ts)).collect();
    if conformance.conformant() {
        writeln!(out, "  state machine: conformant [{}]", labels.join(" "))?;
    } else {
        writeln!(out, "  state machine: {} nonconforming transition(s)", conformance.violations.len())?;
        for v in conformance.violations.iter().take(10) {
            writeln!(out, "    {}@{} in {:?}: {}", v.region, v.ts, v.state, v.evidence)?;
        }
        if conformance.violations.len() > 10 {
            writeln!(out, "    ... {} more", conformance.violations.len() - 10)?;
        }
    }
    Ok(())
}

fn write_run_files(dir: &Path, run: &SimRun, conformance: &Conformance, row: Option<&SweepRow>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let io = |name: &str, body: Vec<u8>| fs::write(dir.join(name), body).with_context(|| format!("cannot write {}", dir.join(name).display()));
    io("report.json", to_json(&SimOutput { row, report: &run.report, conformance }).into_bytes())?;
    io("completion.csv", run.report.completion_csv().into_bytes())?;
    let mut traces = Vec::new();
    write_jsonl(&mut traces, &run.traces)?;
    io("traces.jsonl", traces)?;
    let mut events = Vec::new();
    write_jsonl(&mut events, &run.events)?;
    io("events.jsonl", events)?;
    Ok(())
}

fn cmd_simulate(path: &Path, mode: Option<ModeArg>, seed: Option<u64>, out_dir: Option<&Path>, format: Format, out: &mut String) -> Result<()> {
    let scenario = Scenario::load(path).map_err(|e| anyhow!("{e}"))?;
    let opts = RunOptions {
        mode: mode.map(|m| match m {
            ModeArg::Expectation => SimMode::Expectation,
            ModeArg::Sampled => SimMode::Sampled,
        }),
        seed,
        record_traces: true,
    };
    let runs = run_sweep(&scenario, opts).map_err(|e| anyhow!("{e}"))?;
    let mut nonconforming = 0;
    let mut outputs = Vec::new();
    for (i, (row, run)) in runs.iter().enumerate() {
        let variant = row.as_ref().map_or_else(|| scenario.clone(), |_| scenario.expand_sweep().swap_remove(i).1);
        let conformance = check_state_machine(run, &variant).map_err(|e| anyhow!("{e}"))?;
        if !conformance.conformant() {
            nonconforming += 1;
        }
        if let Some(dir) = out_dir {
            let dir = if runs.len() > 1 { dir.join(format!("row-{i}")) } else { dir.to_path_buf() };
            write_run_files(&dir, run, &conformance, row.as_ref())?;
        }
        outputs.push(conformance);
    }
    match format {
        Format::Text => {
            for ((_, run), conformance) in runs.iter().zip(&outputs) {
                write_summary(out, run, conformance)?;
            }
        }
        Format::Json => {
            let v: Vec<SimOutput<'_>> = runs
                .iter()
                .zip(&outputs)
                .map(|((row, run), conformance)| SimOutput { row: row.as_ref(), report: &run.report, conformance })
                .collect();
            out.push_str(&to_json(&v));
        }
        Format::Csv => {
            out.push_str("row,");
            out.push_str(runs[0].1.report.completion_csv().lines().next().unwrap_or_default());
            out.push('\n');
            for (i, (_, run)) in runs.iter().enumerate() {
                for line in run.report.completion_csv().lines().skip(1) {
                    writeln!(out, "{i},{line}")?;
                }
            }
        }
    }
    if nonconforming > 0 {
        return Err(Failed(format!("{nonconforming} run(s) with nonconforming state transitions")).into());
    }
    Ok(())
}

fn cmd_replay(log: &Path, config: &Path, out_dir: Option<&Path>, format: Format, out: &mut String) -> Result<()> {
    let candidate = parse_factor_list(&read(config)?).map_err(|e| anyhow!("{}: {e}", config.display()))?;
    let (report, run) = replay(log, &candidate).map_err(|e| anyhow!("{}: {e}", log.display()))?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        fs::write(dir.join("replay.json"), to_json(&report))?;
        let mut traces = Vec::new();
        write_jsonl(&mut traces, &run.traces)?;
        fs::write(dir.join("traces.jsonl"), traces)?;
    }
    match format {
        Format::Json => out.push_str(&to_json(&report)),
        _ => write_replay_summary(out, &report)?,
    }
    Ok(())
}

fn write_replay_summary(out: &mut String, r: &ReplayReport) -> Result<()> {
    writeln!(out, "{} diffs out of {} decisions ({:.2}%)", r.decision_diffs, r.requests, r.diff_fraction * 100.0)?;
    writeln!(out, "substituted outcomes: {} attempts across {} requests", r.substituted_attempts, r.substituted_requests)?;
    writeln!(
        out,
        "switches: recorded={} replayed={} added={} removed={}",
        r.recorded_switches, r.replay_switches, r.switches_added, r.switches_removed
    )?;
    writeln!(out, "flaps: recorded={} replayed={} delta={:+}", r.recorded_flaps, r.replay_flaps, r.flap_delta)?;
    writeln!(
        out,
        "failed requests: recorded={} replayed_expected={:.1} delta={:+.1}",
        r.recorded_failures, r.replay_expected_failures, r.expected_failure_delta
    )?;
    for d in r.diffs.iter().take(10) {
        writeln!(out, "  {} @{} {}: {} -> {}", d.request_id, d.ts, d.region, d.recorded, d.replayed)?;
    }
    if r.diffs.len() > 10 {
        writeln!(out, "  ... {} more", r.diffs.len() - 10)?;
    }
    Ok(())
}

fn narrate(out: &mut String, t: &DecisionTrace) -> Result<()> {
    writeln!(out, "trace {} (request {}, attempt {}, {} in {})", t.trace_id, t.request_id, t.attempt, t.operation, t.region)?;
    writeln!(out, "  config version: {}", t.factor_list_version)?;
    match t.snapshot_ts {
        Some(ts) => writeln!(
            out,
            "  snapshot: {} age={}ms{}",
            t.snapshot_id,
            t.timestamp.saturating_sub(ts),
            if t.snapshot_stale { " (stale)" } else { "" }
        )?,
        None => writeln!(out, "  snapshot: none published (stale)")?,
    }
    if let Some(p) = t.stale_policy_applied {
        writeln!(out, "  stale policy applied: {p:?}")?;
    }
    let mut providers: Vec<_> = t.gate_results.iter().map(|g| &g.provider).collect();
    providers.dedup();
    writeln!(out, "  gates:")?;
    for p in providers {
        let eligible = t.eligible(p);
        writeln!(out, "    {p}: {}", if eligible { "eligible" } else { "excluded" })?;
        for g in t.gate_results.iter().filter(|g| &g.provider == p) {
            let status = if g.passed { "pass" } else { "FAIL" };
            if g.reason.is_empty() {
                writeln!(out, "      {status} {}", g.gate)?;
            } else {
                writeln!(out, "      {status} {}: {}", g.gate, g.reason)?;
            }
        }
    }
    if !t.candidates.is_empty() {
        writeln!(out, "  scores:")?;
    }
    for c in &t.candidates {
        writeln!(out, "    {} total={:.4}", c.provider, c.total)?;
        for f in &c.per_factor {
            let raw = f.raw.map_or("n/a".to_string(), |r| format!("{r:.4}"));
            writeln!(
                out,
                "      {}: raw={raw} -> normalized={:.4} x weight={:.2} = {:.4}{}",
                f.factor.as_str(),
                f.normalized,
                f.weight,
                f.normalized * f.weight,
                if f.used_default { " (default)" } else { "" }
            )?;
        }
    }
    if !t.avoided.is_empty() {
        let avoided: Vec<String> = t.avoided.iter().map(|p| p.to_string()).collect();
        writeln!(out, "  avoided after failed attempts: {}", avoided.join(", "))?;
    }
    writeln!(
        out,
        "  previous choice: {}; hysteresis applied: {}; challenger streak: {}",
        t.previous_choice.as_ref().map_or("none".to_string(), |p| p.to_string()),
        if t.hysteresis_applied { "yes" } else { "no" },
        t.challenger_streak
    )?;
    writeln!(out, "  tie-break: {}", t.tie_break_applied.map_or("none", |r| r.as_str()))?;
    if t.probe {
        writeln!(out, "  half-open probe")?;
    }
    match (&t.selected, t.fallback) {
        (Some(p), _) => writeln!(out, "  selected: {p}")?,
        (None, Some(f)) => {
            writeln!(out, "  fallback: {} ({})", f.as_str(), t.note.as_deref().unwrap_or("no eligible providers"))?;
        }
        (None, None) => writeln!(out, "  no selection recorded")?,
    }
    if let (Some(note), Some(_)) = (&t.note, &t.selected) {
        writeln!(out, "  note: {note}")?;
    }
    Ok(())
}

fn cmd_explain(path: &Path, request_id: &str, out: &mut String) -> Result<()> {
    let file = fs::File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
    let (traces, _) = factor_route::domain::read_jsonl::<DecisionTrace, _>(std::io::BufReader::new(file), false)?;
    let matching: Vec<&DecisionTrace> = traces.iter().filter(|t| t.request_id == request_id).collect();
    if matching.is_empty() {
        return Err(Failed(format!("request_not_found: {request_id}")).into());
    }
    for t in matching {
        narrate(out, t)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ModelOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    table: Option<Vec<factor_route::simulator::ModelRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    serial: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    parallel: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    expected_failures: Option<f64>,
}

fn cmd_model(table2: bool, avail: &[f64], outage: [Option<f64>; 5], format: Format, out: &mut String) -> Result<()> {
    let mut result = ModelOutput { table: None, serial: None, parallel: None, expected_failures: None };
    if table2 {
        result.table = Some(reference_table());
    }
    if !avail.is_empty() {
        result.serial = Some(availability_serial(avail)?);
        if avail.len() == 2 {
            result.parallel = Some(availability_parallel(avail[0], avail[1])?);
        }
    }
    if outage.iter().any(Option::is_some) {
        let names = ["--lambda", "--duration", "--switch", "--pf", "--ps"];
        let missing: Vec<&str> = names.iter().zip(outage).filter(|(_, v)| v.is_none()).map(|(n, _)| *n).collect();
        if !missing.is_empty() {
            return Err(anyhow!("missing {}", missing.join(", ")));
        }
        let [l, d, t, pf, ps] = outage.map(|v| v.unwrap_or_default());
        result.expected_failures = Some(expected_failures(l, d, t, pf, ps)?);
    }
    if result.table.is_none() && result.serial.is_none() && result.expected_failures.is_none() {
        return Err(anyhow!("nothing to compute: pass --table2, --avail or the outage parameters"));
    }
    if format == Format::Json {
        out.push_str(&to_json(&result));
        return Ok(());
    }
    if let Some(rows) = &result.table {
        writeln!(out, "{:<32} {:>10} {:>18}", "strategy", "switch_min", "expected_failures")?;
        for r in rows {
            let mark = match r.reference {
                Some(reference) if (reference - r.expected_failures.round()).abs() > 0.5 => "*",
                _ => "",
            };
            writeln!(out, "{:<32} {:>10} {:>17.0}{mark}", r.label, r.switch_min, r.expected_failures)?;
        }
        for r in rows {
            if let Some(reference) = r.reference.filter(|reference| (reference - r.expected_failures.round()).abs() > 0.5) {
                writeln!(
                    out,
                    "* the reference table prints {reference:.0} for this row; the closed form with the same parameters gives {:.0}",
                    r.expected_failures
                )?;
            }
        }
        writeln!(out, "lambda=1000/min D=10min p_f=0.05 p_s=0.99")?;
    }
    if let Some(s) = result.serial {
        writeln!(out, "serial availability: {s:.6}")?;
    }
    if let Some(p) = result.parallel {
        writeln!(out, "parallel availability: {p:.6}")?;
    }
    if let Some(e) = result.expected_failures {
        writeln!(out, "expected_failures: {e:.2}")?;
    }
    Ok(())
}
