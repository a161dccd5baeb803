//! Experiment runner. Runs a canned experiment family over one or more
//! seeds and emits CSV, or replays a scenario file and reports what
//! happened. Exit code 0 means clean, 1 means a run violated its checks,
//! 2 means the invocation itself was bad.

use std::fs;
use std::process::ExitCode;

use clap::Parser;

use cbgrr::exp::{self, ExpOutput, ExpParams, ScenarioKind};
use cbgrr::sim::{self, scenario, ProtocolKind};

#[derive(Parser)]
#[command(name = "cbgrr-exp", version, about = "broadcast request-reply experiment runner")]
struct Cli {
    /// Experiment family: rr-throughput, n1-polling, join-cost, fault-properties
    #[arg(long, default_value = "rr-throughput")]
    scenario: String,

    /// Protocol: cbgrr, rup-seq, rup-par, uup-par
    #[arg(long, default_value = "cbgrr")]
    protocol: String,

    /// Group size
    #[arg(short, default_value_t = 3)]
    n: u8,

    /// Rounds per run (randomized runs for fault-properties)
    #[arg(long, default_value_t = 100)]
    rounds: u64,

    /// Request payload bytes
    #[arg(long, default_value_t = 256)]
    payload: usize,

    /// Reply payload bytes
    #[arg(long, default_value_t = 16)]
    reply: usize,

    /// Per-receiver frame loss probability
    #[arg(long, default_value_t = 0.0)]
    loss: f64,

    /// Seeds: comma-separated values and a..b ranges, e.g. 1,5,100..109
    #[arg(long, default_value = "1")]
    seed: String,

    /// Round-trip message time bound in microseconds
    #[arg(long, default_value_t = 15_000)]
    msgt: u64,

    /// Fault detection latency bound in microseconds
    #[arg(long, default_value_t = 100_000)]
    faultdetectt: u64,

    /// Request processing time in microseconds
    #[arg(long, default_value_t = 1_000)]
    proct: u64,

    /// Write CSV here instead of stdout
    #[arg(long)]
    out: Option<String>,

    /// Run a scenario file instead of a canned experiment
    #[arg(long, conflicts_with = "scenario")]
    file: Option<String>,

    /// With --file: dump the full event trace
    #[arg(long, default_value_t = false)]
    trace: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(clean) => {
            if clean {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<bool, String> {
    if let Some(path) = &cli.file {
        return run_file(path, cli.trace);
    }

    let scenario = ScenarioKind::parse(&cli.scenario)
        .ok_or_else(|| format!("unknown scenario {:?}", cli.scenario))?;
    let protocol = ProtocolKind::parse(&cli.protocol)
        .ok_or_else(|| format!("unknown protocol {:?}", cli.protocol))?;
    let seeds = exp::parse_seeds(&cli.seed)?;

    let params = ExpParams {
        scenario,
        protocol,
        n: cli.n,
        rounds: cli.rounds,
        payload_len: cli.payload,
        reply_len: cli.reply,
        loss: cli.loss,
        seeds,
        msg_t: cli.msgt,
        fault_detect_t: cli.faultdetectt,
        proc_t: cli.proct,
    };

    match exp::run_scenario(&params).map_err(|e| e.to_string())? {
        ExpOutput::Metrics(rows) => {
            let mut csv = String::from(exp::csv_header());
            csv.push('\n');
            for row in &rows {
                csv.push_str(&row.csv_row());
                csv.push('\n');
            }
            emit(cli, &csv)?;
            Ok(true)
        }
        ExpOutput::Campaign(outcome) => {
            println!("fault-properties: {} runs, {} failed", outcome.runs, outcome.failures.len());
            for f in &outcome.failures {
                println!("FAIL {} seed={}", f.label, f.seed);
                for v in &f.violations {
                    println!("  violation: {v}");
                }
                for line in &f.trace_tail {
                    println!("  | {line}");
                }
            }
            Ok(outcome.passed())
        }
    }
}

fn run_file(path: &str, dump_trace: bool) -> Result<bool, String> {
    let cfg = scenario::load(path).map_err(|e| e.to_string())?;
    let rep = sim::run(cfg).map_err(|e| e.to_string())?;
    if dump_trace {
        for line in rep.trace.lines() {
            println!("{line}");
        }
    }
    println!(
        "end={}us sends={} deliveries={} drops={} rounds={} timed_out={}",
        rep.end_time,
        rep.counters.total_sends,
        rep.counters.deliveries,
        rep.counters.drops,
        rep.rounds.len(),
        rep.timed_out,
    );
    for (node, state) in &rep.final_states {
        println!("node {node}: {state}");
    }
    for v in &rep.violations {
        println!("violation: {v}");
    }
    Ok(rep.violations.is_empty() && !rep.timed_out)
}

fn emit(cli: &Cli, csv: &str) -> Result<(), String> {
    match &cli.out {
        Some(path) => fs::write(path, csv).map_err(|e| format!("writing {path}: {e}")),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
