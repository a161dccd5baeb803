//! Experiment drivers and metrics.
//!
//! Four canned experiment families cover the questions the simulator is
//! built to answer:
//!
//! * `rr-throughput`: request-reply rounds back to back, measuring frame
//!   cost, latency, and application throughput per protocol and group size.
//! * `n1-polling`: the inbound data-collection direction. The broadcast
//!   protocol polls all members (one request, N-1 slotted replies, nothing
//!   lost); the unreliable-unicast alternative has every member stream
//!   datagrams at the collector and takes the losses.
//! * `join-cost`: a batch of joiners against an established group, measuring
//!   admission traffic and the delay from poll to full membership.
//! * `fault-properties`: randomized crash/leave/join campaigns plus pinned
//!   adversarial schedules, run under the online invariant monitor. The
//!   outcome is the list of runs whose invariants broke, which should be
//!   empty.
//!
//! Every run is a deterministic function of its seed, so any reported
//! failure can be replayed bit-for-bit from the seed alone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sim::{
    self, DstSpec, FaultTrigger, ProtocolKind, ScriptEvent, ScriptOp, SimConfig, SimError, SimReport,
    TraceKind, Workload,
};

/// Experiment family selector.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum ScenarioKind {
    RrThroughput,
    N1Polling,
    JoinCost,
    FaultProperties,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::RrThroughput => "rr-throughput",
            ScenarioKind::N1Polling => "n1-polling",
            ScenarioKind::JoinCost => "join-cost",
            ScenarioKind::FaultProperties => "fault-properties",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rr-throughput" => Some(ScenarioKind::RrThroughput),
            "n1-polling" => Some(ScenarioKind::N1Polling),
            "join-cost" => Some(ScenarioKind::JoinCost),
            "fault-properties" => Some(ScenarioKind::FaultProperties),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExpParams {
    pub scenario: ScenarioKind,
    pub protocol: ProtocolKind,
    pub n: u8,
    /// Rounds per run; for `fault-properties` the number of randomized runs.
    pub rounds: u64,
    pub payload_len: usize,
    pub reply_len: usize,
    pub loss: f64,
    pub seeds: Vec<u64>,
    pub msg_t: u64,
    pub fault_detect_t: u64,
    pub proc_t: u64,
}

impl Default for ExpParams {
    fn default() -> Self {
        ExpParams {
            scenario: ScenarioKind::RrThroughput,
            protocol: ProtocolKind::Cbgrr,
            n: 3,
            rounds: 100,
            payload_len: 256,
            reply_len: 16,
            loss: 0.0,
            seeds: vec![1],
            msg_t: 15_000,
            fault_detect_t: 100_000,
            proc_t: 1_000,
        }
    }
}

/// One run's worth of comparable numbers. Optional fields stay empty in the
/// CSV when the scenario does not produce them.
#[derive(Clone, Debug)]
pub struct RunMetrics {
    pub scenario: &'static str,
    pub protocol: &'static str,
    pub n: u8,
    pub seed: u64,
    pub total_tx: u64,
    pub throughput_bps: Option<f64>,
    pub latency_min_us: Option<f64>,
    pub latency_mean_us: Option<f64>,
    pub latency_max_us: Option<f64>,
    pub latency_stddev_us: Option<f64>,
    pub node_delay_mean_us: Option<f64>,
    pub join_delay_mean_us: Option<f64>,
    pub group_update_delay_us: Option<f64>,
    pub delivered_fraction: Option<f64>,
}

pub fn csv_header() -> &'static str {
    "scenario,protocol,n,seed,total_tx,throughput_bps,latency_min_us,latency_mean_us,\
     latency_max_us,latency_stddev_us,node_delay_mean_us,join_delay_mean_us,\
     group_update_delay_us,delivered_fraction"
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_default()
}

impl RunMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.scenario,
            self.protocol,
            self.n,
            self.seed,
            self.total_tx,
            opt(self.throughput_bps),
            opt(self.latency_min_us),
            opt(self.latency_mean_us),
            opt(self.latency_max_us),
            opt(self.latency_stddev_us),
            opt(self.node_delay_mean_us),
            opt(self.join_delay_mean_us),
            opt(self.group_update_delay_us),
            opt(self.delivered_fraction),
        )
    }
}

pub fn mean(xs: &[u64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<u64>() as f64 / xs.len() as f64
}

pub fn stddev(xs: &[u64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / xs.len() as f64;
    var.sqrt()
}

/// Everything a failed campaign run needs to be reproduced and triaged.
#[derive(Clone, Debug)]
pub struct CampaignFailure {
    pub label: String,
    pub seed: u64,
    pub violations: Vec<String>,
    pub trace_tail: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct CampaignOutcome {
    pub runs: u64,
    pub failures: Vec<CampaignFailure>,
}

impl CampaignOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub enum ExpOutput {
    Metrics(Vec<RunMetrics>),
    Campaign(CampaignOutcome),
}

pub fn run_scenario(p: &ExpParams) -> Result<ExpOutput, SimError> {
    match p.scenario {
        ScenarioKind::RrThroughput => rr_throughput(p).map(ExpOutput::Metrics),
        ScenarioKind::N1Polling => n1_polling(p).map(ExpOutput::Metrics),
        ScenarioKind::JoinCost => join_cost(p).map(ExpOutput::Metrics),
        ScenarioKind::FaultProperties => {
            let base = p.seeds.first().copied().unwrap_or(1);
            Ok(ExpOutput::Campaign(fault_campaign(p.rounds, base, None)?))
        }
    }
}

fn base_config(p: &ExpParams, seed: u64) -> SimConfig {
    SimConfig {
        n: p.n,
        initial_members: (1..=p.n).collect(),
        protocol: p.protocol,
        msg_t: p.msg_t,
        fault_detect_t: p.fault_detect_t,
        proc_t: p.proc_t,
        loss: p.loss,
        seed,
        reply_len: p.reply_len,
        monitor: p.protocol == ProtocolKind::Cbgrr,
        ..SimConfig::default()
    }
}

// ---- rr-throughput ----

pub fn rr_throughput(p: &ExpParams) -> Result<Vec<RunMetrics>, SimError> {
    let mut out = Vec::new();
    for &seed in &p.seeds {
        let mut cfg = base_config(p, seed);
        cfg.workload = Workload::Rounds { count: p.rounds, payload_len: p.payload_len };
        let rep = sim::run(cfg)?;
        out.push(round_metrics(ScenarioKind::RrThroughput, p, seed, &rep));
    }
    Ok(out)
}

fn round_metrics(scenario: ScenarioKind, p: &ExpParams, seed: u64, rep: &SimReport) -> RunMetrics {
    let lat = rep.round_latencies();
    let (thr, frac) = round_throughput(p, rep);
    RunMetrics {
        scenario: scenario.name(),
        protocol: p.protocol.name(),
        n: p.n,
        seed,
        total_tx: rep.counters.total_sends,
        throughput_bps: thr,
        latency_min_us: lat.iter().min().map(|&x| x as f64),
        latency_mean_us: (!lat.is_empty()).then(|| mean(&lat)),
        latency_max_us: lat.iter().max().map(|&x| x as f64),
        latency_stddev_us: (!lat.is_empty()).then(|| stddev(&lat)),
        node_delay_mean_us: node_delay_mean(rep),
        join_delay_mean_us: None,
        group_update_delay_us: None,
        delivered_fraction: frac,
    }
}

/// Application-level bits moved per second of round traffic, and the
/// fraction of expected replies that actually came back.
fn round_throughput(p: &ExpParams, rep: &SimReport) -> (Option<f64>, Option<f64>) {
    if rep.rounds.is_empty() {
        return (None, None);
    }
    let start = rep.rounds.iter().map(|r| r.start).min().unwrap();
    let end = rep.rounds.iter().map(|r| r.end).max().unwrap();
    if end <= start {
        return (None, None);
    }
    let replies: u64 = rep.rounds.iter().map(|r| r.replies as u64).sum();
    let bytes = rep.rounds.len() as u64 * p.payload_len as u64 + replies * p.reply_len as u64;
    let thr = bytes as f64 * 8.0 * 1_000_000.0 / (end - start) as f64;
    let expected = rep.rounds.len() as u64 * (p.n as u64 - 1);
    let frac = if expected > 0 { Some(replies as f64 / expected as f64) } else { None };
    (Some(thr), frac)
}

/// Mean delay from a round's start to each individual reply arriving back at
/// the collecting node. Only meaningful while node 1 stays coordinator.
fn node_delay_mean(rep: &SimReport) -> Option<f64> {
    let mut delays: Vec<u64> = Vec::new();
    let mut rounds = rep.rounds.iter().peekable();
    for rec in rep.trace.records() {
        let is_reply_at_collector = rec.node == 1
            && matches!(&rec.kind, TraceKind::Recv { tag, .. } if *tag == "ARPL" || *tag == "RRPL" || *tag == "UMSG");
        if !is_reply_at_collector {
            continue;
        }
        while let Some(r) = rounds.peek() {
            if r.end < rec.time {
                rounds.next();
            } else {
                break;
            }
        }
        if let Some(r) = rounds.peek() {
            if r.start <= rec.time && rec.time <= r.end {
                delays.push(rec.time - r.start);
            }
        }
    }
    (!delays.is_empty()).then(|| mean(&delays))
}

// ---- n1-polling ----

/// Inbound data collection. With the broadcast protocol the collector polls:
/// one short request, every member answers in its slot, retransmission fills
/// the holes. With unreliable unicast every member just streams datagrams.
pub fn n1_polling(p: &ExpParams) -> Result<Vec<RunMetrics>, SimError> {
    let mut out = Vec::new();
    for &seed in &p.seeds {
        let mut cfg = base_config(p, seed);
        match p.protocol {
            ProtocolKind::UupPar => {
                cfg.workload = Workload::Stream { per_node: p.rounds, payload_len: p.reply_len };
                let rep = sim::run(cfg)?;
                let frac = if rep.counters.uup_sent > 0 {
                    Some(rep.counters.uup_delivered as f64 / rep.counters.uup_sent as f64)
                } else {
                    None
                };
                out.push(RunMetrics {
                    scenario: ScenarioKind::N1Polling.name(),
                    protocol: p.protocol.name(),
                    n: p.n,
                    seed,
                    total_tx: rep.counters.total_sends,
                    throughput_bps: stream_throughput(p, &rep),
                    latency_min_us: None,
                    latency_mean_us: None,
                    latency_max_us: None,
                    latency_stddev_us: None,
                    node_delay_mean_us: None,
                    join_delay_mean_us: None,
                    group_update_delay_us: None,
                    delivered_fraction: frac,
                });
            }
            _ => {
                // Poll direction: tiny request, data rides in the replies.
                let mut q = p.clone();
                q.payload_len = 8;
                cfg.workload = Workload::Rounds { count: p.rounds, payload_len: q.payload_len };
                let rep = sim::run(cfg)?;
                out.push(round_metrics(ScenarioKind::N1Polling, &q, seed, &rep));
            }
        }
    }
    Ok(out)
}

fn stream_throughput(p: &ExpParams, rep: &SimReport) -> Option<f64> {
    if rep.end_time == 0 {
        return None;
    }
    let bytes = rep.counters.uup_delivered * p.reply_len as u64;
    Some(bytes as f64 * 8.0 * 1_000_000.0 / rep.end_time as f64)
}

// ---- join-cost ----

/// A batch of `12 - n` joiners against an `n`-member group on 12 hosts: the
/// group polls once and admits everyone in one push sequence.
pub fn join_cost(p: &ExpParams) -> Result<Vec<RunMetrics>, SimError> {
    let hosts = 12u8;
    if p.n >= hosts {
        return Err(SimError::InvalidConfig(format!(
            "join-cost needs a group below {hosts} members, got {}",
            p.n
        )));
    }
    let mut out = Vec::new();
    for &seed in &p.seeds {
        let cfg = join_cost_config(p, seed, hosts);
        let rep = sim::run(cfg)?;
        let join_delays: Vec<u64> = rep.joins.iter().map(|j| j.normal_at - j.poll_seen).collect();
        let update = rep
            .membership
            .iter()
            .find(|m| m.kind == "checkjoins")
            .map(|m| (m.end - m.start) as f64);
        out.push(RunMetrics {
            scenario: ScenarioKind::JoinCost.name(),
            protocol: p.protocol.name(),
            n: p.n,
            seed,
            total_tx: rep.counters.total_sends,
            throughput_bps: None,
            latency_min_us: None,
            latency_mean_us: None,
            latency_max_us: None,
            latency_stddev_us: None,
            node_delay_mean_us: None,
            join_delay_mean_us: (!join_delays.is_empty()).then(|| mean(&join_delays)),
            group_update_delay_us: update,
            delivered_fraction: None,
        });
    }
    Ok(out)
}

/// The simulation behind one join-cost run; also used directly by tests that
/// need the raw report.
pub fn join_cost_config(p: &ExpParams, seed: u64, hosts: u8) -> SimConfig {
    let mut cfg = base_config(p, seed);
    cfg.n = hosts;
    cfg.initial_members = (1..=p.n).collect();
    cfg.workload = Workload::Idle;
    let mut events = Vec::new();
    for (i, j) in (p.n + 1..=hosts).enumerate() {
        events.push(ScriptEvent { at: 10_000 + i as u64 * 1_000, node: j, op: ScriptOp::Join });
    }
    let window = cfg.join_backoff_max + 2 * cfg.msg_t;
    events.push(ScriptEvent { at: 50_000, node: 1, op: ScriptOp::CheckJoins { window } });
    cfg.events = events;
    cfg
}

// ---- fault-properties ----

/// Randomized fault campaign plus pinned adversarial schedules. `runs`
/// randomized schedules are derived from `base_seed`; every run must finish
/// with a clean monitor. `loss` pins every randomized run to one loss rate;
/// `None` rotates through a lossless / moderate / harsh mix per seed.
pub fn fault_campaign(
    runs: u64,
    base_seed: u64,
    loss: Option<f64>,
) -> Result<CampaignOutcome, SimError> {
    let mut outcome = CampaignOutcome::default();
    for (label, cfg, check) in scripted_scenarios() {
        let rep = sim::run(cfg)?;
        let mut problems = rep.violations.clone();
        if let Err(msg) = check(&rep) {
            problems.push(msg);
        }
        outcome.runs += 1;
        if !problems.is_empty() {
            outcome.failures.push(failure(label.to_string(), 0, problems, &rep));
        }
    }
    for i in 0..runs {
        let seed = base_seed.wrapping_add(i);
        let cfg = campaign_config(seed, loss);
        match sim::run(cfg) {
            Ok(rep) => {
                outcome.runs += 1;
                if !rep.violations.is_empty() {
                    outcome.failures.push(failure(
                        format!("randomized-{i}"),
                        seed,
                        rep.violations.clone(),
                        &rep,
                    ));
                }
            }
            Err(e) => {
                outcome.runs += 1;
                outcome.failures.push(CampaignFailure {
                    label: format!("randomized-{i}"),
                    seed,
                    violations: vec![format!("harness error: {e}")],
                    trace_tail: Vec::new(),
                });
            }
        }
    }
    Ok(outcome)
}

fn failure(label: String, seed: u64, violations: Vec<String>, rep: &SimReport) -> CampaignFailure {
    let lines: Vec<String> = rep.trace.lines().collect();
    let tail = lines.iter().rev().take(40).rev().cloned().collect();
    CampaignFailure { label, seed, violations, trace_tail: tail }
}

type Check = fn(&SimReport) -> Result<(), String>;

/// Pinned schedules that target the hardest transitions: a coordinator dying
/// mid-admission, a group reduced to its newest member, and an election
/// landing on a process that is trying to leave.
fn scripted_scenarios() -> Vec<(&'static str, SimConfig, Check)> {
    let mut out: Vec<(&'static str, SimConfig, Check)> = Vec::new();

    // Coordinator crashes between admission pushes: the successor must
    // finish committing both joiners from its own uncommitted view.
    let cfg = SimConfig {
        n: 5,
        initial_members: vec![1, 2, 3],
        events: vec![
            ScriptEvent { at: 20_000, node: 4, op: ScriptOp::Join },
            ScriptEvent { at: 25_000, node: 5, op: ScriptOp::Join },
            ScriptEvent { at: 60_000, node: 1, op: ScriptOp::CheckJoins { window: 40_000 } },
        ],
        fault_triggers: vec![FaultTrigger { victim: 1, sender: 1, tag: "VPUSH".into(), nth: 2 }],
        ..SimConfig::default()
    };
    fn check_midpush(rep: &SimReport) -> Result<(), String> {
        expect_state(rep, 2, "NORMAL*")?;
        expect_state(rep, 4, "NORMAL")?;
        expect_state(rep, 5, "NORMAL")
    }
    out.push(("crash-mid-admission", cfg, check_midpush));

    // Every founder dies the same instant: the freshly admitted member must
    // coordinate and finish admitting the one still waiting.
    let cfg = SimConfig {
        n: 5,
        initial_members: vec![1, 2, 3],
        events: vec![
            ScriptEvent { at: 20_000, node: 4, op: ScriptOp::Join },
            ScriptEvent { at: 25_000, node: 5, op: ScriptOp::Join },
            ScriptEvent { at: 60_000, node: 1, op: ScriptOp::CheckJoins { window: 40_000 } },
        ],
        fault_triggers: vec![
            FaultTrigger { victim: 1, sender: 1, tag: "VPUSH".into(), nth: 2 },
            FaultTrigger { victim: 2, sender: 1, tag: "VPUSH".into(), nth: 2 },
            FaultTrigger { victim: 3, sender: 1, tag: "VPUSH".into(), nth: 2 },
        ],
        ..SimConfig::default()
    };
    // Join backoff is randomized, so either joiner may hold the older
    // ticket and win the election; the other must end up a plain member.
    fn check_orphan(rep: &SimReport) -> Result<(), String> {
        match expect_state(rep, 4, "NORMAL*") {
            Ok(()) => expect_state(rep, 5, "NORMAL"),
            Err(_) => {
                expect_state(rep, 4, "NORMAL")?;
                expect_state(rep, 5, "NORMAL*")
            }
        }
    }
    out.push(("founders-die-mid-admission", cfg, check_orphan));

    // The election lands on a member that already asked to leave: it must
    // step aside and leave a working coordinator behind.
    let cfg = SimConfig {
        n: 3,
        initial_members: vec![1, 2, 3],
        events: vec![
            ScriptEvent { at: 50_000, node: 2, op: ScriptOp::Leave },
            ScriptEvent { at: 100_000, node: 1, op: ScriptOp::Crash },
        ],
        ..SimConfig::default()
    };
    fn check_leaver(rep: &SimReport) -> Result<(), String> {
        expect_state(rep, 2, "LEFT")?;
        expect_state(rep, 3, "NORMAL*")
    }
    out.push(("elected-while-leaving", cfg, check_leaver));

    out
}

fn expect_state(rep: &SimReport, node: u8, want: &str) -> Result<(), String> {
    let got = rep.final_states.get(&node).map(String::as_str).unwrap_or("?");
    if got == want {
        Ok(())
    } else {
        Err(format!("node {node} finished as {got}, expected {want}"))
    }
}

/// One randomized campaign schedule: six founders, three joiners, one or two
/// crashes (the first crasher later rejoins), one leaver, periodic polls and
/// requests issued wherever the coordinator happens to be.
pub fn campaign_config(seed: u64, loss: Option<f64>) -> SimConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1A0_5EED);
    let mut order: Vec<u8> = (1..=6).collect();
    order.shuffle(&mut rng);
    let crashes = rng.gen_range(1..=2usize);
    let victims: Vec<u8> = order[..crashes].to_vec();
    let leaver = order[crashes];
    let loss = loss.unwrap_or([0.0, 0.05, 0.12][(seed % 3) as usize]);
    let fdt = 100_000u64;

    let mut events = Vec::new();
    for (i, j) in (7u8..=9).enumerate() {
        events.push(ScriptEvent { at: 40_000 + i as u64 * 120_000, node: j, op: ScriptOp::Join });
    }
    for (i, &v) in victims.iter().enumerate() {
        let at = rng.gen_range(300_000..900_000u64);
        events.push(ScriptEvent { at, node: v, op: ScriptOp::Crash });
        if i == 0 {
            // Crash + fault detection + slack keeps the rejoin guard happy.
            events.push(ScriptEvent { at: at + fdt + 60_000, node: v, op: ScriptOp::Join });
        }
    }
    events.push(ScriptEvent {
        at: rng.gen_range(300_000..900_000u64),
        node: leaver,
        op: ScriptOp::Leave,
    });
    // Polls and requests are scheduled at the three lowest ids; whoever is
    // coordinator at the time accepts, the rest reject the call.
    let mut t = 100_000u64;
    while t < 1_600_000 {
        for node in 1..=3u8 {
            events.push(ScriptEvent { at: t, node, op: ScriptOp::CheckJoins { window: 40_000 } });
            events.push(ScriptEvent { at: t + 90_000, node, op: ScriptOp::CheckLeaves { window: 40_000 } });
        }
        t += 180_000;
    }
    let mut t = 60_000u64;
    while t < 1_600_000 {
        for node in 1..=3u8 {
            events.push(ScriptEvent {
                at: t,
                node,
                op: ScriptOp::Request { dsts: DstSpec::All, len: 128 },
            });
        }
        t += 90_000;
    }
    SimConfig {
        n: 9,
        initial_members: (1..=6).collect(),
        loss,
        seed,
        fault_detect_t: fdt,
        time_limit: 5_000_000,
        events,
        ..SimConfig::default()
    }
}

// ---- seeds ----

/// Parse a seed list: single values and `a..b` ranges (inclusive),
/// comma-separated, e.g. `1,5,100..109`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.parse().map_err(|_| format!("bad seed {part}"))?;
            let b: u64 = b.parse().map_err(|_| format!("bad seed {part}"))?;
            if b < a {
                return Err(format!("empty seed range {part}"));
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| format!("bad seed {part}"))?);
        }
    }
    if out.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(out)
}
