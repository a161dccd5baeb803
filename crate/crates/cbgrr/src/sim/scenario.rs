//! Text scenario files for simulation runs.
//!
//! A scenario is a key=value header followed by an optional `[events]`
//! section, one directive per line. `#` starts a comment, blank lines are
//! skipped. Unknown keys are errors: a typo silently changing a run would be
//! worse than a rejected file.
//!
//! ```text
//! # three founders, one late joiner
//! n        = 4
//! members  = 1-3
//! protocol = cbgrr
//! seed     = 7
//! loss     = 0.05
//!
//! [events]
//! at 10000 call 4 join
//! at 20000 call 1 checkjoins 30000
//! at 60000 call 1 rr all len=256
//! at 90000 fault 2
//! fault 3 when 1 sends AREQ 5
//! drop ARPL from 3 to 1 count 2
//! ```
//!
//! Header keys (all optional, defaults in parentheses): `n` (3), `members`
//! (`1-n`; `none` for an empty group), `protocol` (`cbgrr`), `seed` (1),
//! `msgt` (15000), `faultdetectt` (100000), `proct` (1000), `appdelay`
//! (500), `bitrate` (1000000), `loss` (0), `jitter` (0), `joinbackoff`
//! (8000), `maxpayload` (1024), `replylen` (16), `timelimit` (600000000),
//! `monitor` (`on`), and the workload forms `rounds = COUNT PAYLOAD` /
//! `stream = PER_NODE PAYLOAD`.
//!
//! Event directives:
//!
//! * `at T call NODE join|leave`
//! * `at T call NODE checkjoins W` / `checkleaves W`
//! * `at T call NODE rr all|P1,P2,... len=L`
//! * `at T fault NODE` (crash)
//! * `fault VICTIM when SENDER sends TAG N` (crash pinned to a transmission)
//! * `drop TAG from P [to Q] count K`

use std::fmt;
use std::path::Path;

use super::{DropRule, DstSpec, FaultTrigger, ProtocolKind, ScriptEvent, ScriptOp, SimConfig, Workload};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("scenario line {line}: {msg}")]
pub struct ScenarioError {
    pub line: usize,
    pub msg: String,
}

fn fail<T>(line: usize, msg: impl fmt::Display) -> Result<T, ScenarioError> {
    Err(ScenarioError { line, msg: msg.to_string() })
}

pub fn load(path: impl AsRef<Path>) -> Result<SimConfig, ScenarioError> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| ScenarioError { line: 0, msg: format!("cannot read file: {e}") })?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<SimConfig, ScenarioError> {
    let mut cfg = SimConfig::default();
    let mut members_set = false;
    let mut in_events = false;
    for (no, raw) in text.lines().enumerate() {
        let line_no = no + 1;
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if line == "[events]" {
            in_events = true;
            continue;
        }
        if in_events {
            parse_event(line_no, line, &mut cfg)?;
        } else {
            parse_header(line_no, line, &mut cfg, &mut members_set)?;
        }
    }
    if !members_set {
        cfg.initial_members = (1..=cfg.n).collect();
    }
    Ok(cfg)
}

fn parse_header(
    line_no: usize,
    line: &str,
    cfg: &mut SimConfig,
    members_set: &mut bool,
) -> Result<(), ScenarioError> {
    let (key, value) = match line.split_once('=') {
        Some((k, v)) => (k.trim(), v.trim()),
        None => return fail(line_no, "expected key = value"),
    };
    let int = |v: &str| -> Result<u64, ScenarioError> {
        v.parse::<u64>().map_err(|_| ScenarioError {
            line: line_no,
            msg: format!("{key}: not an integer: {v}"),
        })
    };
    match key {
        "n" => {
            let v = int(value)?;
            if v == 0 || v > 64 {
                return fail(line_no, format!("n must be 1..=64, got {v}"));
            }
            cfg.n = v as u8;
        }
        "members" => {
            cfg.initial_members = parse_members(line_no, value)?;
            *members_set = true;
        }
        "protocol" => {
            cfg.protocol = ProtocolKind::parse(value)
                .ok_or_else(|| ScenarioError { line: line_no, msg: format!("unknown protocol {value}") })?;
        }
        "seed" => cfg.seed = int(value)?,
        "msgt" => cfg.msg_t = int(value)?,
        "faultdetectt" => cfg.fault_detect_t = int(value)?,
        "proct" => cfg.proc_t = int(value)?,
        "appdelay" => cfg.app_delay = int(value)?,
        "bitrate" => cfg.bitrate_bps = int(value)?,
        "jitter" => cfg.jitter_max = int(value)?,
        "joinbackoff" => cfg.join_backoff_max = int(value)?,
        "maxpayload" => cfg.max_payload = int(value)? as usize,
        "replylen" => cfg.reply_len = int(value)? as usize,
        "timelimit" => cfg.time_limit = int(value)?,
        "loss" => {
            cfg.loss = value
                .parse::<f64>()
                .map_err(|_| ScenarioError { line: line_no, msg: format!("loss: not a number: {value}") })?;
        }
        "monitor" => {
            cfg.monitor = match value {
                "on" => true,
                "off" => false,
                _ => return fail(line_no, "monitor must be on or off"),
            };
        }
        "rounds" => {
            let (count, payload) = parse_pair(line_no, key, value)?;
            cfg.workload = Workload::Rounds { count, payload_len: payload as usize };
        }
        "stream" => {
            let (per_node, payload) = parse_pair(line_no, key, value)?;
            cfg.workload = Workload::Stream { per_node, payload_len: payload as usize };
        }
        _ => return fail(line_no, format!("unknown key {key}")),
    }
    Ok(())
}

fn parse_pair(line_no: usize, key: &str, value: &str) -> Result<(u64, u64), ScenarioError> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 2 {
        return fail(line_no, format!("{key} expects two integers, e.g. `{key} = 1000 256`"));
    }
    let a = parts[0]
        .parse()
        .map_err(|_| ScenarioError { line: line_no, msg: format!("{key}: not an integer: {}", parts[0]) })?;
    let b = parts[1]
        .parse()
        .map_err(|_| ScenarioError { line: line_no, msg: format!("{key}: not an integer: {}", parts[1]) })?;
    Ok((a, b))
}

fn parse_members(line_no: usize, value: &str) -> Result<Vec<u8>, ScenarioError> {
    if value == "none" {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for part in value.split(',') {
        let part = part.trim();
        if let Some((a, b)) = part.split_once('-') {
            let a: u8 = a
                .trim()
                .parse()
                .map_err(|_| ScenarioError { line: line_no, msg: format!("bad member range {part}") })?;
            let b: u8 = b
                .trim()
                .parse()
                .map_err(|_| ScenarioError { line: line_no, msg: format!("bad member range {part}") })?;
            if a == 0 || b < a {
                return fail(line_no, format!("bad member range {part}"));
            }
            out.extend(a..=b);
        } else {
            let p: u8 = part
                .parse()
                .map_err(|_| ScenarioError { line: line_no, msg: format!("bad member id {part}") })?;
            out.push(p);
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn parse_event(line_no: usize, line: &str, cfg: &mut SimConfig) -> Result<(), ScenarioError> {
    let words: Vec<&str> = line.split_whitespace().collect();
    let int = |v: &str, what: &str| -> Result<u64, ScenarioError> {
        v.parse::<u64>()
            .map_err(|_| ScenarioError { line: line_no, msg: format!("{what}: not an integer: {v}") })
    };
    let node = |v: &str| -> Result<u8, ScenarioError> {
        match v.parse::<u8>() {
            Ok(p) if p >= 1 => Ok(p),
            _ => fail(line_no, format!("bad node id {v}")),
        }
    };
    match words.first().copied() {
        Some("at") => {
            if words.len() < 3 {
                return fail(line_no, "truncated event");
            }
            let at = int(words[1], "time")?;
            match words[2] {
                "call" => {
                    if words.len() < 5 {
                        return fail(line_no, "truncated call");
                    }
                    let who = node(words[3])?;
                    let op = match words[4] {
                        "join" => ScriptOp::Join,
                        "leave" => ScriptOp::Leave,
                        "checkjoins" => {
                            let w = words.get(5).ok_or_else(|| ScenarioError {
                                line: line_no,
                                msg: "checkjoins needs a window".into(),
                            })?;
                            ScriptOp::CheckJoins { window: int(w, "window")? }
                        }
                        "checkleaves" => {
                            let w = words.get(5).ok_or_else(|| ScenarioError {
                                line: line_no,
                                msg: "checkleaves needs a window".into(),
                            })?;
                            ScriptOp::CheckLeaves { window: int(w, "window")? }
                        }
                        "rr" => parse_rr(line_no, &words[5..])?,
                        other => return fail(line_no, format!("unknown call {other}")),
                    };
                    cfg.events.push(ScriptEvent { at, node: who, op });
                }
                "fault" => {
                    if words.len() != 4 {
                        return fail(line_no, "fault expects: at T fault NODE");
                    }
                    let who = node(words[3])?;
                    cfg.events.push(ScriptEvent { at, node: who, op: ScriptOp::Crash });
                }
                other => return fail(line_no, format!("unknown directive {other}")),
            }
        }
        Some("fault") => {
            // fault VICTIM when SENDER sends TAG N
            if words.len() != 7 || words[2] != "when" || words[4] != "sends" {
                return fail(line_no, "expected: fault VICTIM when SENDER sends TAG N");
            }
            let victim = node(words[1])?;
            let sender = node(words[3])?;
            let tag = words[5].to_string();
            let nth = int(words[6], "count")?;
            if nth == 0 {
                return fail(line_no, "trigger count must be at least 1");
            }
            cfg.fault_triggers.push(FaultTrigger { victim, sender, tag, nth });
        }
        Some("drop") => {
            // drop TAG from P [to Q] count K
            let mut i = 1;
            let tag = words
                .get(i)
                .ok_or_else(|| ScenarioError { line: line_no, msg: "drop needs a tag".into() })?
                .to_string();
            i += 1;
            if words.get(i) != Some(&"from") {
                return fail(line_no, "expected: drop TAG from P [to Q] count K");
            }
            let from = node(words.get(i + 1).copied().unwrap_or(""))?;
            i += 2;
            let mut to = None;
            if words.get(i) == Some(&"to") {
                to = Some(node(words.get(i + 1).copied().unwrap_or(""))?);
                i += 2;
            }
            if words.get(i) != Some(&"count") {
                return fail(line_no, "expected: drop TAG from P [to Q] count K");
            }
            let count = int(words.get(i + 1).copied().unwrap_or(""), "count")?;
            if words.len() != i + 2 {
                return fail(line_no, "trailing words after drop rule");
            }
            cfg.drop_rules.push(DropRule { tag, from, to, count });
        }
        _ => return fail(line_no, format!("unknown directive: {line}")),
    }
    Ok(())
}

fn parse_rr(line_no: usize, rest: &[&str]) -> Result<ScriptOp, ScenarioError> {
    if rest.len() != 2 {
        return fail(line_no, "expected: rr all|P1,P2,... len=L");
    }
    let dsts = if rest[0] == "all" {
        DstSpec::All
    } else {
        let mut pids = Vec::new();
        for p in rest[0].split(',') {
            let p: u8 = p
                .trim()
                .parse()
                .map_err(|_| ScenarioError { line: line_no, msg: format!("bad destination {p}") })?;
            pids.push(p);
        }
        DstSpec::List(pids)
    };
    let len = match rest[1].strip_prefix("len=") {
        Some(v) => v
            .parse::<usize>()
            .map_err(|_| ScenarioError { line: line_no, msg: format!("bad length {v}") })?,
        None => return fail(line_no, "expected len=L"),
    };
    Ok(ScriptOp::Request { dsts, len })
}
