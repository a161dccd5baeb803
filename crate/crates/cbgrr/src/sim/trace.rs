//! Simulation traces.
//!
//! Every observable event of a run is appended to the trace in dispatch
//! order. The rendered line format is stable so that a trace can be hashed:
//! two runs of the same configuration must produce byte-identical traces.

use sha2::{Digest, Sha256};

use crate::protocol::MemberState;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub time: u64,
    /// Dispatch sequence number, unique per record.
    pub seq: u64,
    /// Process the record belongs to.
    pub node: u8,
    pub kind: TraceKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceKind {
    Send {
        /// Message tag, e.g. `AREQ`.
        tag: &'static str,
        /// Compact content fingerprint.
        fp: String,
        /// Unicast destination, 0 for broadcast.
        dst: u8,
        /// When the send was requested by the protocol.
        req: u64,
        /// When the frame actually started transmitting.
        start: u64,
        /// Transmission time on the medium, microseconds.
        air: u64,
    },
    Recv { tag: &'static str, fp: String, from: u8 },
    Drop { tag: &'static str, fp: String, from: u8 },
    TimerFired { kind: &'static str, epoch: u64 },
    Crash,
    FaultNotified { failed: u8 },
    AppDeliver { token: u64, len: usize },
    RoundDone { replies: usize },
    BecameCoord { members: Vec<u8> },
    GroupChanged { members: Vec<u8> },
    StateChange { from: MemberState, to: MemberState },
    Call { desc: String },
    CallRejected { desc: String, err: String },
}

impl TraceRecord {
    pub fn line(&self) -> String {
        let head = format!("{:>12} n{:02}", self.time, self.node);
        match &self.kind {
            TraceKind::Send { tag, fp, dst, req, start, air } => {
                let dst = if *dst == 0 { "*".to_string() } else { format!("n{dst:02}") };
                format!("{head} SEND {tag} {fp} dst={dst} req={req} start={start} air={air}")
            }
            TraceKind::Recv { tag, fp, from } => format!("{head} RECV {tag} {fp} from=n{from:02}"),
            TraceKind::Drop { tag, fp, from } => format!("{head} DROP {tag} {fp} from=n{from:02}"),
            TraceKind::TimerFired { kind, epoch } => format!("{head} TIMER {kind} epoch={epoch}"),
            TraceKind::Crash => format!("{head} CRASH"),
            TraceKind::FaultNotified { failed } => format!("{head} FAULT failed=n{failed:02}"),
            TraceKind::AppDeliver { token, len } => {
                format!("{head} APP_DELIVER token={token} len={len}")
            }
            TraceKind::RoundDone { replies } => format!("{head} ROUND_DONE replies={replies}"),
            TraceKind::BecameCoord { members } => {
                format!("{head} BECAME_COORD members={}", join(members))
            }
            TraceKind::GroupChanged { members } => {
                format!("{head} GROUP_CHANGED members={}", join(members))
            }
            TraceKind::StateChange { from, to } => format!("{head} STATE {from}->{to}"),
            TraceKind::Call { desc } => format!("{head} CALL {desc}"),
            TraceKind::CallRejected { desc, err } => format!("{head} CALL_REJECTED {desc}: {err}"),
        }
    }
}

fn join(members: &[u8]) -> String {
    members
        .iter()
        .map(|m| m.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Clone, Debug, Default)]
pub struct SimTrace {
    records: Vec<TraceRecord>,
}

impl SimTrace {
    pub fn push(&mut self, rec: TraceRecord) {
        self.records.push(rec);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn lines(&self) -> impl Iterator<Item = String> + '_ {
        self.records.iter().map(|r| r.line())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in self.lines() {
            out.push_str(&l);
            out.push('\n');
        }
        out
    }

    /// SHA-256 over the rendered trace; equal hashes mean equal runs.
    pub fn stable_hash(&self) -> String {
        let mut h = Sha256::new();
        for l in self.lines() {
            h.update(l.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Number of frame transmissions, optionally of one message tag.
    pub fn send_count(&self, tag: Option<&str>) -> u64 {
        self.records
            .iter()
            .filter(|r| match &r.kind {
                TraceKind::Send { tag: t, .. } => tag.map_or(true, |want| *t == want),
                _ => false,
            })
            .count() as u64
    }

    /// Transmission start times of frames sent by `node` with `tag`.
    pub fn send_starts(&self, node: u8, tag: &str) -> Vec<u64> {
        self.records
            .iter()
            .filter_map(|r| match &r.kind {
                TraceKind::Send { tag: t, start, .. } if r.node == node && *t == tag => Some(*start),
                _ => None,
            })
            .collect()
    }

    /// Sends whose transmission start was deferred past the request time by
    /// a busy medium.
    pub fn deferred_sends(&self) -> u64 {
        self.records
            .iter()
            .filter(|r| matches!(&r.kind, TraceKind::Send { req, start, .. } if start > req))
            .count() as u64
    }

    pub fn timer_firings(&self) -> u64 {
        self.records
            .iter()
            .filter(|r| matches!(r.kind, TraceKind::TimerFired { .. }))
            .count() as u64
    }
}
