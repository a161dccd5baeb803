//! Online invariant checking.
//!
//! The monitor rides along with every dispatch and audits the protocol's
//! safety properties from the outside: it never trusts machine-internal
//! bookkeeping beyond the public accessors, and it records violations as
//! strings so a campaign can dump the offending seed and trace.
//!
//! Checked while running:
//!
//! * ticket stability: a coordinator never rewrites a ticket it has already
//!   published for a member. A successor era may re-admit a joiner whose
//!   admission died with the old coordinator, so the binding is per
//!   assigning era, not global,
//! * unique coordinator: at most one live process believes itself
//!   coordinator in NORMAL state at any instant,
//! * admission binding: no request ever addresses a member whose admission
//!   push has not completed, no delivery ever happens outside NORMAL or
//!   LEAVE, and a process never re-enters JOIN except through LEFT,
//! * delivery discipline: per (coordinator incarnation, seqno) every
//!   addressee delivers at most once, and a freshly numbered request is
//!   always delivered unless the receiver has already dropped the sender
//!   from its view,
//! * stop-and-wait: a coordinator never advances its sequence number before
//!   the previous round completed, retransmission masks only shrink and
//!   never re-address a member whose reply was already received.
//!
//! Checked at the end of the run:
//!
//! * every completed round delivered to every addressee that survived it
//!   (addressees that crashed, left, or legitimately suppressed a colliding
//!   sequence number from a previous coordinator are exempt),
//! * quiescent coordination: if any live process is NORMAL, some live
//!   process considers itself coordinator and nobody references a dead one.

use std::collections::{BTreeMap, BTreeSet};

use crate::protocol::{Action, MemberState, Message, ReplyMask};

use super::Simulation;

/// Snapshot of the dispatched node before the event was applied.
#[derive(Copy, Clone, Debug)]
pub(crate) struct PreState {
    pub state: MemberState,
    pub seqno: u32,
}

struct RoundAudit {
    initial: ReplyMask,
    last_mask: ReplyMask,
    replies_seen: ReplyMask,
    completed_at: Option<u64>,
}

#[derive(Default)]
pub struct Monitor {
    pub enabled: bool,
    /// Published ticket for each (pid, incarnation), keyed to the pushing
    /// coordinator era so a legitimate re-admission can supersede it.
    tickets: BTreeMap<(u8, u32), (u32, (u8, u32))>,
    normal_reached: BTreeSet<(u8, u32)>,
    /// (receiver, coord, coord incarnation, seqno) -> delivery count.
    delivered: BTreeMap<(u8, u8, u32, u32), u32>,
    /// Deliveries suppressed by a seqno collision across coordinator eras;
    /// these excuse a missing delivery in the end-of-run audit.
    suppressed: BTreeSet<(u8, u8, u32, u32)>,
    rounds: BTreeMap<(u8, u32, u32), RoundAudit>,
    last_areq: BTreeMap<(u8, u32), u32>,
    downs: Vec<(u8, u64)>,
    pub violations: Vec<String>,
}

impl Monitor {
    pub fn new(enabled: bool) -> Self {
        Monitor { enabled, ..Monitor::default() }
    }

    fn violation(&mut self, msg: String) {
        if self.violations.len() < 1000 {
            self.violations.push(msg);
        }
    }

    pub(crate) fn note_down(&mut self, pid: u8, time: u64) {
        if self.enabled {
            self.downs.push((pid, time));
        }
    }

    pub(crate) fn after_dispatch(
        &mut self,
        sim: &Simulation,
        node: u8,
        pre: Option<PreState>,
        delivered_msg: Option<&Message>,
        actions: &[Action],
        time: u64,
    ) {
        if !self.enabled {
            return;
        }
        self.audit_delivery(sim, node, pre, delivered_msg, actions, time);
        self.audit_sends(sim, node, actions, time);
        self.audit_completion(sim, node, actions, time);
        self.audit_transitions(sim, node, pre, time);
        self.audit_unique_coordinator(sim, time);
        self.audit_ticket_stability(sim, node, actions, time);
    }

    fn audit_delivery(
        &mut self,
        sim: &Simulation,
        node: u8,
        pre: Option<PreState>,
        delivered_msg: Option<&Message>,
        actions: &[Action],
        time: u64,
    ) {
        let delivered_now = actions.iter().any(|a| matches!(a, Action::DeliverRequest { .. }));
        match delivered_msg {
            Some(Message::Areq { pid: c, seqno: k, rmask, .. }) => {
                let c = c.get();
                let c_inc = sim.incarnation(c);
                let addressed = sim
                    .proto_machine(node)
                    .map(|m| rmask.contains(m.my_id()))
                    .unwrap_or(false);
                if addressed {
                    if let Some(pre) = pre {
                        match pre.state {
                            MemberState::Normal | MemberState::Leave => {
                                // A matching seqno is not proof of a duplicate:
                                // succession does not reset the member's seqno,
                                // so a new coordinator's first request can
                                // collide with a stale one. Whether the machine
                                // delivered or suppressed, at-most-once is
                                // enforced by the incarnation-keyed count below.
                                if pre.seqno == *k && !delivered_now {
                                    self.suppressed.insert((node, c, c_inc, *k));
                                }
                                if pre.seqno != *k && !delivered_now {
                                    // Dropping is legal when the sender is no
                                    // longer in the receiver's view (a corpse
                                    // frame) or the receiver believes itself
                                    // coordinator (two eras racing).
                                    let must_deliver = sim
                                        .proto_machine(node)
                                        .map(|m| {
                                            !m.is_coordinator()
                                                && m.members().iter().any(|p| p.get() == c)
                                        })
                                        .unwrap_or(false);
                                    if must_deliver {
                                        self.violation(format!(
                                            "t={time} n{node:02}: fresh request k={k} from n{c:02} not delivered"
                                        ));
                                    }
                                }
                            }
                            MemberState::Join | MemberState::Left => {
                                if delivered_now {
                                    self.violation(format!(
                                        "t={time} n{node:02}: delivery while {}",
                                        pre.state
                                    ));
                                }
                            }
                        }
                    }
                }
                if delivered_now {
                    let count = {
                        let count = self.delivered.entry((node, c, c_inc, *k)).or_insert(0);
                        *count += 1;
                        *count
                    };
                    if count > 1 {
                        self.violation(format!(
                            "t={time} n{node:02}: request (n{c:02},k={k}) delivered {count} times"
                        ));
                    }
                }
            }
            Some(Message::Arpl { pid: r, seqno: k, .. }) => {
                let inc = sim.incarnation(node);
                if let Some(audit) = self.rounds.get_mut(&(node, inc, *k)) {
                    if audit.completed_at.is_none() {
                        audit.replies_seen = audit.replies_seen.with(*r);
                    }
                }
            }
            _ => {}
        }
    }

    fn audit_sends(&mut self, sim: &Simulation, node: u8, actions: &[Action], time: u64) {
        for a in actions {
            let (k, rmask) = match a {
                Action::Broadcast(Message::Areq { seqno, rmask, .. }) => (*seqno, *rmask),
                _ => continue,
            };
            let inc = sim.incarnation(node);
            if let Some(m) = sim.proto_machine(node) {
                for p in rmask.pids() {
                    if m.view().is_new(p) {
                        self.violation(format!(
                            "t={time} n{node:02}: request k={k} addresses {p:?} before its admission push completed"
                        ));
                    }
                }
            }
            match self.rounds.get_mut(&(node, inc, k)) {
                Some(audit) => {
                    // Retransmission of the open round.
                    let grew = !rmask.is_subset_of(audit.last_mask);
                    let readdressed = rmask.bits() & audit.replies_seen.bits() != 0;
                    audit.last_mask = rmask;
                    if grew {
                        self.violation(format!(
                            "t={time} n{node:02}: retransmission mask for k={k} grew"
                        ));
                    }
                    if readdressed {
                        self.violation(format!(
                            "t={time} n{node:02}: retransmission for k={k} re-addresses answered members"
                        ));
                    }
                }
                None => {
                    if let Some(&last) = self.last_areq.get(&(node, inc)) {
                        if k != last.wrapping_add(1) {
                            self.violation(format!(
                                "t={time} n{node:02}: seqno jumped from {last} to {k}"
                            ));
                        } else if let Some(prev) = self.rounds.get(&(node, inc, last)) {
                            if prev.completed_at.is_none() {
                                self.violation(format!(
                                    "t={time} n{node:02}: round k={k} started before k={last} completed"
                                ));
                            }
                        }
                    }
                    self.rounds.insert(
                        (node, inc, k),
                        RoundAudit {
                            initial: rmask,
                            last_mask: rmask,
                            replies_seen: ReplyMask::EMPTY,
                            completed_at: None,
                        },
                    );
                    self.last_areq.insert((node, inc), k);
                }
            }
        }
    }

    fn audit_completion(&mut self, sim: &Simulation, node: u8, actions: &[Action], time: u64) {
        for a in actions {
            let replies = match a {
                Action::RoundComplete { replies } => replies,
                _ => continue,
            };
            let inc = sim.incarnation(node);
            let k = match sim.proto_machine(node) {
                Some(m) => m.seqno(),
                None => continue,
            };
            let mut strays = Vec::new();
            if let Some(audit) = self.rounds.get_mut(&(node, inc, k)) {
                if audit.completed_at.is_none() {
                    audit.completed_at = Some(time);
                    for p in replies.keys() {
                        if !audit.initial.contains(*p) {
                            strays.push(*p);
                        }
                    }
                }
            }
            for p in strays {
                self.violation(format!(
                    "t={time} n{node:02}: round k={k} returned a reply from non-addressee {p:?}"
                ));
            }
        }
    }

    fn audit_transitions(&mut self, sim: &Simulation, node: u8, pre: Option<PreState>, time: u64) {
        let (pre, machine) = match (pre, sim.proto_machine(node)) {
            (Some(p), Some(m)) => (p, m),
            _ => return,
        };
        let post = machine.state();
        if post == pre.state {
            return;
        }
        let inc = sim.incarnation(node);
        if post == MemberState::Normal {
            self.normal_reached.insert((node, inc));
        }
        if post == MemberState::Join {
            if pre.state != MemberState::Left {
                self.violation(format!(
                    "t={time} n{node:02}: entered JOIN from {} instead of LEFT",
                    pre.state
                ));
            }
            if self.normal_reached.contains(&(node, inc)) {
                self.violation(format!(
                    "t={time} n{node:02}: re-entered JOIN within the same incarnation"
                ));
            }
        }
    }

    fn audit_unique_coordinator(&mut self, sim: &Simulation, time: u64) {
        let mut coords: Vec<u8> = Vec::new();
        for node in sim.node_ids() {
            if !sim.is_up(node) {
                continue;
            }
            if let Some(m) = sim.proto_machine(node) {
                if m.is_coordinator() {
                    coords.push(node);
                }
            }
        }
        if coords.len() > 1 {
            self.violation(format!("t={time}: multiple live coordinators {coords:?}"));
        }
    }

    fn audit_ticket_stability(
        &mut self,
        sim: &Simulation,
        node: u8,
        actions: &[Action],
        time: u64,
    ) {
        // Sends are always built from the sender's current view, so every
        // audited frame is the pushing era's live opinion.
        for a in actions {
            let view = match a {
                Action::Broadcast(Message::Vpush { view, .. }) => view,
                _ => continue,
            };
            let era = (node, sim.incarnation(node));
            for e in view {
                let p = e.pid.get();
                let key = (p, sim.incarnation(p));
                let t = e.ticket.get();
                match self.tickets.get(&key) {
                    Some(&(seen, assigner)) if assigner == era && seen != t => {
                        self.violation(format!(
                            "t={time} n{node:02}: rewrote n{p:02}'s ticket {seen} to {t}"
                        ));
                    }
                    _ => {
                        self.tickets.insert(key, (t, era));
                    }
                }
            }
        }
    }

    pub(crate) fn finalize(&mut self, sim: &Simulation) {
        if !self.enabled {
            return;
        }
        // Every completed round reached every addressee that survived it.
        let audits: Vec<((u8, u32, u32), ReplyMask, u64)> = self
            .rounds
            .iter()
            .filter_map(|(&key, a)| a.completed_at.map(|t| (key, a.initial, t)))
            .collect();
        for ((c, inc, k), initial, done_at) in audits {
            for p in initial.pids() {
                let q = p.get();
                let got = self.delivered.get(&(q, c, inc, k)).copied().unwrap_or(0) >= 1;
                let excused = self.suppressed.contains(&(q, c, inc, k))
                    || self.downs.iter().any(|&(dp, dt)| dp == q && dt <= done_at);
                if !got && !excused {
                    self.violation(format!(
                        "round (n{c:02},inc={inc},k={k}) completed without delivery at n{q:02}"
                    ));
                }
            }
        }
        // Quiescence: a living NORMAL process implies a living self-declared
        // coordinator, and nobody points at a dead or departed one.
        let mut any_normal = false;
        let mut any_coord = false;
        for node in sim.node_ids() {
            if !sim.is_up(node) {
                continue;
            }
            let m = match sim.proto_machine(node) {
                Some(m) => m,
                None => continue,
            };
            if m.state() == MemberState::Normal {
                any_normal = true;
                if m.is_coordinator() {
                    any_coord = true;
                }
                if let Some(c) = m.coordinator() {
                    let c = c.get();
                    let alive = sim.is_up(c)
                        && sim
                            .proto_machine(c)
                            .map(|cm| cm.state() != MemberState::Left)
                            .unwrap_or(false);
                    if !alive {
                        self.violation(format!(
                            "quiescence: n{node:02} still references dead coordinator n{c:02}"
                        ));
                    }
                }
            }
        }
        if any_normal && !any_coord {
            self.violation("quiescence: live members exist but nobody coordinates".to_string());
        }
    }
}
