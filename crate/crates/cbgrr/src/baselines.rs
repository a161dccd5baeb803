//! Unicast reference protocols for comparison runs.
//!
//! Three baselines approximate what a conventional design spends on the same
//! 1-N interaction pattern:
//!
//! * `RupCoordinator` in [`RupMode::Sequential`]: reliable unicast, one peer
//!   at a time. The reply doubles as the acknowledgement and an alternating
//!   bit deduplicates retransmitted requests.
//! * `RupCoordinator` in [`RupMode::Parallel`]: the same exchange fired at
//!   all peers at once, with one retransmission timer per peer.
//! * [`UupCoordinator`]: fire-and-forget unicast to all peers; the round
//!   closes on a timer with whatever replies made it back.
//!
//! Per interaction RUP costs `2(N-1)` frames when nothing is lost; there are
//! no group semantics, membership or elections here, which is exactly the
//! point of the comparison.
//!
//! Like the main machine these are pure state machines: hosts feed events in
//! and execute the returned [`PeerAction`]s. Timeouts are chosen by the host
//! because a sensible value depends on the transport's contention behaviour.

use std::collections::{BTreeMap, BTreeSet};

use crate::protocol::ProcessId;

/// Unicast frames. `Request`/`Reply` carry the alternating bit; `Datagram`
/// is the unacknowledged one-way message used by unreliable streaming runs.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum PeerMsg {
    Request { from: ProcessId, bit: u8, data: Vec<u8> },
    Reply { from: ProcessId, bit: u8, data: Vec<u8> },
    Datagram { from: ProcessId, seq: u32, data: Vec<u8> },
}

impl PeerMsg {
    pub fn tag(&self) -> &'static str {
        match self {
            PeerMsg::Request { .. } => "RREQ",
            PeerMsg::Reply { .. } => "RRPL",
            PeerMsg::Datagram { .. } => "UMSG",
        }
    }

    /// Frame bytes on the wire: the common four-byte header, sender id,
    /// bit or sequence number, length prefix, payload.
    pub fn wire_len(&self) -> usize {
        match self {
            PeerMsg::Request { data, .. } | PeerMsg::Reply { data, .. } => 4 + 1 + 1 + 2 + data.len(),
            PeerMsg::Datagram { data, .. } => 4 + 1 + 4 + 2 + data.len(),
        }
    }

    pub fn sender(&self) -> ProcessId {
        match self {
            PeerMsg::Request { from, .. }
            | PeerMsg::Reply { from, .. }
            | PeerMsg::Datagram { from, .. } => *from,
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum PeerAction {
    Send { dst: ProcessId, msg: PeerMsg },
    SetTimer { epoch: u64, delay: u64 },
    CancelTimer { epoch: u64 },
    /// Hand a received request to the application; answer via `reply_ready`.
    Deliver { token: u64, data: Vec<u8> },
    /// The round is over; collected replies are in the map.
    RoundComplete { replies: BTreeMap<ProcessId, Vec<u8>> },
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum RupMode {
    Sequential,
    Parallel,
}

/// Reliable-unicast coordinator.
pub struct RupCoordinator {
    me: ProcessId,
    peers: Vec<ProcessId>,
    mode: RupMode,
    timeout: u64,
    bits: BTreeMap<ProcessId, u8>,
    pending: BTreeSet<ProcessId>,
    replies: BTreeMap<ProcessId, Vec<u8>>,
    timer_epochs: BTreeMap<ProcessId, u64>,
    epoch_counter: u64,
    data: Vec<u8>,
    /// Sequential mode: index of the next peer to engage.
    cursor: usize,
    active: bool,
}

impl RupCoordinator {
    pub fn new(me: ProcessId, peers: Vec<ProcessId>, mode: RupMode, timeout: u64) -> Self {
        RupCoordinator {
            me,
            peers,
            mode,
            timeout,
            bits: BTreeMap::new(),
            pending: BTreeSet::new(),
            replies: BTreeMap::new(),
            timer_epochs: BTreeMap::new(),
            epoch_counter: 0,
            data: Vec::new(),
            cursor: 0,
            active: false,
        }
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn start_round(&mut self, data: Vec<u8>) -> Vec<PeerAction> {
        assert!(!self.active, "stop-and-wait: previous round still running");
        if self.peers.is_empty() {
            return vec![PeerAction::RoundComplete { replies: BTreeMap::new() }];
        }
        self.active = true;
        self.data = data;
        self.pending = self.peers.iter().copied().collect();
        self.replies.clear();
        for &p in &self.peers {
            let bit = self.bits.entry(p).or_insert(0);
            *bit ^= 1;
        }
        self.cursor = 0;
        match self.mode {
            RupMode::Sequential => {
                let first = self.peers[0];
                self.cursor = 1;
                self.engage(first)
            }
            RupMode::Parallel => {
                let peers = self.peers.clone();
                peers.into_iter().flat_map(|p| self.engage(p)).collect()
            }
        }
    }

    fn engage(&mut self, p: ProcessId) -> Vec<PeerAction> {
        self.epoch_counter += 1;
        let epoch = self.epoch_counter;
        self.timer_epochs.insert(p, epoch);
        vec![
            PeerAction::Send {
                dst: p,
                msg: PeerMsg::Request { from: self.me, bit: self.bits[&p], data: self.data.clone() },
            },
            PeerAction::SetTimer { epoch, delay: self.timeout },
        ]
    }

    pub fn on_msg(&mut self, msg: PeerMsg) -> Vec<PeerAction> {
        let (from, bit, data) = match msg {
            PeerMsg::Reply { from, bit, data } => (from, bit, data),
            _ => return Vec::new(),
        };
        if !self.active || !self.pending.contains(&from) || bit != self.bits[&from] {
            return Vec::new();
        }
        self.pending.remove(&from);
        self.replies.insert(from, data);
        let mut actions = vec![PeerAction::CancelTimer { epoch: self.timer_epochs[&from] }];
        if self.mode == RupMode::Sequential && self.cursor < self.peers.len() {
            let next = self.peers[self.cursor];
            self.cursor += 1;
            actions.extend(self.engage(next));
        }
        if self.pending.is_empty() {
            self.active = false;
            actions.push(PeerAction::RoundComplete { replies: std::mem::take(&mut self.replies) });
        }
        actions
    }

    /// Retransmit to the peer whose timer fired. Retries are unbounded.
    pub fn on_timer(&mut self, epoch: u64) -> Vec<PeerAction> {
        if !self.active {
            return Vec::new();
        }
        let peer = self
            .timer_epochs
            .iter()
            .find(|&(p, &e)| e == epoch && self.pending.contains(p))
            .map(|(&p, _)| p);
        match peer {
            Some(p) => self.engage(p),
            None => Vec::new(),
        }
    }
}

/// Reliable-unicast responder: serves one coordinator's requests, replying
/// through the application and deduplicating by the alternating bit.
pub struct RupPeer {
    me: ProcessId,
    last_bit: BTreeMap<ProcessId, u8>,
    stored: BTreeMap<ProcessId, (u8, Vec<u8>)>,
    awaiting: Option<(u64, u8, ProcessId)>,
    token_counter: u64,
}

impl RupPeer {
    pub fn new(me: ProcessId) -> Self {
        RupPeer {
            me,
            last_bit: BTreeMap::new(),
            stored: BTreeMap::new(),
            awaiting: None,
            token_counter: 0,
        }
    }

    pub fn on_msg(&mut self, msg: PeerMsg) -> Vec<PeerAction> {
        let (from, bit, data) = match msg {
            PeerMsg::Request { from, bit, data } => (from, bit, data),
            _ => return Vec::new(),
        };
        if self.last_bit.get(&from) == Some(&bit) {
            // Duplicate: our reply was lost. Repeat it without touching the
            // application, unless it is still being produced.
            if let Some((b, stored)) = self.stored.get(&from) {
                if *b == bit {
                    return vec![PeerAction::Send {
                        dst: from,
                        msg: PeerMsg::Reply { from: self.me, bit, data: stored.clone() },
                    }];
                }
            }
            return Vec::new();
        }
        self.last_bit.insert(from, bit);
        self.token_counter += 1;
        self.awaiting = Some((self.token_counter, bit, from));
        vec![PeerAction::Deliver { token: self.token_counter, data }]
    }

    pub fn reply_ready(&mut self, token: u64, data: Vec<u8>) -> Vec<PeerAction> {
        match self.awaiting {
            Some((t, bit, from)) if t == token => {
                self.awaiting = None;
                self.stored.insert(from, (bit, data.clone()));
                vec![PeerAction::Send { dst: from, msg: PeerMsg::Reply { from: self.me, bit, data } }]
            }
            _ => Vec::new(),
        }
    }
}

/// Unreliable-unicast coordinator: requests go out once, the round closes
/// when every peer has answered or the timer fires with whatever arrived.
pub struct UupCoordinator {
    me: ProcessId,
    peers: Vec<ProcessId>,
    timeout: u64,
    bit: u8,
    replies: BTreeMap<ProcessId, Vec<u8>>,
    epoch: u64,
    active: bool,
}

impl UupCoordinator {
    pub fn new(me: ProcessId, peers: Vec<ProcessId>, timeout: u64) -> Self {
        UupCoordinator { me, peers, timeout, bit: 0, replies: BTreeMap::new(), epoch: 0, active: false }
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn start_round(&mut self, data: Vec<u8>) -> Vec<PeerAction> {
        assert!(!self.active, "stop-and-wait: previous round still running");
        if self.peers.is_empty() {
            return vec![PeerAction::RoundComplete { replies: BTreeMap::new() }];
        }
        self.active = true;
        self.bit ^= 1;
        self.replies.clear();
        self.epoch += 1;
        let mut actions: Vec<PeerAction> = self
            .peers
            .iter()
            .map(|&p| PeerAction::Send {
                dst: p,
                msg: PeerMsg::Request { from: self.me, bit: self.bit, data: data.clone() },
            })
            .collect();
        actions.push(PeerAction::SetTimer { epoch: self.epoch, delay: self.timeout });
        actions
    }

    pub fn on_msg(&mut self, msg: PeerMsg) -> Vec<PeerAction> {
        if let PeerMsg::Reply { from, bit, data } = msg {
            if self.active && bit == self.bit {
                self.replies.insert(from, data);
                // Nobody retransmits, so a full reply set is final: close now
                // instead of sitting out the rest of the window. The stale
                // timer is ignored by the active/epoch guard in on_timer.
                if self.replies.len() == self.peers.len() {
                    self.active = false;
                    return vec![PeerAction::RoundComplete {
                        replies: std::mem::take(&mut self.replies),
                    }];
                }
            }
        }
        Vec::new()
    }

    pub fn on_timer(&mut self, epoch: u64) -> Vec<PeerAction> {
        if !self.active || epoch != self.epoch {
            return Vec::new();
        }
        self.active = false;
        vec![PeerAction::RoundComplete { replies: std::mem::take(&mut self.replies) }]
    }
}

/// Source of an unreliable message stream, used by polling-direction runs
/// where every ordinary process pushes datagrams at its coordinator.
pub struct UupStreamer {
    me: ProcessId,
    dst: ProcessId,
    remaining: u64,
    payload_len: usize,
    seq: u32,
}

impl UupStreamer {
    pub fn new(me: ProcessId, dst: ProcessId, count: u64, payload_len: usize) -> Self {
        UupStreamer { me, dst, remaining: count, payload_len, seq: 0 }
    }

    /// Next datagram to send, or `None` when the stream is exhausted. The
    /// host paces calls (typically one per completed transmission).
    pub fn next_msg(&mut self) -> Option<(ProcessId, PeerMsg)> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        self.seq += 1;
        let mut data = vec![0u8; self.payload_len];
        let tag = self.seq.to_be_bytes();
        for (i, b) in data.iter_mut().enumerate() {
            *b = self.me.get() ^ tag[i % 4];
        }
        Some((self.dst, PeerMsg::Datagram { from: self.me, seq: self.seq, data }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::pid;

    fn reply(peer: &mut RupPeer, actions: &[PeerAction], data: &[u8]) -> Vec<PeerAction> {
        let token = actions
            .iter()
            .find_map(|a| match a {
                PeerAction::Deliver { token, .. } => Some(*token),
                _ => None,
            })
            .expect("expected a delivery");
        peer.reply_ready(token, data.to_vec())
    }

    #[test]
    fn sequential_round_walks_peers_in_order() {
        let mut c = RupCoordinator::new(pid(1), vec![pid(2), pid(3)], RupMode::Sequential, 1_000);
        let a = c.start_round(b"q".to_vec());
        assert!(matches!(&a[0], PeerAction::Send { dst, .. } if *dst == pid(2)));
        assert_eq!(a.len(), 2, "one request, one timer");

        let a = c.on_msg(PeerMsg::Reply { from: pid(2), bit: 1, data: b"a".to_vec() });
        assert!(a.iter().any(|x| matches!(x, PeerAction::Send { dst, .. } if *dst == pid(3))));
        let a = c.on_msg(PeerMsg::Reply { from: pid(3), bit: 1, data: b"b".to_vec() });
        match a.last() {
            Some(PeerAction::RoundComplete { replies }) => assert_eq!(replies.len(), 2),
            other => panic!("expected completion, got {other:?}"),
        }
        assert!(!c.is_active());
    }

    #[test]
    fn parallel_round_engages_everyone_at_once() {
        let mut c = RupCoordinator::new(pid(1), vec![pid(2), pid(3), pid(4)], RupMode::Parallel, 1_000);
        let a = c.start_round(vec![]);
        let sends = a.iter().filter(|x| matches!(x, PeerAction::Send { .. })).count();
        assert_eq!(sends, 3);
        c.on_msg(PeerMsg::Reply { from: pid(4), bit: 1, data: vec![] });
        c.on_msg(PeerMsg::Reply { from: pid(2), bit: 1, data: vec![] });
        let a = c.on_msg(PeerMsg::Reply { from: pid(3), bit: 1, data: vec![] });
        assert!(matches!(a.last(), Some(PeerAction::RoundComplete { .. })));
    }

    #[test]
    fn stale_bit_replies_are_ignored() {
        let mut c = RupCoordinator::new(pid(1), vec![pid(2)], RupMode::Parallel, 1_000);
        c.start_round(vec![]);
        assert!(c.on_msg(PeerMsg::Reply { from: pid(2), bit: 0, data: vec![] }).is_empty());
        assert!(c.is_active());
    }

    #[test]
    fn timer_retransmits_only_pending_peers() {
        let mut c = RupCoordinator::new(pid(1), vec![pid(2), pid(3)], RupMode::Parallel, 1_000);
        let a = c.start_round(vec![]);
        let epochs: Vec<u64> = a
            .iter()
            .filter_map(|x| match x {
                PeerAction::SetTimer { epoch, .. } => Some(*epoch),
                _ => None,
            })
            .collect();
        c.on_msg(PeerMsg::Reply { from: pid(2), bit: 1, data: vec![] });
        assert!(c.on_timer(epochs[0]).is_empty(), "answered peer is not retried");
        let a = c.on_timer(epochs[1]);
        assert!(matches!(&a[0], PeerAction::Send { dst, msg: PeerMsg::Request { bit: 1, .. } } if *dst == pid(3)));
    }

    #[test]
    fn peer_deduplicates_by_alternating_bit() {
        let mut p = RupPeer::new(pid(2));
        let a = p.on_msg(PeerMsg::Request { from: pid(1), bit: 1, data: b"q".to_vec() });
        assert!(matches!(&a[..], [PeerAction::Deliver { .. }]));
        // Duplicate while the application is still processing: silence.
        assert!(p.on_msg(PeerMsg::Request { from: pid(1), bit: 1, data: b"q".to_vec() }).is_empty());
        let a = reply(&mut p, &a, b"ans");
        assert!(matches!(&a[..], [PeerAction::Send { msg: PeerMsg::Reply { bit: 1, .. }, .. }]));
        // Duplicate after the reply exists: repeat it, no redelivery.
        let a = p.on_msg(PeerMsg::Request { from: pid(1), bit: 1, data: b"q".to_vec() });
        assert!(matches!(&a[..], [PeerAction::Send { msg: PeerMsg::Reply { data, .. }, .. }] if data == b"ans"));
        // Flipped bit is a new request.
        let a = p.on_msg(PeerMsg::Request { from: pid(1), bit: 0, data: b"q2".to_vec() });
        assert!(matches!(&a[..], [PeerAction::Deliver { .. }]));
    }

    #[test]
    fn uup_round_closes_on_timer_with_partial_replies() {
        let mut c = UupCoordinator::new(pid(1), vec![pid(2), pid(3)], 5_000);
        let a = c.start_round(vec![]);
        assert_eq!(a.iter().filter(|x| matches!(x, PeerAction::Send { .. })).count(), 2);
        c.on_msg(PeerMsg::Reply { from: pid(3), bit: 1, data: b"only".to_vec() });
        let a = c.on_timer(1);
        match &a[..] {
            [PeerAction::RoundComplete { replies }] => {
                assert_eq!(replies.len(), 1);
                assert!(replies.contains_key(&pid(3)));
            }
            other => panic!("expected completion, got {other:?}"),
        }
    }

    #[test]
    fn streamer_emits_exactly_count_datagrams() {
        let mut s = UupStreamer::new(pid(2), pid(1), 3, 8);
        let mut seen = 0;
        while let Some((dst, msg)) = s.next_msg() {
            assert_eq!(dst, pid(1));
            assert_eq!(msg.wire_len(), 4 + 1 + 4 + 2 + 8);
            seen += 1;
        }
        assert_eq!(seen, 3);
    }
}
