//! Shared protocol types: identifiers, messages, events, actions, config.
//!
//! All durations are virtual microseconds held in `u64`. The machine never
//! reads a clock; relative delays appear in [`Action::SetTimer`] and the host
//! is responsible for firing [`Event::TimerFired`] with the same epoch.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::mask::ReplyMask;
use super::view::ViewEntry;

/// Hard cap on group size, fixed by the 64-bit reply mask.
pub const MAX_GROUP_SIZE: usize = 64;

/// Default cap on application payload bytes per message.
pub const MAX_PAYLOAD: usize = 1024;

/// Process identifier, valid range `1..=64`.
///
/// The identifier doubles as a reply-mask position: process `p` owns bit
/// `p - 1`. Identifiers are assigned out of band and never change.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProcessId(u8);

impl ProcessId {
    pub fn new(v: u8) -> Result<Self, Error> {
        if v == 0 || v as usize > MAX_GROUP_SIZE {
            return Err(Error::InvalidProcessId(v));
        }
        Ok(ProcessId(v))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Bit index inside a reply mask.
    pub fn bit_index(self) -> u32 {
        (self.0 - 1) as u32
    }
}

impl fmt::Debug for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Convenience constructor for literals in tests and examples. Panics on 0 or
/// values above 64.
pub fn pid(v: u8) -> ProcessId {
    ProcessId::new(v).expect("process id out of range")
}

/// Group ticket. Tickets order members for coordinator election: the member
/// holding the minimum ticket is the coordinator. Assignment is monotone, a
/// ticket value is never reused within a group's lifetime.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ticket(u32);

impl Ticket {
    pub fn new(v: u32) -> Result<Self, Error> {
        if v == 0 {
            return Err(Error::InvalidTicket);
        }
        Ok(Ticket(v))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl fmt::Debug for Ticket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

/// Membership state of one process.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum MemberState {
    /// Full member, serving requests.
    Normal,
    /// Waiting to be admitted: answers join polls, accepts view pushes.
    Join,
    /// Member that wants out: keeps serving until the next leave poll.
    Leave,
    /// Not a member. Ignores all group traffic.
    Left,
}

impl fmt::Display for MemberState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MemberState::Normal => "NORMAL",
            MemberState::Join => "JOIN",
            MemberState::Leave => "LEAVE",
            MemberState::Left => "LEFT",
        };
        f.write_str(s)
    }
}

/// Protocol messages.
///
/// `Areq`/`Arpl` carry the application request-reply exchange, `Jpoll`/`Join`
/// and `Lpoll`/`Left` implement membership polling, `Vpush`/`Vack` distribute
/// group views. Everything except `Join` travels as a broadcast.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Message {
    /// Application request from the coordinator. `rmask` addresses the
    /// recipients and fixes their reply slots.
    Areq {
        pid: ProcessId,
        seqno: u32,
        rmask: ReplyMask,
        data: Vec<u8>,
    },
    /// Application reply from an addressed member.
    Arpl {
        pid: ProcessId,
        seqno: u32,
        data: Vec<u8>,
    },
    /// Join poll from the coordinator.
    Jpoll { pid: ProcessId },
    /// Join request, unicast to the polling coordinator.
    Join { pid: ProcessId },
    /// Leave poll from the coordinator.
    Lpoll { pid: ProcessId },
    /// Departure announcement; also sent by a leaving coordinator.
    Left { pid: ProcessId },
    /// View push from the coordinator. Carries the full view; `rmask`
    /// addresses the members that must acknowledge.
    Vpush {
        pid: ProcessId,
        rmask: ReplyMask,
        view: Vec<ViewEntry>,
    },
    /// View acknowledgement from an addressed member.
    Vack { pid: ProcessId },
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Areq { .. } => MessageKind::Areq,
            Message::Arpl { .. } => MessageKind::Arpl,
            Message::Jpoll { .. } => MessageKind::Jpoll,
            Message::Join { .. } => MessageKind::Join,
            Message::Lpoll { .. } => MessageKind::Lpoll,
            Message::Left { .. } => MessageKind::Left,
            Message::Vpush { .. } => MessageKind::Vpush,
            Message::Vack { .. } => MessageKind::Vack,
        }
    }

    /// Sending process.
    pub fn sender(&self) -> ProcessId {
        match self {
            Message::Areq { pid, .. }
            | Message::Arpl { pid, .. }
            | Message::Jpoll { pid }
            | Message::Join { pid }
            | Message::Lpoll { pid }
            | Message::Left { pid }
            | Message::Vpush { pid, .. }
            | Message::Vack { pid } => *pid,
        }
    }
}

/// Message discriminant, also the wire type code.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
#[repr(u8)]
pub enum MessageKind {
    Areq = 1,
    Arpl = 2,
    Jpoll = 3,
    Join = 4,
    Lpoll = 5,
    Left = 6,
    Vpush = 7,
    Vack = 8,
}

impl MessageKind {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(MessageKind::Areq),
            2 => Some(MessageKind::Arpl),
            3 => Some(MessageKind::Jpoll),
            4 => Some(MessageKind::Join),
            5 => Some(MessageKind::Lpoll),
            6 => Some(MessageKind::Left),
            7 => Some(MessageKind::Vpush),
            8 => Some(MessageKind::Vack),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::Areq => "AREQ",
            MessageKind::Arpl => "ARPL",
            MessageKind::Jpoll => "JPOLL",
            MessageKind::Join => "JOIN",
            MessageKind::Lpoll => "LPOLL",
            MessageKind::Left => "LEFT",
            MessageKind::Vpush => "VPUSH",
            MessageKind::Vack => "VACK",
        }
    }
}

/// How a message reached this process.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Via {
    Broadcast,
    Unicast,
}

/// Timer classes. A timer is identified by `(epoch, kind)`; the machine bumps
/// the epoch whenever it re-arms, so stale firings are ignored without the
/// host having to actually cancel anything.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum TimerKind {
    /// Coordinator retransmission deadline for the current round.
    Retransmit,
    /// Ordinary-member reply slot fallback (also used for join backoff).
    Slot,
    /// End of a join or leave polling window.
    PollWait,
}

impl TimerKind {
    pub fn name(self) -> &'static str {
        match self {
            TimerKind::Retransmit => "RETRANSMIT",
            TimerKind::Slot => "SLOT",
            TimerKind::PollWait => "POLL_WAIT",
        }
    }
}

/// Application-initiated operations.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum AppCall {
    /// Start a request-reply round against `dsts` (must be current members;
    /// the caller's own id is tolerated and skipped). `proc_t` is the reply
    /// processing time the round timeout must budget for.
    RequestReply {
        dsts: BTreeSet<ProcessId>,
        data: Vec<u8>,
        proc_t: u64,
    },
    /// Application reply for an earlier [`Action::DeliverRequest`] with the
    /// same token.
    ReplyReady { token: u64, data: Vec<u8> },
    /// Start trying to join a group (process must currently be out).
    Join,
    /// Ask to leave. The coordinator leaves immediately; an ordinary member
    /// keeps serving until the next leave poll.
    Leave,
    /// Coordinator: poll for joiners, keeping the window open `join_t` after
    /// the poll round trip.
    CheckJoins { join_t: u64 },
    /// Coordinator: poll for leavers.
    CheckLeaves { leave_t: u64 },
}

/// Effects requested from the host.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Action {
    Broadcast(Message),
    Unicast { dst: ProcessId, msg: Message },
    /// Arm a timer for `delay` microseconds from now.
    SetTimer { epoch: u64, kind: TimerKind, delay: u64 },
    /// Best-effort cancellation of all timers armed under `epoch`. Purely an
    /// optimisation: stale firings are ignored by epoch anyway.
    CancelTimers { epoch: u64 },
    /// Hand a received request to the application. The application must
    /// answer with [`AppCall::ReplyReady`] carrying the same token.
    DeliverRequest { token: u64, data: Vec<u8> },
    /// This process just became coordinator of the listed members.
    NotifyBecameCoord { members: Vec<ProcessId> },
    /// The membership changed (join accepted or member removed).
    NotifyGroupChanged { members: Vec<ProcessId> },
    /// The pending round finished. For request-reply rounds the map carries
    /// one reply per addressed member that survived the round.
    RoundComplete {
        replies: BTreeMap<ProcessId, Vec<u8>>,
    },
}

/// Events fed into the machine by the host.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Event {
    MsgRecv { msg: Message, via: Via },
    TimerFired { epoch: u64, kind: TimerKind },
    /// The local fault detector reports `pid` as failed (or departed).
    FaultNotify { pid: ProcessId },
    App(AppCall),
}

/// Protocol timing and limits.
///
/// `msg_t` is the worst-case one-way delivery time of a frame on the medium.
/// Everything the protocol waits for is derived from it, so it must dominate
/// the largest frame's transmission plus propagation time.
#[derive(Clone, Debug)]
pub struct Config {
    /// Worst-case message delivery time, microseconds. Must be positive.
    pub msg_t: u64,
    /// Worst-case fault detection delay, microseconds. Must be at least
    /// `msg_t`.
    pub fault_detect_t: u64,
    /// Default request processing budget used when the application does not
    /// specify one per call.
    pub default_proc_t: u64,
    /// Maximum application payload per message, bytes.
    pub max_payload: usize,
    /// Upper bound for the random backoff applied before answering a join
    /// poll. Zero means answer immediately.
    pub join_backoff_max: u64,
    /// Seed for the backoff draw, so hosts can make runs reproducible.
    pub backoff_seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            msg_t: 15_000,
            fault_detect_t: 100_000,
            default_proc_t: 1_000,
            max_payload: MAX_PAYLOAD,
            join_backoff_max: 0,
            backoff_seed: 0,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), Error> {
        if self.msg_t == 0 {
            return Err(Error::InvalidConfig("msg_t must be positive"));
        }
        if self.fault_detect_t < self.msg_t {
            return Err(Error::InvalidConfig("fault_detect_t must be at least msg_t"));
        }
        if self.max_payload > MAX_PAYLOAD {
            return Err(Error::InvalidConfig("max_payload above protocol limit"));
        }
        Ok(())
    }
}

/// Rejection reasons for application calls and construction errors. Message
/// and timer events never fail; invalid ones are ignored.
#[derive(Clone, PartialEq, Eq, Debug, thiserror::Error)]
pub enum Error {
    #[error("process id {0} out of range 1..=64")]
    InvalidProcessId(u8),
    #[error("ticket must be positive")]
    InvalidTicket,
    #[error("group of {0} exceeds 64 processes")]
    GroupTooLarge(usize),
    #[error("{0} is not in the initial member set")]
    NotInitialMember(ProcessId),
    #[error("caller is not the coordinator")]
    NotCoordinator,
    #[error("a round is already in progress")]
    RoundInProgress,
    #[error("{0} is not a group member")]
    UnknownDestination(ProcessId),
    #[error("payload of {len} bytes exceeds limit {max}")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("operation invalid in state {state}")]
    WrongState { state: MemberState },
    #[error("invalid config: {0}")]
    InvalidConfig(&'static str),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn process_id_range() {
        assert!(ProcessId::new(0).is_err());
        assert!(ProcessId::new(65).is_err());
        assert_eq!(ProcessId::new(1).unwrap().bit_index(), 0);
        assert_eq!(ProcessId::new(64).unwrap().bit_index(), 63);
    }

    #[test]
    fn message_kind_codes_are_a_bijection() {
        for code in 1..=8u8 {
            let kind = MessageKind::from_code(code).unwrap();
            assert_eq!(kind.code(), code);
        }
        assert_eq!(MessageKind::from_code(0), None);
        assert_eq!(MessageKind::from_code(9), None);
    }

    #[test]
    fn config_validation() {
        assert!(Config::default().validate().is_ok());
        let bad = Config { msg_t: 0, ..Config::default() };
        assert!(bad.validate().is_err());
        let bad = Config { fault_detect_t: 10, msg_t: 11, ..Config::default() };
        assert!(bad.validate().is_err());
    }
}
