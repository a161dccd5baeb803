//! Group request-reply over a shared broadcast medium.
//!
//! A single coordinator drives 1-N request-reply interactions against the
//! other members of a process group. Each request broadcast carries a reply
//! mask that both addresses the recipients and assigns them collision-free
//! reply slots, so a full interaction costs one frame per participant on the
//! wire. The same mechanism handles group membership: view changes are pushed
//! by the coordinator and acknowledged in slot order, joins and leaves are
//! polled, and coordinator failure is resolved by a deterministic election
//! that needs no extra messages.
//!
//! The crate is organised in layers:
//!
//! * [`protocol`] is the core state machine. It is pure: events in, actions
//!   out, no clocks, sockets or threads. Hosts decide what a timer or a
//!   broadcast means.
//! * [`wire`] is the frame codec used by real transports.
//! * [`sim`] is a deterministic discrete-event simulator that hosts protocol
//!   machines over a lossy, serialised broadcast medium with crash faults and
//!   a bounded fault detector.
//! * [`baselines`] are the unicast reference protocols (reliable sequential,
//!   reliable parallel, unreliable parallel) used for comparison runs.
//! * [`exp`] drives scripted experiments and property campaigns and writes
//!   CSV metrics.
//! * [`udp`] runs a protocol machine over real UDP sockets.
//!
//! See the `examples/` directory for runnable walkthroughs of each layer.

#![forbid(unsafe_code)]

pub mod baselines;
pub mod exp;
pub mod protocol;
pub mod sim;
pub mod udp;
pub mod wire;

pub use protocol::{
    Action, AppCall, Config, Error, Event, Machine, MemberState, Message, ProcessId, ReplyMask,
    Ticket, TimerKind, Via,
};
