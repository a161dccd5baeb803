//! Core protocol state machine: pure, transport-agnostic, deterministic.
//!
//! Hosts own all I/O. They construct a [`Machine`] per process, feed it
//! [`Event`]s and execute the returned [`Action`]s. See the crate docs for
//! the overall picture and [`machine`] for the event-handling rules.

mod machine;
mod mask;
mod types;
mod view;

pub use machine::{Machine, RoundKind};
pub use mask::ReplyMask;
pub use types::{
    pid, Action, AppCall, Config, Error, Event, MemberState, Message, MessageKind, ProcessId,
    Ticket, TimerKind, Via, MAX_GROUP_SIZE, MAX_PAYLOAD,
};
pub use view::{GroupView, ViewEntry};
