//! UDP transport adapter: one OS thread per process, driving a [`Machine`]
//! over real sockets.
//!
//! The shared medium is emulated on loopback: every process knows every
//! peer's socket address, and a protocol broadcast is fanned out as one
//! datagram per peer. Received frames are decoded with [`crate::wire`] and
//! fed to the machine; the machine itself never sees a socket.
//!
//! Fault detection is a heartbeat scheme. Every process sends a 5-byte
//! heartbeat (`MAGIC`, version, `0x10`, own pid) to all peers at a quarter
//! of the configured detection bound; a group member that stays silent for
//! three intervals is reported to the machine as failed. Any datagram from
//! a peer counts as a sign of life, heartbeats and protocol frames alike.
//!
//! Control is a text command channel (see [`Command::parse`]), and the node
//! reports membership changes, deliveries and round completions back on an
//! event channel. Incoming requests are answered by the node's responder
//! function as soon as they are delivered.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use crate::protocol::{
    Action, AppCall, Config, Error, Event, Machine, MemberState, ProcessId, TimerKind, Via,
};
use crate::wire;

/// Heartbeat discriminator in the kind byte; protocol kinds stay below it.
const HEARTBEAT_KIND: u8 = 0x10;

fn heartbeat_frame(pid: ProcessId) -> [u8; 5] {
    [wire::MAGIC[0], wire::MAGIC[1], wire::VERSION, HEARTBEAT_KIND, pid.get()]
}

fn parse_heartbeat(buf: &[u8]) -> Option<ProcessId> {
    if buf.len() == 5
        && buf[0..2] == wire::MAGIC
        && buf[2] == wire::VERSION
        && buf[3] == HEARTBEAT_KIND
    {
        ProcessId::new(buf[4]).ok()
    } else {
        None
    }
}

/// Control commands accepted by a running node.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Command {
    Join,
    Leave,
    /// Request-reply round. Empty `dsts` means all current members.
    Request { data: Vec<u8>, dsts: BTreeSet<ProcessId> },
    CheckJoins { window: Duration },
    CheckLeaves { window: Duration },
    Shutdown,
}

impl Command {
    /// Parse the text control syntax:
    ///
    /// ```text
    /// join
    /// leave
    /// checkjoins <ms>
    /// checkleaves <ms>
    /// req <hex-payload> all
    /// req <hex-payload> <pid>,<pid>,...
    /// quit
    /// ```
    pub fn parse(line: &str) -> Result<Command, String> {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["join"] => Ok(Command::Join),
            ["leave"] => Ok(Command::Leave),
            ["quit"] | ["shutdown"] => Ok(Command::Shutdown),
            ["checkjoins", ms] => Ok(Command::CheckJoins { window: parse_ms(ms)? }),
            ["checkleaves", ms] => Ok(Command::CheckLeaves { window: parse_ms(ms)? }),
            ["req", payload, dsts] => {
                let data = hex::decode(payload).map_err(|e| format!("bad payload hex: {e}"))?;
                let dsts = if *dsts == "all" {
                    BTreeSet::new()
                } else {
                    let mut set = BTreeSet::new();
                    for p in dsts.split(',') {
                        let raw: u8 = p.parse().map_err(|_| format!("bad pid {p:?}"))?;
                        set.insert(ProcessId::new(raw).map_err(|e| e.to_string())?);
                    }
                    set
                };
                Ok(Command::Request { data, dsts })
            }
            _ => Err(format!("unknown command {line:?}")),
        }
    }
}

fn parse_ms(s: &str) -> Result<Duration, String> {
    s.parse::<u64>().map(Duration::from_millis).map_err(|_| format!("bad duration {s:?}"))
}

/// What a node reports back to its owner.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum NodeEvent {
    BecameCoord { members: Vec<ProcessId> },
    GroupChanged { members: Vec<ProcessId> },
    RequestDelivered { token: u64, len: usize },
    RoundDone { replies: BTreeMap<ProcessId, Vec<u8>> },
    /// A membership poll (checkjoins or checkleaves) ran its course.
    PollDone { kind: &'static str },
    /// A control command was rejected by the machine.
    CallFailed { cmd: String, err: String },
}

impl fmt::Display for NodeEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeEvent::BecameCoord { members } => write!(f, "became coordinator of {members:?}"),
            NodeEvent::GroupChanged { members } => write!(f, "group changed: {members:?}"),
            NodeEvent::RequestDelivered { token, len } => {
                write!(f, "request delivered (token {token}, {len} bytes)")
            }
            NodeEvent::RoundDone { replies } => {
                write!(f, "round done, {} replies from {:?}", replies.len(), replies.keys())
            }
            NodeEvent::PollDone { kind } => write!(f, "{kind} poll finished"),
            NodeEvent::CallFailed { cmd, err } => write!(f, "{cmd} failed: {err}"),
        }
    }
}

/// Builds the reply for an incoming request.
pub type Responder = Box<dyn FnMut(&[u8]) -> Vec<u8> + Send>;

/// Responder that answers with the process id followed by the first bytes
/// of the request, so replies are attributable in tests and demos.
pub fn echo_responder(pid: ProcessId) -> Responder {
    Box::new(move |req: &[u8]| {
        let mut v = vec![pid.get()];
        v.extend_from_slice(&req[..req.len().min(15)]);
        v
    })
}

/// Node parameters. `initial_members` empty means the process starts out of
/// the group and must be told to `join`.
pub struct NodeSetup {
    pub pid: ProcessId,
    pub peers: BTreeMap<ProcessId, SocketAddr>,
    pub initial_members: BTreeSet<ProcessId>,
    pub config: Config,
}

/// Handle to a running node thread.
pub struct NodeHandle {
    pid: ProcessId,
    addr: SocketAddr,
    cmd_tx: mpsc::Sender<Command>,
    events: mpsc::Receiver<NodeEvent>,
    thread: Option<thread::JoinHandle<io::Result<()>>>,
}

impl NodeHandle {
    pub fn pid(&self) -> ProcessId {
        self.pid
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Queue a control command. False if the node is gone.
    pub fn command(&self, cmd: Command) -> bool {
        self.cmd_tx.send(cmd).is_ok()
    }

    pub fn next_event(&self, timeout: Duration) -> Option<NodeEvent> {
        self.events.recv_timeout(timeout).ok()
    }

    /// Drain events until one matches or the deadline passes.
    pub fn wait_for<F: Fn(&NodeEvent) -> bool>(&self, timeout: Duration, f: F) -> Option<NodeEvent> {
        let deadline = Instant::now() + timeout;
        loop {
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            match self.events.recv_timeout(deadline - now) {
                Ok(ev) if f(&ev) => return Some(ev),
                Ok(_) => continue,
                Err(_) => return None,
            }
        }
    }

    /// Ask the node to exit and wait for its thread.
    pub fn shutdown(mut self) -> io::Result<()> {
        let _ = self.cmd_tx.send(Command::Shutdown);
        match self.thread.take() {
            Some(t) => t.join().unwrap_or(Ok(())),
            None => Ok(()),
        }
    }

    /// Kill the node without a goodbye: the thread exits, heartbeats stop,
    /// and the survivors' fault detectors take it from there.
    pub fn kill(self) -> io::Result<()> {
        self.shutdown()
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        let _ = self.cmd_tx.send(Command::Shutdown);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Bind the address listed for `setup.pid` in the peer table and run a node
/// on it.
pub fn spawn_node(setup: NodeSetup, responder: Responder) -> io::Result<NodeHandle> {
    let addr = *setup
        .peers
        .get(&setup.pid)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "own pid missing from peers"))?;
    let socket = UdpSocket::bind(addr)?;
    spawn_node_with_socket(setup, socket, responder)
}

/// Run a node on an already-bound socket (lets tests bind port 0 first and
/// exchange the resulting addresses).
pub fn spawn_node_with_socket(
    setup: NodeSetup,
    socket: UdpSocket,
    responder: Responder,
) -> io::Result<NodeHandle> {
    let addr = socket.local_addr()?;
    let (cmd_tx, cmd_rx) = mpsc::channel();
    let (event_tx, events) = mpsc::channel();
    let pid = setup.pid;
    let thread = thread::Builder::new()
        .name(format!("cbgrr-n{:02}", pid.get()))
        .spawn(move || node_loop(setup, socket, responder, cmd_rx, event_tx))?;
    Ok(NodeHandle { pid, addr, cmd_tx, events, thread: Some(thread) })
}

struct TimerEntry {
    at: Instant,
    epoch: u64,
    kind: TimerKind,
}

impl PartialEq for TimerEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}
impl Eq for TimerEntry {}
impl PartialOrd for TimerEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for TimerEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Reversed: BinaryHeap pops the soonest deadline first.
        (other.at, other.epoch, other.kind.name()).cmp(&(self.at, self.epoch, self.kind.name()))
    }
}

struct Node {
    machine: Machine,
    socket: UdpSocket,
    peers: BTreeMap<ProcessId, SocketAddr>,
    addr_to_pid: BTreeMap<SocketAddr, ProcessId>,
    responder: Responder,
    events: mpsc::Sender<NodeEvent>,
    timers: BinaryHeap<TimerEntry>,
    cancelled: BTreeSet<u64>,
    // Commands that hit a busy machine, waiting to be retried.
    retries: Vec<(Instant, Command)>,
    // Set while a membership poll is the machine's open round, so its
    // completion is reported as PollDone instead of a request round.
    open_poll: Option<&'static str>,
    last_seen: BTreeMap<ProcessId, Instant>,
    suspected: BTreeSet<ProcessId>,
    hb_interval: Duration,
    suspect_after: Duration,
    next_hb: Instant,
    next_fd: Instant,
}

fn node_loop(
    setup: NodeSetup,
    socket: UdpSocket,
    responder: Responder,
    cmd_rx: mpsc::Receiver<Command>,
    events: mpsc::Sender<NodeEvent>,
) -> io::Result<()> {
    let NodeSetup { pid, peers, initial_members, config } = setup;
    let hb_interval = Duration::from_micros((config.fault_detect_t / 4).max(1_000));
    let (machine, actions) = Machine::init(pid, &initial_members, config)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    let addr_to_pid = peers.iter().map(|(&p, &a)| (a, p)).collect();
    let now = Instant::now();
    let mut node = Node {
        machine,
        socket,
        peers,
        addr_to_pid,
        responder,
        events,
        timers: BinaryHeap::new(),
        cancelled: BTreeSet::new(),
        retries: Vec::new(),
        open_poll: None,
        last_seen: BTreeMap::new(),
        suspected: BTreeSet::new(),
        hb_interval,
        suspect_after: hb_interval * 3,
        next_hb: now,
        next_fd: now + hb_interval,
    };
    node.run_actions(actions)?;

    let mut buf = [0u8; wire::MAX_FRAME + 16];
    loop {
        loop {
            match cmd_rx.try_recv() {
                Ok(Command::Shutdown) => return Ok(()),
                Ok(cmd) => node.handle_command(cmd)?,
                Err(mpsc::TryRecvError::Empty) => break,
                Err(mpsc::TryRecvError::Disconnected) => return Ok(()),
            }
        }

        let now = Instant::now();
        while let Some(i) = node.retries.iter().position(|&(at, _)| at <= now) {
            let (_, cmd) = node.retries.swap_remove(i);
            node.handle_command(cmd)?;
        }
        node.fire_due_timers(now)?;
        if now >= node.next_hb {
            node.send_heartbeats()?;
            node.next_hb = now + node.hb_interval;
        }
        if now >= node.next_fd {
            node.check_faults(now)?;
            node.next_fd = now + node.hb_interval / 2;
        }

        let mut wake = node.next_hb.min(node.next_fd);
        if let Some(t) = node.timers.peek() {
            wake = wake.min(t.at);
        }
        if let Some(&(at, _)) = node.retries.iter().min_by_key(|&&(at, _)| at) {
            wake = wake.min(at);
        }
        let now = Instant::now();
        let timeout = wake.saturating_duration_since(now).max(Duration::from_micros(200));
        node.socket.set_read_timeout(Some(timeout.min(Duration::from_millis(10))))?;
        match node.socket.recv_from(&mut buf) {
            Ok((len, from)) => node.handle_datagram(&buf[..len], from)?,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(e) => return Err(e),
        }
    }
}

impl Node {
    fn me(&self) -> ProcessId {
        self.machine.my_id()
    }

    fn emit(&self, ev: NodeEvent) {
        let _ = self.events.send(ev);
    }

    fn handle_command(&mut self, cmd: Command) -> io::Result<()> {
        let label = format!("{cmd:?}");
        let retry = cmd.clone();
        let poll = match &cmd {
            Command::CheckJoins { .. } => Some("joins"),
            Command::CheckLeaves { .. } => Some("leaves"),
            _ => None,
        };
        let call = match cmd {
            Command::Join => AppCall::Join,
            Command::Leave => AppCall::Leave,
            Command::CheckJoins { window } => {
                AppCall::CheckJoins { join_t: window.as_micros() as u64 }
            }
            Command::CheckLeaves { window } => {
                AppCall::CheckLeaves { leave_t: window.as_micros() as u64 }
            }
            Command::Request { data, dsts } => {
                let dsts = if dsts.is_empty() {
                    let me = self.me();
                    self.machine.members().into_iter().filter(|&p| p != me).collect()
                } else {
                    dsts
                };
                let proc_t = self.machine.config().default_proc_t;
                AppCall::RequestReply { dsts, data, proc_t }
            }
            Command::Shutdown => unreachable!("handled by the loop"),
        };
        match self.machine.handle(Event::App(call)) {
            Ok(actions) => {
                self.open_poll = poll;
                self.run_actions(actions)
            }
            Err(Error::RoundInProgress) => {
                // Stop-and-wait: one round at a time. The machine frees up on
                // its own (rounds always terminate), so just try again later.
                let delay = Duration::from_micros(self.machine.config().msg_t);
                self.retries.push((Instant::now() + delay, retry));
                Ok(())
            }
            Err(e) => {
                self.emit(NodeEvent::CallFailed { cmd: label, err: e.to_string() });
                Ok(())
            }
        }
    }

    fn handle_datagram(&mut self, buf: &[u8], from: SocketAddr) -> io::Result<()> {
        if let Some(&pid) = self.addr_to_pid.get(&from) {
            self.last_seen.insert(pid, Instant::now());
            self.suspected.remove(&pid);
        }
        if parse_heartbeat(buf).is_some() {
            return Ok(());
        }
        match wire::decode(buf) {
            Ok(msg) => {
                // The fan-out flattens everything to unicast datagrams; the
                // machine keys off message kind and addressing, not the path.
                match self.machine.handle(Event::MsgRecv { msg, via: Via::Broadcast }) {
                    Ok(actions) => self.run_actions(actions)?,
                    Err(e) => self.emit(NodeEvent::CallFailed {
                        cmd: "recv".into(),
                        err: e.to_string(),
                    }),
                }
            }
            Err(_) => {
                // Not ours; the medium is shared, ignore it.
            }
        }
        Ok(())
    }

    fn fire_due_timers(&mut self, now: Instant) -> io::Result<()> {
        while let Some(t) = self.timers.peek() {
            if t.at > now {
                break;
            }
            let t = self.timers.pop().unwrap();
            if self.cancelled.remove(&t.epoch) {
                // A cancelled epoch may cover several timers; keep the marker
                // until the epoch is in the past entirely.
                self.cancelled.insert(t.epoch);
                continue;
            }
            match self.machine.handle(Event::TimerFired { epoch: t.epoch, kind: t.kind }) {
                Ok(actions) => self.run_actions(actions)?,
                Err(e) => self.emit(NodeEvent::CallFailed { cmd: "timer".into(), err: e.to_string() }),
            }
        }
        // Epoch markers for fully-drained epochs can go.
        let live: BTreeSet<u64> = self.timers.iter().map(|t| t.epoch).collect();
        self.cancelled.retain(|e| live.contains(e));
        Ok(())
    }

    fn send_heartbeats(&mut self) -> io::Result<()> {
        let frame = heartbeat_frame(self.me());
        let me = self.me();
        for (&pid, &addr) in &self.peers {
            if pid != me {
                let _ = self.socket.send_to(&frame, addr);
            }
        }
        Ok(())
    }

    fn check_faults(&mut self, now: Instant) -> io::Result<()> {
        if self.machine.state() == MemberState::Left {
            return Ok(());
        }
        let me = self.me();
        let mut newly = Vec::new();
        for pid in self.machine.members() {
            if pid == me || self.suspected.contains(&pid) {
                continue;
            }
            let seen = *self.last_seen.entry(pid).or_insert(now);
            if now.duration_since(seen) > self.suspect_after {
                newly.push(pid);
            }
        }
        for pid in newly {
            self.suspected.insert(pid);
            match self.machine.handle(Event::FaultNotify { pid }) {
                Ok(actions) => self.run_actions(actions)?,
                Err(e) => {
                    self.emit(NodeEvent::CallFailed { cmd: "fault".into(), err: e.to_string() })
                }
            }
        }
        Ok(())
    }

    fn run_actions(&mut self, actions: Vec<Action>) -> io::Result<()> {
        let mut queue: Vec<Action> = actions;
        while !queue.is_empty() {
            let mut follow = Vec::new();
            for action in queue {
                match action {
                    Action::Broadcast(msg) => {
                        let frame = wire::encode(&msg)
                            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
                        let me = self.me();
                        for (&pid, &addr) in &self.peers {
                            if pid != me {
                                let _ = self.socket.send_to(&frame, addr);
                            }
                        }
                    }
                    Action::Unicast { dst, msg } => {
                        let frame = wire::encode(&msg)
                            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
                        if let Some(&addr) = self.peers.get(&dst) {
                            let _ = self.socket.send_to(&frame, addr);
                        }
                    }
                    Action::SetTimer { epoch, kind, delay } => {
                        self.timers.push(TimerEntry {
                            at: Instant::now() + Duration::from_micros(delay),
                            epoch,
                            kind,
                        });
                    }
                    Action::CancelTimers { epoch } => {
                        self.cancelled.insert(epoch);
                    }
                    Action::DeliverRequest { token, data } => {
                        self.emit(NodeEvent::RequestDelivered { token, len: data.len() });
                        let reply = (self.responder)(&data);
                        match self.machine.reply_ready(token, reply) {
                            Ok(actions) => follow.extend(actions),
                            Err(e) => self.emit(NodeEvent::CallFailed {
                                cmd: "reply".into(),
                                err: e.to_string(),
                            }),
                        }
                    }
                    Action::NotifyBecameCoord { members } => {
                        self.emit(NodeEvent::BecameCoord { members });
                    }
                    Action::NotifyGroupChanged { members } => {
                        self.emit(NodeEvent::GroupChanged { members });
                    }
                    Action::RoundComplete { replies } => match self.open_poll.take() {
                        Some(kind) => self.emit(NodeEvent::PollDone { kind }),
                        None => self.emit(NodeEvent::RoundDone { replies }),
                    },
                }
            }
            queue = follow;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::pid;

    #[test]
    fn control_syntax_round_trips() {
        assert_eq!(Command::parse("join").unwrap(), Command::Join);
        assert_eq!(Command::parse("leave").unwrap(), Command::Leave);
        assert_eq!(
            Command::parse("checkjoins 50").unwrap(),
            Command::CheckJoins { window: Duration::from_millis(50) }
        );
        assert_eq!(
            Command::parse("req 68656c6c6f 2,3").unwrap(),
            Command::Request {
                data: b"hello".to_vec(),
                dsts: [pid(2), pid(3)].into_iter().collect(),
            }
        );
        assert_eq!(
            Command::parse("req ff all").unwrap(),
            Command::Request { data: vec![0xff], dsts: BTreeSet::new() }
        );
        assert!(Command::parse("req zz all").is_err());
        assert!(Command::parse("flood").is_err());
    }

    #[test]
    fn heartbeats_parse_and_reject() {
        let hb = heartbeat_frame(pid(7));
        assert_eq!(parse_heartbeat(&hb), Some(pid(7)));
        assert_eq!(parse_heartbeat(&hb[..4]), None);
        assert_eq!(parse_heartbeat(&[0u8; 5]), None);
        // A real frame is not a heartbeat.
        assert!(wire::decode(&hb).is_err());
    }

    fn local_setup(n: u8) -> (Vec<UdpSocket>, BTreeMap<ProcessId, SocketAddr>) {
        let mut socks = Vec::new();
        let mut peers = BTreeMap::new();
        for p in 1..=n {
            let s = UdpSocket::bind("127.0.0.1:0").expect("bind loopback");
            peers.insert(pid(p), s.local_addr().unwrap());
            socks.push(s);
        }
        (socks, peers)
    }

    fn fast_config() -> Config {
        Config { msg_t: 20_000, fault_detect_t: 200_000, ..Config::default() }
    }

    #[test]
    fn two_nodes_complete_a_round_over_loopback() {
        let (socks, peers) = local_setup(2);
        let members: BTreeSet<ProcessId> = peers.keys().copied().collect();
        let mut handles = Vec::new();
        for (i, sock) in socks.into_iter().enumerate() {
            let p = pid(i as u8 + 1);
            let setup = NodeSetup {
                pid: p,
                peers: peers.clone(),
                initial_members: members.clone(),
                config: fast_config(),
            };
            handles.push(spawn_node_with_socket(setup, sock, echo_responder(p)).unwrap());
        }
        assert!(handles[0].command(Command::Request { data: b"ping".to_vec(), dsts: BTreeSet::new() }));
        let done = handles[0]
            .wait_for(Duration::from_secs(5), |e| matches!(e, NodeEvent::RoundDone { .. }))
            .expect("round should complete");
        match done {
            NodeEvent::RoundDone { replies } => {
                assert_eq!(replies.len(), 1);
                assert_eq!(replies[&pid(2)][0], 2, "reply carries the responder's id");
            }
            _ => unreachable!(),
        }
        for h in handles {
            h.shutdown().unwrap();
        }
    }
}
