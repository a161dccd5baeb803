//! The per-process protocol state machine.
//!
//! One [`Machine`] instance embodies one process. It is driven exclusively
//! through [`Machine::handle`]: the host feeds in received messages, timer
//! firings, fault notifications and application calls, and executes the
//! returned actions. The machine itself owns no clock, socket or thread,
//! which makes it equally at home under the deterministic simulator and the
//! UDP transport.
//!
//! Concurrency discipline is stop-and-wait: a coordinator runs at most one
//! round (request-reply, view push, join poll or leave poll) at a time and
//! retransmits it until every addressed member answered or was removed by
//! the fault detector. Ordinary members hold at most one pending duty: a
//! reply owed for the current request, an acknowledgement owed for a view
//! push, or a join request waiting out its backoff.
//!
//! Timers are identified by `(epoch, kind)`. Epochs come from a counter that
//! is bumped every time something is armed, so a firing for anything but the
//! exact current epoch is stale and ignored. `CancelTimers` actions are an
//! optimisation hint, not a correctness requirement.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mask::ReplyMask;
use super::types::{
    Action, AppCall, Config, Error, Event, MemberState, Message, ProcessId, TimerKind, Via,
};
use super::view::{GroupView, ViewEntry};

/// What kind of round the coordinator is currently running.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum RoundKind {
    Idle,
    RequestReply,
    ViewPush,
    JoinPoll,
    LeavePoll,
}

enum Round {
    Idle,
    RequestReply {
        epoch: u64,
        /// Addressees of the round; reply bookkeeping is against this.
        initial: ReplyMask,
        /// Addressees still owing a reply. Retransmissions carry this mask.
        pending: ReplyMask,
        replies: BTreeMap<ProcessId, Vec<u8>>,
        data: Vec<u8>,
        proc_t: u64,
    },
    ViewPush {
        epoch: u64,
        pending: ReplyMask,
        /// Remaining target sets of the push sequence, pushed one at a time.
        queue: VecDeque<Vec<ProcessId>>,
        /// Whether an application call is blocked on this round.
        app_initiated: bool,
        /// Whether finishing the sequence commits pending admissions.
        clear_flags_on_finish: bool,
    },
    JoinPoll {
        epoch: u64,
    },
    LeavePoll {
        epoch: u64,
    },
}

impl Round {
    fn kind(&self) -> RoundKind {
        match self {
            Round::Idle => RoundKind::Idle,
            Round::RequestReply { .. } => RoundKind::RequestReply,
            Round::ViewPush { .. } => RoundKind::ViewPush,
            Round::JoinPoll { .. } => RoundKind::JoinPoll,
            Round::LeavePoll { .. } => RoundKind::LeavePoll,
        }
    }

    fn epoch(&self) -> Option<u64> {
        match self {
            Round::Idle => None,
            Round::RequestReply { epoch, .. }
            | Round::ViewPush { epoch, .. }
            | Round::JoinPoll { epoch }
            | Round::LeavePoll { epoch } => Some(*epoch),
        }
    }
}

/// Ordinary-member side of a round: the one transmission this process owes.
struct Duty {
    kind: DutyKind,
    epoch: u64,
    timer_armed: bool,
}

enum DutyKind {
    /// Reply owed for request `seqno`.
    Reply {
        seqno: u32,
        /// Mask from the most recent request copy; defines the slot schedule.
        slot_mask: ReplyMask,
        /// Request handed to the application, reply not produced yet.
        awaiting_app: bool,
        /// Token the application must echo in `ReplyReady`.
        token: u64,
        /// Set when the predecessor's reply was overheard while the
        /// application was still processing.
        my_turn: bool,
    },
    /// Acknowledgement owed for a view push.
    ViewAck { slot_mask: ReplyMask },
    /// Join request waiting out its poll backoff.
    JoinRequest { poller: ProcessId },
}

struct StoredReply {
    seqno: u32,
    data: Vec<u8>,
}

pub struct Machine {
    myid: ProcessId,
    config: Config,
    state: MemberState,
    coordid: Option<ProcessId>,
    grp: GroupView,
    /// Request-reply sequence number: last issued (coordinator) or last
    /// accepted (ordinary member).
    seqno: u32,
    round: Round,
    duty: Option<Duty>,
    /// Reply kept for duplicate requests of the same seqno.
    stored_reply: Option<StoredReply>,
    epoch_counter: u64,
    token_counter: u64,
    rng: ChaCha8Rng,
}

impl Machine {
    /// Create a process. A non-empty `pids` founds a group with tickets
    /// assigned in ascending id order (so the lowest id starts as
    /// coordinator); an empty set creates a lone process that must join an
    /// existing group before it can do anything else.
    pub fn init(
        myid: ProcessId,
        pids: &BTreeSet<ProcessId>,
        config: Config,
    ) -> Result<(Self, Vec<Action>), Error> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.backoff_seed);
        if pids.is_empty() {
            let m = Machine {
                myid,
                config,
                state: MemberState::Left,
                coordid: None,
                grp: GroupView::default(),
                seqno: 0,
                round: Round::Idle,
                duty: None,
                stored_reply: None,
                epoch_counter: 0,
                token_counter: 0,
                rng,
            };
            return Ok((m, Vec::new()));
        }
        if !pids.contains(&myid) {
            return Err(Error::NotInitialMember(myid));
        }
        let grp = GroupView::founding(pids)?;
        let coordid = grp.coordinator();
        let m = Machine {
            myid,
            config,
            state: MemberState::Normal,
            coordid,
            grp,
            seqno: 0,
            round: Round::Idle,
            duty: None,
            stored_reply: None,
            epoch_counter: 0,
            token_counter: 0,
            rng,
        };
        let mut actions = Vec::new();
        if m.is_coordinator() {
            actions.push(Action::NotifyBecameCoord { members: m.grp.members() });
        }
        Ok((m, actions))
    }

    pub fn my_id(&self) -> ProcessId {
        self.myid
    }

    pub fn state(&self) -> MemberState {
        self.state
    }

    pub fn coordinator(&self) -> Option<ProcessId> {
        self.coordid
    }

    pub fn is_coordinator(&self) -> bool {
        self.state == MemberState::Normal && self.coordid == Some(self.myid)
    }

    pub fn view(&self) -> &GroupView {
        &self.grp
    }

    pub fn members(&self) -> Vec<ProcessId> {
        self.grp.members()
    }

    pub fn seqno(&self) -> u32 {
        self.seqno
    }

    pub fn round_kind(&self) -> RoundKind {
        self.round.kind()
    }

    pub fn is_idle(&self) -> bool {
        matches!(self.round, Round::Idle)
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    /// Single entry point. Message, timer and fault events never fail;
    /// application calls are rejected with an error and leave the state
    /// untouched.
    pub fn handle(&mut self, event: Event) -> Result<Vec<Action>, Error> {
        match event {
            Event::MsgRecv { msg, via } => Ok(self.on_msg(msg, via)),
            Event::TimerFired { epoch, kind } => Ok(self.on_timer(epoch, kind)),
            Event::FaultNotify { pid } => Ok(self.on_failure(pid)),
            Event::App(call) => self.on_app(call),
        }
    }

    // ------------------------------------------------------------------
    // Application calls.

    pub fn request_reply(
        &mut self,
        dsts: BTreeSet<ProcessId>,
        data: Vec<u8>,
        proc_t: u64,
    ) -> Result<Vec<Action>, Error> {
        self.handle(Event::App(AppCall::RequestReply { dsts, data, proc_t }))
    }

    pub fn reply_ready(&mut self, token: u64, data: Vec<u8>) -> Result<Vec<Action>, Error> {
        self.handle(Event::App(AppCall::ReplyReady { token, data }))
    }

    pub fn request_join(&mut self) -> Result<Vec<Action>, Error> {
        self.handle(Event::App(AppCall::Join))
    }

    pub fn request_leave(&mut self) -> Result<Vec<Action>, Error> {
        self.handle(Event::App(AppCall::Leave))
    }

    pub fn check_joins(&mut self, join_t: u64) -> Result<Vec<Action>, Error> {
        self.handle(Event::App(AppCall::CheckJoins { join_t }))
    }

    pub fn check_leaves(&mut self, leave_t: u64) -> Result<Vec<Action>, Error> {
        self.handle(Event::App(AppCall::CheckLeaves { leave_t }))
    }

    fn on_app(&mut self, call: AppCall) -> Result<Vec<Action>, Error> {
        match call {
            AppCall::RequestReply { dsts, data, proc_t } => self.app_request_reply(dsts, data, proc_t),
            AppCall::ReplyReady { token, data } => self.app_reply_ready(token, data),
            AppCall::Join => self.app_join(),
            AppCall::Leave => self.app_leave(),
            AppCall::CheckJoins { join_t } => self.app_poll(RoundKind::JoinPoll, join_t),
            AppCall::CheckLeaves { leave_t } => self.app_poll(RoundKind::LeavePoll, leave_t),
        }
    }

    fn app_request_reply(
        &mut self,
        dsts: BTreeSet<ProcessId>,
        data: Vec<u8>,
        proc_t: u64,
    ) -> Result<Vec<Action>, Error> {
        if !self.is_coordinator() {
            return Err(Error::NotCoordinator);
        }
        if !self.is_idle() {
            return Err(Error::RoundInProgress);
        }
        if data.len() > self.config.max_payload {
            return Err(Error::PayloadTooLarge { len: data.len(), max: self.config.max_payload });
        }
        for &d in &dsts {
            if !self.grp.contains(d) {
                return Err(Error::UnknownDestination(d));
            }
        }
        self.seqno = self.seqno.wrapping_add(1);
        let mask = ReplyMask::from_pids(dsts.into_iter().filter(|&d| d != self.myid));
        if mask.is_empty() {
            return Ok(vec![Action::RoundComplete { replies: BTreeMap::new() }]);
        }
        let epoch = self.fresh_epoch();
        let delay = self.rr_timeout(proc_t, mask.len());
        let msg = Message::Areq { pid: self.myid, seqno: self.seqno, rmask: mask, data: data.clone() };
        self.round = Round::RequestReply {
            epoch,
            initial: mask,
            pending: mask,
            replies: BTreeMap::new(),
            data,
            proc_t,
        };
        Ok(vec![
            Action::Broadcast(msg),
            Action::SetTimer { epoch, kind: TimerKind::Retransmit, delay },
        ])
    }

    /// Round timeout: one delivery for the request, the processing budget,
    /// then one slot per member still owing a reply.
    fn rr_timeout(&self, proc_t: u64, pending: u32) -> u64 {
        self.config.msg_t + proc_t + u64::from(pending) * self.config.msg_t
    }

    /// Push timeout: like a round timeout with no processing budget.
    fn push_timeout(&self, pending: u32) -> u64 {
        self.config.msg_t + u64::from(pending) * self.config.msg_t
    }

    fn app_reply_ready(&mut self, token: u64, data: Vec<u8>) -> Result<Vec<Action>, Error> {
        let matches = matches!(
            &self.duty,
            Some(Duty { kind: DutyKind::Reply { awaiting_app: true, token: t, .. }, .. }) if *t == token
        );
        if !matches {
            // Stale completion for a superseded request; nothing is owed.
            return Ok(Vec::new());
        }
        if data.len() > self.config.max_payload {
            return Err(Error::PayloadTooLarge { len: data.len(), max: self.config.max_payload });
        }
        let duty = self.duty.as_mut().expect("duty checked above");
        if let DutyKind::Reply { seqno, awaiting_app, .. } = &mut duty.kind {
            self.stored_reply = Some(StoredReply { seqno: *seqno, data });
            *awaiting_app = false;
        }
        Ok(self.schedule_reply_send())
    }

    fn app_join(&mut self) -> Result<Vec<Action>, Error> {
        if self.state != MemberState::Left {
            return Err(Error::WrongState { state: self.state });
        }
        self.state = MemberState::Join;
        self.duty = None;
        Ok(Vec::new())
    }

    fn app_leave(&mut self) -> Result<Vec<Action>, Error> {
        if self.state != MemberState::Normal {
            return Err(Error::WrongState { state: self.state });
        }
        if self.coordid == Some(self.myid) {
            // The coordinator cannot wait for its own poll; it leaves at
            // once and the announcement triggers elections elsewhere.
            return Ok(self.become_left(true));
        }
        self.state = MemberState::Leave;
        Ok(Vec::new())
    }

    fn app_poll(&mut self, which: RoundKind, grace: u64) -> Result<Vec<Action>, Error> {
        if !self.is_coordinator() {
            return Err(Error::NotCoordinator);
        }
        if !self.is_idle() {
            return Err(Error::RoundInProgress);
        }
        let epoch = self.fresh_epoch();
        // Window: poll out, responses back, plus the caller's grace period.
        let delay = 2 * self.config.msg_t + grace;
        let (round, msg) = match which {
            RoundKind::JoinPoll => (Round::JoinPoll { epoch }, Message::Jpoll { pid: self.myid }),
            RoundKind::LeavePoll => (Round::LeavePoll { epoch }, Message::Lpoll { pid: self.myid }),
            _ => unreachable!("only poll rounds reach app_poll"),
        };
        self.round = round;
        Ok(vec![
            Action::Broadcast(msg),
            Action::SetTimer { epoch, kind: TimerKind::PollWait, delay },
        ])
    }

    /// Push the current view to `targets` as a single round. Admissions and
    /// elections run their own multi-step push sequences; this entry point
    /// exists for hosts that need to re-synchronise a view by hand.
    pub fn start_view_push(&mut self, targets: &BTreeSet<ProcessId>) -> Result<Vec<Action>, Error> {
        if !self.is_coordinator() {
            return Err(Error::NotCoordinator);
        }
        if !self.is_idle() {
            return Err(Error::RoundInProgress);
        }
        for &t in targets {
            if !self.grp.contains(t) {
                return Err(Error::UnknownDestination(t));
            }
        }
        let mut queue = VecDeque::new();
        queue.push_back(targets.iter().copied().collect());
        self.round = Round::ViewPush {
            epoch: self.fresh_epoch(),
            pending: ReplyMask::EMPTY,
            queue,
            app_initiated: true,
            clear_flags_on_finish: false,
        };
        Ok(self.advance_push())
    }

    // ------------------------------------------------------------------
    // Message handling.

    fn on_msg(&mut self, msg: Message, _via: Via) -> Vec<Action> {
        match msg {
            Message::Areq { pid, seqno, rmask, data } => self.recv_areq(pid, seqno, rmask, data),
            Message::Arpl { pid, seqno, data } => self.recv_arpl(pid, seqno, data),
            Message::Jpoll { pid } => self.recv_jpoll(pid),
            Message::Join { pid } => self.recv_join(pid),
            Message::Lpoll { pid } => self.recv_lpoll(pid),
            Message::Left { pid } => self.on_failure(pid),
            Message::Vpush { pid, rmask, view } => self.recv_vpush(pid, rmask, view),
            Message::Vack { pid } => self.recv_vack(pid),
        }
    }

    fn recv_areq(&mut self, from: ProcessId, k: u32, rmask: ReplyMask, data: Vec<u8>) -> Vec<Action> {
        if matches!(self.state, MemberState::Join | MemberState::Left) {
            return Vec::new();
        }
        if !rmask.contains(self.myid) {
            return Vec::new();
        }
        // Requests only come from coordinators. A frame from outside the
        // group is a leftover of a dead era; a frame reaching a process that
        // is itself coordinator would mean two live coordinators, which the
        // election rules out. Both are dropped rather than obeyed.
        if !self.grp.contains(from) || from == self.myid || self.is_coordinator() {
            return Vec::new();
        }
        // A request is identified by (issuer, seqno). Everything else is new,
        // including the first request from a successor this process has not
        // locally detected yet: accepting it adopts the sender as
        // coordinator, exactly like a view push would.
        let duplicate = self.coordid == Some(from)
            && k == self.seqno
            && (matches!(
                &self.duty,
                Some(Duty { kind: DutyKind::Reply { seqno, .. }, .. }) if *seqno == k
            ) || matches!(&self.stored_reply, Some(s) if s.seqno == k));
        if !duplicate {
            self.coordid = Some(from);
            self.seqno = k;
            let mut actions = self.clear_duty();
            let token = self.next_token();
            self.duty = Some(Duty {
                kind: DutyKind::Reply {
                    seqno: k,
                    slot_mask: rmask,
                    awaiting_app: true,
                    token,
                    my_turn: false,
                },
                epoch: self.fresh_epoch(),
                timer_armed: false,
            });
            actions.push(Action::DeliverRequest { token, data });
            return actions;
        }
        // Duplicate of the current request: the coordinator missed our reply.
        // Reuse the stored reply, rescheduled under the fresh (shrunken) mask.
        match &mut self.duty {
            Some(Duty { kind: DutyKind::Reply { seqno, slot_mask, awaiting_app, my_turn, .. }, .. })
                if *seqno == k =>
            {
                *slot_mask = rmask;
                *my_turn = false;
                if *awaiting_app {
                    // Schedule is re-evaluated once the reply exists.
                    return Vec::new();
                }
                let mut actions = Vec::new();
                let duty = self.duty.as_mut().expect("duty matched above");
                if duty.timer_armed {
                    actions.push(Action::CancelTimers { epoch: duty.epoch });
                    duty.timer_armed = false;
                }
                actions.extend(self.schedule_reply_send());
                actions
            }
            _ => match &self.stored_reply {
                Some(stored) if stored.seqno == k => {
                    let mut actions = self.clear_duty();
                    self.duty = Some(Duty {
                        kind: DutyKind::Reply {
                            seqno: k,
                            slot_mask: rmask,
                            awaiting_app: false,
                            token: 0,
                            my_turn: false,
                        },
                        epoch: self.fresh_epoch(),
                        timer_armed: false,
                    });
                    actions.extend(self.schedule_reply_send());
                    actions
                }
                // Unreachable: `duplicate` required a matching duty or
                // stored reply, and neither changed since.
                _ => Vec::new(),
            },
        }
    }

    /// Emit the pending reply now if this process owns slot 0 or its turn
    /// already came up; otherwise arm the slot fallback timer.
    fn schedule_reply_send(&mut self) -> Vec<Action> {
        let duty = match &mut self.duty {
            Some(d) => d,
            None => return Vec::new(),
        };
        let (slot_mask, my_turn, seqno) = match &duty.kind {
            DutyKind::Reply { slot_mask, my_turn, seqno, .. } => (*slot_mask, *my_turn, *seqno),
            _ => return Vec::new(),
        };
        let slot = match slot_mask.slot_of(self.myid) {
            Some(s) => s,
            None => {
                // Shrunken mask no longer includes us; nothing is owed.
                self.duty = None;
                return Vec::new();
            }
        };
        if my_turn || slot == 0 {
            return self.send_stored_reply(seqno);
        }
        let epoch = self.fresh_epoch();
        let duty = self.duty.as_mut().expect("duty present");
        duty.epoch = epoch;
        duty.timer_armed = true;
        vec![Action::SetTimer {
            epoch,
            kind: TimerKind::Slot,
            delay: u64::from(slot) * self.config.msg_t,
        }]
    }

    fn send_stored_reply(&mut self, seqno: u32) -> Vec<Action> {
        let data = match &self.stored_reply {
            Some(s) if s.seqno == seqno => s.data.clone(),
            _ => {
                debug_assert!(false, "reply duty without a stored reply");
                self.duty = None;
                return Vec::new();
            }
        };
        self.duty = None;
        vec![Action::Broadcast(Message::Arpl { pid: self.myid, seqno, data })]
    }

    fn recv_arpl(&mut self, from: ProcessId, k: u32, data: Vec<u8>) -> Vec<Action> {
        // Coordinator side: collect the reply.
        if self.is_coordinator() {
            if let Round::RequestReply { epoch, initial, pending, replies, .. } = &mut self.round {
                if k == self.seqno && initial.contains(from) {
                    replies.insert(from, data);
                    *pending = pending.without(from);
                    if pending.is_empty() {
                        let epoch = *epoch;
                        return self.complete_rr_round(epoch);
                    }
                }
            }
            return Vec::new();
        }
        // Ordinary side: an overheard reply may make it our turn.
        if let Some(Duty { kind: DutyKind::Reply { seqno, slot_mask, awaiting_app, my_turn, .. }, epoch, timer_armed }) =
            &mut self.duty
        {
            if *seqno == k && slot_mask.is_next_after(from, self.myid) {
                *my_turn = true;
                if !*awaiting_app {
                    let mut actions = Vec::new();
                    if *timer_armed {
                        actions.push(Action::CancelTimers { epoch: *epoch });
                    }
                    let seqno = *seqno;
                    actions.extend(self.send_stored_reply(seqno));
                    return actions;
                }
            }
        }
        Vec::new()
    }

    fn complete_rr_round(&mut self, epoch: u64) -> Vec<Action> {
        let replies = match std::mem::replace(&mut self.round, Round::Idle) {
            Round::RequestReply { replies, .. } => replies,
            _ => unreachable!("caller checked the round"),
        };
        vec![
            Action::CancelTimers { epoch },
            Action::RoundComplete { replies },
        ]
    }

    fn recv_jpoll(&mut self, from: ProcessId) -> Vec<Action> {
        if self.state != MemberState::Join {
            return Vec::new();
        }
        // Answer every poll; a repeat poll means the previous answer was
        // lost or arrived outside the window. The random backoff spreads
        // concurrent joiners' unicasts apart.
        let mut actions = self.clear_duty();
        let backoff = if self.config.join_backoff_max == 0 {
            0
        } else {
            self.rng.gen_range(0..=self.config.join_backoff_max)
        };
        if backoff == 0 {
            actions.push(Action::Unicast { dst: from, msg: Message::Join { pid: self.myid } });
            return actions;
        }
        let epoch = self.fresh_epoch();
        self.duty = Some(Duty {
            kind: DutyKind::JoinRequest { poller: from },
            epoch,
            timer_armed: true,
        });
        actions.push(Action::SetTimer { epoch, kind: TimerKind::Slot, delay: backoff });
        actions
    }

    fn recv_join(&mut self, from: ProcessId) -> Vec<Action> {
        if !self.is_coordinator() || !matches!(self.round, Round::JoinPoll { .. }) {
            return Vec::new();
        }
        if self.grp.contains(from) {
            // Duplicate join inside the same window keeps its first ticket.
            return Vec::new();
        }
        self.grp.assign(from);
        vec![Action::NotifyGroupChanged { members: self.grp.members() }]
    }

    fn recv_lpoll(&mut self, _from: ProcessId) -> Vec<Action> {
        if self.state != MemberState::Leave {
            return Vec::new();
        }
        self.become_left(true)
    }

    fn recv_vpush(&mut self, from: ProcessId, rmask: ReplyMask, view: Vec<ViewEntry>) -> Vec<Action> {
        if self.state == MemberState::Left {
            return Vec::new();
        }
        if !rmask.contains(self.myid) {
            return Vec::new();
        }
        let mut actions = Vec::new();
        if self.coordid != Some(from) {
            // A push from a process we did not consider coordinator settles
            // the question in its favour: adopt it, restart request
            // numbering, and drop anything owed to the previous era.
            if let Some(epoch) = self.round.epoch() {
                actions.push(Action::CancelTimers { epoch });
                self.round = Round::Idle;
            }
            actions.extend(self.clear_duty());
            self.coordid = Some(from);
            self.seqno = 0;
            self.stored_reply = None;
            self.state = MemberState::Normal;
        }
        let before = self.grp.members();
        for e in view {
            self.grp.merge_entry(e);
        }
        if self.grp.members() != before {
            actions.push(Action::NotifyGroupChanged { members: self.grp.members() });
        }
        // Acknowledge in slot order, exactly like a reply.
        let slot = rmask.slot_of(self.myid).expect("addressed, checked above");
        if slot == 0 {
            actions.extend(self.clear_duty());
            actions.push(Action::Broadcast(Message::Vack { pid: self.myid }));
            return actions;
        }
        actions.extend(self.clear_duty());
        let epoch = self.fresh_epoch();
        self.duty = Some(Duty { kind: DutyKind::ViewAck { slot_mask: rmask }, epoch, timer_armed: true });
        actions.push(Action::SetTimer {
            epoch,
            kind: TimerKind::Slot,
            delay: u64::from(slot) * self.config.msg_t,
        });
        actions
    }

    fn recv_vack(&mut self, from: ProcessId) -> Vec<Action> {
        if self.is_coordinator() {
            if let Round::ViewPush { epoch, pending, .. } = &mut self.round {
                if pending.contains(from) {
                    *pending = pending.without(from);
                    if pending.is_empty() {
                        let epoch = *epoch;
                        let mut actions = vec![Action::CancelTimers { epoch }];
                        actions.extend(self.advance_push());
                        return actions;
                    }
                }
            }
            return Vec::new();
        }
        if let Some(Duty { kind: DutyKind::ViewAck { slot_mask }, epoch, timer_armed }) = &self.duty {
            if slot_mask.is_next_after(from, self.myid) {
                let mut actions = Vec::new();
                if *timer_armed {
                    actions.push(Action::CancelTimers { epoch: *epoch });
                }
                self.duty = None;
                actions.push(Action::Broadcast(Message::Vack { pid: self.myid }));
                return actions;
            }
        }
        Vec::new()
    }

    // ------------------------------------------------------------------
    // Timers.

    fn on_timer(&mut self, epoch: u64, kind: TimerKind) -> Vec<Action> {
        if self.round.epoch() == Some(epoch) {
            return self.on_round_timer(kind);
        }
        let duty_matches = self
            .duty
            .as_ref()
            .map(|d| d.epoch == epoch && d.timer_armed)
            .unwrap_or(false);
        if duty_matches && kind == TimerKind::Slot {
            return self.on_duty_timer();
        }
        Vec::new()
    }

    fn on_round_timer(&mut self, kind: TimerKind) -> Vec<Action> {
        match (&mut self.round, kind) {
            (Round::RequestReply { epoch, pending, data, proc_t, .. }, TimerKind::Retransmit) => {
                // Retransmit to the members still owing a reply. Retries are
                // unbounded: a member that never answers is eventually
                // removed by the fault detector, which shrinks the mask to
                // empty and completes the round.
                let msg = Message::Areq {
                    pid: self.myid,
                    seqno: self.seqno,
                    rmask: *pending,
                    data: data.clone(),
                };
                let delay = self.config.msg_t + *proc_t + u64::from(pending.len()) * self.config.msg_t;
                vec![
                    Action::Broadcast(msg),
                    Action::SetTimer { epoch: *epoch, kind: TimerKind::Retransmit, delay },
                ]
            }
            (Round::ViewPush { epoch, pending, .. }, TimerKind::Retransmit) => {
                let msg = Message::Vpush {
                    pid: self.myid,
                    rmask: *pending,
                    view: self.grp.entries(),
                };
                let delay = self.config.msg_t + u64::from(pending.len()) * self.config.msg_t;
                vec![
                    Action::Broadcast(msg),
                    Action::SetTimer { epoch: *epoch, kind: TimerKind::Retransmit, delay },
                ]
            }
            (Round::JoinPoll { .. }, TimerKind::PollWait) => self.finish_join_poll(),
            (Round::LeavePoll { .. }, TimerKind::PollWait) => {
                self.round = Round::Idle;
                vec![Action::RoundComplete { replies: BTreeMap::new() }]
            }
            _ => Vec::new(),
        }
    }

    fn on_duty_timer(&mut self) -> Vec<Action> {
        let duty = self.duty.as_mut().expect("caller checked duty");
        duty.timer_armed = false;
        match &duty.kind {
            DutyKind::Reply { seqno, .. } => {
                let seqno = *seqno;
                self.send_stored_reply(seqno)
            }
            DutyKind::ViewAck { .. } => {
                self.duty = None;
                vec![Action::Broadcast(Message::Vack { pid: self.myid })]
            }
            DutyKind::JoinRequest { poller } => {
                let dst = *poller;
                self.duty = None;
                vec![Action::Unicast { dst, msg: Message::Join { pid: self.myid } }]
            }
        }
    }

    fn finish_join_poll(&mut self) -> Vec<Action> {
        let new = self.grp.new_members();
        if new.is_empty() {
            self.round = Round::Idle;
            return vec![Action::RoundComplete { replies: BTreeMap::new() }];
        }
        // Push sequence: the settled members first (one round), then each
        // admitted member on its own (one round each, admission order). The
        // new flags clear only when the whole sequence went through, so a
        // coordinator elected mid-sequence knows to repeat it.
        let mut queue: VecDeque<Vec<ProcessId>> = VecDeque::new();
        queue.push_back(self.grp.settled_members());
        for n in new {
            queue.push_back(vec![n]);
        }
        self.round = Round::ViewPush {
            epoch: self.fresh_epoch(),
            pending: ReplyMask::EMPTY,
            queue,
            app_initiated: true,
            clear_flags_on_finish: true,
        };
        self.advance_push()
    }

    /// Start the next push of the sequence, skipping target sets that have
    /// nobody to acknowledge. Finishing the queue ends the round.
    fn advance_push(&mut self) -> Vec<Action> {
        loop {
            let (queue, app_initiated, clear_flags) = match &mut self.round {
                Round::ViewPush { queue, app_initiated, clear_flags_on_finish, .. } => {
                    (queue, *app_initiated, *clear_flags_on_finish)
                }
                _ => return Vec::new(),
            };
            match queue.pop_front() {
                Some(targets) => {
                    let mask = ReplyMask::from_pids(targets.into_iter().filter(|&t| t != self.myid));
                    if mask.is_empty() {
                        continue;
                    }
                    let epoch = self.fresh_epoch();
                    let delay = self.push_timeout(mask.len());
                    if let Round::ViewPush { epoch: e, pending, .. } = &mut self.round {
                        *e = epoch;
                        *pending = mask;
                    }
                    return vec![
                        Action::Broadcast(Message::Vpush {
                            pid: self.myid,
                            rmask: mask,
                            view: self.grp.entries(),
                        }),
                        Action::SetTimer { epoch, kind: TimerKind::Retransmit, delay },
                    ];
                }
                None => {
                    if clear_flags {
                        self.grp.clear_new_flags();
                    }
                    self.round = Round::Idle;
                    if app_initiated {
                        return vec![Action::RoundComplete { replies: BTreeMap::new() }];
                    }
                    return Vec::new();
                }
            }
        }
    }

    // ------------------------------------------------------------------
    // Failure handling.

    fn on_failure(&mut self, p: ProcessId) -> Vec<Action> {
        if p == self.myid || !self.grp.contains(p) {
            return Vec::new();
        }
        self.grp.remove(p);
        if self.is_coordinator() {
            let mut actions = Vec::new();
            match &mut self.round {
                Round::RequestReply { epoch, pending, .. } if pending.contains(p) => {
                    *pending = pending.without(p);
                    if pending.is_empty() {
                        let epoch = *epoch;
                        actions.extend(self.complete_rr_round(epoch));
                    }
                }
                Round::ViewPush { epoch, pending, .. } if pending.contains(p) => {
                    *pending = pending.without(p);
                    if pending.is_empty() {
                        let epoch = *epoch;
                        actions.push(Action::CancelTimers { epoch });
                        actions.extend(self.advance_push());
                    }
                }
                _ => {}
            }
            actions.push(Action::NotifyGroupChanged { members: self.grp.members() });
            return actions;
        }
        if self.coordid == Some(p) {
            // The coordinator is gone. Whoever now holds the minimum ticket
            // takes over on the spot; no messages are needed because every
            // member ranks the same view the same way. Anything owed to the
            // dead coordinator's round is void, the stored reply included:
            // its (issuer, seqno) identity can never be asked for again.
            let mut actions = self.clear_duty();
            self.stored_reply = None;
            self.coordid = self.grp.coordinator();
            if self.coordid != Some(self.myid) {
                actions.push(Action::NotifyGroupChanged { members: self.grp.members() });
                return actions;
            }
            if self.state == MemberState::Leave {
                // Elected while wanting out: leave right now, the
                // announcement hands coordination to the next ticket.
                actions.extend(self.become_left(true));
                return actions;
            }
            actions.push(Action::NotifyBecameCoord { members: self.grp.members() });
            // Members still flagged new may have missed their admission
            // push; repeat the sequence before anything else happens.
            let new = self.grp.new_members();
            if !new.is_empty() {
                let mut queue: VecDeque<Vec<ProcessId>> = VecDeque::new();
                queue.push_back(self.grp.settled_members());
                for n in new {
                    queue.push_back(vec![n]);
                }
                self.round = Round::ViewPush {
                    epoch: self.fresh_epoch(),
                    pending: ReplyMask::EMPTY,
                    queue,
                    app_initiated: false,
                    clear_flags_on_finish: true,
                };
                actions.extend(self.advance_push());
            }
            return actions;
        }
        vec![Action::NotifyGroupChanged { members: self.grp.members() }]
    }

    /// Enter LEFT: drop every duty, round and view. The process keeps its
    /// id and can rejoin later through a join poll.
    fn become_left(&mut self, announce: bool) -> Vec<Action> {
        let mut actions = Vec::new();
        if let Some(epoch) = self.round.epoch() {
            actions.push(Action::CancelTimers { epoch });
        }
        self.round = Round::Idle;
        actions.extend(self.clear_duty());
        self.state = MemberState::Left;
        self.grp.clear();
        self.coordid = None;
        self.stored_reply = None;
        if announce {
            actions.push(Action::Broadcast(Message::Left { pid: self.myid }));
        }
        actions
    }

    fn clear_duty(&mut self) -> Vec<Action> {
        match self.duty.take() {
            Some(d) if d.timer_armed => vec![Action::CancelTimers { epoch: d.epoch }],
            _ => Vec::new(),
        }
    }

    fn fresh_epoch(&mut self) -> u64 {
        self.epoch_counter += 1;
        self.epoch_counter
    }

    fn next_token(&mut self) -> u64 {
        self.token_counter += 1;
        self.token_counter
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::types::pid;

    fn group(ids: &[u8]) -> BTreeSet<ProcessId> {
        ids.iter().map(|&v| pid(v)).collect()
    }

    fn cfg() -> Config {
        Config { msg_t: 10_000, fault_detect_t: 50_000, ..Config::default() }
    }

    fn machine(me: u8, ids: &[u8]) -> (Machine, Vec<Action>) {
        Machine::init(pid(me), &group(ids), cfg()).unwrap()
    }

    fn recv(m: &mut Machine, msg: Message) -> Vec<Action> {
        m.handle(Event::MsgRecv { msg, via: Via::Broadcast }).unwrap()
    }

    fn first_broadcast(actions: &[Action]) -> &Message {
        actions
            .iter()
            .find_map(|a| match a {
                Action::Broadcast(m) => Some(m),
                _ => None,
            })
            .expect("expected a broadcast")
    }

    fn timer_of(actions: &[Action], kind: TimerKind) -> (u64, u64) {
        actions
            .iter()
            .find_map(|a| match a {
                Action::SetTimer { epoch, kind: k, delay } if *k == kind => Some((*epoch, *delay)),
                _ => None,
            })
            .expect("expected a timer")
    }

    #[test]
    fn init_elects_lowest_id_as_coordinator() {
        let (m, actions) = machine(1, &[1, 2, 3]);
        assert!(m.is_coordinator());
        assert_eq!(actions, vec![Action::NotifyBecameCoord { members: m.members() }]);

        let (m2, actions2) = machine(2, &[1, 2, 3]);
        assert!(!m2.is_coordinator());
        assert_eq!(m2.coordinator(), Some(pid(1)));
        assert!(actions2.is_empty());
    }

    #[test]
    fn init_with_empty_group_starts_out() {
        let (m, actions) = Machine::init(pid(4), &BTreeSet::new(), cfg()).unwrap();
        assert_eq!(m.state(), MemberState::Left);
        assert_eq!(m.coordinator(), None);
        assert!(actions.is_empty());
    }

    #[test]
    fn request_round_addresses_only_others_and_times_out_over_slots() {
        let (mut c, _) = machine(1, &[1, 2, 3]);
        let actions = c.request_reply(group(&[1, 2, 3]), b"req".to_vec(), 500).unwrap();
        match first_broadcast(&actions) {
            Message::Areq { pid: p, seqno, rmask, data } => {
                assert_eq!(*p, pid(1));
                assert_eq!(*seqno, 1);
                assert_eq!(rmask.bits(), 0b110);
                assert_eq!(data, b"req");
            }
            other => panic!("unexpected broadcast {other:?}"),
        }
        // Timeout oracle: request delivery + processing + one slot each.
        let (_, delay) = timer_of(&actions, TimerKind::Retransmit);
        assert_eq!(delay, 10_000 + 500 + 2 * 10_000);
        assert_eq!(c.round_kind(), RoundKind::RequestReply);
        assert!(c.request_reply(group(&[2]), vec![], 0).is_err());
    }

    #[test]
    fn empty_target_round_completes_immediately() {
        let (mut c, _) = machine(1, &[1, 2, 3]);
        let actions = c.request_reply(group(&[1]), b"self only".to_vec(), 0).unwrap();
        assert_eq!(actions, vec![Action::RoundComplete { replies: BTreeMap::new() }]);
        assert!(c.is_idle());
        assert_eq!(c.seqno(), 1);
    }

    #[test]
    fn slot_zero_replies_immediately_later_slots_wait() {
        let (mut m2, _) = machine(2, &[1, 2, 3]);
        let (mut m3, _) = machine(3, &[1, 2, 3]);
        let req = Message::Areq {
            pid: pid(1),
            seqno: 1,
            rmask: ReplyMask::from_bits(0b110),
            data: b"ping".to_vec(),
        };

        // Both deliver the request to their applications.
        let a2 = recv(&mut m2, req.clone());
        let token2 = match &a2[..] {
            [Action::DeliverRequest { token, data }] => {
                assert_eq!(data, b"ping");
                *token
            }
            other => panic!("unexpected actions {other:?}"),
        };
        let a3 = recv(&mut m3, req);
        let token3 = match &a3[..] {
            [Action::DeliverRequest { token, .. }] => *token,
            other => panic!("unexpected actions {other:?}"),
        };

        // Slot 0 sends as soon as its reply is ready.
        let a2 = m2.reply_ready(token2, b"two".to_vec()).unwrap();
        assert!(matches!(first_broadcast(&a2), Message::Arpl { pid: p, seqno: 1, .. } if *p == pid(2)));

        // Slot 1 arms a fallback timer one slot out...
        let a3 = m3.reply_ready(token3, b"three".to_vec()).unwrap();
        let (_, delay) = timer_of(&a3, TimerKind::Slot);
        assert_eq!(delay, 10_000);

        // ...but transmits at once when it overhears its predecessor.
        let a3 = recv(&mut m3, Message::Arpl { pid: pid(2), seqno: 1, data: b"two".to_vec() });
        assert!(matches!(first_broadcast(&a3), Message::Arpl { pid: p, seqno: 1, .. } if *p == pid(3)));
        assert!(a3.iter().any(|a| matches!(a, Action::CancelTimers { .. })));
    }

    #[test]
    fn coordinator_collects_replies_and_completes() {
        let (mut c, _) = machine(1, &[1, 2, 3]);
        c.request_reply(group(&[2, 3]), vec![], 0).unwrap();
        let a = recv(&mut c, Message::Arpl { pid: pid(2), seqno: 1, data: b"two".to_vec() });
        assert!(a.is_empty());
        let a = recv(&mut c, Message::Arpl { pid: pid(3), seqno: 1, data: b"three".to_vec() });
        match &a[..] {
            [Action::CancelTimers { .. }, Action::RoundComplete { replies }] => {
                assert_eq!(replies.len(), 2);
                assert_eq!(replies[&pid(2)], b"two");
                assert_eq!(replies[&pid(3)], b"three");
            }
            other => panic!("unexpected actions {other:?}"),
        }
        assert!(c.is_idle());
    }

    #[test]
    fn stale_or_foreign_replies_are_ignored() {
        let (mut c, _) = machine(1, &[1, 2, 3]);
        c.request_reply(group(&[2]), vec![], 0).unwrap();
        // Wrong seqno.
        assert!(recv(&mut c, Message::Arpl { pid: pid(2), seqno: 9, data: vec![] }).is_empty());
        // Not an addressee of this round.
        assert!(recv(&mut c, Message::Arpl { pid: pid(3), seqno: 1, data: vec![] }).is_empty());
        assert_eq!(c.round_kind(), RoundKind::RequestReply);
    }

    #[test]
    fn retransmission_carries_the_shrunken_mask() {
        let (mut c, _) = machine(1, &[1, 2, 3]);
        let actions = c.request_reply(group(&[2, 3]), b"r".to_vec(), 0).unwrap();
        let (epoch, _) = timer_of(&actions, TimerKind::Retransmit);
        recv(&mut c, Message::Arpl { pid: pid(2), seqno: 1, data: vec![] });

        let a = c.handle(Event::TimerFired { epoch, kind: TimerKind::Retransmit }).unwrap();
        match first_broadcast(&a) {
            Message::Areq { seqno, rmask, .. } => {
                assert_eq!(*seqno, 1);
                assert_eq!(rmask.bits(), 0b100, "only the silent member is re-addressed");
            }
            other => panic!("unexpected broadcast {other:?}"),
        }
        // Re-armed with a delay recomputed for one pending slot.
        let (_, delay) = timer_of(&a, TimerKind::Retransmit);
        assert_eq!(delay, 10_000 + 0 + 10_000);
    }

    #[test]
    fn duplicate_request_reuses_stored_reply_without_redelivery() {
        let (mut m2, _) = machine(2, &[1, 2, 3]);
        let req = Message::Areq {
            pid: pid(1),
            seqno: 1,
            rmask: ReplyMask::from_bits(0b110),
            data: vec![],
        };
        let a = recv(&mut m2, req);
        let token = match &a[..] {
            [Action::DeliverRequest { token, .. }] => *token,
            other => panic!("unexpected actions {other:?}"),
        };
        m2.reply_ready(token, b"stored".to_vec()).unwrap();

        // The retransmission (now addressing only us) must not reach the
        // application again, and the stored reply goes straight out because
        // the shrunken mask gives us slot 0.
        let dup = Message::Areq {
            pid: pid(1),
            seqno: 1,
            rmask: ReplyMask::from_bits(0b010),
            data: vec![],
        };
        let a = recv(&mut m2, dup);
        assert!(!a.iter().any(|x| matches!(x, Action::DeliverRequest { .. })));
        assert!(matches!(first_broadcast(&a), Message::Arpl { data, .. } if data == b"stored"));
    }

    #[test]
    fn duplicate_request_while_processing_keeps_latest_mask() {
        let (mut m3, _) = machine(3, &[1, 2, 3]);
        let a = recv(&mut m3, Message::Areq {
            pid: pid(1),
            seqno: 1,
            rmask: ReplyMask::from_bits(0b110),
            data: vec![],
        });
        let token = match &a[..] {
            [Action::DeliverRequest { token, .. }] => *token,
            other => panic!("unexpected actions {other:?}"),
        };
        // Duplicate arrives before the reply exists: nothing happens yet.
        let a = recv(&mut m3, Message::Areq {
            pid: pid(1),
            seqno: 1,
            rmask: ReplyMask::from_bits(0b100),
            data: vec![],
        });
        assert!(a.is_empty());
        // When the reply is ready the fresh mask applies: slot 0, send now.
        let a = m3.reply_ready(token, b"late".to_vec()).unwrap();
        assert!(matches!(first_broadcast(&a), Message::Arpl { pid: p, .. } if *p == pid(3)));
    }

    #[test]
    fn slot_timer_fallback_sends_reply() {
        let (mut m3, _) = machine(3, &[1, 2, 3]);
        let a = recv(&mut m3, Message::Areq {
            pid: pid(1),
            seqno: 1,
            rmask: ReplyMask::from_bits(0b110),
            data: vec![],
        });
        let token = match &a[..] {
            [Action::DeliverRequest { token, .. }] => *token,
            other => panic!("unexpected actions {other:?}"),
        };
        let a = m3.reply_ready(token, b"v".to_vec()).unwrap();
        let (epoch, delay) = timer_of(&a, TimerKind::Slot);
        assert_eq!(delay, 10_000);
        let a = m3.handle(Event::TimerFired { epoch, kind: TimerKind::Slot }).unwrap();
        assert!(matches!(first_broadcast(&a), Message::Arpl { .. }));
        // The same firing again is stale and does nothing.
        let a = m3.handle(Event::TimerFired { epoch, kind: TimerKind::Slot }).unwrap();
        assert!(a.is_empty());
    }

    #[test]
    fn non_addressees_and_outsiders_ignore_requests() {
        let (mut m3, _) = machine(3, &[1, 2, 3]);
        let not_for_us = Message::Areq {
            pid: pid(1),
            seqno: 1,
            rmask: ReplyMask::from_bits(0b010),
            data: vec![],
        };
        assert!(recv(&mut m3, not_for_us).is_empty());

        let (mut out, _) = Machine::init(pid(5), &BTreeSet::new(), cfg()).unwrap();
        out.request_join().unwrap();
        let addressed_anyway = Message::Areq {
            pid: pid(1),
            seqno: 1,
            rmask: ReplyMask::from_bits(0b10000),
            data: vec![],
        };
        assert!(recv(&mut out, addressed_anyway).is_empty(), "JOIN state ignores requests");
    }

    #[test]
    fn join_poll_admits_in_arrival_order_and_pushes_settled_then_new() {
        let (mut c, _) = machine(1, &[1, 2]);
        let actions = c.check_joins(5_000).unwrap();
        assert!(matches!(first_broadcast(&actions), Message::Jpoll { pid: p } if *p == pid(1)));
        let (epoch, delay) = timer_of(&actions, TimerKind::PollWait);
        assert_eq!(delay, 2 * 10_000 + 5_000);

        recv(&mut c, Message::Join { pid: pid(5) });
        recv(&mut c, Message::Join { pid: pid(3) });
        recv(&mut c, Message::Join { pid: pid(5) }); // duplicate keeps first ticket
        assert_eq!(c.view().ticket_of(pid(5)).unwrap().get(), 3);
        assert_eq!(c.view().ticket_of(pid(3)).unwrap().get(), 4);

        // Window closes: first push goes to the settled members.
        let a = c.handle(Event::TimerFired { epoch, kind: TimerKind::PollWait }).unwrap();
        match first_broadcast(&a) {
            Message::Vpush { rmask, view, .. } => {
                assert_eq!(rmask.bits(), 0b10, "settled members except the coordinator");
                assert_eq!(view.len(), 4);
            }
            other => panic!("unexpected broadcast {other:?}"),
        }
        // Settled push acknowledged: next pushes go per admitted member in
        // admission (ticket) order: 5 then 3.
        let a = recv(&mut c, Message::Vack { pid: pid(2) });
        assert!(matches!(first_broadcast(&a), Message::Vpush { rmask, .. } if rmask.bits() == 0b10000));
        let a = recv(&mut c, Message::Vack { pid: pid(5) });
        assert!(matches!(first_broadcast(&a), Message::Vpush { rmask, .. } if rmask.bits() == 0b100));
        let a = recv(&mut c, Message::Vack { pid: pid(3) });
        assert!(matches!(&a[..], [Action::CancelTimers { .. }, Action::RoundComplete { .. }]));
        assert!(c.view().new_members().is_empty(), "flags clear after the full sequence");
        assert!(c.is_idle());
    }

    #[test]
    fn joiner_answers_polls_and_commits_on_its_push() {
        let mut config = cfg();
        config.join_backoff_max = 0;
        let (mut j, _) = Machine::init(pid(5), &BTreeSet::new(), config).unwrap();
        assert!(j.request_join().is_ok());
        assert_eq!(j.state(), MemberState::Join);

        let a = recv(&mut j, Message::Jpoll { pid: pid(1) });
        assert!(matches!(&a[..], [Action::Unicast { dst, msg: Message::Join { .. } }] if *dst == pid(1)));
        // Re-polls are answered again.
        let a = recv(&mut j, Message::Jpoll { pid: pid(1) });
        assert_eq!(a.len(), 1);

        // A push to the settled members does not include us: stay JOIN.
        let settled_push = Message::Vpush {
            pid: pid(1),
            rmask: ReplyMask::from_bits(0b10),
            view: vec![],
        };
        assert!(recv(&mut j, settled_push).is_empty());
        assert_eq!(j.state(), MemberState::Join);

        // Our own push commits us: adopt coordinator, ack, become NORMAL.
        let my_push = Message::Vpush {
            pid: pid(1),
            rmask: ReplyMask::from_bits(0b10000),
            view: vec![
                ViewEntry { pid: pid(1), ticket: crate::protocol::Ticket::new(1).unwrap(), is_new: false },
                ViewEntry { pid: pid(2), ticket: crate::protocol::Ticket::new(2).unwrap(), is_new: false },
                ViewEntry { pid: pid(5), ticket: crate::protocol::Ticket::new(3).unwrap(), is_new: true },
            ],
        };
        let a = recv(&mut j, my_push);
        assert!(matches!(first_broadcast(&a), Message::Vack { pid: p } if *p == pid(5)));
        assert_eq!(j.state(), MemberState::Normal);
        assert_eq!(j.coordinator(), Some(pid(1)));
        assert_eq!(j.seqno(), 0, "request numbering restarts under the adopted coordinator");
        assert_eq!(j.members().len(), 3);
    }

    #[test]
    fn join_backoff_draws_within_bound_and_fires() {
        let mut config = cfg();
        config.join_backoff_max = 3_000;
        config.backoff_seed = 7;
        let (mut j, _) = Machine::init(pid(5), &BTreeSet::new(), config).unwrap();
        j.request_join().unwrap();
        let a = recv(&mut j, Message::Jpoll { pid: pid(1) });
        // Either an immediate unicast (draw of zero) or a backoff timer.
        if let Some(Action::SetTimer { epoch, kind, delay }) = a
            .iter()
            .find(|x| matches!(x, Action::SetTimer { .. }))
        {
            assert_eq!(*kind, TimerKind::Slot);
            assert!(*delay <= 3_000);
            let a = j.handle(Event::TimerFired { epoch: *epoch, kind: *kind }).unwrap();
            assert!(matches!(&a[..], [Action::Unicast { msg: Message::Join { .. }, .. }]));
        } else {
            assert!(matches!(&a[..], [Action::Unicast { .. }]));
        }
    }

    #[test]
    fn ordinary_leave_keeps_serving_until_polled() {
        let (mut m2, _) = machine(2, &[1, 2, 3]);
        m2.request_leave().unwrap();
        assert_eq!(m2.state(), MemberState::Leave);

        // Still serves requests while waiting for the poll.
        let a = recv(&mut m2, Message::Areq {
            pid: pid(1),
            seqno: 1,
            rmask: ReplyMask::from_bits(0b010),
            data: vec![],
        });
        assert!(matches!(&a[..], [Action::DeliverRequest { .. }]));

        let a = recv(&mut m2, Message::Lpoll { pid: pid(1) });
        assert!(matches!(first_broadcast(&a), Message::Left { pid: p } if *p == pid(2)));
        assert_eq!(m2.state(), MemberState::Left);
        assert!(m2.members().is_empty());
        assert_eq!(m2.coordinator(), None);
    }

    #[test]
    fn leaving_coordinator_announces_immediately() {
        let (mut c, _) = machine(1, &[1, 2, 3]);
        let a = c.request_leave().unwrap();
        assert!(matches!(first_broadcast(&a), Message::Left { pid: p } if *p == pid(1)));
        assert_eq!(c.state(), MemberState::Left);

        // The announcement removes the leaver and elects the next ticket.
        let (mut m2, _) = machine(2, &[1, 2, 3]);
        let a = recv(&mut m2, Message::Left { pid: pid(1) });
        assert!(matches!(&a[..], [Action::NotifyBecameCoord { members }] if members.len() == 2));
        assert!(m2.is_coordinator());

        let (mut m3, _) = machine(3, &[1, 2, 3]);
        let a = recv(&mut m3, Message::Left { pid: pid(1) });
        assert!(matches!(&a[..], [Action::NotifyGroupChanged { members }] if members.len() == 2));
        assert_eq!(m3.coordinator(), Some(pid(2)));
    }

    #[test]
    fn leave_poll_window_completes_with_no_leavers() {
        let (mut c, _) = machine(1, &[1, 2]);
        let actions = c.check_leaves(2_000).unwrap();
        assert!(matches!(first_broadcast(&actions), Message::Lpoll { .. }));
        let (epoch, _) = timer_of(&actions, TimerKind::PollWait);
        let a = c.handle(Event::TimerFired { epoch, kind: TimerKind::PollWait }).unwrap();
        assert!(matches!(&a[..], [Action::RoundComplete { .. }]));
        assert!(c.is_idle());
    }

    #[test]
    fn failure_of_addressee_completes_a_waiting_round() {
        let (mut c, _) = machine(1, &[1, 2, 3]);
        c.request_reply(group(&[2, 3]), vec![], 0).unwrap();
        recv(&mut c, Message::Arpl { pid: pid(2), seqno: 1, data: b"ok".to_vec() });
        let a = c.handle(Event::FaultNotify { pid: pid(3) }).unwrap();
        let kinds: Vec<_> = a.iter().map(std::mem::discriminant).collect();
        assert_eq!(kinds.len(), 3, "cancel, completion, membership change: {a:?}");
        match &a[..] {
            [Action::CancelTimers { .. }, Action::RoundComplete { replies }, Action::NotifyGroupChanged { members }] => {
                assert_eq!(replies.len(), 1, "only the survivor's reply");
                assert!(replies.contains_key(&pid(2)));
                assert_eq!(members.len(), 2);
            }
            other => panic!("unexpected actions {other:?}"),
        }
    }

    #[test]
    fn coordinator_failure_elects_next_ticket_without_messages() {
        let (mut m2, _) = machine(2, &[1, 2, 3]);
        let (mut m3, _) = machine(3, &[1, 2, 3]);
        let a = m2.handle(Event::FaultNotify { pid: pid(1) }).unwrap();
        assert!(matches!(&a[..], [Action::NotifyBecameCoord { .. }]));
        assert!(m2.is_coordinator());
        let a = m3.handle(Event::FaultNotify { pid: pid(1) }).unwrap();
        assert!(matches!(&a[..], [Action::NotifyGroupChanged { members }] if members.len() == 2));
        assert_eq!(m3.coordinator(), Some(pid(2)));
        // Repeated notification is idempotent.
        assert!(m3.handle(Event::FaultNotify { pid: pid(1) }).unwrap().is_empty());
    }

    #[test]
    fn elected_coordinator_repushes_uncommitted_admissions() {
        // m2's view holds a member still flagged new when the coordinator
        // dies: the push sequence must be repeated before normal service.
        let (mut m2, _) = machine(2, &[1, 2, 3]);
        recv(&mut m2, Message::Vpush {
            pid: pid(1),
            rmask: ReplyMask::from_bits(0b10),
            view: vec![
                ViewEntry { pid: pid(1), ticket: crate::protocol::Ticket::new(1).unwrap(), is_new: false },
                ViewEntry { pid: pid(2), ticket: crate::protocol::Ticket::new(2).unwrap(), is_new: false },
                ViewEntry { pid: pid(3), ticket: crate::protocol::Ticket::new(3).unwrap(), is_new: false },
                ViewEntry { pid: pid(5), ticket: crate::protocol::Ticket::new(4).unwrap(), is_new: true },
            ],
        });
        let a = m2.handle(Event::FaultNotify { pid: pid(1) }).unwrap();
        assert!(m2.is_coordinator());
        assert!(a.iter().any(|x| matches!(x, Action::NotifyBecameCoord { .. })));
        match first_broadcast(&a) {
            Message::Vpush { rmask, .. } => {
                assert_eq!(rmask.bits(), 0b100, "settled members except self first");
            }
            other => panic!("unexpected broadcast {other:?}"),
        }
        assert_eq!(m2.round_kind(), RoundKind::ViewPush);
        // Sequence continues to the uncommitted member, then flags clear.
        let a = recv(&mut m2, Message::Vack { pid: pid(3) });
        assert!(matches!(first_broadcast(&a), Message::Vpush { rmask, .. } if rmask.bits() == 0b10000));
        recv(&mut m2, Message::Vack { pid: pid(5) });
        assert!(m2.view().new_members().is_empty());
        assert!(m2.is_idle());
    }

    #[test]
    fn elected_while_leaving_leaves_instead_of_serving() {
        let (mut m2, _) = machine(2, &[1, 2, 3]);
        m2.request_leave().unwrap();
        let a = m2.handle(Event::FaultNotify { pid: pid(1) }).unwrap();
        assert!(matches!(first_broadcast(&a), Message::Left { pid: p } if *p == pid(2)));
        assert_eq!(m2.state(), MemberState::Left);
        assert!(!a.iter().any(|x| matches!(x, Action::NotifyBecameCoord { .. })));
    }

    #[test]
    fn vpush_from_new_coordinator_voids_old_duties() {
        let (mut m3, _) = machine(3, &[1, 2, 3]);
        // Owe a reply to the old coordinator.
        let a = recv(&mut m3, Message::Areq {
            pid: pid(1),
            seqno: 4,
            rmask: ReplyMask::from_bits(0b100),
            data: vec![],
        });
        let token = match &a[..] {
            [Action::DeliverRequest { token, .. }] => *token,
            other => panic!("unexpected actions {other:?}"),
        };
        assert_eq!(m3.seqno(), 4);

        // New coordinator pushes before the reply is ready.
        let a = recv(&mut m3, Message::Vpush {
            pid: pid(2),
            rmask: ReplyMask::from_bits(0b100),
            view: vec![
                ViewEntry { pid: pid(2), ticket: crate::protocol::Ticket::new(2).unwrap(), is_new: false },
                ViewEntry { pid: pid(3), ticket: crate::protocol::Ticket::new(3).unwrap(), is_new: false },
            ],
        });
        assert!(matches!(first_broadcast(&a), Message::Vack { .. }));
        assert_eq!(m3.coordinator(), Some(pid(2)));
        assert_eq!(m3.seqno(), 0);

        // The stale reply is silently discarded.
        let a = m3.reply_ready(token, b"too late".to_vec()).unwrap();
        assert!(a.is_empty());
    }

    #[test]
    fn vack_chain_preempts_slot_timer() {
        let (mut m3, _) = machine(3, &[1, 2, 3]);
        let a = recv(&mut m3, Message::Vpush {
            pid: pid(1),
            rmask: ReplyMask::from_bits(0b110),
            view: vec![],
        });
        let (_, delay) = timer_of(&a, TimerKind::Slot);
        assert_eq!(delay, 10_000, "slot 1 waits one message time");
        let a = recv(&mut m3, Message::Vack { pid: pid(2) });
        assert!(matches!(first_broadcast(&a), Message::Vack { pid: p } if *p == pid(3)));
    }

    #[test]
    fn app_calls_are_rejected_in_wrong_states() {
        let (mut m2, _) = machine(2, &[1, 2, 3]);
        assert_eq!(m2.request_reply(group(&[3]), vec![], 0), Err(Error::NotCoordinator));
        assert_eq!(m2.check_joins(0), Err(Error::NotCoordinator));
        assert_eq!(m2.request_join(), Err(Error::WrongState { state: MemberState::Normal }));

        let (mut c, _) = machine(1, &[1, 2]);
        assert_eq!(
            c.request_reply(group(&[7]), vec![], 0),
            Err(Error::UnknownDestination(pid(7)))
        );
        let oversize = vec![0u8; c.config().max_payload + 1];
        assert!(matches!(
            c.request_reply(group(&[2]), oversize, 0),
            Err(Error::PayloadTooLarge { .. })
        ));
        c.check_joins(0).unwrap();
        assert_eq!(c.check_leaves(0), Err(Error::RoundInProgress));
    }

    #[test]
    fn manual_view_push_rounds() {
        let (mut c, _) = machine(1, &[1, 2, 3]);
        let a = c.start_view_push(&group(&[2, 3])).unwrap();
        assert!(matches!(first_broadcast(&a), Message::Vpush { rmask, .. } if rmask.bits() == 0b110));
        recv(&mut c, Message::Vack { pid: pid(2) });
        let a = recv(&mut c, Message::Vack { pid: pid(3) });
        assert!(matches!(&a[..], [Action::CancelTimers { .. }, Action::RoundComplete { .. }]));

        // Pushing to nobody (or only yourself) completes immediately.
        let a = c.start_view_push(&group(&[1])).unwrap();
        assert!(matches!(&a[..], [Action::RoundComplete { .. }]));
    }

    #[test]
    fn left_process_ignores_group_traffic() {
        let (mut m, _) = Machine::init(pid(4), &BTreeSet::new(), cfg()).unwrap();
        assert!(recv(&mut m, Message::Jpoll { pid: pid(1) }).is_empty());
        assert!(recv(&mut m, Message::Lpoll { pid: pid(1) }).is_empty());
        assert!(recv(&mut m, Message::Areq {
            pid: pid(1),
            seqno: 1,
            rmask: ReplyMask::from_bits(0b1000),
            data: vec![],
        })
        .is_empty());
        assert!(recv(&mut m, Message::Vpush {
            pid: pid(1),
            rmask: ReplyMask::from_bits(0b1000),
            view: vec![],
        })
        .is_empty());
    }
}
