//! Group views.
//!
//! A view maps member ids to tickets. Tickets decide coordination: the
//! member with the minimum ticket is the coordinator, and on its failure the
//! next-smallest ticket wins the election without any messages. Entries
//! carry an `is_new` flag while the member's admission has been decided but
//! not yet pushed to everyone; a coordinator that inherits such entries must
//! repeat the push sequence before the flag clears.

use std::collections::{BTreeMap, BTreeSet};

use super::types::{Error, ProcessId, Ticket, MAX_GROUP_SIZE};

/// One view row as carried by view-push messages.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct ViewEntry {
    pub pid: ProcessId,
    pub ticket: Ticket,
    pub is_new: bool,
}

#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct GroupView {
    entries: BTreeMap<ProcessId, (Ticket, bool)>,
    /// Highest ticket value ever observed or assigned. Never decreases, so
    /// ticket assignment stays monotone across coordinator changes.
    max_seen: u32,
}

impl GroupView {
    /// Founding view: tickets `1..=n` assigned in ascending id order, nobody
    /// flagged new.
    pub fn founding(pids: &BTreeSet<ProcessId>) -> Result<Self, Error> {
        if pids.len() > MAX_GROUP_SIZE {
            return Err(Error::GroupTooLarge(pids.len()));
        }
        let mut entries = BTreeMap::new();
        let mut next = 1u32;
        for &p in pids {
            entries.insert(p, (Ticket::new(next)?, false));
            next += 1;
        }
        Ok(GroupView { entries, max_seen: pids.len() as u32 })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn contains(&self, p: ProcessId) -> bool {
        self.entries.contains_key(&p)
    }

    pub fn ticket_of(&self, p: ProcessId) -> Option<Ticket> {
        self.entries.get(&p).map(|&(t, _)| t)
    }

    pub fn is_new(&self, p: ProcessId) -> bool {
        self.entries.get(&p).map(|&(_, n)| n).unwrap_or(false)
    }

    /// Member ids, ascending.
    pub fn members(&self) -> Vec<ProcessId> {
        self.entries.keys().copied().collect()
    }

    /// Rows sorted by id, as serialised into view pushes.
    pub fn entries(&self) -> Vec<ViewEntry> {
        self.entries
            .iter()
            .map(|(&pid, &(ticket, is_new))| ViewEntry { pid, ticket, is_new })
            .collect()
    }

    /// Current coordinator: holder of the minimum ticket.
    pub fn coordinator(&self) -> Option<ProcessId> {
        self.entries
            .iter()
            .min_by_key(|&(_, &(t, _))| t)
            .map(|(&p, _)| p)
    }

    /// Ticket the next admitted member will receive.
    pub fn next_ticket(&self) -> Ticket {
        Ticket::new(self.max_seen + 1).expect("max_seen + 1 is positive")
    }

    /// Admit `p` with a fresh ticket, flagged new.
    pub fn assign(&mut self, p: ProcessId) -> Ticket {
        let t = self.next_ticket();
        self.max_seen = t.get();
        self.entries.insert(p, (t, true));
        t
    }

    /// Remove a member. Returns whether it was present.
    pub fn remove(&mut self, p: ProcessId) -> bool {
        self.entries.remove(&p).is_some()
    }

    /// Merge one pushed row. The incoming row wins on conflict; `max_seen`
    /// keeps the historical maximum so tickets stay monotone even when the
    /// push comes from a coordinator with an older view.
    pub fn merge_entry(&mut self, e: ViewEntry) {
        self.max_seen = self.max_seen.max(e.ticket.get());
        self.entries.insert(e.pid, (e.ticket, e.is_new));
    }

    /// Members flagged new, ascending by ticket (their admission order).
    pub fn new_members(&self) -> Vec<ProcessId> {
        let mut v: Vec<(Ticket, ProcessId)> = self
            .entries
            .iter()
            .filter(|&(_, &(_, is_new))| is_new)
            .map(|(&p, &(t, _))| (t, p))
            .collect();
        v.sort();
        v.into_iter().map(|(_, p)| p).collect()
    }

    /// Members not flagged new, ascending by id.
    pub fn settled_members(&self) -> Vec<ProcessId> {
        self.entries
            .iter()
            .filter(|&(_, &(_, is_new))| !is_new)
            .map(|(&p, _)| p)
            .collect()
    }

    pub fn clear_new_flags(&mut self) {
        for (_, flags) in self.entries.values_mut().map(|v| (v.0, &mut v.1)) {
            *flags = false;
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        // max_seen intentionally survives: a process that re-founds a view
        // never hands out stale tickets it has already seen.
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::types::pid;

    fn founding(ids: &[u8]) -> GroupView {
        let set: BTreeSet<ProcessId> = ids.iter().map(|&v| pid(v)).collect();
        GroupView::founding(&set).unwrap()
    }

    #[test]
    fn founding_assigns_tickets_in_id_order() {
        let v = founding(&[3, 1, 2]);
        assert_eq!(v.ticket_of(pid(1)).unwrap().get(), 1);
        assert_eq!(v.ticket_of(pid(2)).unwrap().get(), 2);
        assert_eq!(v.ticket_of(pid(3)).unwrap().get(), 3);
        assert_eq!(v.coordinator(), Some(pid(1)));
    }

    #[test]
    fn next_ticket_is_monotone_after_removals() {
        let mut v = founding(&[1, 2, 3]);
        // Oracle: the next ticket is one above the historical maximum, which
        // removals must not lower.
        assert_eq!(v.next_ticket().get(), 4);
        v.remove(pid(3));
        assert_eq!(v.next_ticket().get(), 4);
        let t = v.assign(pid(7));
        assert_eq!(t.get(), 4);
        v.remove(pid(7));
        assert_eq!(v.next_ticket().get(), 5);
    }

    #[test]
    fn merge_keeps_ticket_high_water_mark() {
        let mut v = GroupView::default();
        v.merge_entry(ViewEntry { pid: pid(2), ticket: Ticket::new(9).unwrap(), is_new: false });
        assert_eq!(v.next_ticket().get(), 10);
        // Incoming rows win on conflict.
        v.merge_entry(ViewEntry { pid: pid(2), ticket: Ticket::new(3).unwrap(), is_new: true });
        assert_eq!(v.ticket_of(pid(2)).unwrap().get(), 3);
        assert!(v.is_new(pid(2)));
        assert_eq!(v.next_ticket().get(), 10);
    }

    #[test]
    fn election_order_follows_tickets_not_ids() {
        let mut v = founding(&[4, 5, 6]);
        assert_eq!(v.coordinator(), Some(pid(4)));
        v.remove(pid(4));
        assert_eq!(v.coordinator(), Some(pid(5)));
        // A rejoiner gets a fresh, larger ticket and goes to the back of the
        // election order even though its id is small.
        v.assign(pid(1));
        assert_eq!(v.coordinator(), Some(pid(5)));
    }

    #[test]
    fn new_members_sorted_by_ticket() {
        let mut v = founding(&[1, 2]);
        v.assign(pid(9));
        v.assign(pid(4));
        let by_ticket: Vec<u8> = v.new_members().iter().map(|p| p.get()).collect();
        assert_eq!(by_ticket, vec![9, 4]);
        let settled: Vec<u8> = v.settled_members().iter().map(|p| p.get()).collect();
        assert_eq!(settled, vec![1, 2]);
        v.clear_new_flags();
        assert!(v.new_members().is_empty());
        assert_eq!(v.settled_members().len(), 4);
    }
}
