//! Reply masks.
//!
//! A reply mask is a 64-bit set of process ids: process `p` owns bit `p - 1`.
//! Beyond addressing, the mask fixes the reply order of a round: the member
//! owning the k-th set bit (counting from the least significant) transmits in
//! slot `k`. Slot 0 replies immediately; every later slot waits either for
//! the previous member's reply on the medium or for its own slot timer.

use std::fmt;

use super::types::ProcessId;

#[derive(Copy, Clone, PartialEq, Eq, Hash, Default)]
pub struct ReplyMask(u64);

impl ReplyMask {
    pub const EMPTY: ReplyMask = ReplyMask(0);

    pub fn from_bits(bits: u64) -> Self {
        ReplyMask(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    /// Mask holding exactly the given processes.
    pub fn from_pids<I: IntoIterator<Item = ProcessId>>(pids: I) -> Self {
        let mut bits = 0u64;
        for p in pids {
            bits |= 1u64 << p.bit_index();
        }
        ReplyMask(bits)
    }

    pub fn with(self, p: ProcessId) -> Self {
        ReplyMask(self.0 | (1u64 << p.bit_index()))
    }

    pub fn without(self, p: ProcessId) -> Self {
        ReplyMask(self.0 & !(1u64 << p.bit_index()))
    }

    pub fn contains(self, p: ProcessId) -> bool {
        self.0 & (1u64 << p.bit_index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> u32 {
        self.0.count_ones()
    }

    pub fn is_subset_of(self, other: ReplyMask) -> bool {
        self.0 & !other.0 == 0
    }

    /// Reply slot of `p`: the number of set bits strictly below `p`'s bit.
    /// `None` when `p` is not in the mask.
    pub fn slot_of(self, p: ProcessId) -> Option<u32> {
        if !self.contains(p) {
            return None;
        }
        let below = self.0 & ((1u64 << p.bit_index()) - 1);
        Some(below.count_ones())
    }

    /// True when `me` owns the lowest set bit strictly above `prev`'s bit:
    /// that is, when overhearing `prev`'s reply means `me` transmits next.
    pub fn is_next_after(self, prev: ProcessId, me: ProcessId) -> bool {
        if !self.contains(me) || me.bit_index() <= prev.bit_index() {
            return false;
        }
        let between = self.0
            & ((1u64 << me.bit_index()) - 1)
            & !((1u64 << (prev.bit_index() + 1)) - 1);
        between == 0
    }

    /// Member ids in the mask, ascending.
    pub fn pids(self) -> impl Iterator<Item = ProcessId> {
        let bits = self.0;
        (1..=64u8)
            .filter(move |v| bits & (1u64 << (v - 1)) != 0)
            .map(|v| ProcessId::new(v).expect("bit index maps to a valid id"))
    }
}

impl fmt::Debug for ReplyMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ReplyMask(0b{:b})", self.0)
    }
}

impl fmt::Display for ReplyMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0b{:b}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::types::pid;

    /// Oracle: membership decided by asking each of the 64 positions.
    fn oracle_mask(pids: &[u8]) -> u64 {
        let mut bits = 0u64;
        for pos in 0..64u8 {
            if pids.contains(&(pos + 1)) {
                bits |= 1u64 << pos;
            }
        }
        bits
    }

    /// Oracle: slot and successor questions answered over the sorted list of
    /// member ids rather than with bit arithmetic.
    fn oracle_members(mask: u64) -> Vec<u8> {
        (1..=64u8).filter(|v| mask & (1u64 << (v - 1)) != 0).collect()
    }

    #[test]
    fn from_pids_matches_enumeration_oracle() {
        assert_eq!(oracle_mask(&[2, 3]), 0b110);
        assert_eq!(ReplyMask::from_pids([pid(2), pid(3)]).bits(), 0b110);

        assert_eq!(oracle_mask(&[2, 3, 5]), 0b10110);
        assert_eq!(ReplyMask::from_pids([pid(2), pid(3), pid(5)]).bits(), 0b10110);

        for pids in [vec![1u8], vec![64], vec![1, 64], vec![7, 9, 33]] {
            let mask = ReplyMask::from_pids(pids.iter().map(|&v| pid(v)));
            assert_eq!(mask.bits(), oracle_mask(&pids));
        }
    }

    #[test]
    fn slot_of_counts_lower_members() {
        // Members of 0b110 are {2, 3}; their slots follow list order.
        let mask = ReplyMask::from_bits(0b110);
        let members = oracle_members(0b110);
        assert_eq!(members, vec![2, 3]);
        for (slot, &p) in members.iter().enumerate() {
            assert_eq!(mask.slot_of(pid(p)), Some(slot as u32));
        }
        assert_eq!(mask.slot_of(pid(3)), Some(1));
        assert_eq!(mask.slot_of(pid(1)), None);

        let mask = ReplyMask::from_bits(0b10110);
        assert_eq!(mask.slot_of(pid(2)), Some(0));
        assert_eq!(mask.slot_of(pid(3)), Some(1));
        assert_eq!(mask.slot_of(pid(5)), Some(2));
    }

    #[test]
    fn is_next_after_matches_list_successor() {
        // Members of 0b1101 are {1, 3, 4}: after 1 comes 3, not 4.
        let mask = ReplyMask::from_bits(0b1101);
        let members = oracle_members(0b1101);
        assert_eq!(members, vec![1, 3, 4]);

        let successor_of = |prev: u8| -> Option<u8> {
            members.iter().copied().find(|&m| m > prev)
        };
        assert_eq!(successor_of(1), Some(3));
        assert!(mask.is_next_after(pid(1), pid(3)));
        assert!(!mask.is_next_after(pid(1), pid(4)));
        assert!(mask.is_next_after(pid(3), pid(4)));

        // The previous sender's own bit may already be cleared or may still
        // be present; only bits between the two matter.
        let cleared = mask.without(pid(1));
        assert!(cleared.is_next_after(pid(1), pid(3)));

        // Nothing follows the highest member.
        assert!(!mask.is_next_after(pid(4), pid(4)));
        assert!(!mask.is_next_after(pid(4), pid(1)));
    }

    #[test]
    fn exhaustive_next_after_agrees_with_oracle_on_small_masks() {
        for bits in 0u64..256 {
            let mask = ReplyMask::from_bits(bits);
            let members = oracle_members(bits);
            for prev in 1..=8u8 {
                for me in 1..=8u8 {
                    let oracle = members.contains(&me)
                        && members.iter().copied().find(|&m| m > prev) == Some(me);
                    assert_eq!(
                        mask.is_next_after(pid(prev), pid(me)),
                        oracle,
                        "bits={bits:#b} prev={prev} me={me}"
                    );
                }
            }
        }
    }

    #[test]
    fn set_operations() {
        let mask = ReplyMask::EMPTY.with(pid(5)).with(pid(2));
        assert_eq!(mask.bits(), 0b10010);
        assert_eq!(mask.len(), 2);
        assert!(mask.contains(pid(5)));
        assert!(!mask.contains(pid(4)));
        assert!(mask.without(pid(5)).bits() == 0b10);
        assert!(mask.without(pid(4)) == mask);
        assert!(ReplyMask::from_bits(0b10).is_subset_of(mask));
        assert!(!mask.is_subset_of(ReplyMask::from_bits(0b10)));
        let collected: Vec<u8> = mask.pids().map(|p| p.get()).collect();
        assert_eq!(collected, vec![2, 5]);
    }
}
