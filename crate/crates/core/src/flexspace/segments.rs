//! Per-segment valid-byte accounting and the free-segment pool.

use std::collections::BTreeSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegState {
    Free,
    /// The segment currently receiving appends.
    Head,
    Closed,
    /// Emptied since the last log commit; reusable once that commit lands.
    PendingFree,
}

#[derive(Debug)]
pub struct Segments {
    pub size: u64,
    valid: Vec<u64>,
    state: Vec<SegState>,
    free: BTreeSet<u32>,
    pending: Vec<u32>,
    total_valid: u64,
}

impl Segments {
    pub fn new(size: u64) -> Self {
        Segments {
            size,
            valid: Vec::new(),
            state: Vec::new(),
            free: BTreeSet::new(),
            pending: Vec::new(),
            total_valid: 0,
        }
    }

    /// Rebuilds from per-segment valid counts (after recovery). Every
    /// non-empty segment is closed; nothing is appended to old segments.
    pub fn rebuild(size: u64, valid: Vec<u64>) -> Self {
        let state: Vec<SegState> = valid
            .iter()
            .map(|&v| if v == 0 { SegState::Free } else { SegState::Closed })
            .collect();
        let free = (0..valid.len() as u32).filter(|&s| valid[s as usize] == 0).collect();
        let total_valid = valid.iter().sum();
        Segments {
            size,
            valid,
            state,
            free,
            pending: Vec::new(),
            total_valid,
        }
    }

    pub fn count(&self) -> u32 {
        self.valid.len() as u32
    }

    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn total_valid(&self) -> u64 {
        self.total_valid
    }

    pub fn valid(&self, seg: u32) -> u64 {
        self.valid[seg as usize]
    }

    pub fn valid_bytes(&self) -> &[u64] {
        &self.valid
    }

    pub fn state(&self, seg: u32) -> SegState {
        self.state[seg as usize]
    }

    /// Appends a fresh segment to the free pool.
    pub fn grow(&mut self) -> u32 {
        let id = self.valid.len() as u32;
        self.valid.push(0);
        self.state.push(SegState::Free);
        self.free.insert(id);
        id
    }

    /// Takes the lowest free segment as the new head.
    pub fn take_free(&mut self) -> Option<u32> {
        let id = self.free.pop_first()?;
        self.state[id as usize] = SegState::Head;
        Some(id)
    }

    pub fn close(&mut self, seg: u32) {
        debug_assert_eq!(self.state[seg as usize], SegState::Head);
        if self.valid[seg as usize] == 0 {
            self.state[seg as usize] = SegState::PendingFree;
            self.pending.push(seg);
        } else {
            self.state[seg as usize] = SegState::Closed;
        }
    }

    /// Called once a log commit is durable.
    pub fn release_pending(&mut self) -> usize {
        let n = self.pending.len();
        for s in self.pending.drain(..) {
            self.state[s as usize] = SegState::Free;
            self.free.insert(s);
        }
        n
    }

    /// Adds `len` valid bytes at `phys`. Runs never straddle segments.
    pub fn add(&mut self, phys: u64, len: u64) {
        let seg = (phys / self.size) as usize;
        debug_assert!((phys + len - 1) / self.size == seg as u64);
        self.valid[seg] += len;
        debug_assert!(self.valid[seg] <= self.size);
        self.total_valid += len;
    }

    pub fn sub(&mut self, phys: u64, len: u64) {
        let seg = (phys / self.size) as usize;
        debug_assert!((phys + len - 1) / self.size == seg as u64);
        self.valid[seg] -= len;
        self.total_valid -= len;
        if self.valid[seg] == 0 && self.state[seg] == SegState::Closed {
            self.state[seg] = SegState::PendingFree;
            self.pending.push(seg as u32);
        }
    }

    /// The closed segment with the fewest valid bytes (lowest id on ties),
    /// if it is at most `limit`.
    pub fn victim(&self, limit: u64) -> Option<u32> {
        (0..self.valid.len())
            .filter(|&s| self.state[s] == SegState::Closed)
            .min_by_key(|&s| (self.valid[s], s))
            .filter(|&s| self.valid[s] <= limit)
            .map(|s| s as u32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emptied_segments_wait_for_commit() {
        let mut s = Segments::new(100);
        s.grow();
        s.grow();
        let a = s.take_free().unwrap();
        assert_eq!(a, 0);
        s.add(10, 50);
        s.close(a);
        s.sub(10, 50);
        assert_eq!(s.state(a), SegState::PendingFree);
        assert_eq!(s.free_count(), 1);
        assert_eq!(s.release_pending(), 1);
        assert_eq!(s.free_count(), 2);
    }

    #[test]
    fn victim_prefers_least_valid_then_lowest_id() {
        let mut s = Segments::rebuild(100, vec![40, 30, 30, 0, 95]);
        assert_eq!(s.victim(96), Some(1));
        assert_eq!(s.victim(20), None);
        s.sub(150, 10);
        assert_eq!(s.victim(96), Some(1));
        assert_eq!(s.total_valid(), 185);
        assert_eq!(s.free_count(), 1);
    }
}
