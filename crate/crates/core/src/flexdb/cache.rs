//! Decoded intervals and the CLOCK cache that holds them.

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::Arc;

use super::record;

pub fn fingerprint(key: &[u8]) -> u16 {
    let mut h = DefaultHasher::new();
    key.hash(&mut h);
    h.finish() as u16
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rec {
    pub fp: u16,
    pub key: Vec<u8>,
    pub value: Vec<u8>,
}

impl Rec {
    pub fn new(key: Vec<u8>, value: Vec<u8>) -> Self {
        Rec {
            fp: fingerprint(&key),
            key,
            value,
        }
    }

    pub fn size(&self) -> u64 {
        record::encoded_len(&self.key, &self.value) as u64
    }
}

/// An interval's records in key order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Interval {
    pub recs: Vec<Rec>,
}

impl Interval {
    /// Decodes a whole interval. Fails on a torn or malformed record.
    pub fn decode(mut buf: &[u8]) -> Option<Interval> {
        let mut recs = Vec::new();
        while !buf.is_empty() {
            let (k, v, n) = record::decode(buf)?;
            if k.is_empty() {
                return None;
            }
            recs.push(Rec::new(k.to_vec(), v.to_vec()));
            buf = &buf[n..];
        }
        Some(Interval { recs })
    }

    pub fn get(&self, key: &[u8]) -> Option<&[u8]> {
        let fp = fingerprint(key);
        self.recs
            .iter()
            .find(|r| r.fp == fp && r.key == key)
            .map(|r| r.value.as_slice())
    }

    pub fn search(&self, key: &[u8]) -> Result<usize, usize> {
        self.recs.binary_search_by(|r| r.key.as_slice().cmp(key))
    }

    /// Byte offset of record `i` within the interval.
    pub fn offset_of(&self, i: usize) -> u64 {
        self.recs[..i].iter().map(Rec::size).sum()
    }

    #[cfg(test)]
    pub fn size(&self) -> u64 {
        self.offset_of(self.recs.len())
    }
}

#[derive(Debug)]
struct Slot {
    id: u64,
    data: Arc<Interval>,
    referenced: bool,
}

/// CLOCK replacement over a fixed number of interval slots.
#[derive(Debug)]
pub struct ClockCache {
    slots: Vec<Slot>,
    map: HashMap<u64, usize>,
    hand: usize,
    cap: usize,
    pub hits: u64,
    pub misses: u64,
}

impl ClockCache {
    pub fn new(cap: usize) -> Self {
        ClockCache {
            slots: Vec::new(),
            map: HashMap::new(),
            hand: 0,
            cap: cap.max(1),
            hits: 0,
            misses: 0,
        }
    }

    pub fn get(&mut self, id: u64) -> Option<Arc<Interval>> {
        match self.map.get(&id) {
            Some(&s) => {
                self.hits += 1;
                self.slots[s].referenced = true;
                Some(Arc::clone(&self.slots[s].data))
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    /// Looks up without touching reference bits or counters.
    pub fn peek(&self, id: u64) -> Option<Arc<Interval>> {
        self.map.get(&id).map(|&s| Arc::clone(&self.slots[s].data))
    }

    /// Inserts or replaces an interval.
    pub fn put(&mut self, id: u64, data: Arc<Interval>) {
        if let Some(&s) = self.map.get(&id) {
            self.slots[s].data = data;
            self.slots[s].referenced = true;
            return;
        }
        if self.slots.len() < self.cap {
            self.map.insert(id, self.slots.len());
            self.slots.push(Slot {
                id,
                data,
                referenced: true,
            });
            return;
        }
        loop {
            let s = &mut self.slots[self.hand];
            if s.referenced {
                s.referenced = false;
                self.hand = (self.hand + 1) % self.cap;
                continue;
            }
            self.map.remove(&s.id);
            self.map.insert(id, self.hand);
            *s = Slot {
                id,
                data,
                referenced: true,
            };
            self.hand = (self.hand + 1) % self.cap;
            return;
        }
    }

    pub fn remove(&mut self, id: u64) {
        if let Some(s) = self.map.remove(&id) {
            let last = self.slots.len() - 1;
            self.slots.swap(s, last);
            self.slots.pop();
            if s < self.slots.len() {
                self.map.insert(self.slots[s].id, s);
            }
            if self.hand >= self.slots.len() {
                self.hand = 0;
            }
        }
    }

    #[cfg(test)]
    pub fn len(&self) -> usize {
        self.slots.len()
    }
}
