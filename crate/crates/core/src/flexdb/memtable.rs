use std::sync::atomic::{AtomicUsize, Ordering};

use crossbeam_skiplist::SkipMap;

/// Per-entry bookkeeping charged on top of key and value bytes.
const ENTRY_OVERHEAD: usize = 16;

/// Ordered write buffer. `None` values are tombstones.
#[derive(Debug)]
pub struct MemTable {
    map: SkipMap<Vec<u8>, Option<Vec<u8>>>,
    bytes: AtomicUsize,
    epoch: u64,
}

impl MemTable {
    pub fn new(epoch: u64) -> Self {
        MemTable {
            map: SkipMap::new(),
            bytes: AtomicUsize::new(0),
            epoch,
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn insert(&self, key: Vec<u8>, value: Option<Vec<u8>>) {
        let add = key.len() + value.as_ref().map_or(0, Vec::len) + ENTRY_OVERHEAD;
        self.bytes.fetch_add(add, Ordering::Relaxed);
        self.map.insert(key, value);
    }

    /// `Some(None)` is a tombstone hit; `None` means the key is not here.
    pub fn get(&self, key: &[u8]) -> Option<Option<Vec<u8>>> {
        self.map.get(key).map(|e| e.value().clone())
    }

    pub fn bytes(&self) -> usize {
        self.bytes.load(Ordering::Relaxed)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Entries in key order.
    pub fn entries(&self) -> Vec<(Vec<u8>, Option<Vec<u8>>)> {
        self.map.iter().map(|e| (e.key().clone(), e.value().clone())).collect()
    }

    /// Entries with `from <= key < to` (unbounded above if `to` is None).
    pub fn range(&self, from: &[u8], to: Option<&[u8]>) -> Vec<(Vec<u8>, Option<Vec<u8>>)> {
        let mut out = Vec::new();
        for e in self.map.range(from.to_vec()..) {
            if to.is_some_and(|t| e.key().as_slice() >= t) {
                break;
            }
            out.push((e.key().clone(), e.value().clone()));
        }
        out
    }
}
