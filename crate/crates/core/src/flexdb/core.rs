//! Index maintenance and the commit path. Everything here runs with the
//! index lock held; the caller decides whether it is shared or exclusive.

use std::sync::Arc;

use log::warn;
use parking_lot::Mutex;

use super::cache::{ClockCache, Interval, Rec};
use super::index::{NewInterval, Pos, SparseIndex};
use super::{record, DbError, Result};
use crate::flexspace::FlexSpace;

#[derive(Clone, Copy, Debug)]
pub struct Limits {
    pub max_bytes: u64,
    pub max_items: u32,
}

#[derive(Debug)]
pub struct Core {
    pub index: SparseIndex,
    pub limits: Limits,
}

/// Key bytes fetched from an extent start before falling back to a full
/// read of the record prefix.
const KEY_PROBE: u64 = 64;

/// Loads an interval through the cache. The flag is true on a miss.
pub fn fetch(
    index: &SparseIndex,
    space: &FlexSpace,
    cache: &Mutex<ClockCache>,
    pos: &Pos,
) -> Result<(Arc<Interval>, bool)> {
    let e = index.entry(pos);
    if let Some(iv) = cache.lock().get(e.id) {
        return Ok((iv, false));
    }
    let off = index.offset(pos);
    let buf = space.pread(off, e.size)?;
    let iv = Interval::decode(&buf)
        .ok_or_else(|| DbError::Corrupt(format!("undecodable interval at {off} (+{})", e.size)))?;
    let iv = Arc::new(iv);
    cache.lock().put(e.id, Arc::clone(&iv));
    Ok((iv, true))
}

impl Core {
    pub fn new(index: SparseIndex, limits: Limits) -> Self {
        Core { index, limits }
    }

    fn over(&self, size: u64, count: u32) -> bool {
        size > self.limits.max_bytes || count > self.limits.max_items
    }

    /// True if the interval holding `key` should be split before use.
    pub fn needs_split(&self, key: &[u8]) -> bool {
        let e = self.index.entry(&self.index.seek(key));
        !e.count_known || self.over(e.size, e.count)
    }

    /// Loads for a writer, refreshing the entry's count and fragmentation.
    fn fetch_mut(&mut self, space: &FlexSpace, cache: &Mutex<ClockCache>, pos: &Pos) -> Result<Arc<Interval>> {
        let (iv, miss) = fetch(&self.index, space, cache, pos)?;
        if miss {
            let e = self.index.entry(pos);
            let runs = space.query_range(self.index.offset(pos), e.size)?.len();
            let count = iv.recs.len() as u32;
            self.index.set_meta(pos, count, true, runs as u64 > count as u64 / 2);
        }
        Ok(iv)
    }

    /// Applies one committed MemTable entry; `None` deletes.
    pub fn apply(
        &mut self,
        space: &FlexSpace,
        cache: &Mutex<ClockCache>,
        key: &[u8],
        value: Option<&[u8]>,
    ) -> Result<()> {
        let pos = self.index.seek(key);
        let cached = self.fetch_mut(space, cache, &pos)?;
        let base = self.index.offset(&pos);
        let entry = self.index.entry(&pos).clone();
        let first = self.index.is_first(&pos);
        let mut iv = (*cached).clone();
        let deleted;
        match (iv.search(key), value) {
            (Ok(i), Some(v)) => {
                let off = base + iv.offset_of(i);
                let old = iv.recs[i].size();
                let rec = record::encode(key, v);
                if rec.len() as u64 == old {
                    space.pwrite(off, &rec)?;
                } else {
                    space.collapse_range(off, old)?;
                    space.insert_range(off, &rec)?;
                    self.index.resize(&pos, rec.len() as i64 - old as i64);
                }
                iv.recs[i].value = v.to_vec();
                deleted = false;
            }
            (Err(i), Some(v)) => {
                let off = base + iv.offset_of(i);
                let rec = record::encode(key, v);
                space.insert_range(off, &rec)?;
                self.index.resize(&pos, rec.len() as i64);
                iv.recs.insert(i, Rec::new(key.to_vec(), v.to_vec()));
                if i == 0 && !first {
                    self.index.set_key(&pos, key.to_vec());
                }
                deleted = false;
            }
            (Ok(i), None) => {
                let off = base + iv.offset_of(i);
                let old = iv.recs[i].size();
                space.collapse_range(off, old)?;
                self.index.resize(&pos, -(old as i64));
                iv.recs.remove(i);
                if i == 0 && !first && !iv.recs.is_empty() {
                    self.index.set_key(&pos, iv.recs[0].key.clone());
                }
                deleted = true;
            }
            (Err(_), None) => return Ok(()),
        }
        let count = iv.recs.len() as u32;
        let mut fragmented = self.index.entry(&pos).fragmented;
        if fragmented && count > 0 {
            space.defrag(base, self.index.entry(&pos).size)?;
            fragmented = false;
        }
        self.index.set_meta(&pos, count, true, fragmented);
        cache.lock().put(entry.id, Arc::new(iv));

        if deleted {
            self.after_delete(cache, pos)
        } else {
            self.split(space, cache, key)
        }
    }

    /// Drops an emptied interval, or folds the next one in when both are
    /// small enough together.
    fn after_delete(&mut self, cache: &Mutex<ClockCache>, pos: Pos) -> Result<()> {
        let e = self.index.entry(&pos).clone();
        if e.count == 0 && !self.index.is_first(&pos) {
            self.index.remove_empty(&pos);
            cache.lock().remove(e.id);
            return Ok(());
        }
        let mut np = pos.clone();
        if !self.index.next(&mut np) {
            return Ok(());
        }
        let n = self.index.entry(&np).clone();
        if !n.count_known || e.size + n.size >= self.limits.max_bytes || e.count + n.count >= self.limits.max_items {
            return Ok(());
        }
        self.index.merge_next(&pos);
        let mut c = cache.lock();
        let left = c.get(e.id);
        let right = c.get(n.id);
        c.remove(n.id);
        match (left, right) {
            (Some(l), Some(r)) => {
                let mut m = (*l).clone();
                m.recs.extend(r.recs.iter().cloned());
                c.put(e.id, Arc::new(m));
            }
            _ => c.remove(e.id),
        }
        Ok(())
    }

    /// Splits the interval holding `key` until every piece is within limits.
    pub fn split(&mut self, space: &FlexSpace, cache: &Mutex<ClockCache>, key: &[u8]) -> Result<()> {
        let pos = self.index.seek(key);
        let e = self.index.entry(&pos).clone();
        if e.count_known && !self.over(e.size, e.count) {
            return Ok(());
        }
        let iv = self.fetch_mut(space, cache, &pos)?;
        let e = self.index.entry(&pos).clone();
        if !self.over(e.size, e.count) || iv.recs.len() < 2 {
            return Ok(());
        }
        let k = iv.recs.len() / 2;
        let at = iv.offset_of(k);
        let right_key = iv.recs[k].key.clone();
        let left_key = iv.recs[0].key.clone();
        let right_id = self.index.split(
            &pos,
            at,
            NewInterval {
                key: right_key.clone(),
                size: e.size - at,
                count: (iv.recs.len() - k) as u32,
                count_known: true,
                fragmented: e.fragmented,
            },
        );
        let pos = self.index.seek(&left_key);
        self.index.set_meta(&pos, k as u32, true, e.fragmented);
        {
            let mut c = cache.lock();
            c.put(
                e.id,
                Arc::new(Interval {
                    recs: iv.recs[..k].to_vec(),
                }),
            );
            c.put(
                right_id,
                Arc::new(Interval {
                    recs: iv.recs[k..].to_vec(),
                }),
            );
        }
        self.split(space, cache, &left_key)?;
        self.split(space, cache, &right_key)
    }

    /// Rebuilds the index by sampling extent starts every `stride` bytes.
    /// Returns the index and the number of `read_extent` calls.
    pub fn rebuild(space: &FlexSpace, stride: u64, node_capacity: usize) -> Result<(SparseIndex, u64)> {
        let total = space.total_size();
        let mut starts: Vec<(u64, Vec<u8>)> = Vec::new();
        let mut calls = 0u64;
        let mut off = stride;
        while off < total {
            calls += 1;
            let (start, head) = space.read_extent(off, KEY_PROBE)?;
            off += stride;
            if head.is_empty() {
                warn!("hole at offset {start} while rebuilding the index; skipped");
                continue;
            }
            if start == 0 || starts.last().is_some_and(|(s, _)| *s >= start) {
                continue;
            }
            let key = match record::key_prefix_len(&head) {
                Some(n) if n as u64 <= KEY_PROBE => record::decode_key(&head).map(<[u8]>::to_vec),
                Some(n) => {
                    let buf = space.pread(start, n as u64)?;
                    record::decode_key(&buf).map(<[u8]>::to_vec)
                }
                None => None,
            };
            match key {
                Some(k) if !k.is_empty() && starts.last().is_none_or(|(_, p)| *p < k) => starts.push((start, k)),
                _ => warn!("unreadable or misordered record at offset {start}; skipped"),
            }
        }
        let mut index = SparseIndex::new(node_capacity);
        let first_size = starts.first().map_or(total, |(s, _)| *s);
        let first = index.first();
        index.resize(&first, first_size as i64);
        index.set_meta(&first, 0, false, false);
        for (i, (start, key)) in starts.iter().enumerate() {
            let end = starts.get(i + 1).map_or(total, |(s, _)| *s);
            index.push(NewInterval {
                key: key.clone(),
                size: end - start,
                count: 0,
                count_known: false,
                fragmented: false,
            });
        }
        Ok((index, calls))
    }

    /// Checks index/space synchrony and cache write-through for every
    /// interval. Test and diagnostic use; reads the whole space.
    pub fn verify(&self, space: &FlexSpace, cache: &Mutex<ClockCache>) -> std::result::Result<(), String> {
        self.index.check(space.total_size())?;
        for (off, e) in self.index.intervals() {
            let buf = space.pread(off, e.size).map_err(|err| err.to_string())?;
            let iv = Interval::decode(&buf).ok_or_else(|| format!("interval at {off} does not decode"))?;
            if e.count_known && iv.recs.len() as u32 != e.count {
                return Err(format!(
                    "interval at {off}: count {} but {} records",
                    e.count,
                    iv.recs.len()
                ));
            }
            if let (Some(k), Some(r)) = (e.index_key(), iv.recs.first()) {
                if k != r.key.as_slice() {
                    return Err(format!("interval at {off}: index key is not its smallest key"));
                }
            }
            if let Some(c) = cache.lock().peek(e.id) {
                if *c != iv {
                    return Err(format!("cached interval at {off} differs from the space"));
                }
            }
        }
        Ok(())
    }
}
