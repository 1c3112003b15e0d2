//! Sorted key-value store on a [`FlexSpace`].
//!
//! Records live in the space sorted by key with no gaps and no tombstones;
//! a deletion collapses the record's bytes. A MemTable and WAL absorb
//! writes, and a committer drains the frozen MemTable into the space. The
//! sparse index maps each interval's smallest key to its offset and is
//! rebuilt on open by sampling extent starts.

mod cache;
mod core;
pub mod index;
mod memtable;
pub mod record;
mod wal;

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use log::{debug, error};
use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

use self::cache::ClockCache;
use self::core::{fetch, Core, Limits};
use self::memtable::MemTable;
use self::wal::{Wal, WalRecord};
use crate::flexspace::{FlexSpace, SpaceConfig, SpaceError, SpaceStats};
use crate::storage::{FsDir, Storage, StorageDir};

pub const MANIFEST_FILE: &str = "manifest";
const MANIFEST_FORMAT: u32 = 1;
const COMPARATOR: &str = "bytewise";

#[derive(Debug, thiserror::Error)]
pub enum DbError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("keys must be non-empty")]
    EmptyKey,
    #[error("record of {size} bytes exceeds the {max}-byte limit")]
    RecordTooLarge { size: usize, max: u64 },
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("store is closed")]
    Closed,
    #[error("store failed earlier: {0}")]
    Failed(String),
}

pub type Result<T, E = DbError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WalSync {
    /// Sync the WAL when a MemTable is frozen for commit.
    Group,
    /// Sync after every put or delete.
    EveryOp,
}

#[derive(Clone, Debug)]
pub struct DbConfig {
    pub space: SpaceConfig,
    /// A MemTable is frozen once its charged size reaches this.
    pub memtable_bytes: usize,
    pub cache_intervals: usize,
    pub interval_max_bytes: u64,
    pub interval_max_items: u32,
    /// Distance between extent probes when rebuilding the index.
    pub recovery_stride: u64,
    pub wal_sync: WalSync,
    /// Commit on a background thread. When false, the writer that fills a
    /// MemTable commits it before returning.
    pub background_commit: bool,
    /// Idle period after which a non-empty MemTable is committed anyway.
    pub commit_interval: Option<Duration>,
    /// Pairs applied per exclusive hold of the index during a commit.
    pub commit_chunk: usize,
    pub index_node_capacity: usize,
}

impl Default for DbConfig {
    fn default() -> Self {
        DbConfig {
            space: SpaceConfig::default(),
            memtable_bytes: 16 << 20,
            cache_intervals: 4096,
            interval_max_bytes: 16 << 10,
            interval_max_items: 16,
            recovery_stride: 16 << 10,
            wal_sync: WalSync::Group,
            background_commit: true,
            commit_interval: Some(Duration::from_secs(5)),
            commit_chunk: 1000,
            index_node_capacity: 64,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    comparator: String,
    interval_max_bytes: u64,
    interval_max_items: u32,
}

#[derive(Clone, Debug, Serialize)]
pub struct DbStats {
    pub intervals: usize,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub cache_hit_rate: f64,
    pub memtable_bytes: usize,
    pub commits: u64,
    pub wal_bytes_written: u64,
    /// `read_extent` calls made by the last index rebuild.
    pub recovery_read_extent_calls: u64,
    #[serde(skip)]
    pub space: SpaceStats,
}

impl DbStats {
    /// Bytes written to every file of the store.
    pub fn bytes_written(&self) -> u64 {
        self.space.file_bytes_written() + self.wal_bytes_written
    }
}

/// Where an interval sits, as seen through the index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntervalInfo {
    pub offset: u64,
    pub index_key: Option<Vec<u8>>,
    pub size: u64,
    /// `None` until a freshly rebuilt interval is first loaded.
    pub count: Option<u32>,
}

#[derive(Debug)]
struct Tables {
    mutable: Arc<MemTable>,
    immutable: Option<Arc<MemTable>>,
}

#[derive(Debug, Default)]
struct CommitState {
    /// A frozen MemTable awaits the committer.
    pending: bool,
    shutdown: bool,
    failed: Option<String>,
}

#[derive(Debug)]
struct Shared {
    config: DbConfig,
    space: FlexSpace,
    core: RwLock<Core>,
    cache: Mutex<ClockCache>,
    tables: RwLock<Tables>,
    /// Serializes writers. Held across a freeze.
    writer: Mutex<()>,
    wal: Mutex<Wal>,
    state: Mutex<CommitState>,
    cv: Condvar,
    commits: AtomicU64,
    rebuild_calls: u64,
    closed: AtomicBool,
}

/// A handle to an open store. Cheap to share across threads by reference.
#[derive(Debug)]
pub struct FlexDb {
    shared: Arc<Shared>,
    committer: Mutex<Option<JoinHandle<()>>>,
}

fn read_manifest(f: &Arc<dyn Storage>) -> Result<Option<Manifest>> {
    let len = f.len()?;
    if len == 0 {
        return Ok(None);
    }
    let mut buf = vec![0u8; len as usize];
    f.read_exact_at(&mut buf, 0)?;
    let m: Manifest = serde_json::from_slice(&buf).map_err(|e| DbError::Manifest(e.to_string()))?;
    if m.format != MANIFEST_FORMAT || m.comparator != COMPARATOR {
        return Err(DbError::Manifest(format!(
            "unsupported format {} / comparator {}",
            m.format, m.comparator
        )));
    }
    Ok(Some(m))
}

impl FlexDb {
    /// Opens the store in directory `path`, creating it if empty.
    pub fn open(path: impl AsRef<Path>, config: DbConfig) -> Result<Self> {
        let dir = FsDir::new(path)?;
        Self::open_in(&dir, config)
    }

    /// Opens or creates a store in `dir`. An existing store keeps its
    /// persisted interval limits and space configuration.
    pub fn open_in(dir: &dyn StorageDir, mut config: DbConfig) -> Result<Self> {
        let mf = dir.open(MANIFEST_FILE)?;
        let space = FlexSpace::open_in(dir, config.space.clone())?;
        config.space = space.config();
        match read_manifest(&mf)? {
            Some(m) => {
                config.interval_max_bytes = m.interval_max_bytes;
                config.interval_max_items = m.interval_max_items;
            }
            None => {
                let m = Manifest {
                    format: MANIFEST_FORMAT,
                    comparator: COMPARATOR.into(),
                    interval_max_bytes: config.interval_max_bytes,
                    interval_max_items: config.interval_max_items,
                };
                let buf = serde_json::to_vec_pretty(&m).map_err(|e| DbError::Manifest(e.to_string()))?;
                mf.write_at(&buf, 0)?;
                mf.truncate(buf.len() as u64)?;
                mf.sync()?;
            }
        }
        let limits = Limits {
            max_bytes: config.interval_max_bytes,
            max_items: config.interval_max_items,
        };
        let (index, calls) = Core::rebuild(&space, config.recovery_stride.max(1), config.index_node_capacity)?;
        let mut core = Core::new(index, limits);
        let cache = Mutex::new(ClockCache::new(config.cache_intervals));

        // Anything logged but not committed goes into the space now, so the
        // WAL can restart from a clean epoch.
        let scan = Wal::scan(dir)?;
        if !scan.pending.is_empty() {
            debug!("replaying {} WAL records", scan.pending.len());
            let mt = MemTable::new(scan.max_epoch);
            for (_, r) in scan.pending {
                match r {
                    WalRecord::Put { key, value } => mt.insert(key, Some(value)),
                    WalRecord::Delete { key } => mt.insert(key, None),
                }
            }
            for (k, v) in mt.entries() {
                core.apply(&space, &cache, &k, v.as_deref())?;
            }
            space.barrier()?;
        }
        let epoch = scan.max_epoch.max(scan.committed) + 1;
        let wal = Wal::start(dir, epoch)?;

        let background = config.background_commit;
        let shared = Arc::new(Shared {
            space,
            core: RwLock::new(core),
            cache,
            tables: RwLock::new(Tables {
                mutable: Arc::new(MemTable::new(epoch)),
                immutable: None,
            }),
            writer: Mutex::new(()),
            wal: Mutex::new(wal),
            state: Mutex::new(CommitState::default()),
            cv: Condvar::new(),
            commits: AtomicU64::new(0),
            rebuild_calls: calls,
            closed: AtomicBool::new(false),
            config,
        });
        let committer = if background {
            let s = Arc::clone(&shared);
            Some(
                std::thread::Builder::new()
                    .name("flexdb-commit".into())
                    .spawn(move || s.committer_loop())?,
            )
        } else {
            None
        };
        Ok(FlexDb {
            shared,
            committer: Mutex::new(committer),
        })
    }

    pub fn config(&self) -> &DbConfig {
        &self.shared.config
    }

    pub fn put(&self, key: &[u8], value: &[u8]) -> Result<()> {
        let size = record::encoded_len(key, value);
        let max = self.shared.config.space.max_extent;
        if size as u64 > max {
            return Err(DbError::RecordTooLarge { size, max });
        }
        self.shared.write(key, Some(value))
    }

    /// Deleting an absent key is not an error.
    pub fn delete(&self, key: &[u8]) -> Result<()> {
        self.shared.write(key, None)
    }

    pub fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>> {
        self.shared.check_open()?;
        let (m, i) = self.shared.tables_snapshot();
        if let Some(v) = m.get(key) {
            return Ok(v);
        }
        if let Some(v) = i.and_then(|i| i.get(key)) {
            return Ok(v);
        }
        let s = &self.shared;
        let (value, split) = {
            let core = s.core.read();
            let pos = core.index.seek(key);
            let (iv, _) = fetch(&core.index, &s.space, &s.cache, &pos)?;
            (iv.get(key).map(<[u8]>::to_vec), core.needs_split(key))
        };
        if split {
            s.core.write().split(&s.space, &s.cache, key)?;
        }
        Ok(value)
    }

    /// Iterates pairs with keys at or after `key`, in key order.
    pub fn seek(&self, key: &[u8]) -> Result<DbIter<'_>> {
        self.shared.check_open()?;
        Ok(DbIter {
            db: self,
            cursor: Some(key.to_vec()),
            buf: Vec::new().into_iter(),
        })
    }

    /// Up to `n` pairs starting at `key`.
    pub fn scan(&self, key: &[u8], n: usize) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        self.seek(key)?.take(n).collect()
    }

    /// Commits everything buffered so far and waits for it.
    pub fn flush(&self) -> Result<()> {
        self.shared.check_open()?;
        let _w = self.shared.writer.lock();
        self.shared.freeze()?;
        self.shared.wait_committed()
    }

    /// Flushes, stops the committer and checkpoints the space.
    pub fn close(self) -> Result<()> {
        self.flush()?;
        self.stop_committer();
        self.shared.closed.store(true, Ordering::SeqCst);
        self.shared.space.checkpoint()?;
        Ok(())
    }

    fn stop_committer(&self) {
        self.shared.state.lock().shutdown = true;
        self.shared.cv.notify_all();
        if let Some(h) = self.committer.lock().take() {
            let _ = h.join();
        }
    }

    pub fn stats(&self) -> DbStats {
        let s = &self.shared;
        let intervals = s.core.read().index.len();
        let (hits, misses) = {
            let c = s.cache.lock();
            (c.hits, c.misses)
        };
        let lookups = hits + misses;
        DbStats {
            intervals,
            cache_hits: hits,
            cache_misses: misses,
            cache_hit_rate: if lookups == 0 {
                0.0
            } else {
                hits as f64 / lookups as f64
            },
            memtable_bytes: s.tables.read().mutable.bytes(),
            commits: s.commits.load(Ordering::Relaxed),
            wal_bytes_written: s.wal.lock().bytes_written(),
            recovery_read_extent_calls: s.rebuild_calls,
            space: s.space.stats(),
        }
    }

    /// The underlying space, for inspection.
    pub fn space(&self) -> &FlexSpace {
        &self.shared.space
    }

    /// The interval `key` routes to.
    pub fn locate(&self, key: &[u8]) -> IntervalInfo {
        let core = self.shared.core.read();
        let pos = core.index.seek(key);
        info(core.index.offset(&pos), core.index.entry(&pos))
    }

    /// Every interval in order.
    pub fn intervals(&self) -> Vec<IntervalInfo> {
        let core = self.shared.core.read();
        core.index.intervals().iter().map(|(o, e)| info(*o, e)).collect()
    }

    /// Checks index tiling, per-interval record counts and keys, and cache
    /// write-through against the space. Reads the whole store.
    pub fn verify(&self) -> std::result::Result<(), String> {
        let core = self.shared.core.read();
        core.verify(&self.shared.space, &self.shared.cache)
    }
}

fn info(offset: u64, e: &index::IntervalEntry) -> IntervalInfo {
    IntervalInfo {
        offset,
        index_key: e.index_key().map(<[u8]>::to_vec),
        size: e.size,
        count: e.count_known.then_some(e.count),
    }
}

impl Drop for FlexDb {
    /// Stops the committer without flushing: like a crash, anything not yet
    /// committed survives only through the WAL.
    fn drop(&mut self) {
        self.stop_committer();
    }
}

impl Shared {
    fn check_open(&self) -> Result<()> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(DbError::Closed);
        }
        if let Some(e) = &self.state.lock().failed {
            return Err(DbError::Failed(e.clone()));
        }
        Ok(())
    }

    fn tables_snapshot(&self) -> (Arc<MemTable>, Option<Arc<MemTable>>) {
        let t = self.tables.read();
        (Arc::clone(&t.mutable), t.immutable.clone())
    }

    fn write(&self, key: &[u8], value: Option<&[u8]>) -> Result<()> {
        if key.is_empty() {
            return Err(DbError::EmptyKey);
        }
        self.check_open()?;
        let _w = self.writer.lock();
        {
            let mut wal = self.wal.lock();
            match value {
                Some(v) => wal.log_put(key, v)?,
                None => wal.log_delete(key)?,
            }
            if self.config.wal_sync == WalSync::EveryOp {
                wal.sync()?;
            }
        }
        let mt = Arc::clone(&self.tables.read().mutable);
        mt.insert(key.to_vec(), value.map(<[u8]>::to_vec));
        if mt.bytes() >= self.config.memtable_bytes {
            self.freeze()?;
        }
        Ok(())
    }

    /// Freezes the mutable MemTable and hands it to the committer (or
    /// commits it inline). Caller holds the writer lock.
    fn freeze(&self) -> Result<()> {
        self.wait_committed()?;
        if self.tables.read().mutable.is_empty() {
            return Ok(());
        }
        let epoch = self.wal.lock().rotate()?;
        {
            let mut t = self.tables.write();
            let old = std::mem::replace(&mut t.mutable, Arc::new(MemTable::new(epoch)));
            t.immutable = Some(old);
        }
        if self.config.background_commit {
            self.state.lock().pending = true;
            self.cv.notify_all();
            Ok(())
        } else {
            self.commit_frozen().map_err(|e| self.fail(e))
        }
    }

    /// Blocks until no frozen MemTable is waiting.
    fn wait_committed(&self) -> Result<()> {
        let mut st = self.state.lock();
        loop {
            if let Some(e) = &st.failed {
                return Err(DbError::Failed(e.clone()));
            }
            if self.tables.read().immutable.is_none() {
                return Ok(());
            }
            self.cv.wait(&mut st);
        }
    }

    fn fail(&self, e: DbError) -> DbError {
        error!("commit failed: {e}");
        self.state.lock().failed = Some(e.to_string());
        self.cv.notify_all();
        e
    }

    /// Applies the frozen MemTable to the space, then records the commit.
    fn commit_frozen(&self) -> Result<()> {
        let Some(mt) = self.tables.read().immutable.clone() else {
            return Ok(());
        };
        let entries = mt.entries();
        for chunk in entries.chunks(self.config.commit_chunk.max(1)) {
            let mut core = self.core.write();
            for (k, v) in chunk {
                core.apply(&self.space, &self.cache, k, v.as_deref())?;
            }
            #[cfg(test)]
            if let Err(e) = core.verify(&self.space, &self.cache) {
                return Err(DbError::Corrupt(e));
            }
        }
        self.space.barrier()?;
        self.wal.lock().commit(mt.epoch())?;
        self.tables.write().immutable = None;
        self.commits.fetch_add(1, Ordering::Relaxed);
        let _st = self.state.lock();
        self.cv.notify_all();
        Ok(())
    }

    fn committer_loop(&self) {
        loop {
            {
                let mut st = self.state.lock();
                while !st.pending && !st.shutdown {
                    match self.config.commit_interval {
                        Some(d) => {
                            if self.cv.wait_for(&mut st, d).timed_out() && !st.pending && !st.shutdown {
                                drop(st);
                                self.idle_freeze();
                                st = self.state.lock();
                            }
                        }
                        None => self.cv.wait(&mut st),
                    }
                }
                if st.shutdown {
                    return;
                }
                st.pending = false;
                if st.failed.is_some() {
                    continue;
                }
            }
            if let Err(e) = self.commit_frozen() {
                self.fail(e);
            }
        }
    }

    /// Periodic commit of a quiet MemTable.
    fn idle_freeze(&self) {
        let Some(_w) = self.writer.try_lock() else { return };
        if self.tables.read().mutable.is_empty() || self.tables.read().immutable.is_some() {
            return;
        }
        match self.wal.lock().rotate() {
            Ok(epoch) => {
                let mut t = self.tables.write();
                let old = std::mem::replace(&mut t.mutable, Arc::new(MemTable::new(epoch)));
                t.immutable = Some(old);
            }
            Err(e) => {
                self.fail(e.into());
                return;
            }
        }
        self.state.lock().pending = true;
    }
}

/// Forward iterator. Each step loads one interval's worth of pairs and
/// merges in the MemTables over the same key range.
pub struct DbIter<'a> {
    db: &'a FlexDb,
    /// Next key to look at; `None` once exhausted.
    cursor: Option<Vec<u8>>,
    buf: std::vec::IntoIter<(Vec<u8>, Vec<u8>)>,
}

impl DbIter<'_> {
    fn refill(&mut self) -> Result<()> {
        while let Some(from) = self.cursor.take() {
            let s = &self.db.shared;
            let (space_part, upper, split) = {
                let core = s.core.read();
                let pos = core.index.seek(&from);
                let (iv, _) = fetch(&core.index, &s.space, &s.cache, &pos)?;
                let recs: Vec<(Vec<u8>, Vec<u8>)> = iv
                    .recs
                    .iter()
                    .filter(|r| r.key.as_slice() >= from.as_slice())
                    .map(|r| (r.key.clone(), r.value.clone()))
                    .collect();
                (recs, core.index.next_key(&pos), core.needs_split(&from))
            };
            if split {
                s.core.write().split(&s.space, &s.cache, &from)?;
            }
            let (m, i) = s.tables_snapshot();
            let mut over = std::collections::BTreeMap::new();
            if let Some(i) = i {
                over.extend(i.range(&from, upper.as_deref()));
            }
            over.extend(m.range(&from, upper.as_deref()));
            let mut out = Vec::with_capacity(space_part.len() + over.len());
            let mut mem = over.into_iter().peekable();
            for (k, v) in space_part {
                while let Some((mk, _)) = mem.peek() {
                    if *mk >= k {
                        break;
                    }
                    let (mk, mv) = mem.next().unwrap();
                    if let Some(mv) = mv {
                        out.push((mk, mv));
                    }
                }
                if mem.peek().is_some_and(|(mk, _)| *mk == k) {
                    let (mk, mv) = mem.next().unwrap();
                    if let Some(mv) = mv {
                        out.push((mk, mv));
                    }
                } else {
                    out.push((k, v));
                }
            }
            out.extend(mem.filter_map(|(k, v)| v.map(|v| (k, v))));
            self.cursor = upper;
            if !out.is_empty() {
                self.buf = out.into_iter();
                return Ok(());
            }
        }
        Ok(())
    }
}

impl Iterator for DbIter<'_> {
    type Item = Result<(Vec<u8>, Vec<u8>)>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(kv) = self.buf.next() {
                return Some(Ok(kv));
            }
            self.cursor.as_ref()?;
            if let Err(e) = self.refill() {
                self.cursor = None;
                return Some(Err(e));
            }
        }
    }
}
