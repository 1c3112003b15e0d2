//! FlexSpace: a persistent flexible address space.
//!
//! Three files back a space: `data` holds raw fixed-size segments written
//! log-structured, `tree` holds copy-on-write checkpoints of the FlexTree,
//! and `log` holds logical redo entries committed since the last
//! checkpoint. Writes land in an in-memory buffer for the open (head)
//! segment; [`FlexSpace::barrier`] makes everything before it durable by
//! flushing data, syncing the data file, and only then appending and
//! syncing one log batch.

mod log;
mod segments;
mod treefile;

use std::collections::BTreeMap;
use std::io;
use std::path::Path;
use std::sync::Arc;

use parking_lot::RwLock;
use thiserror::Error;

use crate::flextree::{ExtentMerge, FlexTree, MappingRun, TreeConfig, TreeError, UNMAPPED};
use crate::storage::{FsDir, Storage, StorageDir};

pub use self::log::{LogEntry, ENTRY_SIZE};
pub use segments::SegState;
use segments::Segments;
use treefile::{Header, TreeFile, CONFIG_LEN};

pub const DATA_FILE: &str = "data";
pub const TREE_FILE: &str = "tree";
pub const LOG_FILE: &str = "log";

/// Largest logical offset a log entry can address.
const MAX_OFFSET: u64 = (1 << 62) - 1;

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("range [{offset}, +{len}) is out of bounds for size {size}")]
    OutOfRange { offset: u64, len: u64, size: u64 },
    #[error("empty data")]
    EmptyRange,
    #[error("space exhausted: {0}")]
    SpaceExhausted(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("unrecoverable store: {0}")]
    Unrecoverable(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("space is unusable after a failed write; reopen to recover")]
    Poisoned,
}

impl From<TreeError> for SpaceError {
    fn from(e: TreeError) -> Self {
        match e {
            TreeError::OutOfRange { offset, len, size } => SpaceError::OutOfRange { offset, len, size },
            TreeError::EmptyRange => SpaceError::EmptyRange,
            other => SpaceError::Corrupt(other.to_string()),
        }
    }
}

pub type Result<T, E = SpaceError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub fn of(&self, x: u64) -> u64 {
        (x as u128 * self.num as u128 / self.den as u128) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpaceConfig {
    pub segment_size: u64,
    /// Largest extent ever written; always `segment_size / 32`.
    pub max_extent: u64,
    /// Ceiling on valid bytes relative to the data capacity.
    pub utilization_cap: Ratio,
    pub reserved_free_segments: u32,
    /// A checkpoint follows any barrier that leaves the log at least this
    /// large.
    pub log_size_threshold: u64,
    pub node_capacity: usize,
    /// Hard limit on data file size in segments. Without one the file grows
    /// whenever utilization exceeds the cap or GC has nothing to reclaim.
    pub capacity_segments: Option<u32>,
    /// Buffered log entries that force a commit at the next op boundary.
    pub log_buffer_entries: usize,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig {
            segment_size: 4 << 20,
            max_extent: 128 << 10,
            utilization_cap: Ratio { num: 30, den: 32 },
            reserved_free_segments: 64,
            log_size_threshold: 4 << 20,
            node_capacity: 64,
            capacity_segments: None,
            log_buffer_entries: 4096,
        }
    }
}

impl SpaceConfig {
    /// Scales segments down to `segment_size`, keeping the 1/32 extent
    /// ratio.
    pub fn with_segment_size(segment_size: u64) -> Self {
        SpaceConfig {
            segment_size,
            max_extent: segment_size / 32,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SpaceError::InvalidConfig(m));
        if self.max_extent == 0 || self.max_extent * 32 != self.segment_size {
            return bad(format!(
                "segment size {} must be exactly 32 x max extent {}",
                self.segment_size, self.max_extent
            ));
        }
        if self.max_extent > u32::MAX as u64 {
            return bad("max extent must fit in 32 bits".into());
        }
        let k = (self.segment_size / self.max_extent) as u128;
        let Ratio { num, den } = self.utilization_cap;
        if num == 0 || den == 0 || num as u128 * k > (k - 1) * den as u128 {
            return bad(format!("utilization cap {num}/{den} must be in (0, {}/{k}]", k - 1));
        }
        if self.node_capacity < 4 {
            return bad("node capacity must be at least 4".into());
        }
        if self.log_buffer_entries == 0 {
            return bad("log buffer must hold at least one entry".into());
        }
        if self.capacity_segments == Some(0) {
            return bad("capacity must be at least one segment".into());
        }
        Ok(())
    }

    fn tree_config(&self) -> TreeConfig {
        TreeConfig {
            extent_merge: Some(ExtentMerge {
                max_len: self.max_extent as u32,
                phys_boundary: self.segment_size,
            }),
            ..TreeConfig::with_capacity(self.node_capacity)
        }
    }

    fn encode(&self) -> [u8; CONFIG_LEN] {
        let mut b = Vec::with_capacity(CONFIG_LEN);
        b.extend_from_slice(&self.segment_size.to_le_bytes());
        b.extend_from_slice(&self.max_extent.to_le_bytes());
        b.extend_from_slice(&self.utilization_cap.num.to_le_bytes());
        b.extend_from_slice(&self.utilization_cap.den.to_le_bytes());
        b.extend_from_slice(&self.reserved_free_segments.to_le_bytes());
        b.extend_from_slice(&(self.node_capacity as u32).to_le_bytes());
        b.extend_from_slice(&self.log_size_threshold.to_le_bytes());
        b.extend_from_slice(&(self.capacity_segments.unwrap_or(0) as u64).to_le_bytes());
        b.extend_from_slice(&(self.log_buffer_entries as u64).to_le_bytes());
        b.resize(CONFIG_LEN, 0);
        b.try_into().unwrap()
    }

    fn decode(b: &[u8; CONFIG_LEN]) -> Self {
        let u64_at = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let cap = u64_at(40);
        SpaceConfig {
            segment_size: u64_at(0),
            max_extent: u64_at(8),
            utilization_cap: Ratio {
                num: u32_at(16),
                den: u32_at(20),
            },
            reserved_free_segments: u32_at(24),
            node_capacity: u32_at(28) as usize,
            log_size_threshold: u64_at(32),
            capacity_segments: (cap != 0).then_some(cap as u32),
            log_buffer_entries: u64_at(48) as usize,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpaceStats {
    pub version: u64,
    pub total_size: u64,
    pub mapped_bytes: u64,
    pub segments: u32,
    pub free_segments: u32,
    /// Mapped bytes over the data file's segment capacity.
    pub utilization: f64,
    pub extent_count: usize,
    pub tree_height: usize,
    pub tree_nodes: usize,
    pub data_bytes_written: u64,
    pub log_bytes_written: u64,
    pub tree_bytes_written: u64,
    /// Bytes passed to pwrite and insert_range.
    pub logical_bytes: u64,
    pub commits: u64,
    pub checkpoints: u64,
    pub gc_runs: u64,
    pub gc_relocated_bytes: u64,
}

impl SpaceStats {
    pub fn file_bytes_written(&self) -> u64 {
        self.data_bytes_written + self.log_bytes_written + self.tree_bytes_written
    }

    pub fn write_amplification(&self) -> f64 {
        if self.logical_bytes == 0 {
            return 0.0;
        }
        self.file_bytes_written() as f64 / self.logical_bytes as f64
    }
}

#[derive(Debug, Default)]
struct Counters {
    logical_bytes: u64,
    commits: u64,
    checkpoints: u64,
    gc_runs: u64,
    gc_relocated: u64,
}

#[derive(Debug)]
struct Head {
    seg: u32,
    flushed: usize,
}

#[derive(Debug)]
struct Inner {
    config: SpaceConfig,
    data: Arc<dyn Storage>,
    tree_file: TreeFile,
    log: log::LogFile,
    tree: FlexTree,
    segs: Segments,
    head: Option<Head>,
    /// Contents of the head segment; its length is the fill level.
    head_buf: Vec<u8>,
    log_buf: Vec<LogEntry>,
    version: u64,
    data_unsynced: bool,
    poisoned: bool,
    counters: Counters,
}

/// A persistent flexible address space. Cloning is not supported; share it
/// behind an `Arc`. Readers run concurrently; mutators are exclusive.
#[derive(Debug)]
pub struct FlexSpace {
    inner: RwLock<Inner>,
}

impl FlexSpace {
    /// Opens the space stored in directory `path`, creating it if empty.
    pub fn open(path: impl AsRef<Path>, config: SpaceConfig) -> Result<Self> {
        let dir = FsDir::new(path)?;
        Self::open_in(&dir, config)
    }

    /// Opens or creates a space in `dir`. For an existing space the
    /// persisted configuration wins over `config`.
    pub fn open_in(dir: &dyn StorageDir, config: SpaceConfig) -> Result<Self> {
        config.validate()?;
        let tree_f = dir.open(TREE_FILE)?;
        let data = dir.open(DATA_FILE)?;
        let log_f = dir.open(LOG_FILE)?;
        let mut probe = [0u8; 128];
        let n = tree_f.read_at(&mut probe, 0)?;
        let inner = if probe[..n].iter().all(|&b| b == 0) {
            Inner::create(config, data, tree_f, log_f)?
        } else {
            Inner::recover(data, tree_f, log_f)?
        };
        Ok(FlexSpace {
            inner: RwLock::new(inner),
        })
    }

    fn mutate<T>(&self, f: impl FnOnce(&mut Inner) -> Result<T>) -> Result<T> {
        let mut g = self.inner.write();
        if g.poisoned {
            return Err(SpaceError::Poisoned);
        }
        let r = f(&mut g);
        if matches!(r, Err(SpaceError::Io(_))) {
            g.poisoned = true;
        }
        r
    }

    pub fn config(&self) -> SpaceConfig {
        self.inner.read().config.clone()
    }

    pub fn total_size(&self) -> u64 {
        self.inner.read().tree.total_size()
    }

    pub fn version(&self) -> u64 {
        self.inner.read().version
    }

    /// Overwrites `[offset, offset + data.len())`, extending the space (with
    /// a hole if `offset` is past the end) as needed.
    pub fn pwrite(&self, offset: u64, data: &[u8]) -> Result<()> {
        self.mutate(|s| s.pwrite(offset, data))
    }

    pub fn pread(&self, offset: u64, len: u64) -> Result<Vec<u8>> {
        let g = self.inner.read();
        let mut out = vec![0u8; len as usize];
        g.read_into(offset, &mut out)?;
        Ok(out)
    }

    /// Reads into `buf`; returns an error if the range is past the end.
    pub fn pread_into(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.inner.read().read_into(offset, buf)
    }

    /// Inserts `data` at `offset`, shifting everything after it.
    pub fn insert_range(&self, offset: u64, data: &[u8]) -> Result<()> {
        self.mutate(|s| s.insert_range(offset, data))
    }

    /// Removes `[offset, offset + len)`, shifting everything after it left.
    pub fn collapse_range(&self, offset: u64, len: u64) -> Result<()> {
        self.mutate(|s| s.collapse_range(offset, len))
    }

    /// Reads from the start of the extent containing `offset`. Returns that
    /// start and up to `maxlen` bytes; a hole yields no bytes.
    pub fn read_extent(&self, offset: u64, maxlen: u64) -> Result<(u64, Vec<u8>)> {
        let g = self.inner.read();
        let e = g.tree.find_extent(offset)?;
        if !e.phys_mapped() {
            return Ok((e.start, Vec::new()));
        }
        let mut buf = vec![0u8; (e.len as u64).min(maxlen) as usize];
        g.read_phys(e.phys, &mut buf)?;
        Ok((e.start, buf))
    }

    /// Rewrites the mapped runs of a range contiguously.
    pub fn defrag(&self, offset: u64, len: u64) -> Result<()> {
        self.mutate(|s| s.defrag(offset, len))
    }

    /// Reclaims underused segments. Returns reclaimed bytes: freed segment
    /// capacity minus bytes relocated.
    pub fn gc(&self) -> Result<u64> {
        self.mutate(|s| s.gc())
    }

    /// Makes every completed operation durable.
    pub fn barrier(&self) -> Result<()> {
        self.mutate(|s| s.barrier())
    }

    /// Persists the tree and truncates the log; returns the new version.
    pub fn checkpoint(&self) -> Result<u64> {
        self.mutate(|s| s.checkpoint())
    }

    /// Commits and checkpoints. Dropping a space without closing it loses
    /// everything after the last barrier, exactly like a crash.
    pub fn close(self) -> Result<()> {
        self.mutate(|s| s.checkpoint().map(|_| ()))
    }

    /// Physical runs backing a logical range.
    pub fn query_range(&self, offset: u64, len: u64) -> Result<Vec<MappingRun>> {
        Ok(self.inner.read().tree.query_range(offset, len)?)
    }

    pub fn stats(&self) -> SpaceStats {
        let g = self.inner.read();
        let segs = g.segs.count();
        let s = g.config.segment_size;
        SpaceStats {
            version: g.version,
            total_size: g.tree.total_size(),
            mapped_bytes: g.segs.total_valid(),
            segments: segs,
            free_segments: g.segs.free_count() as u32,
            utilization: if segs == 0 {
                0.0
            } else {
                g.segs.total_valid() as f64 / (segs as u64 * s) as f64
            },
            extent_count: g.tree.extent_count(),
            tree_height: g.tree.height(),
            tree_nodes: g.tree.node_count(),
            data_bytes_written: g.data.bytes_written(),
            log_bytes_written: g.log.bytes_written(),
            tree_bytes_written: g.tree_file.bytes_written(),
            logical_bytes: g.counters.logical_bytes,
            commits: g.counters.commits,
            checkpoints: g.counters.checkpoints,
            gc_runs: g.counters.gc_runs,
            gc_relocated_bytes: g.counters.gc_relocated,
        }
    }

    /// Valid bytes per segment, indexed by segment id.
    pub fn segment_valid_bytes(&self) -> Vec<u64> {
        self.inner.read().segs.valid_bytes().to_vec()
    }

    pub fn segment_state(&self, seg: u32) -> SegState {
        self.inner.read().segs.state(seg)
    }

    /// Checks segment accounting against a full leaf scan and the tree's
    /// structural invariants.
    pub fn verify(&self) -> Result<(), String> {
        let g = self.inner.read();
        g.tree.check_invariants()?;
        let scan = valid_by_segment(&g.tree, g.config.segment_size, g.segs.count());
        if scan != g.segs.valid_bytes() {
            return Err("segment valid bytes disagree with the tree".into());
        }
        if g.segs.total_valid() != scan.iter().sum::<u64>() {
            return Err("total valid bytes disagree with the tree".into());
        }
        Ok(())
    }
}

fn valid_by_segment(tree: &FlexTree, seg_size: u64, segs: u32) -> Vec<u64> {
    let mut valid = vec![0u64; segs as usize];
    for (_, e) in tree.extents() {
        if e.is_mapped() {
            let seg = (e.phys / seg_size) as usize;
            if seg >= valid.len() {
                valid.resize(seg + 1, 0);
            }
            valid[seg] += e.len as u64;
        }
    }
    valid
}

/// Applies one committed log entry to a tree.
fn replay(tree: &mut FlexTree, e: &LogEntry) -> Result<()> {
    let bad = |what: &str| SpaceError::Corrupt(format!("log entry {e:?} {what}"));
    match *e {
        LogEntry::Insert { offset, len, phys } => tree.insert_range(offset, len as u64, phys)?,
        LogEntry::Remove { offset, len } => {
            tree.collapse_range(offset, len as u64)?;
        }
        LogEntry::Write { offset, len, phys } => {
            tree.write_range(offset, len as u64, phys)?;
        }
        LogEntry::Relocate {
            offset,
            len,
            old_phys,
            new_phys,
        } => {
            let runs = tree.query_range(offset, len as u64)?;
            if runs != [MappingRun::new(old_phys, len as u64)] {
                return Err(bad("does not match the current mapping"));
            }
            tree.remap(offset, len as u64, new_phys)
                .map_err(|_| bad("cannot be applied"))?;
        }
    }
    Ok(())
}

impl Inner {
    fn create(
        config: SpaceConfig,
        data: Arc<dyn Storage>,
        tree_f: Arc<dyn Storage>,
        log_f: Arc<dyn Storage>,
    ) -> Result<Self> {
        let mut tree = FlexTree::new(config.tree_config())?;
        data.truncate(0)?;
        data.sync()?;
        let mut tree_file = TreeFile::new(tree_f, config.node_capacity);
        tree_file.checkpoint(&mut tree, 1, config.encode())?;
        let log = log::LogFile::reinit(log_f, 1)?;
        Ok(Inner {
            head_buf: Vec::with_capacity(config.segment_size as usize),
            segs: Segments::new(config.segment_size),
            config,
            data,
            tree_file,
            log,
            tree,
            head: None,
            log_buf: Vec::new(),
            version: 1,
            data_unsynced: false,
            poisoned: false,
            counters: Counters::default(),
        })
    }

    fn recover(data: Arc<dyn Storage>, tree_f: Arc<dyn Storage>, log_f: Arc<dyn Storage>) -> Result<Self> {
        let header = Header::read(&tree_f)?;
        let config = SpaceConfig::decode(&header.config);
        config
            .validate()
            .map_err(|e| SpaceError::Unrecoverable(format!("persisted config: {e}")))?;
        let (tree_file, mut tree) = TreeFile::load(tree_f, &header, config.tree_config())?;
        let scan = log::LogFile::scan(&log_f)?;
        let log = match scan.version {
            Some(v) if v > header.version => {
                return Err(SpaceError::Unrecoverable(format!(
                    "log version {v} is newer than tree version {}",
                    header.version
                )))
            }
            Some(v) if v == header.version => {
                for batch in &scan.batches {
                    for e in batch {
                        replay(&mut tree, e)?;
                    }
                }
                ::log::debug!(
                    "replayed {} log batches onto tree version {}",
                    scan.batches.len(),
                    header.version
                );
                log::LogFile::resume(log_f, v, scan.valid_end)?
            }
            _ => log::LogFile::reinit(log_f, header.version)?,
        };
        let file_segs = data.len()?.div_ceil(config.segment_size);
        let valid = valid_by_segment(&tree, config.segment_size, file_segs as u32);
        Ok(Inner {
            head_buf: Vec::with_capacity(config.segment_size as usize),
            segs: Segments::rebuild(config.segment_size, valid),
            config,
            data,
            tree_file,
            log,
            tree,
            head: None,
            log_buf: Vec::new(),
            version: header.version,
            data_unsynced: false,
            poisoned: false,
            counters: Counters::default(),
        })
    }

    // ---------------------------------------------------------------------
    // Reads
    // ---------------------------------------------------------------------

    fn read_into(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        let runs = self.tree.query_range(offset, buf.len() as u64)?;
        let mut pos = 0usize;
        for r in runs {
            let dst = &mut buf[pos..pos + r.len as usize];
            if r.is_mapped() {
                self.read_phys(r.phys, dst)?;
            } else {
                dst.fill(0);
            }
            pos += r.len as usize;
        }
        Ok(())
    }

    fn read_phys(&self, phys: u64, buf: &mut [u8]) -> Result<()> {
        let s = self.config.segment_size;
        if let Some(h) = &self.head {
            if phys / s == h.seg as u64 {
                let at = (phys % s) as usize;
                buf.copy_from_slice(&self.head_buf[at..at + buf.len()]);
                return Ok(());
            }
        }
        self.data.read_exact_at(buf, phys).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                SpaceError::Corrupt(format!("data file too short for run at {phys}"))
            } else {
                SpaceError::Io(e)
            }
        })
    }

    fn mapped_in(&self, offset: u64, len: u64) -> Result<u64> {
        Ok(self
            .tree
            .query_range(offset, len)?
            .iter()
            .filter(|r| r.is_mapped())
            .map(|r| r.len)
            .sum())
    }

    // ---------------------------------------------------------------------
    // Space management
    // ---------------------------------------------------------------------

    fn capacity_bytes(&self) -> Option<u64> {
        self.config
            .capacity_segments
            .map(|c| c as u64 * self.config.segment_size)
    }

    /// Rejects ops that would push valid bytes above the utilization cap.
    fn admit(&self, growth: u64) -> Result<()> {
        if let Some(cap) = self.capacity_bytes() {
            let limit = self.config.utilization_cap.of(cap);
            let after = self.segs.total_valid() + growth;
            if after > limit {
                return Err(SpaceError::SpaceExhausted(format!(
                    "{after} valid bytes would exceed the limit of {limit}"
                )));
            }
        }
        Ok(())
    }

    fn gc_limit(&self) -> u64 {
        self.config.segment_size - self.config.max_extent
    }

    fn may_grow(&self) -> bool {
        match self.config.capacity_segments {
            Some(c) => self.segs.count() < c,
            None => {
                // Utilization of the occupied part of the file.
                let used = self.segs.count() as usize - self.segs.free_count();
                let cap = used as u64 * self.config.segment_size;
                cap == 0
                    || self.segs.total_valid() > self.config.utilization_cap.of(cap)
                    || self.segs.victim(self.gc_limit()).is_none()
            }
        }
    }

    fn head_room(&self) -> u64 {
        match self.head {
            Some(_) => self.config.segment_size - self.head_buf.len() as u64,
            None => 0,
        }
    }

    /// Makes room for `len` bytes of appends before an op mutates
    /// anything, so GC and growth only happen at op boundaries.
    fn ensure_space(&mut self, len: u64) -> Result<()> {
        let s = self.config.segment_size;
        let me = self.config.max_extent;
        // Each segment opened can waste up to one extent at its tail.
        let need = len + me * (len / (s - me) + 1);
        let reserve = self.config.reserved_free_segments as usize;
        loop {
            let spare = self.segs.free_count().saturating_sub(reserve) as u64 * s;
            if self.head_room() + spare >= need {
                return Ok(());
            }
            if self.may_grow() {
                self.segs.grow();
                continue;
            }
            if self.segs.pending_count() > 0 {
                self.commit()?;
                continue;
            }
            if self.gc_batch(1)? > 0 {
                continue;
            }
            if self.head_room() + self.segs.free_count() as u64 * s >= need {
                return Ok(());
            }
            return Err(SpaceError::SpaceExhausted(format!(
                "no free segment and no segment below {}/{} utilization",
                s / me - 1,
                s / me
            )));
        }
    }

    fn flush_head(&mut self) -> io::Result<()> {
        if let Some(h) = &mut self.head {
            if h.flushed < self.head_buf.len() {
                let at = h.seg as u64 * self.config.segment_size + h.flushed as u64;
                self.data.write_at(&self.head_buf[h.flushed..], at)?;
                h.flushed = self.head_buf.len();
                self.data_unsynced = true;
            }
        }
        Ok(())
    }

    fn seal_head(&mut self) -> io::Result<()> {
        self.flush_head()?;
        if let Some(h) = self.head.take() {
            self.segs.close(h.seg);
            self.head_buf.clear();
        }
        Ok(())
    }

    /// Appends `data` (at most one extent) wholly inside one segment.
    fn place(&mut self, data: &[u8]) -> Result<u64> {
        let len = data.len() as u64;
        debug_assert!(len > 0 && len <= self.config.max_extent);
        if self.head.is_none() || self.head_room() < len {
            self.seal_head()?;
            let seg = match self.segs.take_free() {
                Some(seg) => seg,
                None if self.config.capacity_segments.is_none_or(|c| self.segs.count() < c) => {
                    self.segs.grow();
                    self.segs.take_free().expect("segment was just added")
                }
                None => {
                    // Only reachable if space was not ensured for this op.
                    self.poisoned = true;
                    return Err(SpaceError::SpaceExhausted("ran out of segments mid-operation".into()));
                }
            };
            self.head = Some(Head { seg, flushed: 0 });
        }
        let seg = self.head.as_ref().unwrap().seg;
        let phys = seg as u64 * self.config.segment_size + self.head_buf.len() as u64;
        self.head_buf.extend_from_slice(data);
        Ok(phys)
    }

    fn release_runs(&mut self, runs: &[MappingRun]) {
        for r in runs.iter().filter(|r| r.is_mapped()) {
            self.segs.sub(r.phys, r.len);
        }
    }

    fn finish_op(&mut self, entries: Vec<LogEntry>, logical: u64) -> Result<()> {
        self.log_buf.extend(entries);
        self.counters.logical_bytes += logical;
        if self.log_buf.len() >= self.config.log_buffer_entries {
            self.barrier()?;
        }
        Ok(())
    }

    // ---------------------------------------------------------------------
    // Mutations
    // ---------------------------------------------------------------------

    fn pwrite(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        if data.is_empty() {
            return Err(SpaceError::EmptyRange);
        }
        let len = data.len() as u64;
        let total = self.tree.total_size();
        if offset.checked_add(len).is_none_or(|end| end > MAX_OFFSET) {
            return Err(SpaceError::OutOfRange {
                offset,
                len,
                size: total,
            });
        }
        let overlap_end = (offset + len).min(total);
        let replaced = if offset < overlap_end {
            self.mapped_in(offset, overlap_end - offset)?
        } else {
            0
        };
        self.admit(len.saturating_sub(replaced))?;
        self.ensure_space(len)?;
        let mut entries = Vec::new();
        for (i, chunk) in data.chunks(self.config.max_extent as usize).enumerate() {
            let off = offset + i as u64 * self.config.max_extent;
            let clen = chunk.len() as u64;
            let phys = self.place(chunk)?;
            let old = self.tree.write_range(off, clen, phys)?;
            self.release_runs(&old);
            self.segs.add(phys, clen);
            entries.push(LogEntry::Write {
                offset: off,
                len: clen as u32,
                phys,
            });
        }
        self.finish_op(entries, len)
    }

    fn insert_range(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        if data.is_empty() {
            return Err(SpaceError::EmptyRange);
        }
        let len = data.len() as u64;
        let total = self.tree.total_size();
        if offset > total || total + len > MAX_OFFSET {
            return Err(SpaceError::OutOfRange {
                offset,
                len,
                size: total,
            });
        }
        self.admit(len)?;
        self.ensure_space(len)?;
        let mut entries = Vec::new();
        let mut off = offset;
        for chunk in data.chunks(self.config.max_extent as usize) {
            let clen = chunk.len() as u64;
            let phys = self.place(chunk)?;
            self.tree.insert_range(off, clen, phys)?;
            self.segs.add(phys, clen);
            entries.push(LogEntry::Insert {
                offset: off,
                len: clen as u32,
                phys,
            });
            off += clen;
        }
        self.finish_op(entries, len)
    }

    fn collapse_range(&mut self, offset: u64, len: u64) -> Result<()> {
        let total = self.tree.total_size();
        if offset.checked_add(len).is_none_or(|end| end > total) {
            return Err(SpaceError::OutOfRange {
                offset,
                len,
                size: total,
            });
        }
        if len == 0 {
            return Ok(());
        }
        let freed = self.tree.collapse_range(offset, len)?;
        self.release_runs(&freed);
        let mut entries = Vec::new();
        let mut left = len;
        while left > 0 {
            let n = left.min(u32::MAX as u64);
            entries.push(LogEntry::Remove { offset, len: n as u32 });
            left -= n;
        }
        self.finish_op(entries, 0)
    }

    /// Consolidates runs greedily into extent-sized groups. Existing
    /// extents are never split, so every resulting extent still begins
    /// where some extent began before.
    fn defrag(&mut self, offset: u64, len: u64) -> Result<()> {
        let total = self.tree.total_size();
        if offset.checked_add(len).is_none_or(|end| end > total) {
            return Err(SpaceError::OutOfRange {
                offset,
                len,
                size: total,
            });
        }
        if len == 0 {
            return Ok(());
        }
        // Making room may run GC, which moves data; regroup until stable.
        let mut groups;
        loop {
            groups = self.defrag_groups(offset, offset + len);
            let bytes: u64 = groups.iter().flat_map(|(_, r)| r.iter().map(|x| x.1)).sum();
            if bytes == 0 {
                return Ok(());
            }
            let gc_runs = self.counters.gc_runs;
            self.ensure_space(bytes)?;
            if self.counters.gc_runs == gc_runs {
                break;
            }
        }
        let mut entries = Vec::new();
        for (start, runs) in groups {
            let glen: u64 = runs.iter().map(|r| r.1).sum();
            let mut buf = vec![0u8; glen as usize];
            let mut pos = 0usize;
            for (phys, l) in &runs {
                self.read_phys(*phys, &mut buf[pos..pos + *l as usize])?;
                pos += *l as usize;
            }
            let phys = self.place(&buf)?;
            let old = self.tree.write_range(start, glen, phys)?;
            self.release_runs(&old);
            self.segs.add(phys, glen);
            entries.push(LogEntry::Write {
                offset: start,
                len: glen as u32,
                phys,
            });
        }
        self.finish_op(entries, 0)
    }

    /// Groups of consecutive mapped runs in `[offset, end)`, each at most
    /// one extent long, as `(logical start, [(phys, len)])`. Groups that
    /// are already a single run are dropped.
    fn defrag_groups(&self, offset: u64, end: u64) -> Vec<(u64, Vec<(u64, u64)>)> {
        let me = self.config.max_extent;
        let mut groups: Vec<(u64, Vec<(u64, u64)>)> = Vec::new();
        let mut cur: Option<(u64, Vec<(u64, u64)>, u64)> = None;
        for (start, e) in self.tree.extents_from(offset) {
            if start >= end {
                break;
            }
            let lo = start.max(offset);
            let hi = (start + e.len as u64).min(end);
            if e.phys == UNMAPPED {
                groups.extend(cur.take().map(|(s, r, _)| (s, r)));
                continue;
            }
            let run = (e.phys + (lo - start), hi - lo);
            match &mut cur {
                Some((_, runs, size)) if *size + run.1 <= me => {
                    runs.push(run);
                    *size += run.1;
                }
                _ => {
                    groups.extend(cur.take().map(|(s, r, _)| (s, r)));
                    cur = Some((lo, vec![run], run.1));
                }
            }
        }
        groups.extend(cur.map(|(s, r, _)| (s, r)));
        groups.retain(|(_, runs)| runs.len() > 1);
        groups
    }

    /// Relocates the live data of up to `max_victims` segments, then
    /// commits so the victims become free. Returns segments released.
    fn gc_batch(&mut self, max_victims: usize) -> Result<usize> {
        let limit = self.gc_limit();
        let mut victims = Vec::new();
        {
            let mut order: Vec<u32> = (0..self.segs.count())
                .filter(|&s| self.segs.state(s) == SegState::Closed && self.segs.valid(s) <= limit)
                .collect();
            order.sort_by_key(|&s| (self.segs.valid(s), s));
            victims.extend(order.into_iter().take(max_victims));
        }
        if victims.is_empty() {
            if self.segs.pending_count() > 0 {
                return self.commit();
            }
            return Ok(0);
        }
        let s = self.config.segment_size;
        let set: BTreeMap<u32, ()> = victims.iter().map(|&v| (v, ())).collect();
        let pieces: Vec<(u64, u64, u64)> = self
            .tree
            .extents()
            .filter(|(_, e)| e.is_mapped() && set.contains_key(&((e.phys / s) as u32)))
            .map(|(start, e)| (start, e.len as u64, e.phys))
            .collect();
        let mut buf = Vec::new();
        for (start, len, phys) in pieces {
            buf.resize(len as usize, 0);
            self.read_phys(phys, &mut buf)?;
            let new_phys = self.place(&buf)?;
            self.tree.remap(start, len, new_phys)?;
            self.segs.sub(phys, len);
            self.segs.add(new_phys, len);
            self.log_buf.push(LogEntry::Relocate {
                offset: start,
                len: len as u32,
                old_phys: phys,
                new_phys,
            });
            self.counters.gc_relocated += len;
        }
        self.counters.gc_runs += 1;
        ::log::debug!("gc relocated segments {victims:?}");
        self.commit()
    }

    fn gc(&mut self) -> Result<u64> {
        let reserve = self.config.reserved_free_segments as usize;
        let want = reserve.saturating_sub(self.segs.free_count()).clamp(1, 64);
        let relocated_before = self.counters.gc_relocated;
        let mut released = self.commit()?;
        released += self.gc_batch(want)?;
        if released == 0 && self.segs.free_count() == 0 && self.head_room() == 0 && !self.may_grow() {
            return Err(SpaceError::SpaceExhausted("nothing to reclaim".into()));
        }
        let relocated = self.counters.gc_relocated - relocated_before;
        Ok((released as u64 * self.config.segment_size).saturating_sub(relocated))
    }

    /// Flushes and syncs data, then appends and syncs one log batch.
    /// Returns the number of segments released.
    fn commit(&mut self) -> Result<usize> {
        self.flush_head()?;
        if self.data_unsynced {
            self.data.sync()?;
            self.data_unsynced = false;
        }
        if !self.log_buf.is_empty() {
            self.log.append(&self.log_buf)?;
            self.log.sync()?;
            self.log_buf.clear();
            self.counters.commits += 1;
        }
        Ok(self.segs.release_pending())
    }

    fn barrier(&mut self) -> Result<()> {
        self.commit()?;
        if self.log.size() >= self.config.log_size_threshold {
            self.checkpoint()?;
        }
        Ok(())
    }

    fn checkpoint(&mut self) -> Result<u64> {
        self.commit()?;
        let next = self.version + 1;
        self.tree_file.checkpoint(&mut self.tree, next, self.config.encode())?;
        self.log.reset(next)?;
        self.version = next;
        self.counters.checkpoints += 1;
        Ok(next)
    }
}

#[cfg(test)]
mod tests;
