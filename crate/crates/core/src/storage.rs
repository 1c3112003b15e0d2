//! Backing-file abstraction shared by the space and the KV store.
//!
//! [`FsDir`] maps names to regular files in a directory. [`SimFs`] keeps
//! files in memory and models a volatile write cache: a write becomes
//! durable only once a later `sync` of the same file completes. A crash can
//! be armed after a given number of mutating I/O calls, after which every
//! call fails; [`SimFs::crash_image`] then materializes one possible
//! post-crash disk state (durable contents plus an arbitrary in-order
//! subset of unsynced writes, large writes possibly torn at sector
//! granularity).

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Writes of at most this many bytes are never torn.
pub const ATOMIC_WRITE: usize = 512;

pub trait Storage: Send + Sync + fmt::Debug {
    /// Reads up to `buf.len()` bytes at `offset`; returns the count, short
    /// only at end of file.
    fn read_at(&self, buf: &mut [u8], offset: u64) -> io::Result<usize>;
    fn write_at(&self, buf: &[u8], offset: u64) -> io::Result<()>;
    /// Flush barrier: every completed write is durable once this returns.
    fn sync(&self) -> io::Result<()>;
    fn truncate(&self, len: u64) -> io::Result<()>;
    fn len(&self) -> io::Result<u64>;
    /// Total bytes passed to `write_at` since the handle was opened.
    fn bytes_written(&self) -> u64;

    fn read_exact_at(&self, buf: &mut [u8], offset: u64) -> io::Result<()> {
        let n = self.read_at(buf, offset)?;
        if n < buf.len() {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("short read: {n} of {} bytes at {offset}", buf.len()),
            ));
        }
        Ok(())
    }
}

/// A namespace of files.
pub trait StorageDir: Send + Sync + fmt::Debug {
    /// Opens `name`, creating an empty file if it does not exist.
    fn open(&self, name: &str) -> io::Result<Arc<dyn Storage>>;
    fn exists(&self, name: &str) -> bool;
}

// -------------------------------------------------------------------------
// Regular files
// -------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FsDir {
    root: PathBuf,
}

impl FsDir {
    pub fn new(root: impl AsRef<Path>) -> io::Result<Self> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(&root)?;
        Ok(FsDir { root })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }
}

impl StorageDir for FsDir {
    fn open(&self, name: &str) -> io::Result<Arc<dyn Storage>> {
        let path = self.root.join(name);
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)?;
        Ok(Arc::new(FileStorage {
            file,
            path,
            written: AtomicU64::new(0),
        }))
    }

    fn exists(&self, name: &str) -> bool {
        self.root.join(name).exists()
    }
}

#[derive(Debug)]
pub struct FileStorage {
    file: File,
    path: PathBuf,
    written: AtomicU64,
}

impl Storage for FileStorage {
    fn read_at(&self, buf: &mut [u8], offset: u64) -> io::Result<usize> {
        let mut done = 0;
        while done < buf.len() {
            match self.file.read_at(&mut buf[done..], offset + done as u64) {
                Ok(0) => break,
                Ok(n) => done += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        Ok(done)
    }

    fn write_at(&self, buf: &[u8], offset: u64) -> io::Result<()> {
        self.file.write_all_at(buf, offset)?;
        self.written.fetch_add(buf.len() as u64, Ordering::Relaxed);
        Ok(())
    }

    fn sync(&self) -> io::Result<()> {
        self.file.sync_data()
    }

    fn truncate(&self, len: u64) -> io::Result<()> {
        self.file.set_len(len)
    }

    fn len(&self) -> io::Result<u64> {
        Ok(self.file.metadata()?.len())
    }

    fn bytes_written(&self) -> u64 {
        self.written.load(Ordering::Relaxed)
    }
}

impl FileStorage {
    pub fn path(&self) -> &Path {
        &self.path
    }
}

// -------------------------------------------------------------------------
// Simulated disk
// -------------------------------------------------------------------------

#[derive(Clone, Debug)]
enum PendingOp {
    Write { offset: u64, data: Vec<u8> },
    Truncate(u64),
}

#[derive(Clone, Debug, Default)]
struct SimFile {
    durable: Vec<u8>,
    current: Vec<u8>,
    pending: Vec<PendingOp>,
}

fn apply(buf: &mut Vec<u8>, op: &PendingOp) {
    match op {
        PendingOp::Write { offset, data } => {
            let end = *offset as usize + data.len();
            if buf.len() < end {
                buf.resize(end, 0);
            }
            buf[*offset as usize..end].copy_from_slice(data);
        }
        PendingOp::Truncate(len) => buf.resize(*len as usize, 0),
    }
}

#[derive(Debug, Default)]
struct SimState {
    files: BTreeMap<String, SimFile>,
    /// Mutating calls (write, sync, truncate) issued so far.
    io_ops: u64,
    crash_after: Option<u64>,
    crashed: bool,
}

impl SimState {
    fn step(&mut self) -> io::Result<()> {
        if self.crashed {
            return Err(crash_error());
        }
        if let Some(limit) = self.crash_after {
            if self.io_ops >= limit {
                self.crashed = true;
                return Err(crash_error());
            }
        }
        self.io_ops += 1;
        Ok(())
    }
}

fn crash_error() -> io::Error {
    io::Error::new(io::ErrorKind::BrokenPipe, "simulated crash")
}

/// In-memory file system with crash injection.
#[derive(Debug, Default)]
pub struct SimFs {
    state: Mutex<SimState>,
}

impl SimFs {
    pub fn new() -> Arc<Self> {
        Arc::new(SimFs::default())
    }

    /// A directory view whose file names are prefixed with `prefix/`.
    pub fn dir(self: &Arc<Self>, prefix: &str) -> SimDir {
        SimDir {
            fs: Arc::clone(self),
            prefix: prefix.to_string(),
        }
    }

    /// Lets `ops` more mutating calls succeed; every later call fails.
    pub fn crash_after(&self, ops: u64) {
        let mut s = self.state.lock();
        s.crash_after = Some(s.io_ops + ops);
    }

    pub fn io_ops(&self) -> u64 {
        self.state.lock().io_ops
    }

    pub fn crashed(&self) -> bool {
        self.state.lock().crashed
    }

    /// Stops accepting I/O, as if power were cut now.
    pub fn crash_now(&self) {
        self.state.lock().crashed = true;
    }

    /// One possible disk state after a crash at this point, chosen by
    /// `seed`. The returned file system is healthy and fully synced.
    pub fn crash_image(&self, seed: u64) -> Arc<SimFs> {
        let s = self.state.lock();
        let mut rng = StdRng::seed_from_u64(seed);
        let mut files = BTreeMap::new();
        for (name, f) in &s.files {
            let mut img = f.durable.clone();
            for op in &f.pending {
                if !rng.gen_bool(0.5) {
                    continue;
                }
                match op {
                    PendingOp::Write { offset, data } if data.len() > ATOMIC_WRITE && rng.gen_bool(0.25) => {
                        let sectors = data.len().div_ceil(ATOMIC_WRITE);
                        let keep = rng.gen_range(0..sectors) * ATOMIC_WRITE;
                        apply(
                            &mut img,
                            &PendingOp::Write {
                                offset: *offset,
                                data: data[..keep].to_vec(),
                            },
                        );
                    }
                    op => apply(&mut img, op),
                }
            }
            files.insert(
                name.clone(),
                SimFile {
                    durable: img.clone(),
                    current: img,
                    pending: Vec::new(),
                },
            );
        }
        Arc::new(SimFs {
            state: Mutex::new(SimState {
                files,
                ..Default::default()
            }),
        })
    }

    /// The durable-only image: what survives if no unsynced write lands.
    pub fn durable_image(&self) -> Arc<SimFs> {
        let s = self.state.lock();
        let files = s
            .files
            .iter()
            .map(|(n, f)| {
                (
                    n.clone(),
                    SimFile {
                        durable: f.durable.clone(),
                        current: f.durable.clone(),
                        pending: Vec::new(),
                    },
                )
            })
            .collect();
        Arc::new(SimFs {
            state: Mutex::new(SimState {
                files,
                ..Default::default()
            }),
        })
    }

    /// Current (cached) contents of a file, for tests.
    pub fn contents(&self, name: &str) -> Option<Vec<u8>> {
        self.state.lock().files.get(name).map(|f| f.current.clone())
    }

    /// Overwrites bytes of a file in place, durably. Used to corrupt
    /// images in tests.
    pub fn poke(&self, name: &str, offset: u64, data: &[u8]) {
        let mut s = self.state.lock();
        let f = s.files.entry(name.to_string()).or_default();
        let op = PendingOp::Write {
            offset,
            data: data.to_vec(),
        };
        apply(&mut f.current, &op);
        apply(&mut f.durable, &op);
    }
}

#[derive(Debug, Clone)]
pub struct SimDir {
    fs: Arc<SimFs>,
    prefix: String,
}

impl SimDir {
    pub fn fs(&self) -> &Arc<SimFs> {
        &self.fs
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{}", self.prefix, name)
        }
    }
}

impl StorageDir for SimDir {
    fn open(&self, name: &str) -> io::Result<Arc<dyn Storage>> {
        let full = self.full(name);
        {
            let mut s = self.fs.state.lock();
            if s.crashed {
                return Err(crash_error());
            }
            s.files.entry(full.clone()).or_default();
        }
        Ok(Arc::new(SimStorage {
            fs: Arc::clone(&self.fs),
            name: full,
            written: AtomicU64::new(0),
        }))
    }

    fn exists(&self, name: &str) -> bool {
        self.fs.state.lock().files.contains_key(&self.full(name))
    }
}

#[derive(Debug)]
pub struct SimStorage {
    fs: Arc<SimFs>,
    name: String,
    written: AtomicU64,
}

impl Storage for SimStorage {
    fn read_at(&self, buf: &mut [u8], offset: u64) -> io::Result<usize> {
        let s = self.fs.state.lock();
        if s.crashed {
            return Err(crash_error());
        }
        let f = &s.files[&self.name];
        let start = (offset as usize).min(f.current.len());
        let n = buf.len().min(f.current.len() - start);
        buf[..n].copy_from_slice(&f.current[start..start + n]);
        Ok(n)
    }

    fn write_at(&self, buf: &[u8], offset: u64) -> io::Result<()> {
        let mut s = self.fs.state.lock();
        s.step()?;
        let f = s.files.get_mut(&self.name).expect("open file");
        let op = PendingOp::Write {
            offset,
            data: buf.to_vec(),
        };
        apply(&mut f.current, &op);
        f.pending.push(op);
        self.written.fetch_add(buf.len() as u64, Ordering::Relaxed);
        Ok(())
    }

    fn sync(&self) -> io::Result<()> {
        let mut s = self.fs.state.lock();
        s.step()?;
        let f = s.files.get_mut(&self.name).expect("open file");
        for op in f.pending.drain(..) {
            apply(&mut f.durable, &op);
        }
        Ok(())
    }

    fn truncate(&self, len: u64) -> io::Result<()> {
        let mut s = self.fs.state.lock();
        s.step()?;
        let f = s.files.get_mut(&self.name).expect("open file");
        let op = PendingOp::Truncate(len);
        apply(&mut f.current, &op);
        f.pending.push(op);
        Ok(())
    }

    fn len(&self) -> io::Result<u64> {
        let s = self.fs.state.lock();
        if s.crashed {
            return Err(crash_error());
        }
        Ok(s.files[&self.name].current.len() as u64)
    }

    fn bytes_written(&self) -> u64 {
        self.written.load(Ordering::Relaxed)
    }
}
