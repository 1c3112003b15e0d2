//! Logical metadata log: fixed 24-byte entries grouped into CRC-framed
//! batches, one batch per commit.

use std::io;
use std::sync::Arc;

use crate::storage::Storage;

pub const ENTRY_SIZE: usize = 24;
const MAGIC: &[u8; 4] = b"FSLG";
const FORMAT: u8 = 1;
pub const HEADER_SIZE: u64 = 32;
/// count u32, version u64, crc u32.
const BATCH_HEADER: usize = 16;

const PHYS_MASK: u64 = (1 << 48) - 1;
const OFFSET_MASK: u64 = (1 << 62) - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogEntry {
    Insert {
        offset: u64,
        len: u32,
        phys: u64,
    },
    Remove {
        offset: u64,
        len: u32,
    },
    Write {
        offset: u64,
        len: u32,
        phys: u64,
    },
    /// `offset` names the logical start of the relocated run at the time it
    /// was moved, so replay can address it through the tree.
    Relocate {
        offset: u64,
        len: u32,
        old_phys: u64,
        new_phys: u64,
    },
}

impl LogEntry {
    pub fn encode(&self, out: &mut Vec<u8>) {
        let (code, offset, len, a, b) = match *self {
            LogEntry::Insert { offset, len, phys } => (0u64, offset, len, phys, 0),
            LogEntry::Remove { offset, len } => (1, offset, len, 0, 0),
            LogEntry::Write { offset, len, phys } => (2, offset, len, phys, 0),
            LogEntry::Relocate {
                offset,
                len,
                old_phys,
                new_phys,
            } => (3, offset, len, new_phys, old_phys),
        };
        debug_assert!(offset <= OFFSET_MASK);
        out.extend_from_slice(&(code << 62 | offset).to_le_bytes());
        out.extend_from_slice(&(a & PHYS_MASK).to_le_bytes()[..6]);
        out.extend_from_slice(&(b & PHYS_MASK).to_le_bytes()[..6]);
        out.extend_from_slice(&len.to_le_bytes());
    }

    pub fn decode(buf: &[u8]) -> LogEntry {
        let head = u64::from_le_bytes(buf[0..8].try_into().unwrap());
        let a = read_u48(&buf[8..14]);
        let b = read_u48(&buf[14..20]);
        let len = u32::from_le_bytes(buf[20..24].try_into().unwrap());
        let offset = head & OFFSET_MASK;
        match head >> 62 {
            0 => LogEntry::Insert { offset, len, phys: a },
            1 => LogEntry::Remove { offset, len },
            2 => LogEntry::Write { offset, len, phys: a },
            _ => LogEntry::Relocate {
                offset,
                len,
                old_phys: b,
                new_phys: a,
            },
        }
    }
}

pub(crate) fn read_u48(b: &[u8]) -> u64 {
    let mut w = [0u8; 8];
    w[..6].copy_from_slice(&b[..6]);
    u64::from_le_bytes(w)
}

/// Result of scanning an existing log.
pub struct LogScan {
    /// `None` if the header is missing or unreadable.
    pub version: Option<u64>,
    pub batches: Vec<Vec<LogEntry>>,
    /// Byte offset just past the last valid batch.
    pub valid_end: u64,
}

#[derive(Debug)]
pub struct LogFile {
    file: Arc<dyn Storage>,
    version: u64,
    tail: u64,
}

fn header_bytes(version: u64) -> Vec<u8> {
    let mut h = Vec::with_capacity(HEADER_SIZE as usize);
    h.extend_from_slice(MAGIC);
    h.push(FORMAT);
    h.extend_from_slice(&[0; 3]);
    h.extend_from_slice(&version.to_le_bytes());
    h.resize(HEADER_SIZE as usize - 4, 0);
    let crc = crc32fast::hash(&h);
    h.extend_from_slice(&crc.to_le_bytes());
    h
}

fn batch_crc(count: u32, version: u64, body: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&count.to_le_bytes());
    h.update(&version.to_le_bytes());
    h.update(body);
    h.finalize()
}

impl LogFile {
    /// Reads the header and every intact batch. Scanning stops at the
    /// first short, stale or corrupt batch.
    pub fn scan(file: &Arc<dyn Storage>) -> io::Result<LogScan> {
        let len = file.len()?;
        let mut h = [0u8; HEADER_SIZE as usize];
        if len < HEADER_SIZE {
            return Ok(LogScan {
                version: None,
                batches: Vec::new(),
                valid_end: 0,
            });
        }
        file.read_exact_at(&mut h, 0)?;
        let crc = u32::from_le_bytes(h[28..32].try_into().unwrap());
        if &h[0..4] != MAGIC || h[4] != FORMAT || crc32fast::hash(&h[..28]) != crc {
            return Ok(LogScan {
                version: None,
                batches: Vec::new(),
                valid_end: 0,
            });
        }
        let version = u64::from_le_bytes(h[8..16].try_into().unwrap());
        let mut batches = Vec::new();
        let mut pos = HEADER_SIZE;
        let mut bh = [0u8; BATCH_HEADER];
        while pos + BATCH_HEADER as u64 <= len {
            file.read_exact_at(&mut bh, pos)?;
            let count = u32::from_le_bytes(bh[0..4].try_into().unwrap());
            let bver = u64::from_le_bytes(bh[4..12].try_into().unwrap());
            let crc = u32::from_le_bytes(bh[12..16].try_into().unwrap());
            let body_len = count as u64 * ENTRY_SIZE as u64;
            if bver != version || count == 0 || pos + BATCH_HEADER as u64 + body_len > len {
                break;
            }
            let mut body = vec![0u8; body_len as usize];
            file.read_exact_at(&mut body, pos + BATCH_HEADER as u64)?;
            if batch_crc(count, bver, &body) != crc {
                break;
            }
            batches.push(body.chunks_exact(ENTRY_SIZE).map(LogEntry::decode).collect());
            pos += BATCH_HEADER as u64 + body_len;
        }
        Ok(LogScan {
            version: Some(version),
            batches,
            valid_end: pos,
        })
    }

    /// Adopts a scanned log, cutting off anything past the valid prefix.
    pub fn resume(file: Arc<dyn Storage>, version: u64, valid_end: u64) -> io::Result<Self> {
        if file.len()? != valid_end {
            file.truncate(valid_end)?;
            file.sync()?;
        }
        Ok(LogFile {
            file,
            version,
            tail: valid_end,
        })
    }

    /// Empties the log and stamps it with `version`, durably.
    pub fn reinit(file: Arc<dyn Storage>, version: u64) -> io::Result<Self> {
        file.write_at(&header_bytes(version), 0)?;
        file.truncate(HEADER_SIZE)?;
        file.sync()?;
        Ok(LogFile {
            file,
            version,
            tail: HEADER_SIZE,
        })
    }

    pub fn reset(&mut self, version: u64) -> io::Result<()> {
        *self = LogFile::reinit(Arc::clone(&self.file), version)?;
        Ok(())
    }

    /// Appends one framed batch (not synced).
    pub fn append(&mut self, entries: &[LogEntry]) -> io::Result<()> {
        if entries.is_empty() {
            return Ok(());
        }
        let mut body = Vec::with_capacity(entries.len() * ENTRY_SIZE);
        for e in entries {
            e.encode(&mut body);
        }
        let count = entries.len() as u32;
        let mut buf = Vec::with_capacity(BATCH_HEADER + body.len());
        buf.extend_from_slice(&count.to_le_bytes());
        buf.extend_from_slice(&self.version.to_le_bytes());
        buf.extend_from_slice(&batch_crc(count, self.version, &body).to_le_bytes());
        buf.extend_from_slice(&body);
        self.file.write_at(&buf, self.tail)?;
        self.tail += buf.len() as u64;
        Ok(())
    }

    pub fn sync(&self) -> io::Result<()> {
        self.file.sync()
    }

    pub fn size(&self) -> u64 {
        self.tail
    }

    pub fn bytes_written(&self) -> u64 {
        self.file.bytes_written()
    }
}
