//! Write-ahead log for the MemTables.
//!
//! Each MemTable has an epoch. Its records go to `wal-<epoch % 2>`, so the
//! file in use by the mutable table is never the one still needed by the
//! table being committed. A file is reset only when the table before it has
//! been committed. `COMMIT(e)` records that every epoch up to `e` is in the
//! space.
//!
//! File: 32-byte header (`"FWAL"`, format, epoch, crc), then framed records
//! `len u32 ‖ crc u32 ‖ payload`. Payload: kind u8, epoch u64, and for puts
//! and deletes the key (and value), each length-prefixed by a varint.

use std::io;
use std::sync::Arc;

use super::record::{get_varint, put_varint};
use crate::storage::{Storage, StorageDir};

const MAGIC: &[u8; 4] = b"FWAL";
const FORMAT: u8 = 1;
const HEADER: u64 = 32;

const PUT: u8 = 1;
const DEL: u8 = 2;
const COMMIT: u8 = 3;

pub fn file_name(epoch: u64) -> String {
    format!("wal-{}", epoch % 2)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WalRecord {
    Put { key: Vec<u8>, value: Vec<u8> },
    Delete { key: Vec<u8> },
}

/// What recovery found in the two files.
#[derive(Debug, Default)]
pub struct WalScan {
    /// Highest epoch known to be fully committed.
    pub committed: u64,
    /// Highest epoch seen anywhere.
    pub max_epoch: u64,
    /// Uncommitted records in epoch order, then file order.
    pub pending: Vec<(u64, WalRecord)>,
}

#[derive(Debug)]
pub struct Wal {
    files: [Arc<dyn Storage>; 2],
    tails: [u64; 2],
    epoch: u64,
}

fn header(epoch: u64) -> Vec<u8> {
    let mut h = Vec::with_capacity(HEADER as usize);
    h.extend_from_slice(MAGIC);
    h.push(FORMAT);
    h.extend_from_slice(&[0; 3]);
    h.extend_from_slice(&epoch.to_le_bytes());
    h.resize(HEADER as usize - 4, 0);
    let crc = crc32fast::hash(&h);
    h.extend_from_slice(&crc.to_le_bytes());
    h
}

fn frame(kind: u8, epoch: u64, key: &[u8], value: Option<&[u8]>) -> Vec<u8> {
    let mut p = Vec::with_capacity(16 + key.len() + value.map_or(0, <[u8]>::len));
    p.push(kind);
    p.extend_from_slice(&epoch.to_le_bytes());
    if kind != COMMIT {
        put_varint(&mut p, key.len() as u64);
        p.extend_from_slice(key);
    }
    if let Some(v) = value {
        put_varint(&mut p, v.len() as u64);
        p.extend_from_slice(v);
    }
    let mut out = Vec::with_capacity(8 + p.len());
    out.extend_from_slice(&(p.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&p).to_le_bytes());
    out.extend_from_slice(&p);
    out
}

fn parse(p: &[u8]) -> Option<(u64, Option<WalRecord>)> {
    let kind = *p.first()?;
    let epoch = u64::from_le_bytes(p.get(1..9)?.try_into().ok()?);
    let rest = &p[9..];
    let field = |b: &[u8]| -> Option<(Vec<u8>, usize)> {
        let (n, a) = get_varint(b)?;
        let end = a.checked_add(n as usize)?;
        Some((b.get(a..end)?.to_vec(), end))
    };
    match kind {
        COMMIT => Some((epoch, None)),
        DEL => {
            let (key, _) = field(rest)?;
            Some((epoch, Some(WalRecord::Delete { key })))
        }
        PUT => {
            let (key, n) = field(rest)?;
            let (value, _) = field(&rest[n..])?;
            Some((epoch, Some(WalRecord::Put { key, value })))
        }
        _ => None,
    }
}

struct FileScan {
    epoch: Option<u64>,
    records: Vec<(u64, Option<WalRecord>)>,
    valid_end: u64,
}

fn scan_file(f: &Arc<dyn Storage>) -> io::Result<FileScan> {
    let len = f.len()?;
    let mut out = FileScan {
        epoch: None,
        records: Vec::new(),
        valid_end: 0,
    };
    if len < HEADER {
        return Ok(out);
    }
    let mut data = vec![0u8; len as usize];
    f.read_exact_at(&mut data, 0)?;
    let h = &data[..HEADER as usize];
    let crc = u32::from_le_bytes(h[28..32].try_into().unwrap());
    if &h[0..4] != MAGIC || h[4] != FORMAT || crc32fast::hash(&h[..28]) != crc {
        return Ok(out);
    }
    let epoch = u64::from_le_bytes(h[8..16].try_into().unwrap());
    out.epoch = Some(epoch);
    let mut pos = HEADER as usize;
    while pos + 8 <= data.len() {
        let n = u32::from_le_bytes(data[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(data[pos + 4..pos + 8].try_into().unwrap());
        let Some(p) = data.get(pos + 8..pos + 8 + n) else { break };
        if crc32fast::hash(p) != crc {
            break;
        }
        let Some((e, r)) = parse(p) else { break };
        // Records older than the header are leftovers of a reset that was
        // cut short; their epochs are committed by construction. Commit
        // markers stay true forever, so keep them all.
        if e >= epoch || r.is_none() {
            out.records.push((e, r));
        }
        pos += 8 + n;
    }
    out.valid_end = pos as u64;
    Ok(out)
}

impl Wal {
    /// Reads both files and returns what must be replayed.
    pub fn scan(dir: &dyn StorageDir) -> io::Result<WalScan> {
        let mut scan = WalScan::default();
        let mut all = Vec::new();
        for i in 0..2u64 {
            let f = dir.open(&file_name(i))?;
            let s = scan_file(&f)?;
            if let Some(e) = s.epoch {
                scan.max_epoch = scan.max_epoch.max(e);
            }
            for (order, (e, r)) in s.records.into_iter().enumerate() {
                scan.max_epoch = scan.max_epoch.max(e);
                match r {
                    None => scan.committed = scan.committed.max(e),
                    Some(r) => all.push((e, order, r)),
                }
            }
        }
        all.sort_by_key(|&(e, order, _)| (e, order));
        let committed = scan.committed;
        scan.pending = all
            .into_iter()
            .filter(|&(e, _, _)| e > committed)
            .map(|(e, _, r)| (e, r))
            .collect();
        Ok(scan)
    }

    /// Starts logging `epoch` after recovery. Everything below `epoch` must
    /// already be in the space; that fact is recorded durably first.
    pub fn start(dir: &dyn StorageDir, epoch: u64) -> io::Result<Self> {
        let files = [dir.open(&file_name(0))?, dir.open(&file_name(1))?];
        let mut wal = Wal {
            files,
            tails: [0; 2],
            epoch,
        };
        wal.reset_file(epoch)?;
        wal.commit(epoch - 1)?;
        Ok(wal)
    }

    fn slot(epoch: u64) -> usize {
        (epoch % 2) as usize
    }

    fn reset_file(&mut self, epoch: u64) -> io::Result<()> {
        let i = Self::slot(epoch);
        let f = &self.files[i];
        f.write_at(&header(epoch), 0)?;
        f.truncate(HEADER)?;
        f.sync()?;
        self.tails[i] = HEADER;
        Ok(())
    }

    fn append(&mut self, epoch: u64, buf: &[u8]) -> io::Result<()> {
        let i = Self::slot(epoch);
        self.files[i].write_at(buf, self.tails[i])?;
        self.tails[i] += buf.len() as u64;
        Ok(())
    }

    pub fn log_put(&mut self, key: &[u8], value: &[u8]) -> io::Result<()> {
        let buf = frame(PUT, self.epoch, key, Some(value));
        self.append(self.epoch, &buf)
    }

    pub fn log_delete(&mut self, key: &[u8]) -> io::Result<()> {
        let buf = frame(DEL, self.epoch, key, None);
        self.append(self.epoch, &buf)
    }

    /// Makes the current epoch's records durable.
    pub fn sync(&self) -> io::Result<()> {
        self.files[Self::slot(self.epoch)].sync()
    }

    /// Switches to the next epoch. The caller guarantees the epoch before
    /// the current one is committed, so its file may be reused.
    pub fn rotate(&mut self) -> io::Result<u64> {
        self.sync()?;
        let next = self.epoch + 1;
        self.reset_file(next)?;
        self.epoch = next;
        Ok(next)
    }

    /// Durably records that every epoch up to `epoch` is in the space. The
    /// marker goes to the current file, which outlives the next reset.
    pub fn commit(&mut self, epoch: u64) -> io::Result<()> {
        let buf = frame(COMMIT, epoch, &[], None);
        self.append(self.epoch, &buf)?;
        self.sync()
    }

    pub fn bytes_written(&self) -> u64 {
        self.files.iter().map(|f| f.bytes_written()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::SimFs;

    fn put(k: &str) -> WalRecord {
        WalRecord::Put {
            key: k.as_bytes().to_vec(),
            value: b"v".to_vec(),
        }
    }

    #[test]
    fn pending_follows_commit_markers() {
        let fs = SimFs::new();
        let dir = fs.dir("");
        let scan = Wal::scan(&dir).unwrap();
        assert_eq!((scan.committed, scan.max_epoch, scan.pending.len()), (0, 0, 0));

        let mut w = Wal::start(&dir, 1).unwrap();
        w.log_put(b"a", b"v").unwrap();
        w.rotate().unwrap();
        w.log_put(b"b", b"v").unwrap();
        w.log_delete(b"c").unwrap();
        w.sync().unwrap();
        let scan = Wal::scan(&dir).unwrap();
        assert_eq!(scan.max_epoch, 2);
        assert_eq!(
            scan.pending,
            vec![
                (1, put("a")),
                (2, put("b")),
                (2, WalRecord::Delete { key: b"c".to_vec() })
            ]
        );

        w.commit(1).unwrap();
        w.log_put(b"e", b"v").unwrap();
        let scan = Wal::scan(&dir).unwrap();
        assert_eq!(scan.committed, 1);
        assert_eq!(scan.pending.len(), 3);

        // Epoch 3 reuses file 1; the commit of 2 makes that safe.
        w.commit(2).unwrap();
        w.rotate().unwrap();
        w.log_put(b"d", b"v").unwrap();
        w.sync().unwrap();
        let scan = Wal::scan(&dir).unwrap();
        assert_eq!(scan.committed, 2);
        assert_eq!(scan.pending, vec![(3, put("d"))]);
    }

    #[test]
    fn torn_tail_is_ignored() {
        let fs = SimFs::new();
        let dir = fs.dir("");
        let mut w = Wal::start(&dir, 1).unwrap();
        w.log_put(b"a", b"v").unwrap();
        w.log_put(b"b", b"v").unwrap();
        w.sync().unwrap();
        let len = fs.contents("wal-1").unwrap().len() as u64;
        fs.poke("wal-1", len - 2, &[0xAA]);
        let scan = Wal::scan(&dir).unwrap();
        assert_eq!(scan.pending, vec![(1, put("a"))]);
    }
}
