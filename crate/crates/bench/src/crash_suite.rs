//! Crash injection over a scripted, mixed flexspace + flexdb workload.
//!
//! A dry run counts the storage calls each step makes. Each injection then
//! replays the script on a fresh simulated disk that fails after `k`
//! calls, recovers from a random post-crash image, and compares both
//! stores with the states the durability contracts allow:
//!
//! * the space may come back as any state from its last observed commit
//!   up to and including the step that failed;
//! * the store syncs its log on every op, so it comes back as the state
//!   before or after the failing step.

use std::collections::BTreeMap;
use std::sync::Arc;

use flexstore::flexdb::{DbConfig, FlexDb, WalSync};
use flexstore::flexspace::{FlexSpace, SpaceConfig};
use flexstore::storage::SimFs;
use rand::rngs::StdRng;
use rand::{Rng, RngCore, SeedableRng};
use serde::Serialize;

const SPACE_DIR: &str = "space";
const DB_DIR: &str = "db";
const MAX_SPACE: u64 = 64 << 10;
const MAX_IO: u64 = 8 << 10;
const DB_KEYS: u32 = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Write { off: u64, len: u64, seed: u64 },
    Insert { off: u64, len: u64, seed: u64 },
    Collapse { off: u64, len: u64 },
    Barrier,
    Checkpoint,
    Put { key: u32, len: usize, seed: u64 },
    Delete { key: u32 },
}

fn bytes(seed: u64, len: u64) -> Vec<u8> {
    let mut b = vec![0u8; len as usize];
    StdRng::seed_from_u64(seed).fill_bytes(&mut b);
    b
}

fn db_key(k: u32) -> Vec<u8> {
    format!("user{k:05}").into_bytes()
}

/// The script is a pure function of the seed.
pub fn script(seed: u64, steps: usize) -> Vec<Step> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut size = 0u64;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let step = match rng.gen_range(0..40) {
            0..=3 => Step::Barrier,
            4 => Step::Checkpoint,
            5..=19 => {
                let key = rng.gen_range(0..DB_KEYS);
                if rng.gen_bool(0.8) {
                    Step::Put {
                        key,
                        len: rng.gen_range(1..200),
                        seed: rng.gen(),
                    }
                } else {
                    Step::Delete { key }
                }
            }
            r => {
                let len = rng.gen_range(1..=MAX_IO);
                match r % 3 {
                    0 if size > 0 => {
                        let off = rng.gen_range(0..size);
                        Step::Collapse {
                            off,
                            len: len.min(size - off),
                        }
                    }
                    1 if size + len <= MAX_SPACE => Step::Insert {
                        off: rng.gen_range(0..=size),
                        len,
                        seed: rng.gen(),
                    },
                    _ => {
                        let off = rng.gen_range(0..=size.min(MAX_SPACE - len));
                        Step::Write {
                            off,
                            len,
                            seed: rng.gen(),
                        }
                    }
                }
            }
        };
        size = match step {
            Step::Write { off, len, .. } => size.max(off + len),
            Step::Insert { len, .. } => size + len,
            Step::Collapse { len, .. } => size - len,
            _ => size,
        };
        out.push(step);
    }
    out
}

/// Expected contents of both stores, advanced one step at a time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Oracle {
    pub space: Vec<u8>,
    pub kv: BTreeMap<Vec<u8>, Vec<u8>>,
}

impl Oracle {
    pub fn apply(&mut self, step: &Step) {
        match *step {
            Step::Write { off, len, seed } => {
                let end = (off + len) as usize;
                if self.space.len() < end {
                    self.space.resize(end, 0);
                }
                self.space[off as usize..end].copy_from_slice(&bytes(seed, len));
            }
            Step::Insert { off, len, seed } => {
                let off = off as usize;
                self.space.splice(off..off, bytes(seed, len));
            }
            Step::Collapse { off, len } => {
                self.space.drain(off as usize..(off + len) as usize);
            }
            Step::Put { key, len, seed } => {
                self.kv.insert(db_key(key), bytes(seed, len as u64));
            }
            Step::Delete { key } => {
                self.kv.remove(&db_key(key));
            }
            Step::Barrier | Step::Checkpoint => {}
        }
    }
}

pub fn space_config() -> SpaceConfig {
    SpaceConfig {
        reserved_free_segments: 2,
        log_size_threshold: 16 << 10,
        node_capacity: 8,
        log_buffer_entries: 64,
        ..SpaceConfig::with_segment_size(64 << 10)
    }
}

pub fn db_config() -> DbConfig {
    DbConfig {
        space: space_config(),
        memtable_bytes: 2 << 10,
        cache_intervals: 32,
        wal_sync: WalSync::EveryOp,
        background_commit: false,
        commit_interval: None,
        commit_chunk: 100,
        index_node_capacity: 8,
        ..DbConfig::default()
    }
}

struct Stores {
    space: FlexSpace,
    db: FlexDb,
}

impl Stores {
    fn open(fs: &Arc<SimFs>) -> Result<Stores, String> {
        Ok(Stores {
            space: FlexSpace::open_in(&fs.dir(SPACE_DIR), space_config()).map_err(|e| e.to_string())?,
            db: FlexDb::open_in(&fs.dir(DB_DIR), db_config()).map_err(|e| e.to_string())?,
        })
    }

    fn exec(&self, step: &Step) -> Result<(), String> {
        let s = &self.space;
        let r = match *step {
            Step::Write { off, len, seed } => s.pwrite(off, &bytes(seed, len)),
            Step::Insert { off, len, seed } => s.insert_range(off, &bytes(seed, len)),
            Step::Collapse { off, len } => s.collapse_range(off, len),
            Step::Barrier => s.barrier(),
            Step::Checkpoint => s.checkpoint().map(|_| ()),
            Step::Put { key, len, seed } => {
                return self
                    .db
                    .put(&db_key(key), &bytes(seed, len as u64))
                    .map_err(|e| e.to_string())
            }
            Step::Delete { key } => return self.db.delete(&db_key(key)).map_err(|e| e.to_string()),
        };
        r.map_err(|e| e.to_string())
    }

    fn durable_points(&self) -> u64 {
        let st = self.space.stats();
        st.commits + st.checkpoints
    }
}

/// Storage-call counts of a crash-free run.
#[derive(Clone, Debug)]
pub struct DryRun {
    /// Calls made after both stores are open, before step `i`; one extra
    /// entry holds the total.
    pub calls_before: Vec<u64>,
    pub final_state: Oracle,
}

pub fn dry_run(script: &[Step]) -> DryRun {
    let fs = SimFs::new();
    let stores = Stores::open(&fs).expect("fresh stores open");
    let base = fs.io_ops();
    let mut calls_before = Vec::with_capacity(script.len() + 1);
    let mut oracle = Oracle::default();
    for step in script {
        calls_before.push(fs.io_ops() - base);
        stores.exec(step).expect("crash-free step");
        oracle.apply(step);
    }
    calls_before.push(fs.io_ops() - base);
    DryRun {
        calls_before,
        final_state: oracle,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Injection {
    /// Storage calls allowed after the stores are open.
    pub crash_after: u64,
    /// Script step that observed the failure.
    pub failed_step: Option<usize>,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CrashReport {
    pub seed: u64,
    pub steps: usize,
    pub injections: usize,
    pub recovered: usize,
    pub failures: Vec<Injection>,
}

impl CrashReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.recovered == self.injections
    }
}

/// Replays `script`, crashing after `k` storage calls, then recovers and
/// checks both stores.
pub fn inject(script: &[Step], k: u64, image_seed: u64) -> Injection {
    let mut inj = Injection {
        crash_after: k,
        failed_step: None,
        ok: false,
        detail: None,
    };
    let fs = SimFs::new();
    let stores = Stores::open(&fs).expect("fresh stores open");
    fs.crash_after(k);
    // Space states lo..=hi (by step count applied) are acceptable.
    let mut lo = 0usize;
    let mut hi = script.len();
    let mut durable = stores.durable_points();
    for (i, step) in script.iter().enumerate() {
        if stores.exec(step).is_err() {
            inj.failed_step = Some(i);
            hi = i + 1;
            break;
        }
        let now = stores.durable_points();
        if now != durable {
            // A commit during step i covers at least the state before it.
            lo = i;
            durable = now;
        }
    }
    drop(stores);
    if !fs.crashed() {
        inj.detail = Some("script finished before the crash point".into());
        return inj;
    }
    let img = fs.crash_image(image_seed);
    match check(script, &img, lo, hi, inj.failed_step) {
        Ok(()) => inj.ok = true,
        Err(e) => inj.detail = Some(e),
    }
    inj
}

fn check(script: &[Step], img: &Arc<SimFs>, lo: usize, hi: usize, failed: Option<usize>) -> Result<(), String> {
    let stores = Stores::open(img).map_err(|e| format!("recovery failed: {e}"))?;
    let got_space = stores
        .space
        .pread(0, stores.space.total_size())
        .map_err(|e| format!("space read failed: {e}"))?;
    let got_kv: BTreeMap<Vec<u8>, Vec<u8>> = stores
        .db
        .seek(b"")
        .and_then(|it| it.collect::<Result<_, _>>())
        .map_err(|e| format!("store scan failed: {e}"))?;
    stores.space.verify().map_err(|e| format!("space invariants: {e}"))?;
    stores.db.verify().map_err(|e| format!("store invariants: {e}"))?;

    let mut oracle = Oracle::default();
    for step in &script[..lo] {
        oracle.apply(step);
    }
    let mut space_ok = false;
    let mut kv_ok = false;
    for j in lo..=hi {
        if j > lo {
            oracle.apply(&script[j - 1]);
        }
        space_ok |= oracle.space == got_space;
        // The store may only be one step behind the failing one.
        let kv_candidate = match failed {
            Some(f) => j == f || j == f + 1,
            None => j == hi,
        };
        kv_ok |= kv_candidate && oracle.kv == got_kv;
    }
    match (space_ok, kv_ok) {
        (true, true) => Ok(()),
        (false, _) => Err(format!(
            "space recovered {} bytes matching none of states {lo}..={hi}",
            got_space.len()
        )),
        (_, false) => Err(format!(
            "store recovered {} keys matching neither neighbouring state",
            got_kv.len()
        )),
    }
}

/// Picks `count` crash points: half right around barrier and checkpoint
/// steps, half uniform over the whole run.
pub fn injection_points(script: &[Step], dry: &DryRun, count: usize, seed: u64) -> Vec<u64> {
    let total = *dry.calls_before.last().unwrap();
    assert!(total > 0);
    let boundaries: Vec<u64> = script
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, Step::Barrier | Step::Checkpoint))
        .flat_map(|(i, _)| [dry.calls_before[i], dry.calls_before[i + 1]])
        .collect();
    let mut rng = StdRng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let k = if i % 2 == 0 && !boundaries.is_empty() {
                let b = boundaries[rng.gen_range(0..boundaries.len())];
                b + rng.gen_range(0..3)
            } else {
                rng.gen_range(0..total)
            };
            k.min(total - 1)
        })
        .collect()
}

pub fn run_crash_suite(seed: u64, steps: usize, injections: usize) -> CrashReport {
    let script = script(seed, steps);
    let dry = dry_run(&script);
    let points = injection_points(&script, &dry, injections, seed ^ 0x5eed);
    let mut report = CrashReport {
        seed,
        steps,
        injections,
        recovered: 0,
        failures: Vec::new(),
    };
    for (i, &k) in points.iter().enumerate() {
        let inj = inject(&script, k, seed.wrapping_add(i as u64));
        if inj.ok {
            report.recovered += 1;
        } else {
            report.failures.push(inj);
        }
    }
    report
}
