//! Key-value benchmark: load, then run a YCSB mix from 1..=4 client
//! threads, checking every read and scan against an ordered-map model.
//!
//! Writers hold the model's write lock across the store call and readers
//! hold its read lock, so the model is always exactly what the store must
//! return.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::RwLock;
use std::time::Instant;

use flexstore::flexdb::{DbConfig, FlexDb};
use flexstore::storage::FsDir;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde_json::json;

use crate::report::{BenchReport, Latency, Phase};
use crate::workload::{key_bytes, value_bytes, Distribution, KvOp, OpStream, WorkloadSpec};
use crate::BenchError;

type Model = RwLock<BTreeMap<Vec<u8>, Vec<u8>>>;

struct Ctx<'a> {
    db: &'a FlexDb,
    model: &'a Model,
    spec: &'a WorkloadSpec,
}

impl Ctx<'_> {
    fn key(&self, id: u64) -> Vec<u8> {
        key_bytes(id, self.spec.key_size)
    }

    fn write(&self, id: u64, version: u64) -> Result<u64, BenchError> {
        let k = self.key(id);
        let v = value_bytes(id, version, self.spec.value_size);
        let logical = (k.len() + v.len()) as u64;
        let mut m = self.model.write().unwrap();
        self.db.put(&k, &v)?;
        m.insert(k, v);
        Ok(logical)
    }

    fn read(&self, id: u64) -> Result<Option<Vec<u8>>, BenchError> {
        let k = self.key(id);
        let m = self.model.read().unwrap();
        let got = self.db.get(&k)?;
        if got.as_ref() != m.get(&k) {
            return Err(BenchError::Mismatch(format!(
                "get {:?}: store has {:?} bytes, model has {:?}",
                String::from_utf8_lossy(&k),
                got.as_ref().map(Vec::len),
                m.get(&k).map(Vec::len)
            )));
        }
        Ok(got)
    }

    fn scan(&self, id: u64, n: usize) -> Result<(), BenchError> {
        let k = self.key(id);
        let m = self.model.read().unwrap();
        let got = self.db.scan(&k, n)?;
        let want: Vec<(Vec<u8>, Vec<u8>)> = m
            .range(k.clone()..)
            .take(n)
            .map(|(a, b)| (a.clone(), b.clone()))
            .collect();
        if got != want {
            return Err(BenchError::Mismatch(format!(
                "scan {:?} x{n}: store returned {} records, model {}",
                String::from_utf8_lossy(&k),
                got.len(),
                want.len()
            )));
        }
        Ok(())
    }

    /// Runs one op; returns the payload bytes it wrote.
    fn apply(&self, op: KvOp, version: u64) -> Result<u64, BenchError> {
        match op {
            KvOp::Read(id) => self.read(id).map(|_| 0),
            KvOp::Scan(id, n) => self.scan(id, n).map(|_| 0),
            KvOp::Update(id) | KvOp::Insert(id) => self.write(id, version),
            KvOp::ReadModifyWrite(id) => {
                self.read(id)?;
                self.write(id, version)
            }
        }
    }
}

struct ThreadResult {
    latencies: Vec<u64>,
    logical: u64,
}

fn run_phase(ctx: &Ctx, name: &str, ops_per_thread: &[Vec<KvOp>]) -> Result<Phase, BenchError> {
    let before = ctx.db.stats();
    let t = Instant::now();
    let results: Vec<Result<ThreadResult, BenchError>> = std::thread::scope(|s| {
        let handles: Vec<_> = ops_per_thread
            .iter()
            .enumerate()
            .map(|(tid, ops)| {
                s.spawn(move || {
                    let mut r = ThreadResult {
                        latencies: Vec::with_capacity(ops.len()),
                        logical: 0,
                    };
                    for (i, &op) in ops.iter().enumerate() {
                        let t = Instant::now();
                        r.logical += ctx.apply(op, ((tid as u64) << 40) | (i as u64 + 1))?;
                        r.latencies.push(t.elapsed().as_nanos() as u64);
                    }
                    Ok(r)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("client thread panicked"))
            .collect()
    });
    ctx.db.flush()?;
    let secs = t.elapsed().as_secs_f64();
    let mut latencies = Vec::new();
    let mut logical = 0;
    for r in results {
        let r = r?;
        latencies.extend(r.latencies);
        logical += r.logical;
    }
    let after = ctx.db.stats();
    // The WAL is reported separately; write amplification covers the
    // address-space files only.
    let file = after.space.file_bytes_written() - before.space.file_bytes_written();
    let mut phase = Phase::timed(name, latencies.len() as u64, secs).with_bytes(file, logical);
    phase.latency = Latency::from_samples(latencies);
    Ok(phase)
}

fn streams(spec: &WorkloadSpec, threads: usize) -> Vec<Vec<KvOp>> {
    (0..threads)
        .map(|t| {
            let mut s = OpStream::new(spec, t, threads);
            let mut rng = StdRng::seed_from_u64(spec.seed ^ (t as u64 + 1).wrapping_mul(0x9e37_79b9));
            let n = spec.ops / threads as u64 + u64::from((t as u64) < spec.ops % threads as u64);
            (0..n).map(|_| s.next(&mut rng)).collect()
        })
        .collect()
}

/// Loads `spec.keys` keys, then runs the mix. Any disagreement with the
/// model aborts the run.
pub fn run_kv_bench(spec: &WorkloadSpec, dir: &Path, config: DbConfig) -> Result<BenchReport, BenchError> {
    if !(1..=4).contains(&spec.threads) {
        return Err(BenchError::Invalid(format!(
            "{} threads; 1 to 4 are supported",
            spec.threads
        )));
    }
    if spec.key_size < 20 {
        return Err(BenchError::Invalid("keys need at least 20 bytes to hold any id".into()));
    }
    let db = FlexDb::open_in(&FsDir::new(dir)?, config)?;
    let model = Model::default();
    let ctx = Ctx {
        db: &db,
        model: &model,
        spec,
    };
    let threads = spec.threads;

    let mut ids: Vec<u64> = (0..spec.keys).collect();
    if spec.distribution != Distribution::Sequential {
        ids.shuffle(&mut StdRng::seed_from_u64(spec.seed));
    }
    let load: Vec<Vec<KvOp>> = (0..threads)
        .map(|t| {
            ids.iter()
                .skip(t)
                .step_by(threads)
                .map(|&id| KvOp::Insert(id))
                .collect()
        })
        .collect();
    let mut phases = vec![run_phase(&ctx, "load", &load)?];
    phases.push(run_phase(&ctx, "run", &streams(spec, threads))?);

    let st = db.stats();
    let mut report = BenchReport::new(
        "kv-bench",
        json!({
            "workload": spec,
            "wal_bytes_written": st.wal_bytes_written,
            "cache_hit_rate": st.cache_hit_rate,
            "intervals": st.intervals,
        }),
    );
    report.phases = phases;
    db.close()?;
    Ok(report)
}
