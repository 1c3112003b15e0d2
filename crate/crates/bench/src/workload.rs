//! Key-value workload generation: key distributions, YCSB mixes and record
//! size presets. Everything is a pure function of the seed.

use rand::distributions::{Distribution as _, WeightedIndex};
use rand::rngs::StdRng;
use rand::Rng;
use serde::Serialize;

pub const ZIPF_ALPHA: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Distribution {
    Sequential,
    Uniform,
    Zipfian,
    /// Leading three digits Zipf-drawn, the rest uniform.
    ZipfianComposite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
pub enum Mix {
    /// Insert only.
    Load,
    /// 50% read, 50% update.
    A,
    /// 95% read, 5% update.
    B,
    /// Read only.
    C,
    /// 95% read of recent inserts, 5% insert.
    D,
    /// 95% scan, 5% insert.
    E,
    /// 50% read, 50% read-modify-write.
    F,
}

/// Average key and value sizes of published production traces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SizePreset {
    ZippyDb,
    Udb,
    Sys,
}

impl SizePreset {
    pub fn sizes(self) -> (usize, usize) {
        match self {
            SizePreset::ZippyDb => (48, 43),
            SizePreset::Udb => (27, 127),
            SizePreset::Sys => (28, 396),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorkloadSpec {
    pub distribution: Distribution,
    pub mix: Mix,
    /// Keys loaded before the run phase.
    pub keys: u64,
    pub key_size: usize,
    pub value_size: usize,
    /// Run-phase operations, split evenly across threads.
    pub ops: u64,
    pub max_scan: usize,
    pub threads: usize,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn new(mix: Mix, distribution: Distribution, keys: u64, ops: u64) -> Self {
        let (key_size, value_size) = SizePreset::ZippyDb.sizes();
        WorkloadSpec {
            distribution,
            mix,
            keys,
            key_size,
            value_size,
            ops,
            max_scan: 50,
            threads: 1,
            seed: 42,
        }
    }
}

/// Zipf over ranks `0..n` via a precomputed cumulative table.
#[derive(Clone, Debug)]
pub struct Zipf {
    table: WeightedIndex<f64>,
}

impl Zipf {
    pub fn new(n: u64, alpha: f64) -> Zipf {
        assert!(n > 0);
        let weights = (1..=n).map(|r| 1.0 / (r as f64).powf(alpha));
        Zipf {
            table: WeightedIndex::new(weights).expect("positive weights"),
        }
    }

    pub fn sample(&self, rng: &mut StdRng) -> u64 {
        self.table.sample(rng) as u64
    }
}

/// Draws key ids from `0..n` under a distribution.
#[derive(Clone, Debug)]
pub struct KeyChooser {
    dist: Distribution,
    n: u64,
    next: u64,
    zipf: Option<Zipf>,
    /// For the composite form: ids per leading-digit prefix.
    per_prefix: u64,
}

impl KeyChooser {
    pub fn new(dist: Distribution, n: u64) -> KeyChooser {
        let n = n.max(1);
        let digits = n.saturating_sub(1).max(1).ilog10() as u64 + 1;
        let per_prefix = 10u64.pow(digits.saturating_sub(3) as u32);
        let zipf = match dist {
            Distribution::Zipfian => Some(Zipf::new(n, ZIPF_ALPHA)),
            Distribution::ZipfianComposite => Some(Zipf::new(n.div_ceil(per_prefix), ZIPF_ALPHA)),
            _ => None,
        };
        KeyChooser {
            dist,
            n,
            next: 0,
            zipf,
            per_prefix,
        }
    }

    pub fn next(&mut self, rng: &mut StdRng) -> u64 {
        match self.dist {
            Distribution::Sequential => {
                let k = self.next % self.n;
                self.next += 1;
                k
            }
            Distribution::Uniform => rng.gen_range(0..self.n),
            Distribution::Zipfian => self.zipf.as_ref().unwrap().sample(rng),
            Distribution::ZipfianComposite => {
                let prefix = self.zipf.as_ref().unwrap().sample(rng);
                (prefix * self.per_prefix + rng.gen_range(0..self.per_prefix)).min(self.n - 1)
            }
        }
    }
}

/// Fixed-width decimal key; byte order equals numeric order.
pub fn key_bytes(id: u64, width: usize) -> Vec<u8> {
    format!("{id:0>width$}").into_bytes()
}

/// Value for `id` at `version`, `len` bytes long.
pub fn value_bytes(id: u64, version: u64, len: usize) -> Vec<u8> {
    let stamp = format!("{id}.{version}|");
    stamp.bytes().cycle().take(len).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KvOp {
    Read(u64),
    Update(u64),
    Insert(u64),
    Scan(u64, usize),
    ReadModifyWrite(u64),
}

/// Per-thread operation stream for a run phase.
#[derive(Clone, Debug)]
pub struct OpStream {
    mix: Mix,
    chooser: KeyChooser,
    recent: Zipf,
    max_scan: usize,
    /// Next id handed out by an insert.
    next_insert: u64,
    stride: u64,
}

impl OpStream {
    /// `thread`/`threads` partition fresh insert ids so threads never
    /// collide.
    pub fn new(spec: &WorkloadSpec, thread: usize, threads: usize) -> OpStream {
        OpStream {
            mix: spec.mix,
            chooser: KeyChooser::new(spec.distribution, spec.keys),
            recent: Zipf::new(spec.keys.clamp(1, 1 << 20), ZIPF_ALPHA),
            max_scan: spec.max_scan.max(1),
            next_insert: spec.keys + thread as u64,
            stride: threads as u64,
        }
    }

    fn insert(&mut self) -> KvOp {
        let id = self.next_insert;
        self.next_insert += self.stride;
        KvOp::Insert(id)
    }

    pub fn next(&mut self, rng: &mut StdRng) -> KvOp {
        let p = rng.gen_range(0..100);
        match self.mix {
            Mix::Load => self.insert(),
            Mix::A if p < 50 => KvOp::Read(self.chooser.next(rng)),
            Mix::A => KvOp::Update(self.chooser.next(rng)),
            Mix::B if p < 95 => KvOp::Read(self.chooser.next(rng)),
            Mix::B => KvOp::Update(self.chooser.next(rng)),
            Mix::C => KvOp::Read(self.chooser.next(rng)),
            Mix::D if p < 95 => {
                // Skewed toward the newest ids this stream knows about.
                let newest = self.next_insert.saturating_sub(self.stride);
                KvOp::Read(newest.saturating_sub(self.recent.sample(rng)))
            }
            Mix::D => self.insert(),
            Mix::E if p < 95 => KvOp::Scan(self.chooser.next(rng), rng.gen_range(1..=self.max_scan)),
            Mix::E => self.insert(),
            Mix::F if p < 50 => KvOp::Read(self.chooser.next(rng)),
            Mix::F => KvOp::ReadModifyWrite(self.chooser.next(rng)),
        }
    }
}
