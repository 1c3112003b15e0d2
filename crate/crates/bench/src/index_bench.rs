//! Extent-index microbenchmark: build an index by appending, then time one
//! operation kind against it.

use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;
use serde_json::json;

use crate::baseline::{BPlusTree, ExtentIndex, FlexIndex, SortedArray};
use crate::report::{BenchReport, Phase};

/// Every extent the benchmark creates has this length.
pub const EXTENT_LEN: u64 = 4096;
pub const RANGE_EXTENTS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum IndexKind {
    Flextree,
    BplusTree,
    SortedArray,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum IndexOp {
    Insert,
    Append,
    Lookup,
    RangeQuery,
}

impl IndexOp {
    fn name(self) -> &'static str {
        match self {
            IndexOp::Insert => "insert",
            IndexOp::Append => "append",
            IndexOp::Lookup => "lookup",
            IndexOp::RangeQuery => "range-query",
        }
    }
}

#[derive(Clone, Debug)]
pub struct IndexBenchSpec {
    pub kind: IndexKind,
    pub op: IndexOp,
    /// Extents present before the timed phase.
    pub extents: u64,
    /// Timed operations.
    pub ops: u64,
    pub node_capacity: usize,
    pub seed: u64,
}

impl IndexBenchSpec {
    pub fn new(kind: IndexKind, op: IndexOp, extents: u64, ops: u64) -> Self {
        IndexBenchSpec {
            kind,
            op,
            extents,
            ops,
            node_capacity: 64,
            seed: 1,
        }
    }
}

pub fn new_index(kind: IndexKind, node_capacity: usize) -> Box<dyn ExtentIndex> {
    match kind {
        IndexKind::Flextree => Box::new(FlexIndex::new(node_capacity)),
        IndexKind::BplusTree => Box::new(BPlusTree::new(node_capacity)),
        IndexKind::SortedArray => Box::new(SortedArray::new()),
    }
}

/// Builds `extents` physically distinct extents by appending.
pub fn build(kind: IndexKind, node_capacity: usize, extents: u64) -> Box<dyn ExtentIndex> {
    let mut idx = new_index(kind, node_capacity);
    for i in 0..extents {
        // Gaps keep neighbours physically apart.
        idx.append(EXTENT_LEN, i * 2 * EXTENT_LEN);
    }
    idx
}

/// Runs one operation kind. Throughput is the steady-state rate over the
/// back half of the timed operations.
pub fn run_index_bench(spec: &IndexBenchSpec) -> BenchReport {
    assert!(spec.extents >= 1, "extent count must be at least 1");
    let mut idx = build(spec.kind, spec.node_capacity, spec.extents);
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let mut next_phys = spec.extents * 2 * EXTENT_LEN;
    let half = spec.ops / 2;
    let (mut dirtied, mut shifted) = (0u64, 0u64);
    let mut sink = 0u64;
    let mut start = Instant::now();
    for i in 0..spec.ops {
        if i == half {
            start = Instant::now();
        }
        let blocks = idx.total_size() / EXTENT_LEN;
        match spec.op {
            IndexOp::Insert | IndexOp::Append => {
                let at = match spec.op {
                    IndexOp::Insert => rng.gen_range(0..=blocks) * EXTENT_LEN,
                    _ => idx.total_size(),
                };
                idx.insert_range(at, EXTENT_LEN, next_phys);
                next_phys += 2 * EXTENT_LEN;
                let c = idx.last_cost();
                dirtied += c.dirtied_nodes as u64;
                shifted += c.shifted_entries as u64;
            }
            IndexOp::Lookup => {
                let at = rng.gen_range(0..idx.total_size());
                sink ^= idx.lookup(at).map_or(0, |e| e.phys);
            }
            IndexOp::RangeQuery => {
                let at = rng.gen_range(0..blocks) * EXTENT_LEN;
                sink ^= idx.range(at, RANGE_EXTENTS).len() as u64;
            }
        }
    }
    let timed = spec.ops - half;
    std::hint::black_box(sink);
    let mut phase = Phase::timed(spec.op.name(), timed, start.elapsed().as_secs_f64());
    if matches!(spec.op, IndexOp::Insert | IndexOp::Append) && spec.ops > 0 {
        phase.dirtied_nodes_per_op = Some(dirtied as f64 / spec.ops as f64);
        phase.shifted_entries_per_op = Some(shifted as f64 / spec.ops as f64);
    }
    let mut report = BenchReport::new(
        "index-bench",
        json!({
            "index": spec.kind,
            "op": spec.op,
            "extents": spec.extents,
            "ops": spec.ops,
            "node_capacity": spec.node_capacity,
            "seed": spec.seed,
        }),
    );
    report.phases.push(phase);
    report
}
