//! Address-space benchmark: one write phase, then sequential and random
//! read phases checked block by block against an oracle of block ids.

use std::path::Path;
use std::time::Instant;

use flexstore::flexspace::{FlexSpace, SpaceConfig, SpaceStats};
use flexstore::storage::FsDir;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::Serialize;
use serde_json::json;

use crate::report::{BenchReport, Phase};
use crate::BenchError;

/// Keeps runs at desk scale.
pub const MAX_BYTES: u64 = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum WritePattern {
    /// Each block is inserted at a random block boundary.
    RandInsert,
    /// Blocks are written in a random order to their final offsets.
    RandWrite,
    SeqWrite,
}

#[derive(Clone, Debug)]
pub struct SpaceBenchSpec {
    pub pattern: WritePattern,
    pub io_size: usize,
    pub blocks: u64,
    pub seed: u64,
    pub config: SpaceConfig,
}

impl SpaceBenchSpec {
    pub fn new(pattern: WritePattern, io_size: usize, blocks: u64) -> Self {
        SpaceBenchSpec {
            pattern,
            io_size,
            blocks,
            seed: 7,
            config: SpaceConfig::default(),
        }
    }
}

/// Content of block `id`: its id repeated, so misplaced blocks show.
fn block(id: u64, len: usize) -> Vec<u8> {
    id.to_le_bytes().iter().copied().cycle().take(len).collect()
}

fn phase_bytes(phase: Phase, before: &SpaceStats, after: &SpaceStats) -> Phase {
    phase.with_bytes(
        after.file_bytes_written() - before.file_bytes_written(),
        after.logical_bytes - before.logical_bytes,
    )
}

/// Runs the benchmark in a fresh store under `dir`.
pub fn run_space_bench(spec: &SpaceBenchSpec, dir: &Path) -> Result<BenchReport, BenchError> {
    let io = spec.io_size as u64;
    if io == 0 || spec.blocks == 0 || io * spec.blocks > MAX_BYTES {
        return Err(BenchError::Invalid(format!(
            "{} blocks of {} bytes is outside 1 B..=1 GiB",
            spec.blocks, spec.io_size
        )));
    }
    if io > spec.config.max_extent {
        return Err(BenchError::Invalid(format!(
            "io size {io} exceeds the largest extent {}",
            spec.config.max_extent
        )));
    }
    let space = FlexSpace::open_in(&FsDir::new(dir)?, spec.config.clone())?;
    let mut rng = StdRng::seed_from_u64(spec.seed);
    // Block id at each block position.
    let mut order: Vec<u64> = Vec::with_capacity(spec.blocks as usize);
    let base = space.stats();
    let t = Instant::now();
    match spec.pattern {
        WritePattern::RandInsert => {
            for id in 0..spec.blocks {
                let pos = rng.gen_range(0..=order.len());
                space.insert_range(pos as u64 * io, &block(id, spec.io_size))?;
                order.insert(pos, id);
            }
        }
        WritePattern::RandWrite => {
            order = (0..spec.blocks).collect();
            let mut positions = order.clone();
            positions.shuffle(&mut rng);
            for pos in positions {
                space.pwrite(pos * io, &block(pos, spec.io_size))?;
            }
        }
        WritePattern::SeqWrite => {
            order = (0..spec.blocks).collect();
            for pos in 0..spec.blocks {
                space.pwrite(pos * io, &block(pos, spec.io_size))?;
            }
        }
    }
    space.barrier()?;
    let write_secs = t.elapsed().as_secs_f64();
    let after_write = space.stats();
    let mut phases = vec![phase_bytes(
        Phase::timed("write", spec.blocks, write_secs),
        &base,
        &after_write,
    )];

    let mismatch = |pos: u64, got: &[u8]| -> Result<(), BenchError> {
        if got != block(order[pos as usize], spec.io_size).as_slice() {
            return Err(BenchError::Mismatch(format!(
                "block at position {pos} differs from the oracle"
            )));
        }
        Ok(())
    };
    let mut buf = vec![0u8; spec.io_size];
    let t = Instant::now();
    for pos in 0..spec.blocks {
        space.pread_into(pos * io, &mut buf)?;
        mismatch(pos, &buf)?;
    }
    phases.push(Phase::timed("seq-read", spec.blocks, t.elapsed().as_secs_f64()));

    let mut positions: Vec<u64> = (0..spec.blocks).collect();
    positions.shuffle(&mut rng);
    let t = Instant::now();
    for &pos in &positions {
        space.pread_into(pos * io, &mut buf)?;
        mismatch(pos, &buf)?;
    }
    phases.push(Phase::timed("rand-read", spec.blocks, t.elapsed().as_secs_f64()));
    if space.total_size() != io * spec.blocks {
        return Err(BenchError::Mismatch(format!(
            "space holds {} bytes, expected {}",
            space.total_size(),
            io * spec.blocks
        )));
    }
    space.close()?;

    let mut report = BenchReport::new(
        "space-bench",
        json!({
            "pattern": spec.pattern,
            "io_size": spec.io_size,
            "blocks": spec.blocks,
            "seed": spec.seed,
            "segment_size": spec.config.segment_size,
        }),
    );
    report.phases = phases;
    Ok(report)
}
