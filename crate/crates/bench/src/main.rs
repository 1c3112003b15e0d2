use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flexbench::crash_suite::run_crash_suite;
use flexbench::index_bench::{run_index_bench, IndexBenchSpec, IndexKind, IndexOp};
use flexbench::kv_bench::run_kv_bench;
use flexbench::space_bench::{run_space_bench, SpaceBenchSpec, WritePattern};
use flexbench::workload::{Distribution, Mix, SizePreset, WorkloadSpec};
use flexbench::BenchError;
use flexstore::flexdb::DbConfig;

#[derive(Parser)]
#[command(name = "flexbench", about = "Benchmarks and crash injection for flexstore")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Extent index operation throughput and dirtied nodes.
    IndexBench {
        #[arg(long, value_enum, default_value = "flextree")]
        index: IndexKind,
        #[arg(long, value_enum, default_value = "insert")]
        op: IndexOp,
        #[arg(long, default_value_t = 1_000_000)]
        extents: u64,
        #[arg(long, default_value_t = 100_000)]
        ops: u64,
        #[arg(long, default_value_t = 64)]
        node_capacity: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Address-space write patterns, read-back and write amplification.
    SpaceBench {
        #[arg(long, value_enum, default_value = "rand-insert")]
        pattern: WritePattern,
        #[arg(long, default_value_t = 4096)]
        io_size: usize,
        #[arg(long, default_value_t = 65536)]
        blocks: u64,
        /// Store directory; a temporary one by default.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// YCSB-style key-value workload, verified against a model.
    KvBench {
        #[arg(long, value_enum, default_value = "a")]
        mix: Mix,
        #[arg(long, value_enum, default_value = "zipfian")]
        distribution: Distribution,
        #[arg(long, default_value_t = 100_000)]
        keys: u64,
        #[arg(long, default_value_t = 100_000)]
        ops: u64,
        #[arg(long, value_enum, default_value = "zippy-db")]
        sizes: SizePreset,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Crash injection over a scripted mixed workload.
    CrashSuite {
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value_t = 200)]
        injections: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn emit(common: &Common, text: String) -> Result<(), BenchError> {
    match &common.out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn store_dir(dir: Option<PathBuf>) -> Result<(Option<tempfile::TempDir>, PathBuf), BenchError> {
    match dir {
        Some(d) => {
            std::fs::create_dir_all(&d)?;
            Ok((None, d))
        }
        None => {
            let t = tempfile::tempdir()?;
            let p = t.path().to_path_buf();
            Ok((Some(t), p))
        }
    }
}

fn run(cli: Cli) -> Result<bool, BenchError> {
    match cli.cmd {
        Cmd::IndexBench {
            index,
            op,
            extents,
            ops,
            node_capacity,
            common,
        } => {
            if extents == 0 {
                return Err(BenchError::Invalid("extent count must be at least 1".into()));
            }
            let spec = IndexBenchSpec {
                node_capacity,
                seed: common.seed,
                ..IndexBenchSpec::new(index, op, extents, ops)
            };
            emit(&common, run_index_bench(&spec).to_json())?;
        }
        Cmd::SpaceBench {
            pattern,
            io_size,
            blocks,
            dir,
            common,
        } => {
            let (_tmp, dir) = store_dir(dir)?;
            let spec = SpaceBenchSpec {
                seed: common.seed,
                ..SpaceBenchSpec::new(pattern, io_size, blocks)
            };
            emit(&common, run_space_bench(&spec, &dir)?.to_json())?;
        }
        Cmd::KvBench {
            mix,
            distribution,
            keys,
            ops,
            sizes,
            threads,
            dir,
            common,
        } => {
            let (_tmp, dir) = store_dir(dir)?;
            let (key_size, value_size) = sizes.sizes();
            let spec = WorkloadSpec {
                key_size,
                value_size,
                threads,
                seed: common.seed,
                ..WorkloadSpec::new(mix, distribution, keys, ops)
            };
            emit(&common, run_kv_bench(&spec, &dir, DbConfig::default())?.to_json())?;
        }
        Cmd::CrashSuite {
            steps,
            injections,
            common,
        } => {
            let report = run_crash_suite(common.seed, steps, injections);
            emit(
                &common,
                serde_json::to_string_pretty(&report).expect("reports serialize"),
            )?;
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("flexbench: {e}");
            ExitCode::FAILURE
        }
    }
}
