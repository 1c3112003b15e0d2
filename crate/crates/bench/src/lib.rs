//! Benchmarks and crash injection for flexstore, plus the baseline extent
//! indexes they compare against.

pub mod baseline;
pub mod crash_suite;
pub mod index_bench;
pub mod kv_bench;
pub mod report;
pub mod space_bench;
pub mod workload;

use flexstore::flexdb::DbError;
use flexstore::flexspace::SpaceError;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid parameters: {0}")]
    Invalid(String),
    /// A read disagreed with the model. Always fatal.
    #[error("model mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
