//! Storage over a flexible address space.
//!
//! * [`flextree`]: extent index with O(log N) range shifts.
//! * [`flexspace`]: persistent, crash-consistent address space on top of it.
//! * [`flexdb`]: sorted key-value store keeping its records in a flexspace.
//! * [`storage`]: file abstraction, including a crash-simulating in-memory
//!   backend.

pub mod flexdb;
pub mod flexspace;
pub mod flextree;
pub mod storage;
