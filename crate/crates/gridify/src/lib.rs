//! Host-side companion of `gridify-core`: point cloud and checkpoint file
//! formats, an allocation-counting allocator, the scaling benchmark and the
//! `gridify` command-line tool.

pub mod alloc_count;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod io;

pub use error::{Error, Result};
pub use gridify_core;
