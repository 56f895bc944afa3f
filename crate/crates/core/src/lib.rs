//! Decoding-block compilation, fusion-based Union-Find decoding and a
//! runtime coordinator for dynamic (feed-forward) logical circuits.

pub mod block;
pub mod blockfile;
pub mod circuit;
pub mod commands;
pub mod compiler;
pub mod coordinator;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod schedule;
pub mod sim;
pub mod uf;

pub use error::{Error, Result};
