//! Remote forensic acquisition: evidence server, client agent, transports,
//! evidence store and command-line tooling built on `raft-core`.

pub mod agent;
pub mod bench;
pub mod cli;
pub mod client;
pub mod config;
pub mod control_api;
pub mod events;
pub mod hashing;
pub mod imaging;
pub mod server;
pub mod store;
pub mod trace;
pub mod transport;

pub use raft_core as core;
