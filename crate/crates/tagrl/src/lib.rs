//! Topology-aware graph reinforcement learning for dynamic network routing.
//!
//! The crate is a self-contained laboratory: a synthetic wide-area topology
//! generator, a hop-by-hop routing environment, a structure-aware state
//! encoder (GCN layers + landmark positional embeddings + neighbor
//! attention), a policy-adaptive graph update mechanism that rewires the
//! encoder's logical graph from reward feedback, and a REINFORCE trainer
//! with exact reverse-mode gradients.
//!
//! Everything is deterministic given a seed: topologies, traffic, parameter
//! initialization, rollouts and graph updates all draw from derived
//! [`rng`] streams, so experiment outputs are byte-reproducible.

#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod experiment;
pub mod graph;
pub mod linalg;
pub mod pagu;
pub mod policy;
pub mod rng;
pub mod routing;
pub mod sase;
pub mod trainer;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
