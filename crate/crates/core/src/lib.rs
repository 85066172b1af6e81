//! Deterministic simulator and protocol library for a three-phase
//! privacy-preserving broadcast.
//!
//! A message travels through three phases:
//!
//! 1. **DC-net** ([`dcnet`]): the originator hides inside a small group that
//!    runs XOR-based dining-cryptographers rounds, so no group member can tell
//!    who injected the message.
//! 2. **Adaptive diffusion** ([`diffusion`]): one group member is elected
//!    initial virtual source and spreads the message while keeping the
//!    infected subgraph balanced around a moving virtual source, hiding the
//!    entry point.
//! 3. **Flood and prune** ([`flood`]): frontier nodes switch to a plain flood
//!    that completes delivery to every reachable node.
//!
//! [`simnet`] drives the whole pipeline as a discrete-event simulation over
//! generated topologies, [`adversary`] replays recorded traffic against
//! deanonymization estimators, and [`cli`] exposes experiment plumbing for the
//! `privbcast` binary.
//!
//! Everything is deterministic: one master seed derives independent
//! per-purpose RNG streams, and identical configurations produce byte-identical
//! traces and reports.

pub mod adversary;
pub mod cli;
pub mod dcnet;
pub mod diffusion;
pub mod flood;
pub mod groups;
pub mod protocol;
pub mod simnet;

use std::fmt;

use serde::{Deserialize, Serialize};

/// Simulated clock value. One tick is the delivery delay of a single link.
pub type Tick = u64;

/// Identifier of a simulated node.
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    /// Index form, for addressing per-node vectors.
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identifier of a DC-net anonymity group.
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct GroupId(pub u32);

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}", self.0)
    }
}

/// Identifier of a broadcast message, derived from its content digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct MessageId(pub u64);

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}
