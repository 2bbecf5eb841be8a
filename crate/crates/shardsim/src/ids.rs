//! Identifier newtypes shared across modules.

use serde::{Deserialize, Serialize};
use std::fmt;

/// A consensus replica (one node, one enclave).
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

/// A workload or relay client.
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct ClientId(pub u32);

/// Shards are numbered `0..k`. Where a reference committee exists it is
/// committee 0, and committees `1..=k` serve shards `0..k`.
pub type ShardId = u32;
pub type CommitteeId = u32;

pub type View = u64;
pub type Seq = u64;
pub type Epoch = u64;

/// Unified address space for simulation actors. The derived ordering (nodes
/// before clients before the orchestrator, then by id) is the actor component
/// of the event tie-break.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum ActorId {
    Node(NodeId),
    Client(ClientId),
    Orchestrator,
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActorId::Node(n) => write!(f, "{n}"),
            ActorId::Client(c) => write!(f, "{c}"),
            ActorId::Orchestrator => write!(f, "orch"),
        }
    }
}
