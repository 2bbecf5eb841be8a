//! Deterministic simulator and analysis toolkit for sharded byzantine
//! fault tolerant ledgers whose replicas carry trusted hardware.
//!
//! The crate is organised as a library; the `examples/` directory is the
//! primary interface and each example is a runnable scenario:
//!
//! ```text
//! cargo run --release -p shardsim --example committee_sizing
//! cargo run --release -p shardsim --example beacon_round
//! cargo run --release -p shardsim --example consensus_variants
//! cargo run --release -p shardsim --example equivocation_attack
//! cargo run --release -p shardsim --example leader_failover
//! cargo run --release -p shardsim --example cross_shard_payment
//! cargo run --release -p shardsim --example serializability_check
//! cargo run --release -p shardsim --example rollback_recovery
//! cargo run --release -p shardsim --example reconfiguration
//! cargo run --release -p shardsim --example poet_stale_rate
//! cargo run --release -p shardsim --example shard_scaling
//! ```
//!
//! A thin command line binary (`shardsim`) exposes the same entry points as
//! subcommands for scripted runs; see the README for the exit-code contract.
//!
//! Module map:
//! - [`ledger`]: key-value state, transactions, blocks, deterministic execution.
//! - [`enclave`]: simulated trusted hardware — attested logs, randomness
//!   beacon, wait certificates, sealing and rollback recovery.
//! - [`consensus`]: PBFT-style replica state machine in four variants (plain,
//!   attested, split-queue, aggregated).
//! - [`poet`]: proof-of-elapsed-time committee consensus and stale-block
//!   measurement.
//! - [`shardform`]: committee sizing math, randomness-beacon rounds, committee
//!   assignment and reconfiguration schedules.
//! - [`coordination`]: cross-shard two-phase commit driven by a reference
//!   committee.
//! - [`simnet`]: deterministic discrete-event network with adversary
//!   injection, traces and metrics.
//! - [`bench`]: workload generation, benchmark runners, trace oracles.
//! - [`cli`]: the subcommand surface used by the thin binary.

pub mod bench;
pub mod cli;
pub mod consensus;
pub mod coordination;
pub mod crypto;
pub mod enclave;
pub mod ids;
pub mod ledger;
pub mod poet;
pub mod shardform;
pub mod simnet;
pub mod time;

pub use crypto::Digest32;
pub use ids::{ActorId, ClientId, NodeId};
pub use time::{SimDuration, SimTime};
