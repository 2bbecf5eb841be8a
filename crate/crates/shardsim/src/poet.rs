//! Longest-chain proof-of-elapsed-time simulation.
//!
//! Every node's enclave draws an exponentially distributed wait; when the
//! wait elapses the enclave issues a wait certificate only if its l-bit
//! filter value sampled to zero, so on average `n * 2^-l` nodes compete
//! per round. Certificate holders publish a block extending their local
//! tip and the network runs plain longest-chain adoption; near-
//! simultaneous winners fork the chain and the blocks that lose the fork
//! are stale. Raising `l` thins the competition, stretching the gap
//! between consecutive winners relative to propagation delay, which is
//! what cuts the stale rate.

use crate::crypto::{derive_seed, digest_of, Digest32};
use crate::enclave::{
    verify_wait_certificate, Enclave, EnclaveRegistry, LatencyTable, WaitCertificate,
};
use crate::ids::NodeId;
use crate::simnet::DelayModel;
use crate::time::{SimDuration, SimTime};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum PoetError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    /// Every node's filter came up nonzero; the round is repeated.
    #[error("no node passed the certificate filter this round")]
    NoWinner,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoetConfig {
    pub n: u32,
    /// Filter bit-length; a wait certificate issues with probability 2^-l.
    pub l: u32,
    /// Mean of each node's exponential wait draw.
    pub block_time: SimDuration,
    /// Block size in bytes; adds `block_size / bandwidth` to every link.
    pub block_size: u64,
    pub delay: DelayModel,
    pub bandwidth_bytes_per_sec: f64,
    pub master_seed: u64,
}

impl PoetConfig {
    pub fn new(n: u32, l: u32, master_seed: u64) -> Self {
        PoetConfig {
            n,
            l,
            block_time: SimDuration::from_secs(90),
            block_size: 2 * 1024 * 1024,
            delay: DelayModel::default(),
            bandwidth_bytes_per_sec: 25e6,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<(), PoetError> {
        if self.n == 0 {
            return Err(PoetError::InvalidParams("need at least one node".into()));
        }
        if self.block_time.is_zero() {
            return Err(PoetError::InvalidParams("block time must be positive".into()));
        }
        if !(self.bandwidth_bytes_per_sec > 0.0) {
            return Err(PoetError::InvalidParams("bandwidth must be positive".into()));
        }
        self.delay
            .validate()
            .map_err(PoetError::InvalidParams)
    }

    fn transmission(&self) -> SimDuration {
        SimDuration::from_secs_f64(self.block_size as f64 / self.bandwidth_bytes_per_sec)
    }
}

/// Fresh enclaves for this config; waits cost nothing here, so the latency
/// table is zeroed.
fn build_enclaves(cfg: &PoetConfig, seed: u64) -> Vec<Enclave> {
    (0..cfg.n)
        .map(|i| {
            Enclave::new(
                NodeId(i),
                seed,
                SimTime::ZERO,
                LatencyTable::zero(),
                SimDuration::ZERO,
                0,
            )
        })
        .collect()
}

/// One synchronized election round: every node arms a wait at time zero
/// and queries its enclave at expiry. Returns all certificate holders in
/// wait order (the first entry is the round's leader; the rest are the
/// potential fork makers).
pub fn run_poet_round(
    cfg: &PoetConfig,
    seed: u64,
) -> Result<Vec<(NodeId, SimDuration)>, PoetError> {
    cfg.validate()?;
    let mut enclaves = build_enclaves(cfg, seed);
    let mut winners = round_winners(&mut enclaves, cfg.l, cfg.block_time, SimTime::ZERO);
    if winners.is_empty() {
        return Err(PoetError::NoWinner);
    }
    winners.sort_by_key(|&(node, wait)| (wait, node));
    Ok(winners)
}

fn round_winners(
    enclaves: &mut [Enclave],
    l: u32,
    block_time: SimDuration,
    now: SimTime,
) -> Vec<(NodeId, SimDuration)> {
    enclaves
        .iter_mut()
        .filter_map(|e| {
            let wait = e.poet_request_wait(now, block_time);
            e.poet_certificate(now + wait, l)
                .expect("wait elapsed")
                .map(|cert| (cert.node_id, cert.wait_time))
        })
        .collect()
}

/// Certificate-holder counts over repeated synchronized rounds; empty
/// rounds count zero. The mean estimates `n * 2^-l`.
pub fn competitor_counts(cfg: &PoetConfig, rounds: u32) -> Result<Vec<u32>, PoetError> {
    cfg.validate()?;
    let mut enclaves = build_enclaves(cfg, cfg.master_seed);
    let mut now = SimTime::ZERO;
    Ok((0..rounds)
        .map(|_| {
            let winners = round_winners(&mut enclaves, cfg.l, cfg.block_time, now);
            now += cfg.block_time * 64;
            winners.len() as u32
        })
        .collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PoetBlock {
    digest: Digest32,
    parent: Digest32,
    height: u64,
    producer: NodeId,
    produced_at: SimTime,
    cert: WaitCertificate,
}

/// (produced_at, digest): earlier blocks win equal-height comparisons
/// everywhere, so quiesced nodes converge on one tip.
fn block_rank(b: &PoetBlock) -> (SimTime, Digest32) {
    (b.produced_at, b.digest)
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
enum PoetEvent {
    /// Wait expiry; stale generations are ignored.
    Wake { node: NodeId, generation: u64 },
    Deliver { node: NodeId, block: Digest32 },
}

struct NodeView {
    tip: Digest32,
    tip_height: u64,
    tip_rank: (SimTime, Digest32),
    generation: u64,
    known: BTreeSet<Digest32>,
    /// Blocks whose parent has not arrived yet, keyed by the parent.
    orphans: BTreeMap<Digest32, Vec<Digest32>>,
}

/// Outcome of a chain simulation run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StaleReport {
    pub produced: u64,
    /// Blocks on the canonical branch (genesis excluded).
    pub canonical: u64,
    /// `(produced - canonical) / produced`.
    pub stale_rate: f64,
    /// Simulated time at which the last block was produced.
    pub elapsed: SimTime,
    /// Canonical bytes per simulated second.
    pub throughput_bytes_per_sec: f64,
    /// Every node's quiesced tip equals the canonical leaf.
    pub converged: bool,
}

/// Runs the longest-chain protocol until `rounds` blocks have been
/// produced, lets deliveries quiesce, and reports the stale fraction.
pub fn measure_stale_rate(cfg: &PoetConfig, rounds: u64) -> Result<StaleReport, PoetError> {
    cfg.validate()?;
    if rounds == 0 {
        return Err(PoetError::InvalidParams("need at least one round".into()));
    }
    let mut enclaves = build_enclaves(cfg, cfg.master_seed);
    let registry: EnclaveRegistry = enclaves
        .iter()
        .map(|e| (e.node_id(), e.verifying_key()))
        .collect();
    let mut delay_rng = ChaCha20Rng::from_seed(derive_seed(cfg.master_seed, "poet-delay", 0));

    let genesis_digest = digest_of(&("poet-genesis", cfg.master_seed));
    let genesis = PoetBlock {
        digest: genesis_digest,
        parent: genesis_digest,
        height: 0,
        producer: NodeId(u32::MAX),
        produced_at: SimTime::ZERO,
        cert: WaitCertificate {
            node_id: NodeId(u32::MAX),
            round: 0,
            wait_time: SimDuration::ZERO,
            q: 0,
            sig: crate::crypto::sign_obj(
                &crate::crypto::signing_key_from_seed(derive_seed(cfg.master_seed, "poet-genesis", 0)),
                &"genesis",
            ),
        },
    };
    let mut tree: BTreeMap<Digest32, PoetBlock> = [(genesis_digest, genesis.clone())].into();
    // signatures are objective, so one verification per block serves every
    // receiving node
    let mut verified: BTreeSet<Digest32> = [genesis_digest].into();

    let mut queue: BinaryHeap<Reverse<(SimTime, u64, PoetEvent)>> = BinaryHeap::new();
    let mut next_seq = 0u64;
    let mut views: Vec<NodeView> = (0..cfg.n)
        .map(|_| NodeView {
            tip: genesis_digest,
            tip_height: 0,
            tip_rank: block_rank(&genesis),
            generation: 0,
            known: [genesis_digest].into(),
            orphans: BTreeMap::new(),
        })
        .collect();

    let mut arm = |views: &mut Vec<NodeView>,
                   enclaves: &mut Vec<Enclave>,
                   queue: &mut BinaryHeap<Reverse<(SimTime, u64, PoetEvent)>>,
                   next_seq: &mut u64,
                   node: NodeId,
                   now: SimTime| {
        let view = &mut views[node.0 as usize];
        view.generation += 1;
        let wait = enclaves[node.0 as usize].poet_request_wait(now, cfg.block_time);
        queue.push(Reverse((
            now + wait,
            *next_seq,
            PoetEvent::Wake {
                node,
                generation: view.generation,
            },
        )));
        *next_seq += 1;
    };

    for i in 0..cfg.n {
        arm(&mut views, &mut enclaves, &mut queue, &mut next_seq, NodeId(i), SimTime::ZERO);
    }

    let mut produced = 0u64;
    let mut last_production = SimTime::ZERO;
    let transmission = cfg.transmission();

    while let Some(Reverse((now, _, event))) = queue.pop() {
        match event {
            PoetEvent::Wake { node, generation } => {
                if views[node.0 as usize].generation != generation || produced >= rounds {
                    continue;
                }
                let cert = enclaves[node.0 as usize]
                    .poet_certificate(now, cfg.l)
                    .expect("wake fires at the armed deadline");
                let Some(cert) = cert else {
                    // filter missed: redraw for the same height
                    arm(&mut views, &mut enclaves, &mut queue, &mut next_seq, node, now);
                    continue;
                };
                let view = &views[node.0 as usize];
                let block = PoetBlock {
                    digest: digest_of(&("poet-block", view.tip, view.tip_height + 1, node, cert.round)),
                    parent: view.tip,
                    height: view.tip_height + 1,
                    producer: node,
                    produced_at: now,
                    cert,
                };
                produced += 1;
                last_production = now;
                tree.insert(block.digest, block.clone());
                verified.insert(block.digest);
                for peer in 0..cfg.n {
                    let at = if peer == node.0 {
                        now
                    } else {
                        now + delay_rng_delay(&cfg.delay, node.0, peer, &mut delay_rng) + transmission
                    };
                    queue.push(Reverse((
                        at,
                        next_seq,
                        PoetEvent::Deliver {
                            node: NodeId(peer),
                            block: block.digest,
                        },
                    )));
                    next_seq += 1;
                }
            }
            PoetEvent::Deliver { node, block } => {
                let entry = tree.get(&block).expect("deliveries reference tree blocks").clone();
                if !verified.contains(&block) {
                    let ok = registry
                        .get(&entry.cert.node_id)
                        .is_some_and(|key| verify_wait_certificate(&entry.cert, key));
                    if !ok {
                        continue;
                    }
                    verified.insert(block);
                }
                let view = &mut views[node.0 as usize];
                if !view.known.insert(block) {
                    continue;
                }
                if !view.known.contains(&entry.parent) {
                    view.orphans.entry(entry.parent).or_default().push(block);
                    continue;
                }
                // connect this block and any orphans it unblocks, tracking
                // the best newly reachable tip
                let mut frontier = vec![block];
                let mut best: Option<PoetBlock> = None;
                while let Some(d) = frontier.pop() {
                    let b = tree.get(&d).expect("known blocks are in the tree");
                    if best
                        .as_ref()
                        .map_or(true, |c| (b.height, Reverse(block_rank(b))) > (c.height, Reverse(block_rank(c))))
                    {
                        best = Some(b.clone());
                    }
                    if let Some(children) = view.orphans.remove(&d) {
                        frontier.extend(children);
                    }
                }
                let best = best.expect("frontier starts non-empty");
                let better = best.height > view.tip_height
                    || (best.height == view.tip_height && block_rank(&best) < view.tip_rank);
                if better && produced < rounds {
                    view.tip = best.digest;
                    view.tip_height = best.height;
                    view.tip_rank = block_rank(&best);
                    let node_id = node;
                    arm(&mut views, &mut enclaves, &mut queue, &mut next_seq, node_id, now);
                } else if better {
                    // production target reached: adopt without re-arming so
                    // the run quiesces
                    view.tip = best.digest;
                    view.tip_height = best.height;
                    view.tip_rank = block_rank(&best);
                    view.generation += 1;
                }
            }
        }
    }

    let canonical_leaf = tree
        .values()
        .max_by_key(|b| (b.height, Reverse(block_rank(b))))
        .expect("tree holds at least genesis");
    let converged = views.iter().all(|v| v.tip == canonical_leaf.digest);
    let mut canonical = 0u64;
    let mut cursor = canonical_leaf;
    while cursor.height > 0 {
        canonical += 1;
        cursor = &tree[&cursor.parent];
    }
    let elapsed = last_production;
    let secs = elapsed.as_secs_f64();
    Ok(StaleReport {
        produced,
        canonical,
        stale_rate: (produced - canonical) as f64 / produced as f64,
        elapsed,
        throughput_bytes_per_sec: if secs > 0.0 {
            canonical as f64 * cfg.block_size as f64 / secs
        } else {
            0.0
        },
        converged,
    })
}

fn delay_rng_delay(
    model: &DelayModel,
    from: u32,
    to: u32,
    rng: &mut ChaCha20Rng,
) -> SimDuration {
    model.sample(from as usize, to as usize, rng)
}
