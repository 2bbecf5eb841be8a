//! Shard formation and sizing analysis.
//!
//! Pure combinatorics for committee sizing (hypergeometric tail bounds),
//! epoch-transition risk, beacon repeat probability, cross-shard touch
//! probability, plus the deterministic committee assignment and the batched
//! reconfiguration schedule. Everything here is a pure function of its
//! inputs; the distributed beacon round that produces `rnd` lives in
//! [`run_beacon_round`] and executes on the simulated network.

use crate::crypto::Digest32;
use crate::ids::{CommitteeId, Epoch, NodeId};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum ShardformError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("no committee size within bounds meets the target")]
    Infeasible,
}

fn ln_choose(a: u64, b: u64) -> f64 {
    if b > a {
        f64::NEG_INFINITY
    } else {
        ln_gamma((a + 1) as f64) - ln_gamma((b + 1) as f64) - ln_gamma((a - b + 1) as f64)
    }
}

/// Probability that a uniformly drawn committee of `n` from a network of
/// `network` nodes containing `byz` Byzantine ones has at least `f` Byzantine
/// members: Pr[X >= f] for X hypergeometric. Computed from the first tail
/// term in log space followed by an exact multiplicative recurrence, so
/// magnitudes near 2^-20 and far below carry full precision.
pub fn faulty_committee_probability(
    network: u64,
    byz: u64,
    n: u64,
    f: u64,
) -> Result<f64, ShardformError> {
    if byz > network || n == 0 || n > network || f > n {
        return Err(ShardformError::InvalidParams(format!(
            "network={network} byz={byz} n={n} f={f}"
        )));
    }
    if f == 0 {
        return Ok(1.0);
    }
    // drawing more than the honest pool forces at least n - (N - F)
    // Byzantine members
    if f <= n.saturating_sub(network - byz) {
        return Ok(1.0);
    }
    let lo = f.max(n.saturating_sub(network - byz));
    let hi = n.min(byz);
    if lo > hi {
        return Ok(0.0);
    }
    let ln_first = ln_choose(byz, lo) + ln_choose(network - byz, n - lo) - ln_choose(network, n);
    let mut term = ln_first.exp();
    let mut sum = term;
    for x in lo..hi {
        // x >= n - (network - byz) keeps this denominator positive
        let ratio = ((byz - x) as f64 * (n - x) as f64)
            / ((x + 1) as f64 * (network - byz + x + 1 - n) as f64);
        term *= ratio;
        sum += term;
        if term < sum * 1e-18 {
            break;
        }
    }
    Ok(sum.min(1.0))
}

/// How many Byzantine members a committee tolerates before it counts as
/// faulty.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Resilience {
    /// Safe while fewer than half are Byzantine (attested-log protocols).
    Half,
    /// Safe while fewer than a third are Byzantine (classical BFT).
    Third,
}

impl Resilience {
    fn denominator(self) -> u64 {
        match self {
            Resilience::Half => 2,
            Resilience::Third => 3,
        }
    }

    /// Tail start for the sizing bound: the committee counts as faulty when
    /// the Byzantine draw reaches the real-valued bound (n-1)/den, i.e. at
    /// X >= ceil((n-1)/den) — the published-inequality reading, which
    /// reproduces the published sizes. Floored at one: a committee with
    /// zero Byzantine members is never faulty.
    pub fn violation_threshold(self, n: u64) -> u64 {
        let den = self.denominator();
        ((n - 1).div_ceil(den)).max(1)
    }

    /// Nodes tolerated by the consensus protocol at committee size n.
    pub fn tolerated(self, n: u64) -> u64 {
        (n - 1) / self.denominator()
    }
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct SizingQuery {
    pub network_size: u64,
    /// Adversary fraction s in [0, 1); the Byzantine count is floor(s*N).
    pub adversary_fraction: f64,
    pub resilience: Resilience,
    pub target: f64,
}

/// Committee sizes beyond this are reported infeasible rather than scanned;
/// the calculator sizes committees, not whole-network quorums.
pub const MAX_COMMITTEE_SCAN: u64 = 20_000;

/// Smallest committee size n whose faulty-committee probability meets the
/// query target.
pub fn min_committee_size(query: &SizingQuery) -> Result<u64, ShardformError> {
    let SizingQuery {
        network_size: network,
        adversary_fraction: s,
        resilience,
        target,
    } = *query;
    if network == 0 || !(0.0..1.0).contains(&s) || !(target > 0.0 && target <= 1.0) {
        return Err(ShardformError::InvalidParams(format!(
            "network={network} s={s} target={target}"
        )));
    }
    let byz = (s * network as f64).floor() as u64;
    for n in 1..=network.min(MAX_COMMITTEE_SCAN) {
        let f = resilience.violation_threshold(n);
        if f > n {
            continue;
        }
        if faulty_committee_probability(network, byz, n, f)? <= target {
            return Ok(n);
        }
    }
    Err(ShardformError::Infeasible)
}

/// Union bound on any intermediate committee being faulty during a batched
/// epoch transition: m * Pr[X >= f] with m = ceil(n(k-1)/(kB)) intermediate
/// committees.
pub fn transition_failure_probability(
    network: u64,
    byz: u64,
    n: u64,
    f: u64,
    k: u64,
    b: u64,
) -> Result<f64, ShardformError> {
    if k == 0 || b == 0 {
        return Err(ShardformError::InvalidParams(format!("k={k} b={b}")));
    }
    let m = (n * (k - 1)).div_ceil(k * b).max(1);
    let p = faulty_committee_probability(network, byz, n, f)?;
    Ok((m as f64 * p).min(1.0))
}

/// Probability that no participant's l-bit filter draw hits zero in an
/// epoch, forcing a repeat: (1 - 2^-l)^N. `l` may be fractional.
pub fn repeat_probability(l: f64, participants: u64) -> Result<f64, ShardformError> {
    if l < 0.0 || participants == 0 {
        return Err(ShardformError::InvalidParams(format!(
            "l={l} participants={participants}"
        )));
    }
    let p_hit = (-l).exp2();
    Ok((1.0 - p_hit).powi(participants.try_into().unwrap_or(i32::MAX)))
}

/// Probability distribution of the number of distinct shards touched by a
/// transaction with `d` uniformly, independently mapped arguments over `k`
/// shards. Index i holds Pr[exactly i+1 shards], i in 0..min(d,k).
///
/// Small spaces are enumerated exhaustively; larger ones use the exact
/// surjection count Pr[x] = C(k,x) * Surj(d,x) / k^d.
pub fn cross_shard_probability(d: u32, k: u64) -> Result<Vec<f64>, ShardformError> {
    if d == 0 || k == 0 {
        return Err(ShardformError::InvalidParams(format!("d={d} k={k}")));
    }
    if (d as f64) * (k as f64).log2() <= 24.0 {
        return Ok(cross_shard_by_enumeration(d, k));
    }
    if (d as f64) * (k as f64).log2() > 100.0 {
        return Err(ShardformError::InvalidParams(
            "argument-assignment space exceeds exact integer range".into(),
        ));
    }
    let x_max = (d as u64).min(k);
    let total = (k as i128).pow(d);
    let mut dist = Vec::with_capacity(x_max as usize);
    for x in 1..=x_max {
        let surj = surjection_count(d, x);
        let ways = choose_i128(k, x) * surj;
        dist.push(ways as f64 / total as f64);
    }
    Ok(dist)
}

/// Number of functions from d arguments onto exactly x named shards:
/// Surj(d, x) = sum_i (-1)^i C(x,i) (x-i)^d.
fn surjection_count(d: u32, x: u64) -> i128 {
    let mut total: i128 = 0;
    for i in 0..=x {
        let term = choose_i128(x, i) * ((x - i) as i128).pow(d);
        if i % 2 == 0 {
            total += term;
        } else {
            total -= term;
        }
    }
    total
}

fn choose_i128(a: u64, b: u64) -> i128 {
    if b > a {
        return 0;
    }
    let b = b.min(a - b);
    let mut acc: i128 = 1;
    for i in 0..b {
        acc = acc * (a - i) as i128 / (i + 1) as i128;
    }
    acc
}

fn cross_shard_by_enumeration(d: u32, k: u64) -> Vec<f64> {
    let x_max = (d as u64).min(k) as usize;
    let mut counts = vec![0u64; x_max + 1];
    let mut assignment = vec![0u64; d as usize];
    let total = (k as u64).pow(d);
    let mut shards = Vec::with_capacity(d as usize);
    for _ in 0..total {
        shards.clear();
        shards.extend_from_slice(&assignment);
        shards.sort_unstable();
        shards.dedup();
        counts[shards.len()] += 1;
        // odometer increment over base-k tuples
        for slot in assignment.iter_mut() {
            *slot += 1;
            if *slot < k {
                break;
            }
            *slot = 0;
        }
    }
    counts[1..]
        .iter()
        .map(|&c| c as f64 / total as f64)
        .collect()
}

/// Epoch-scoped committee assignment: the rnd-seeded permutation cut into
/// near-equal contiguous chunks.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct CommitteeAssignment {
    pub epoch: Epoch,
    pub permutation: Vec<NodeId>,
    pub committees: Vec<Vec<NodeId>>,
    /// The committee coordinating cross-shard commits and reconfiguration;
    /// always the first chunk of the permutation.
    pub reference: CommitteeId,
}

impl CommitteeAssignment {
    pub fn committee_of(&self, node: NodeId) -> Option<CommitteeId> {
        self.committees
            .iter()
            .position(|c| c.contains(&node))
            .map(|i| i as CommitteeId)
    }
}

/// Deterministically shuffles `nodes` with a ChaCha20 stream keyed by the
/// 256-bit `rnd` (the fixed, documented PRNG for assignment) and cuts the
/// permutation into k chunks whose sizes differ by at most one; the first
/// `N mod k` chunks take the extra member.
pub fn assign_committees(
    rnd: &Digest32,
    nodes: &[NodeId],
    k: u64,
    epoch: Epoch,
) -> Result<CommitteeAssignment, ShardformError> {
    if k == 0 || (nodes.len() as u64) < k {
        return Err(ShardformError::InvalidParams(format!(
            "k={k} nodes={}",
            nodes.len()
        )));
    }
    let mut permutation = nodes.to_vec();
    let mut rng = ChaCha20Rng::from_seed(rnd.0);
    permutation.shuffle(&mut rng);
    let n = permutation.len() as u64;
    let base = n / k;
    let extra = (n % k) as usize;
    let mut committees = Vec::with_capacity(k as usize);
    let mut cursor = 0usize;
    for i in 0..k as usize {
        let size = base as usize + usize::from(i < extra);
        committees.push(permutation[cursor..cursor + size].to_vec());
        cursor += size;
    }
    Ok(CommitteeAssignment {
        epoch,
        permutation,
        committees,
        reference: 0,
    })
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Move {
    pub node: NodeId,
    pub from: CommitteeId,
    pub to: CommitteeId,
}

/// Ordered batches of node moves between two assignments. A move counts
/// against both its source and destination committee while in flight, and
/// each batch completes before the next starts.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct TransitionSchedule {
    pub from_epoch: Epoch,
    pub to_epoch: Epoch,
    pub batches: Vec<Vec<Move>>,
    pub b: u32,
}

/// Packs the transitioning nodes (ordered by the new assignment's
/// permutation, i.e. by rnd) into batches that never put more than `b`
/// members of any committee in transit at once.
pub fn reconfiguration_schedule(
    old: &CommitteeAssignment,
    new: &CommitteeAssignment,
    b: u32,
) -> Result<TransitionSchedule, ShardformError> {
    if b == 0 {
        return Err(ShardformError::InvalidParams("b=0".into()));
    }
    let mut old_sorted: Vec<NodeId> = old.permutation.clone();
    let mut new_sorted: Vec<NodeId> = new.permutation.clone();
    old_sorted.sort_unstable();
    new_sorted.sort_unstable();
    if old_sorted != new_sorted {
        return Err(ShardformError::InvalidParams(
            "assignments cover different node sets".into(),
        ));
    }
    let mut pending: Vec<Move> = new
        .permutation
        .iter()
        .filter_map(|&node| {
            let from = old.committee_of(node).expect("same node set");
            let to = new.committee_of(node).expect("member of new");
            (from != to).then_some(Move { node, from, to })
        })
        .collect();
    let mut batches = Vec::new();
    while !pending.is_empty() {
        let mut in_transit: BTreeMap<CommitteeId, u32> = BTreeMap::new();
        let mut batch = Vec::new();
        let mut deferred = Vec::new();
        for mv in pending {
            let from_load = in_transit.get(&mv.from).copied().unwrap_or(0);
            let to_load = in_transit.get(&mv.to).copied().unwrap_or(0);
            if from_load < b && to_load < b {
                *in_transit.entry(mv.from).or_default() += 1;
                *in_transit.entry(mv.to).or_default() += 1;
                batch.push(mv);
            } else {
                deferred.push(mv);
            }
        }
        batches.push(batch);
        pending = deferred;
    }
    Ok(TransitionSchedule {
        from_epoch: old.epoch,
        to_epoch: new.epoch,
        batches,
        b,
    })
}

/// Replays a schedule, checking the in-transit bound per committee at every
/// instant and that the moves transform `old` exactly into `new`.
pub fn validate_schedule(
    old: &CommitteeAssignment,
    new: &CommitteeAssignment,
    schedule: &TransitionSchedule,
) -> Result<(), String> {
    let mut membership: BTreeMap<NodeId, CommitteeId> = old
        .committees
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.iter().map(move |&n| (n, i as CommitteeId)))
        .collect();
    for (i, batch) in schedule.batches.iter().enumerate() {
        let mut in_transit: BTreeMap<CommitteeId, u32> = BTreeMap::new();
        for mv in batch {
            *in_transit.entry(mv.from).or_default() += 1;
            *in_transit.entry(mv.to).or_default() += 1;
            match membership.get(&mv.node) {
                Some(c) if *c == mv.from => {}
                other => return Err(format!("batch {i}: {:?} not in {}", other, mv.from)),
            }
            membership.insert(mv.node, mv.to);
        }
        if let Some((c, load)) = in_transit.iter().find(|(_, &l)| l > schedule.b) {
            return Err(format!("batch {i}: committee {c} has {load} in transit"));
        }
    }
    for (i, committee) in new.committees.iter().enumerate() {
        for node in committee {
            if membership.get(node) != Some(&(i as CommitteeId)) {
                return Err(format!("node {node} did not arrive in committee {i}"));
            }
        }
    }
    Ok(())
}
