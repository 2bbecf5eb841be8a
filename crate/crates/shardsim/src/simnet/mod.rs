//! Deterministic discrete-event network simulation.
//!
//! One simulation instance is a single-threaded event loop over a priority
//! queue of `(time, actor, insertion sequence)`-ordered events. Everything
//! random flows from the master seed through purpose-labelled substreams,
//! so a run is a pure function of its configuration: identical
//! configurations produce byte-identical traces. Parallel instances share
//! nothing.
//!
//! Hosts wrap the protocol state machines ([`crate::consensus`]): they
//! model ingress queues, processing busyness from metered crypto and
//! enclave costs, reply routing and the reference-committee relay for
//! cross-shard commits. The engine itself only moves messages (through a
//! [`DelayModel`]), fires timers, applies link-level adversary behaviors,
//! and records the [`Trace`] and [`Metrics`].

mod beacon;
mod delay;
mod hosts;
mod metrics;
mod scenarios;
mod trace;

pub use beacon::{run_beacon_round, BeaconExhausted, BeaconRoundConfig, BeaconRoundReport};
pub use delay::{zone_latency_ms, DelayModel, Region};
pub use hosts::{
    ClientPlan, ClientTargets, CommitteeSetup, Directive, Host, LoopMode, NodeHost, ReplyMsg,
    Topology, TransitionSetup, WireMsg, WirePayload, COORDINATOR_CLIENT,
};
pub use metrics::Metrics;
pub use scenarios::{
    check_committee_agreement, check_conservation, check_locks_released, check_recovery_floor,
    cross_payments, cross_shard_scenario, epoch_transition_scenario, equivocation_scenario,
    leader_failover_scenario, payments, rollback_recovery_scenario, shard_accounts,
    sharded_world, single_committee, CrossShardLoad, LeaderFault, OracleError, ReconfigMode,
    ScheduleError, ShardedSpec, TransitionSpec,
};
pub use trace::{short_digest, Trace, TraceError, TraceLevel, TraceRecord};

use crate::crypto::derive_seed;
use crate::ids::{ActorId, ClientId, CommitteeId, NodeId};
use crate::ledger::TxId;
use crate::time::{SimDuration, SimTime};
use hosts::HostTimer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("invalid delay model: {0}")]
    BadDelay(String),
    #[error("duration must be positive")]
    ZeroDuration,
    #[error("retransmission timeout must be positive")]
    ZeroRetransmit,
    #[error("metrics window must be positive")]
    ZeroWindow,
    #[error("invalid topology: {0}")]
    BadTopology(String),
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SpecError {
    #[error("byzantine set of {got} exceeds the allowed floor({s} * {n}) = {allowed}")]
    TooManyByzantine { got: usize, allowed: usize, s: f64, n: usize },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown client {0}")]
    UnknownClient(ClientId),
    #[error("behavior attached to honest node {0}")]
    BehaviorOnHonest(NodeId),
    #[error("drop probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("restart at {restart_at_ms}ms precedes crash at {crash_at_ms}ms")]
    RestartBeforeCrash { crash_at_ms: u64, restart_at_ms: u64 },
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SimError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("adversary spec: {0}")]
    Spec(#[from] SpecError),
    #[error("schedule: {0}")]
    Schedule(#[from] ScheduleError),
    #[error("consensus config: {0}")]
    Consensus(#[from] crate::consensus::ConfigError),
}

/// Node-level misbehavior. Every variant attaches only to members of the
/// byzantine set.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub enum NodeBehavior {
    /// As leader, propose two conflicting blocks for the same sequence,
    /// one to each half of the committee.
    EquivocateSeq,
    /// Fall permanently silent at this time.
    Crash { at_ms: u64 },
    /// Lose each message sent or received with this probability.
    Drop { p: f64 },
    /// Hold every outbound message to the delay model's maximum.
    DelayMax,
    /// Crash, then restart from an old sealed enclave state and run the
    /// recovery protocol.
    StaleSealOnRestart { crash_at_ms: u64, restart_at_ms: u64 },
    /// In beacon rounds, send an owned certificate to a strict subset of
    /// the committee.
    SelectiveBeaconSend,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum ClientBehavior {
    /// Submit transactions but never retransmit or follow up.
    StallingClient,
}

/// Which actors misbehave and how. `byzantine` is bounded by `⌊s·N⌋` over
/// the node population N.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct AdversarySpec {
    pub byzantine: BTreeSet<NodeId>,
    /// Adversary fraction bound the byzantine set is checked against.
    pub s: f64,
    pub node_behaviors: BTreeMap<NodeId, Vec<NodeBehavior>>,
    pub client_behaviors: BTreeMap<ClientId, Vec<ClientBehavior>>,
}

impl Default for AdversarySpec {
    fn default() -> Self {
        AdversarySpec {
            byzantine: BTreeSet::new(),
            s: 0.25,
            node_behaviors: BTreeMap::new(),
            client_behaviors: BTreeMap::new(),
        }
    }
}

impl AdversarySpec {
    pub fn validate(
        &self,
        nodes: &BTreeSet<NodeId>,
        clients: &BTreeSet<ClientId>,
    ) -> Result<(), SpecError> {
        let allowed = (self.s * nodes.len() as f64).floor() as usize;
        if self.byzantine.len() > allowed {
            return Err(SpecError::TooManyByzantine {
                got: self.byzantine.len(),
                allowed,
                s: self.s,
                n: nodes.len(),
            });
        }
        for id in &self.byzantine {
            if !nodes.contains(id) {
                return Err(SpecError::UnknownNode(*id));
            }
        }
        for (id, behaviors) in &self.node_behaviors {
            if !self.byzantine.contains(id) {
                return Err(SpecError::BehaviorOnHonest(*id));
            }
            for b in behaviors {
                match b {
                    NodeBehavior::Drop { p } => {
                        if !(0.0..=1.0).contains(p) {
                            return Err(SpecError::BadProbability(*p));
                        }
                    }
                    NodeBehavior::StaleSealOnRestart {
                        crash_at_ms,
                        restart_at_ms,
                    } => {
                        if restart_at_ms <= crash_at_ms {
                            return Err(SpecError::RestartBeforeCrash {
                                crash_at_ms: *crash_at_ms,
                                restart_at_ms: *restart_at_ms,
                            });
                        }
                    }
                    _ => {}
                }
            }
        }
        for id in self.client_behaviors.keys() {
            if !clients.contains(id) {
                return Err(SpecError::UnknownClient(*id));
            }
        }
        Ok(())
    }
}

/// Full configuration of one simulation instance.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub master_seed: u64,
    pub delay: DelayModel,
    /// Synchronous phase bound for beacon rounds: how long an honest node
    /// waits for (re)broadcasts before locking in a value.
    pub sync_delta: SimDuration,
    /// Base client retransmission timeout; backs off exponentially with a
    /// capped factor.
    pub retransmit_timeout: SimDuration,
    pub adversary: AdversarySpec,
    pub duration: SimDuration,
    pub trace_level: TraceLevel,
    pub metrics_window: SimDuration,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            master_seed: 0,
            delay: DelayModel::default(),
            // lower end of the measured wide-area epoch bound
            sync_delta: SimDuration::from_secs(6),
            retransmit_timeout: SimDuration::from_secs(2),
            adversary: AdversarySpec::default(),
            duration: SimDuration::from_secs(30),
            trace_level: TraceLevel::Protocol,
            metrics_window: SimDuration::from_secs(1),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.delay.validate().map_err(ConfigError::BadDelay)?;
        if self.duration.is_zero() {
            return Err(ConfigError::ZeroDuration);
        }
        if self.retransmit_timeout.is_zero() {
            return Err(ConfigError::ZeroRetransmit);
        }
        if self.metrics_window.is_zero() {
            return Err(ConfigError::ZeroWindow);
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<SimConfig, String> {
        let cfg: SimConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

/// Validates a behavior specification against the topology and installs it
/// into the configuration.
pub fn inject_adversary(
    config: &mut SimConfig,
    topology: &Topology,
    spec: AdversarySpec,
) -> Result<(), SpecError> {
    spec.validate(&topology.node_ids(), &topology.client_ids())?;
    config.adversary = spec;
    Ok(())
}

enum EventPayload {
    Deliver(Arc<WireMsg>),
    Timer(HostTimer),
}

struct QueuedEvent {
    at: SimTime,
    actor: ActorId,
    seq: u64,
    payload: EventPayload,
}

impl QueuedEvent {
    fn key(&self) -> (SimTime, ActorId, u64) {
        (self.at, self.actor, self.seq)
    }
}

impl PartialEq for QueuedEvent {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for QueuedEvent {}
impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueuedEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

/// Per-actor link faults resolved from the adversary spec, applied by the
/// engine on every send.
#[derive(Clone, Copy, Default)]
struct LinkFault {
    drop_p: Option<f64>,
    delay_max: bool,
}

/// The engine state hosts interact with: clock, queue, randomness, trace,
/// metrics and link faults.
pub struct SimCore {
    cfg: SimConfig,
    now: SimTime,
    queue: BinaryHeap<Reverse<QueuedEvent>>,
    next_seq: u64,
    delay_rng: ChaCha20Rng,
    fault_rng: ChaCha20Rng,
    trace: Trace,
    metrics: Metrics,
    /// Global position of each actor, for region assignment.
    actor_index: BTreeMap<ActorId, usize>,
    link_faults: BTreeMap<ActorId, LinkFault>,
    settled: BTreeSet<TxId>,
}

impl SimCore {
    fn new(cfg: SimConfig, actors: &BTreeMap<ActorId, Host>) -> Self {
        let actor_index = actors
            .keys()
            .enumerate()
            .map(|(i, id)| (*id, i))
            .collect();
        let mut link_faults: BTreeMap<ActorId, LinkFault> = BTreeMap::new();
        for (node, behaviors) in &cfg.adversary.node_behaviors {
            let fault = link_faults.entry(ActorId::Node(*node)).or_default();
            for b in behaviors {
                match b {
                    NodeBehavior::Drop { p } => fault.drop_p = Some(*p),
                    NodeBehavior::DelayMax => fault.delay_max = true,
                    _ => {}
                }
            }
        }
        let trace = Trace::new(cfg.master_seed, cfg.trace_level);
        let metrics = Metrics::new(cfg.master_seed, cfg.duration, cfg.metrics_window);
        let delay_rng = ChaCha20Rng::from_seed(derive_seed(cfg.master_seed, "delay", 0));
        let fault_rng = ChaCha20Rng::from_seed(derive_seed(cfg.master_seed, "faults", 0));
        SimCore {
            cfg,
            now: SimTime::ZERO,
            queue: BinaryHeap::new(),
            next_seq: 0,
            delay_rng,
            fault_rng,
            trace,
            metrics,
            actor_index,
            link_faults,
            settled: BTreeSet::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub(crate) fn metrics_mut(&mut self) -> &mut Metrics {
        &mut self.metrics
    }

    fn push(&mut self, at: SimTime, actor: ActorId, payload: EventPayload) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(QueuedEvent {
            at,
            actor,
            seq,
            payload,
        }));
    }

    /// Sends `msg` with `departure` as the earliest time it leaves the
    /// sender (the sender's processing backlog), applying link faults and
    /// the delay model.
    pub(crate) fn send_at(&mut self, departure: SimTime, msg: WireMsg) {
        let from = msg.from;
        let to = msg.to;
        let sender_fault = self.link_faults.get(&from).copied().unwrap_or_default();
        let receiver_fault = self.link_faults.get(&to).copied().unwrap_or_default();
        for p in [sender_fault.drop_p, receiver_fault.drop_p].into_iter().flatten() {
            if self.fault_rng.gen::<f64>() < p {
                self.metrics.dropped_messages += 1;
                self.trace_full(from, "link-drop", format!("{} to {to}", msg.kind()));
                return;
            }
        }
        let from_idx = self.actor_index.get(&from).copied().unwrap_or(0);
        let to_idx = self.actor_index.get(&to).copied().unwrap_or(0);
        let delay = if sender_fault.delay_max {
            self.cfg.delay.max_delay()
        } else {
            self.cfg.delay.sample(from_idx, to_idx, &mut self.delay_rng)
        };
        let at = departure.max(self.now) + delay;
        self.trace_full(from, "send", format!("{} to {to}", msg.kind()));
        self.push(at, to, EventPayload::Deliver(Arc::new(msg)));
    }

    pub(crate) fn send(&mut self, msg: WireMsg) {
        self.send_at(self.now, msg);
    }

    pub(crate) fn arm(&mut self, actor: ActorId, delay: SimDuration, timer: HostTimer) {
        self.push(self.now + delay, actor, EventPayload::Timer(timer));
    }

    pub(crate) fn arm_at(&mut self, actor: ActorId, at: SimTime, timer: HostTimer) {
        self.push(at, actor, EventPayload::Timer(timer));
    }

    pub(crate) fn trace_protocol(&mut self, actor: ActorId, kind: &str, detail: String) {
        if self.cfg.trace_level >= TraceLevel::Protocol {
            self.trace.push(TraceRecord {
                at: self.now,
                actor,
                kind: kind.to_string(),
                detail,
                digest: None,
            });
        }
    }

    pub(crate) fn trace_full(&mut self, actor: ActorId, kind: &str, detail: String) {
        if self.cfg.trace_level >= TraceLevel::Full {
            self.trace.push(TraceRecord {
                at: self.now,
                actor,
                kind: kind.to_string(),
                detail,
                digest: None,
            });
        }
    }

    pub(crate) fn note_issued(&mut self) {
        self.metrics.issued += 1;
    }

    /// Records a user transaction reaching its terminal state. Deduplicated
    /// globally: replicas of one committee all execute the same
    /// transaction, but it settles once. Returns whether this call was the
    /// first.
    pub(crate) fn tally_settled(
        &mut self,
        txid: TxId,
        committee: CommitteeId,
        committed: bool,
    ) -> bool {
        if !self.settled.insert(txid) {
            return false;
        }
        if committed {
            self.metrics.committed += 1;
            self.metrics.bump_window(self.now);
            *self
                .metrics
                .committed_per_committee
                .entry(committee)
                .or_default() += 1;
        } else {
            self.metrics.aborted += 1;
        }
        true
    }

    pub(crate) fn record_latency(&mut self, sample: SimDuration) {
        self.metrics.latency_samples.push(sample);
    }

    pub(crate) fn note_drop(&mut self, actor: ActorId, kind: &str) {
        self.metrics.dropped_messages += 1;
        self.trace_full(actor, "queue-drop", kind.to_string());
    }

    pub(crate) fn note_equivocation_refusal(&mut self, actor: ActorId) {
        self.metrics.equivocation_refusals += 1;
        self.trace_protocol(actor, "equivocation-refused", String::new());
    }
}

/// Finished run: the ordered log, aggregate numbers, and the final world
/// for oracle inspection.
pub struct SimOutcome {
    pub trace: Trace,
    pub metrics: Metrics,
    pub world: World,
}

/// All actors after a run. Oracles read replica state from here.
pub struct World {
    pub hosts: BTreeMap<ActorId, Host>,
}

impl World {
    pub fn node(&self, id: NodeId) -> Option<&NodeHost> {
        match self.hosts.get(&ActorId::Node(id)) {
            Some(Host::Node(n)) => Some(n),
            _ => None,
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeHost> {
        self.hosts.values().filter_map(|h| match h {
            Host::Node(n) => Some(n),
            _ => None,
        })
    }

    pub fn committee_nodes(&self, committee: CommitteeId) -> Vec<&NodeHost> {
        self.nodes().filter(|n| n.committee() == committee).collect()
    }
}

/// Runs `topology` under `config` to the configured duration.
pub fn run_world(config: &SimConfig, topology: &Topology) -> Result<SimOutcome, SimError> {
    config.validate()?;
    config
        .adversary
        .validate(&topology.node_ids(), &topology.client_ids())?;
    let mut hosts = topology.build(config)?;
    let mut core = SimCore::new(config.clone(), &hosts);

    let ids: Vec<ActorId> = hosts.keys().copied().collect();
    for id in ids {
        let mut host = hosts.remove(&id).expect("listed");
        host.on_start(&mut core);
        hosts.insert(id, host);
    }

    while let Some(Reverse(ev)) = core.queue.pop() {
        if ev.at > core.cfg.duration_end() {
            break;
        }
        core.now = ev.at;
        let Some(mut host) = hosts.remove(&ev.actor) else {
            continue;
        };
        match ev.payload {
            EventPayload::Deliver(msg) => host.on_wire(&mut core, &msg),
            EventPayload::Timer(timer) => host.on_timer(&mut core, timer),
        }
        hosts.insert(ev.actor, host);
    }
    core.now = core.cfg.duration_end();

    let ids: Vec<ActorId> = hosts.keys().copied().collect();
    for id in ids {
        let mut host = hosts.remove(&id).expect("listed");
        host.finish(&mut core);
        hosts.insert(id, host);
    }
    core.metrics.finalize();

    Ok(SimOutcome {
        trace: core.trace,
        metrics: core.metrics,
        world: World { hosts },
    })
}

impl SimConfig {
    fn duration_end(&self) -> SimTime {
        SimTime::ZERO + self.duration
    }
}

/// Spec surface: runs a topology and returns the event log plus metrics.
pub fn run_simulation(
    config: &SimConfig,
    topology: &Topology,
) -> Result<(Trace, Metrics), SimError> {
    let outcome = run_world(config, topology)?;
    Ok((outcome.trace, outcome.metrics))
}
