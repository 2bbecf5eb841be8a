//! Simulation actors: protocol nodes, workload clients, and the epoch
//! transition orchestrator.
//!
//! A node host wraps a [`Replica`] and models the machine around it:
//! bounded ingress queues, a processor that is busy for the simulated cost
//! of each step, reply routing, crash/restart lifecycles, and the
//! cross-shard relay work committee members perform outside consensus
//! (prepare fan-out, vote collection, decision announcement). Clients issue
//! pre-planned transactions and settle on matching reply or decision
//! quorums. The orchestrator turns a [`TransitionSchedule`]'s batches into
//! roster directives.

use super::{NodeBehavior, SimCore, SimError};
use crate::consensus::{
    ClientRequest, ConsensusConfig, ConsensusMessage, CrossShardPolicy, Evidence, Output, Replica,
    ReplicaSetup, ReplicaTimer, SignedMsg, StableCheckpoint, ValidationPolicy,
};
use crate::coordination::{
    phase_txid, read_record, vote_txid, CrossShardTx, DecisionMsg, PrepareTxMsg, RcInput, RcState,
    Verdict, VoteQuorum, VoteReply,
};
use crate::crypto::{derive_seed, digest_of, signing_key_from_seed, Digest32};
use ed25519_dalek::{SigningKey, VerifyingKey};
use crate::enclave::{
    AppendProof, Enclave, EnclaveError, EnclaveRegistry, LatencyTable, LogId, QuorumProof,
    RecoveryEstimate, SealedState,
};
use crate::ids::{ActorId, ClientId, CommitteeId, Epoch, NodeId, Seq, ShardId, View};
use crate::ledger::{Block, LedgerState, Payload, Receipt, ReceiptStatus, Transaction, TxId};
use crate::shardform::Move;
use crate::time::{SimDuration, SimTime};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

/// Sentinel submitter for transactions a committee injects on its own
/// authority (phase operations, vote wrappers). Replicas never reply to it.
pub const COORDINATOR_CLIENT: ClientId = ClientId(u32::MAX);

/// Ingress queue capacity per class; arrivals beyond it are tail-dropped.
const QUEUE_CAP: usize = 4096;

/// Give up re-driving a registered cross-shard transaction after this many
/// attempts.
const REDRIVE_ATTEMPTS: u32 = 10;

/// Clients abandon a transaction after this many retransmissions.
const CLIENT_ATTEMPTS: u32 = 16;

/// Execution result sent back to the submitting client.
#[derive(Clone, Debug)]
pub struct ReplyMsg {
    pub txid: TxId,
    pub status: ReceiptStatus,
    pub seq: Seq,
    pub member: NodeId,
}

/// Roster directive from the orchestrator.
#[derive(Clone, Debug)]
pub enum Directive {
    /// Continue in the same committee under a changed roster.
    InstallRoster {
        committee: CommitteeId,
        roster: Vec<NodeId>,
        epoch: Epoch,
    },
    /// Leave the current committee and join `committee` as a fresh,
    /// state-syncing replica.
    BecomeMember {
        committee: CommitteeId,
        shard: Option<ShardId>,
        cfg: ConsensusConfig,
        roster: Vec<NodeId>,
        genesis: LedgerState,
        epoch: Epoch,
    },
}

/// Everything that travels between actors.
#[derive(Clone, Debug)]
pub enum WirePayload {
    /// Committee-internal consensus traffic.
    Consensus(SignedMsg),
    /// Client submission.
    Submit(ClientRequest),
    /// Execution result to a client.
    Reply(ReplyMsg),
    /// Reference-committee member dispatching a prepare to a shard member.
    PrepareShare(PrepareTxMsg),
    /// Shard member's verdict to a reference-committee member.
    Vote(VoteReply),
    /// Reference-committee member announcing a terminal decision.
    Decision(DecisionMsg),
    /// Restarted node asking peers where the committee stands.
    RecoveryQuery,
    /// Answer to a recovery query.
    RecoveryInfo {
        last_stable: Seq,
        stable: StableCheckpoint,
        view: View,
    },
    /// Orchestrator roster directive.
    Reconfigure(Directive),
}

#[derive(Clone, Debug)]
pub struct WireMsg {
    pub from: ActorId,
    pub to: ActorId,
    pub payload: WirePayload,
}

impl WireMsg {
    /// Short label for traces.
    pub fn kind(&self) -> &'static str {
        match &self.payload {
            WirePayload::Consensus(m) => m.body.kind(),
            WirePayload::Submit(_) => "submit",
            WirePayload::Reply(_) => "reply",
            WirePayload::PrepareShare(_) => "prepare-share",
            WirePayload::Vote(_) => "vote",
            WirePayload::Decision(_) => "decision",
            WirePayload::RecoveryQuery => "recovery-query",
            WirePayload::RecoveryInfo { .. } => "recovery-info",
            WirePayload::Reconfigure(_) => "reconfigure",
        }
    }
}

/// Host-level timers.
#[derive(Clone, Copy, Debug)]
pub enum HostTimer {
    /// Node processor became free; drain queues.
    Wake,
    /// Protocol timer forwarded to the replica.
    Replica(ReplicaTimer),
    Crash,
    Restart,
    /// Re-poll peers while recovering.
    RecoveryPoll,
    /// Reference committee: re-dispatch prepares for an unfinished
    /// transaction.
    Redrive { txid: TxId },
    /// Client: issue the next planned transaction.
    ClientIssue,
    /// Client: retransmission deadline for one transaction.
    ClientRetry { txid: TxId },
    /// Orchestrator: apply the next transition batch.
    Step,
}

/// Key, roster, and quorum knowledge shared by every node at build time and
/// updated by roster directives. Deriving keys from the master seed stands
/// in for the certificate directory a deployment would ship.
#[derive(Clone)]
pub(crate) struct Directory {
    pub master_seed: u64,
    pub verify_keys: BTreeMap<NodeId, VerifyingKey>,
    pub enclave_keys: EnclaveRegistry,
    pub rosters: BTreeMap<CommitteeId, Vec<NodeId>>,
    pub committee_shard: BTreeMap<CommitteeId, Option<ShardId>>,
    pub committee_cfg: BTreeMap<CommitteeId, ConsensusConfig>,
    pub shard_count: u32,
    /// A reference committee exists, so phase operations need certificates.
    pub has_rc: bool,
    pub table: LatencyTable,
    pub restart_guard: SimDuration,
}

impl Directory {
    fn rc_committee(&self) -> Option<CommitteeId> {
        self.committee_shard
            .iter()
            .find_map(|(c, s)| s.is_none().then_some(*c))
    }

    fn rc_members(&self) -> Vec<NodeId> {
        self.rc_committee()
            .and_then(|c| self.rosters.get(&c))
            .cloned()
            .unwrap_or_default()
    }

    /// Distinct reference-committee endorsements that prove an RC decision
    /// to an outsider: one more than its fault budget.
    fn rc_quorum(&self) -> usize {
        self.rc_committee()
            .and_then(|c| self.committee_cfg.get(&c))
            .map_or(usize::MAX, |cfg| (cfg.f + 1) as usize)
    }

    fn committee_of_shard(&self, shard: ShardId) -> Option<CommitteeId> {
        self.committee_shard
            .iter()
            .find_map(|(c, s)| (*s == Some(shard)).then_some(*c))
    }

    fn members_of_shard(&self, shard: ShardId) -> Vec<NodeId> {
        self.committee_of_shard(shard)
            .and_then(|c| self.rosters.get(&c))
            .cloned()
            .unwrap_or_default()
    }

    /// Matching verdicts that prove a shard committee's answer: one more
    /// than its fault budget.
    fn shard_quorum(&self, shard: ShardId) -> usize {
        self.committee_of_shard(shard)
            .and_then(|c| self.committee_cfg.get(&c))
            .map_or(usize::MAX, |cfg| (cfg.f + 1) as usize)
    }

    fn shard_quorums(&self) -> BTreeMap<ShardId, usize> {
        self.committee_shard
            .iter()
            .filter_map(|(c, s)| {
                let shard = (*s)?;
                let cfg = self.committee_cfg.get(c)?;
                Some((shard, (cfg.f + 1) as usize))
            })
            .collect()
    }

    fn roster_keys(&self, roster: &[NodeId]) -> BTreeMap<NodeId, VerifyingKey> {
        roster
            .iter()
            .filter_map(|id| self.verify_keys.get(id).map(|k| (*id, *k)))
            .collect()
    }

    fn policy_for(&self, shard: Option<ShardId>) -> ValidationPolicy {
        if !self.has_rc {
            return ValidationPolicy::AcceptAll;
        }
        let shard_members = self
            .committee_shard
            .iter()
            .filter_map(|(c, s)| {
                let shard = (*s)?;
                let roster = self.rosters.get(c)?;
                Some((shard, roster.iter().copied().collect::<BTreeSet<_>>()))
            })
            .collect();
        ValidationPolicy::CrossShard(Box::new(CrossShardPolicy {
            shard,
            rc_quorum: self.rc_quorum(),
            rc_members: self.rc_members().into_iter().collect(),
            shard_quorums: self.shard_quorums(),
            shard_members,
            keys: self.verify_keys.clone(),
        }))
    }
}

/// State the cross-shard relay keeps outside consensus.
#[derive(Default)]
struct RelayState {
    /// RC side: registered transactions being driven to a decision.
    begun: BTreeMap<TxId, BegunTx>,
    /// RC side: verdicts by transaction, then `(shard, verdict)`, then
    /// sender.
    votes: BTreeMap<TxId, BTreeMap<(ShardId, Verdict), BTreeMap<NodeId, VoteReply>>>,
    injected_votes: BTreeSet<(TxId, ShardId)>,
    decided: BTreeSet<TxId>,
    /// Shard side: prepare shares by transaction, then operation digest,
    /// then sender.
    shares: BTreeMap<TxId, BTreeMap<Digest32, BTreeMap<NodeId, PrepareTxMsg>>>,
    injected_prepares: BTreeSet<TxId>,
    /// Shard side: transactions whose prepare this replica has executed
    /// (and therefore voted on). Second-phase operations are held back
    /// until then so an abort can never be ordered ahead of its prepare.
    voted: BTreeSet<TxId>,
    /// Shard side: decision announcements by transaction, then outcome,
    /// then sender.
    decisions: BTreeMap<TxId, BTreeMap<bool, BTreeMap<NodeId, DecisionMsg>>>,
    injected_phase: BTreeSet<TxId>,
}

struct BegunTx {
    cross: CrossShardTx,
    client: ClientId,
    attempts: u32,
    done: bool,
}

/// In-flight restart-from-seal recovery.
struct RecoveryTask {
    enclave: Option<Enclave>,
    seal: SealedState,
    responses: BTreeMap<NodeId, Seq>,
    best_stable: Option<StableCheckpoint>,
    max_view: View,
    estimate: Option<RecoveryEstimate>,
}

pub struct NodeHost {
    id: NodeId,
    committee: CommitteeId,
    shard: Option<ShardId>,
    replica: Replica,
    signing: SigningKey,
    directory: Directory,
    behaviors: Vec<NodeBehavior>,
    genesis: LedgerState,
    epoch: Epoch,

    busy_until: SimTime,
    wake_armed: bool,
    extra_cost: SimDuration,
    request_queue: VecDeque<Arc<WireMsg>>,
    consensus_queue: VecDeque<Arc<WireMsg>>,
    /// Requests this host decided to inject into its own replica while
    /// applying outputs; drained after the current step settles.
    pending_injections: VecDeque<ClientRequest>,

    crashed: bool,
    retired: bool,
    recovery: Option<RecoveryTask>,
    saved_seal: Option<SealedState>,
    relay: RelayState,

    /// Highest enclave proof sequence this host ever put on the wire.
    pub proof_high: Seq,
    /// `proof_high` frozen at crash time; a later recovery estimate must
    /// dominate it.
    pub high_at_crash: Seq,
    /// Recovery estimate adopted after a restart, for oracle inspection.
    pub recovery_estimate: Option<RecoveryEstimate>,
    /// Conflicting proposals this host tried to emit.
    pub equivocation_blocks: u64,
}

impl NodeHost {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn committee(&self) -> CommitteeId {
        self.committee
    }

    pub fn shard(&self) -> Option<ShardId> {
        self.shard
    }

    pub fn replica(&self) -> &Replica {
        &self.replica
    }

    pub fn is_crashed(&self) -> bool {
        self.crashed
    }

    fn actor(&self) -> ActorId {
        ActorId::Node(self.id)
    }

    fn wire(&self, to: ActorId, payload: WirePayload) -> WireMsg {
        WireMsg {
            from: self.actor(),
            to,
            payload,
        }
    }

    fn has_behavior(&self, pred: impl Fn(&NodeBehavior) -> bool) -> bool {
        self.behaviors.iter().any(pred)
    }

    fn validation_policy(&self) -> ValidationPolicy {
        self.directory.policy_for(self.shard)
    }

    fn on_start(&mut self, core: &mut SimCore) {
        for b in self.behaviors.clone() {
            match b {
                NodeBehavior::Crash { at_ms } => {
                    core.arm_at(
                        self.actor(),
                        SimTime::from_millis(at_ms),
                        HostTimer::Crash,
                    );
                }
                NodeBehavior::StaleSealOnRestart {
                    crash_at_ms,
                    restart_at_ms,
                } => {
                    // the seal captured now is the stale one replayed later
                    self.saved_seal = self.replica.enclave_mut().map(|e| e.seal());
                    core.arm_at(
                        self.actor(),
                        SimTime::from_millis(crash_at_ms),
                        HostTimer::Crash,
                    );
                    core.arm_at(
                        self.actor(),
                        SimTime::from_millis(restart_at_ms),
                        HostTimer::Restart,
                    );
                }
                _ => {}
            }
        }
        let outs = self.replica.on_start(core.now());
        self.drive(core, outs);
    }

    fn on_wire(&mut self, core: &mut SimCore, msg: &Arc<WireMsg>) {
        if self.crashed || self.retired {
            return;
        }
        match &msg.payload {
            WirePayload::Reconfigure(directive) => {
                let d = directive.clone();
                self.handle_directive(core, d);
            }
            WirePayload::RecoveryInfo {
                last_stable,
                stable,
                view,
            } => {
                if self.recovery.is_some() {
                    if let ActorId::Node(from) = msg.from {
                        self.handle_recovery_info(core, from, *last_stable, stable, *view);
                    }
                }
            }
            _ if self.recovery.is_some() => {}
            WirePayload::Reply(_) => {}
            _ => self.enqueue(core, msg),
        }
    }

    fn enqueue(&mut self, core: &mut SimCore, msg: &Arc<WireMsg>) {
        let split = self.replica.config().variant.split_queues();
        let queue = if split && matches!(msg.payload, WirePayload::Submit(_)) {
            &mut self.request_queue
        } else {
            &mut self.consensus_queue
        };
        if queue.len() >= QUEUE_CAP {
            core.note_drop(ActorId::Node(self.id), msg.kind());
            return;
        }
        queue.push_back(Arc::clone(msg));
        self.pump(core);
    }

    fn pump(&mut self, core: &mut SimCore) {
        if self.crashed || self.retired || self.recovery.is_some() {
            return;
        }
        while core.now() >= self.busy_until {
            let Some(item) = self
                .consensus_queue
                .pop_front()
                .or_else(|| self.request_queue.pop_front())
            else {
                return;
            };
            self.process(core, &item);
        }
        if !self.consensus_queue.is_empty() || !self.request_queue.is_empty() {
            if !self.wake_armed {
                self.wake_armed = true;
                core.arm_at(self.actor(), self.busy_until, HostTimer::Wake);
            }
        }
    }

    fn process(&mut self, core: &mut SimCore, item: &WireMsg) {
        let now = core.now();
        let outputs = match &item.payload {
            WirePayload::Consensus(m) => self.replica.on_message(now, m),
            WirePayload::Submit(req) => self.replica.on_client_request(now, req.clone()),
            WirePayload::PrepareShare(p) => {
                self.handle_prepare_share(core, p);
                vec![]
            }
            WirePayload::Vote(v) => {
                self.handle_vote(core, v);
                vec![]
            }
            WirePayload::Decision(d) => {
                self.handle_decision(core, d);
                vec![]
            }
            WirePayload::RecoveryQuery => {
                if let ActorId::Node(from) = item.from {
                    self.handle_recovery_query(core, from);
                }
                vec![]
            }
            _ => vec![],
        };
        self.drive(core, outputs);
    }

    /// Applies replica outputs, then any self-injected requests those
    /// outputs produced (relay work triggered by execution), until settled.
    fn drive(&mut self, core: &mut SimCore, outputs: Vec<Output>) {
        self.settle_outputs(core, outputs);
        while let Some(req) = self.pending_injections.pop_front() {
            let outs = self.replica.on_client_request(core.now(), req);
            self.settle_outputs(core, outs);
        }
    }

    /// Applies replica outputs: advances the busy horizon by the drained
    /// processing cost, then ships messages at that horizon.
    fn settle_outputs(&mut self, core: &mut SimCore, outputs: Vec<Output>) {
        let cost = self.replica.take_cost() + std::mem::take(&mut self.extra_cost);
        self.busy_until = self.busy_until.max(core.now()) + cost;
        for out in outputs {
            match out {
                Output::Send { to, msg } => {
                    self.note_emitted_proof(&msg);
                    let wire = self.wire(ActorId::Node(to), WirePayload::Consensus(msg));
                    core.send_at(self.busy_until, wire);
                }
                Output::Broadcast { msg } => {
                    self.note_emitted_proof(&msg);
                    if self.has_behavior(|b| matches!(b, NodeBehavior::EquivocateSeq))
                        && matches!(msg.body, ConsensusMessage::PrePrepare { .. })
                    {
                        self.broadcast_equivocation(core, msg);
                    } else {
                        self.broadcast(core, msg);
                    }
                }
                Output::Timer { timer, delay } => {
                    core.arm(self.actor(), delay, HostTimer::Replica(timer));
                }
                Output::Executed {
                    seq,
                    block,
                    receipts,
                } => self.on_executed(core, seq, &block, &receipts),
            }
        }
        // relay work performed while applying outputs (signing votes,
        // decisions, replies) lands on the horizon afterwards
        let follow_up = self.replica.take_cost() + std::mem::take(&mut self.extra_cost);
        self.busy_until = self.busy_until + follow_up;
    }

    fn broadcast(&mut self, core: &mut SimCore, msg: SignedMsg) {
        let roster = self
            .directory
            .rosters
            .get(&self.committee)
            .cloned()
            .unwrap_or_default();
        for member in roster {
            if member != self.id {
                let wire = self.wire(ActorId::Node(member), WirePayload::Consensus(msg.clone()));
                core.send_at(self.busy_until, wire);
            }
        }
    }

    /// Sends the real proposal to one half of the committee and a
    /// conflicting one to the other half. Trusted-log variants refuse the
    /// second append, so the conflicting copy ships without a proof and
    /// honest receivers discard it.
    fn broadcast_equivocation(&mut self, core: &mut SimCore, msg: SignedMsg) {
        let ConsensusMessage::PrePrepare {
            view, seq, block, ..
        } = &msg.body
        else {
            return self.broadcast(core, msg);
        };
        let (view, seq) = (*view, *seq);
        let alt_block = Block::new(block.height, block.parent_digest, vec![]);
        let alt_digest = alt_block.digest;
        if self.replica.config().variant.trusted_log() {
            if let Some(enclave) = self.replica.enclave_mut() {
                if let Err(EnclaveError::EquivocationAttempt { .. }) =
                    enclave.log_append(LogId::PrePrepare, view, seq, alt_digest)
                {
                    core.note_equivocation_refusal(self.actor());
                }
            }
        }
        self.extra_cost += self.directory.table.sign;
        let alt = SignedMsg::sign(
            self.id,
            ConsensusMessage::PrePrepare {
                view,
                seq,
                digest: alt_digest,
                block: alt_block,
                evidence: vec![],
                proof: None,
            },
            &self.signing,
        );
        self.equivocation_blocks += 1;
        core.trace_protocol(
            self.actor(),
            "equivocate",
            format!("seq={seq} view={view}"),
        );
        let others: Vec<NodeId> = self
            .directory
            .rosters
            .get(&self.committee)
            .map(|r| r.iter().copied().filter(|m| *m != self.id).collect())
            .unwrap_or_default();
        let half = others.len() / 2;
        for (i, member) in others.into_iter().enumerate() {
            let body = if i < half { msg.clone() } else { alt.clone() };
            let wire = self.wire(ActorId::Node(member), WirePayload::Consensus(body));
            core.send_at(self.busy_until, wire);
        }
    }

    /// Records the highest enclave proof sequence shipped, the quantity a
    /// later recovery estimate must cover.
    fn note_emitted_proof(&mut self, msg: &SignedMsg) {
        let seq = match &msg.body {
            ConsensusMessage::PrePrepare { proof, seq, .. }
            | ConsensusMessage::Prepare { proof, seq, .. }
            | ConsensusMessage::Commit { proof, seq, .. }
            | ConsensusMessage::Checkpoint { proof, seq, .. } => {
                proof.as_ref().map(|p| p.sequence).unwrap_or(*seq)
            }
            ConsensusMessage::PrepareAgg(QuorumProof { seq, .. })
            | ConsensusMessage::CommitAgg(QuorumProof { seq, .. }) => *seq,
            _ => return,
        };
        self.proof_high = self.proof_high.max(seq);
    }

    fn on_executed(&mut self, core: &mut SimCore, seq: Seq, block: &Block, receipts: &[Receipt]) {
        core.trace_protocol(
            self.actor(),
            "executed",
            format!("seq={seq} txs={}", block.txs.len()),
        );
        for (tx, receipt) in block.txs.iter().zip(receipts) {
            match &tx.payload {
                Payload::KvUpdate(_) | Payload::SmallBankPayment { .. } => {
                    let committed = receipt.status == ReceiptStatus::Committed;
                    core.tally_settled(tx.txid, self.committee, committed);
                    if tx.client != COORDINATOR_CLIENT {
                        let reply = ReplyMsg {
                            txid: tx.txid,
                            status: receipt.status,
                            seq,
                            member: self.id,
                        };
                        let wire =
                            self.wire(ActorId::Client(tx.client), WirePayload::Reply(reply));
                        core.send_at(self.busy_until, wire);
                    }
                }
                Payload::PreparePhaseOp { txid, .. } => {
                    self.send_verdict(core, *txid, receipt.status);
                }
                Payload::CommitPhaseOp { .. } | Payload::AbortPhaseOp { .. } => {}
                Payload::RefCommitteeOp(input) => match input {
                    RcInput::Begin { cross } => {
                        if receipt.status == ReceiptStatus::Committed {
                            self.after_begin(core, cross, tx.client);
                        }
                    }
                    RcInput::Vote { quorum } => self.after_vote(core, quorum.txid),
                },
            }
        }
    }

    fn send_verdict(&mut self, core: &mut SimCore, txid: TxId, status: ReceiptStatus) {
        let Some(shard) = self.shard else { return };
        let verdict = match status {
            ReceiptStatus::PrepareOK => Verdict::PrepareOK,
            _ => Verdict::PrepareNotOK,
        };
        self.extra_cost += self.directory.table.sign;
        let reply = VoteReply::new(txid, shard, verdict, self.id, &self.signing);
        for member in self.directory.rc_members() {
            let wire = self.wire(ActorId::Node(member), WirePayload::Vote(reply.clone()));
            core.send_at(self.busy_until, wire);
        }
        self.relay.voted.insert(txid);
        // a decision quorum may already be waiting on this vote
        self.maybe_inject_phase(core, txid);
    }

    fn after_begin(&mut self, core: &mut SimCore, cross: &CrossShardTx, client: ClientId) {
        let txid = cross.txid;
        if self.relay.begun.contains_key(&txid) {
            return;
        }
        self.relay.begun.insert(
            txid,
            BegunTx {
                cross: cross.clone(),
                client,
                attempts: 0,
                done: false,
            },
        );
        self.multicast_prepares(core, txid);
        let delay = core.config().retransmit_timeout;
        core.arm(self.actor(), delay, HostTimer::Redrive { txid });
    }

    fn multicast_prepares(&mut self, core: &mut SimCore, txid: TxId) {
        let Some(begun) = self.relay.begun.get(&txid) else {
            return;
        };
        let cross = begun.cross.clone();
        for (shard, ops) in &cross.sub_ops {
            self.extra_cost += self.directory.table.sign;
            let share = PrepareTxMsg::new(txid, *shard, ops.clone(), self.id, &self.signing);
            for member in self.directory.members_of_shard(*shard) {
                let wire = self.wire(ActorId::Node(member), WirePayload::PrepareShare(share.clone()));
                core.send_at(self.busy_until, wire);
            }
        }
    }

    fn after_vote(&mut self, core: &mut SimCore, txid: TxId) {
        let Some(record) = read_record(&self.replica.ledger().kv, txid) else {
            return;
        };
        if !record.state.is_terminal() || self.relay.decided.contains(&txid) {
            return;
        }
        self.relay.decided.insert(txid);
        let commit = record.state == RcState::Committed;
        core.tally_settled(txid, self.committee, commit);
        core.trace_protocol(
            self.actor(),
            "decision",
            format!("txid={txid} commit={commit}"),
        );
        self.extra_cost += self.directory.table.sign;
        let decision = DecisionMsg::new(txid, commit, self.id, &self.signing);
        for shard in &record.involved {
            for member in self.directory.members_of_shard(*shard) {
                let wire = self.wire(ActorId::Node(member), WirePayload::Decision(decision.clone()));
                core.send_at(self.busy_until, wire);
            }
        }
        if let Some(begun) = self.relay.begun.get_mut(&txid) {
            begun.done = true;
            let client = begun.client;
            let wire = self.wire(ActorId::Client(client), WirePayload::Decision(decision));
            core.send_at(self.busy_until, wire);
        }
    }

    fn handle_prepare_share(&mut self, core: &mut SimCore, share: &PrepareTxMsg) {
        let Some(shard) = self.shard else { return };
        if share.shard != shard
            || self.relay.injected_prepares.contains(&share.txid)
            || !self.directory.rc_members().contains(&share.member)
        {
            return;
        }
        self.extra_cost += self.directory.table.verify;
        let Some(key) = self.directory.verify_keys.get(&share.member) else {
            return;
        };
        if !share.verify(key) {
            return;
        }
        let slot = self
            .relay
            .shares
            .entry(share.txid)
            .or_default()
            .entry(digest_of(&share.ops))
            .or_default();
        slot.insert(share.member, share.clone());
        if slot.len() < self.directory.rc_quorum() {
            return;
        }
        let shares: Vec<PrepareTxMsg> = slot.values().cloned().collect();
        self.relay.injected_prepares.insert(share.txid);
        core.trace_protocol(
            self.actor(),
            "prepare-inject",
            format!("txid={}", share.txid),
        );
        let tx = Transaction {
            txid: share.txid,
            payload: Payload::PreparePhaseOp {
                txid: share.txid,
                ops: share.ops.clone(),
            },
            client: COORDINATOR_CLIENT,
            shards: vec![shard],
        };
        self.pending_injections.push_back(ClientRequest {
            tx,
            evidence: Evidence::PrepareCert(shares),
        });
    }

    fn handle_vote(&mut self, core: &mut SimCore, vote: &VoteReply) {
        if self.shard.is_some()
            || self
                .relay
                .injected_votes
                .contains(&(vote.txid, vote.committee))
        {
            return;
        }
        if !self
            .directory
            .members_of_shard(vote.committee)
            .contains(&vote.member)
        {
            return;
        }
        self.extra_cost += self.directory.table.verify;
        let Some(key) = self.directory.verify_keys.get(&vote.member) else {
            return;
        };
        if !vote.verify(key) {
            return;
        }
        let slot = self
            .relay
            .votes
            .entry(vote.txid)
            .or_default()
            .entry((vote.committee, vote.verdict))
            .or_default();
        slot.insert(vote.member, vote.clone());
        if slot.len() < self.directory.shard_quorum(vote.committee) {
            return;
        }
        let replies: Vec<VoteReply> = slot.values().cloned().collect();
        self.relay
            .injected_votes
            .insert((vote.txid, vote.committee));
        core.trace_protocol(
            self.actor(),
            "vote-inject",
            format!("txid={} shard={}", vote.txid, vote.committee),
        );
        let quorum = VoteQuorum {
            txid: vote.txid,
            committee: vote.committee,
            verdict: vote.verdict,
            replies,
        };
        let tx = Transaction::new(
            vote_txid(vote.txid, vote.committee, vote.verdict),
            Payload::RefCommitteeOp(RcInput::Vote { quorum }),
            COORDINATOR_CLIENT,
            self.directory.shard_count,
        );
        self.pending_injections.push_back(ClientRequest::plain(tx));
    }

    fn handle_decision(&mut self, core: &mut SimCore, decision: &DecisionMsg) {
        if self.shard.is_none()
            || self.relay.injected_phase.contains(&decision.txid)
            || !self.directory.rc_members().contains(&decision.member)
        {
            return;
        }
        self.extra_cost += self.directory.table.verify;
        let Some(key) = self.directory.verify_keys.get(&decision.member) else {
            return;
        };
        if !decision.verify(key) {
            return;
        }
        self.relay
            .decisions
            .entry(decision.txid)
            .or_default()
            .entry(decision.commit)
            .or_default()
            .insert(decision.member, decision.clone());
        self.maybe_inject_phase(core, decision.txid);
    }

    /// Injects the second-phase transaction once a decision quorum exists
    /// and this replica has executed (voted on) the prepare. Holding the
    /// phase back until the vote keeps prepare before commit/abort in the
    /// committee's execution order, so an abort can never strand locks.
    fn maybe_inject_phase(&mut self, core: &mut SimCore, txid: TxId) {
        let Some(shard) = self.shard else { return };
        if !self.relay.voted.contains(&txid) || self.relay.injected_phase.contains(&txid) {
            return;
        }
        let Some(by_outcome) = self.relay.decisions.get(&txid) else {
            return;
        };
        let quorum = self.directory.rc_quorum();
        let Some((commit, senders)) = by_outcome
            .iter()
            .find(|(_, senders)| senders.len() >= quorum)
            .map(|(c, s)| (*c, s))
        else {
            return;
        };
        let msgs: Vec<DecisionMsg> = senders.values().cloned().collect();
        self.relay.injected_phase.insert(txid);
        core.trace_protocol(
            self.actor(),
            "phase-inject",
            format!("txid={txid} commit={commit}"),
        );
        let payload = if commit {
            Payload::CommitPhaseOp { txid }
        } else {
            Payload::AbortPhaseOp { txid }
        };
        let tx = Transaction {
            txid: phase_txid(txid, shard, commit),
            payload,
            client: COORDINATOR_CLIENT,
            shards: vec![shard],
        };
        self.pending_injections.push_back(ClientRequest {
            tx,
            evidence: Evidence::DecisionCert(msgs),
        });
    }

    fn handle_recovery_query(&mut self, core: &mut SimCore, from: NodeId) {
        self.extra_cost += self.directory.table.sign;
        let info = WirePayload::RecoveryInfo {
            last_stable: self.replica.stable_seq(),
            stable: self.replica.stable_checkpoint().clone(),
            view: self.replica.view(),
        };
        let wire = self.wire(ActorId::Node(from), info);
        core.send_at(self.busy_until, wire);
    }

    fn handle_recovery_info(
        &mut self,
        core: &mut SimCore,
        from: NodeId,
        last_stable: Seq,
        stable: &StableCheckpoint,
        view: View,
    ) {
        let Some(task) = self.recovery.as_mut() else {
            return;
        };
        task.responses.insert(from, last_stable);
        task.max_view = task.max_view.max(view);
        if task
            .best_stable
            .as_ref()
            .map_or(true, |b| stable.seq > b.seq)
        {
            task.best_stable = Some(stable.clone());
        }
        self.try_finish_recovery(core);
    }

    fn try_finish_recovery(&mut self, core: &mut SimCore) {
        let cfg = self.replica.config().clone();
        let Some(task) = self.recovery.as_mut() else {
            return;
        };
        if task.estimate.is_none() && task.responses.len() >= (2 * cfg.f + 1) as usize {
            let responses: Vec<(NodeId, Seq)> =
                task.responses.iter().map(|(n, s)| (*n, *s)).collect();
            let enclave = task.enclave.as_mut().expect("present until rebuild");
            let seal = task.seal.clone();
            if let Ok(est) =
                enclave.unseal_and_recover(&seal, &responses, cfg.f, cfg.watermark_window)
            {
                task.estimate = Some(est);
                self.recovery_estimate = Some(est);
                core.trace_protocol(
                    ActorId::Node(self.id),
                    "recovery-estimate",
                    format!("ckp_m={} h_m={}", est.ckp_m, est.h_m),
                );
            }
        }
        let Some(task) = self.recovery.as_mut() else {
            return;
        };
        let (Some(est), Some(stable)) = (task.estimate, task.best_stable.clone()) else {
            return;
        };
        if stable.seq < est.h_m {
            return;
        }
        let proofs: Vec<AppendProof> = stable
            .evidence
            .iter()
            .filter_map(|m| match &m.body {
                ConsensusMessage::Checkpoint {
                    seq,
                    state_digest,
                    proof: Some(p),
                } if *seq == stable.seq && *state_digest == stable.digest => Some(p.clone()),
                _ => None,
            })
            .collect();
        let enclave = task.enclave.as_mut().expect("present until rebuild");
        let done = enclave
            .complete_recovery(
                stable.seq,
                stable.digest,
                &proofs,
                cfg.quorum(),
                &self.directory.enclave_keys,
                task.max_view,
            )
            .is_ok();
        if !done {
            return;
        }
        let task = self.recovery.take().expect("checked above");
        let enclave = task.enclave.expect("present until rebuild");
        core.trace_protocol(
            ActorId::Node(self.id),
            "recovered",
            format!("floor={}", est.h_m),
        );
        self.rebuild_replica(core, Some(enclave), true);
    }

    /// Replaces the replica wholesale; used after recovery and when moving
    /// committees. The caller supplies the enclave (fresh or recovered).
    fn rebuild_replica(&mut self, core: &mut SimCore, enclave: Option<Enclave>, joining: bool) {
        let roster = self
            .directory
            .rosters
            .get(&self.committee)
            .cloned()
            .unwrap_or_default();
        let keys = self.directory.roster_keys(&roster);
        let cfg = self
            .directory
            .committee_cfg
            .get(&self.committee)
            .cloned()
            .unwrap_or_else(|| self.replica.config().clone());
        let setup = ReplicaSetup {
            cfg,
            id: self.id,
            committee: roster,
            signing: self.signing.clone(),
            keys,
            enclave,
            enclave_keys: self.directory.enclave_keys.clone(),
            genesis: self.genesis.clone(),
            validation: self.validation_policy(),
            table: self.directory.table.clone(),
            joining,
        };
        self.replica = Replica::new(setup);
        self.relay = RelayState::default();
        self.pending_injections.clear();
        self.busy_until = core.now();
        let outs = self.replica.on_start(core.now());
        self.drive(core, outs);
    }

    fn handle_directive(&mut self, core: &mut SimCore, directive: Directive) {
        match directive {
            Directive::InstallRoster {
                committee,
                roster,
                epoch,
            } => {
                if committee != self.committee {
                    return;
                }
                self.directory.rosters.insert(committee, roster.clone());
                self.epoch = epoch;
                if !roster.contains(&self.id) {
                    self.retired = true;
                    core.trace_protocol(self.actor(), "retired", String::new());
                    return;
                }
                let keys = self.directory.roster_keys(&roster);
                self.replica
                    .install_roster(roster, keys, self.directory.enclave_keys.clone());
                core.trace_protocol(self.actor(), "roster-installed", format!("epoch={epoch}"));
            }
            Directive::BecomeMember {
                committee,
                shard,
                cfg,
                roster,
                genesis,
                epoch,
            } => {
                self.directory.rosters.insert(committee, roster);
                self.directory.committee_shard.insert(committee, shard);
                self.directory.committee_cfg.insert(committee, cfg.clone());
                self.committee = committee;
                self.shard = shard;
                self.genesis = genesis;
                self.epoch = epoch;
                // a mover gets a fresh enclave instance in its new
                // committee; the platform counter carries across
                let enclave = cfg.variant.trusted_log().then(|| {
                    let counter = self
                        .replica
                        .enclave()
                        .map(|e| e.platform_counter())
                        .unwrap_or(0);
                    Enclave::new(
                        self.id,
                        self.directory.master_seed,
                        core.now(),
                        self.directory.table.clone(),
                        self.directory.restart_guard,
                        counter,
                    )
                });
                core.trace_protocol(
                    self.actor(),
                    "joined",
                    format!("committee={committee} epoch={epoch}"),
                );
                self.request_queue.clear();
                self.consensus_queue.clear();
                self.rebuild_replica(core, enclave, true);
            }
        }
    }

    fn crash(&mut self, core: &mut SimCore) {
        self.crashed = true;
        self.high_at_crash = self.proof_high;
        self.request_queue.clear();
        self.consensus_queue.clear();
        core.trace_protocol(self.actor(), "crash", String::new());
    }

    fn restart(&mut self, core: &mut SimCore) {
        let Some(seal) = self.saved_seal.clone() else {
            return;
        };
        self.crashed = false;
        self.busy_until = core.now();
        let counter = self
            .replica
            .enclave()
            .map(|e| e.platform_counter())
            .unwrap_or(0);
        let enclave = Enclave::new(
            self.id,
            self.directory.master_seed,
            core.now(),
            self.directory.table.clone(),
            self.directory.restart_guard,
            counter,
        );
        self.recovery = Some(RecoveryTask {
            enclave: Some(enclave),
            seal,
            responses: BTreeMap::new(),
            best_stable: None,
            max_view: 0,
            estimate: None,
        });
        core.trace_protocol(self.actor(), "restart", String::new());
        self.broadcast_recovery_query(core);
        let delay = core.config().retransmit_timeout;
        core.arm(self.actor(), delay, HostTimer::RecoveryPoll);
    }

    fn broadcast_recovery_query(&mut self, core: &mut SimCore) {
        let roster = self
            .directory
            .rosters
            .get(&self.committee)
            .cloned()
            .unwrap_or_default();
        for member in roster {
            if member != self.id {
                let wire = self.wire(ActorId::Node(member), WirePayload::RecoveryQuery);
                core.send_at(core.now(), wire);
            }
        }
    }

    fn on_timer(&mut self, core: &mut SimCore, timer: HostTimer) {
        match timer {
            HostTimer::Wake => {
                self.wake_armed = false;
                self.pump(core);
            }
            HostTimer::Replica(t) => {
                if self.crashed || self.retired || self.recovery.is_some() {
                    return;
                }
                let outs = self.replica.on_timeout(core.now(), t);
                self.drive(core, outs);
            }
            HostTimer::Crash => self.crash(core),
            HostTimer::Restart => self.restart(core),
            HostTimer::RecoveryPoll => {
                if self.recovery.is_some() && !self.crashed {
                    self.broadcast_recovery_query(core);
                    let delay = core.config().retransmit_timeout;
                    core.arm(self.actor(), delay, HostTimer::RecoveryPoll);
                }
            }
            HostTimer::Redrive { txid } => {
                if self.crashed || self.retired || self.recovery.is_some() {
                    return;
                }
                let Some(begun) = self.relay.begun.get_mut(&txid) else {
                    return;
                };
                if begun.done || begun.attempts >= REDRIVE_ATTEMPTS {
                    return;
                }
                begun.attempts += 1;
                let attempts = begun.attempts;
                self.multicast_prepares(core, txid);
                let delay = core
                    .config()
                    .retransmit_timeout
                    .mul_f64(f64::from(1u32 << attempts.min(3)));
                core.arm(self.actor(), delay, HostTimer::Redrive { txid });
            }
            _ => {}
        }
    }

    fn finish(&mut self, core: &mut SimCore) {
        let stats = &self.replica.stats;
        core.metrics_mut().view_changes += stats.view_changes_started;
        core.metrics_mut().new_views += stats.new_views_adopted;
    }
}

/// How a client paces its submissions.
#[derive(Clone, Copy, Debug)]
pub enum LoopMode {
    /// Fixed inter-arrival gap, bounded outstanding window.
    Open {
        gap: SimDuration,
        max_outstanding: usize,
    },
    /// Issue the next transaction when the previous one settles.
    Closed,
}

/// Submission targets and completion thresholds per destination.
#[derive(Clone, Debug, Default)]
pub struct ClientTargets {
    pub shard_count: u32,
    /// Reference committee roster; empty in unsharded topologies.
    pub rc: Vec<NodeId>,
    /// Reference committee fault budget.
    pub rc_f: u32,
    /// Shard roster and fault budget per shard.
    pub shards: BTreeMap<ShardId, (Vec<NodeId>, u32)>,
}

/// A client's complete pre-planned workload.
#[derive(Clone, Debug)]
pub struct ClientPlan {
    pub start_at: SimDuration,
    pub mode: LoopMode,
    pub txs: Vec<Transaction>,
    pub targets: ClientTargets,
}

struct InflightTx {
    tx: Transaction,
    issued_at: SimTime,
    attempts: u32,
    committed_replies: BTreeSet<NodeId>,
    aborted_replies: BTreeSet<NodeId>,
    commit_decisions: BTreeSet<NodeId>,
    abort_decisions: BTreeSet<NodeId>,
}

pub struct ClientHost {
    id: ClientId,
    plan: ClientPlan,
    next_ix: usize,
    outstanding: BTreeMap<TxId, InflightTx>,
    settled: BTreeSet<TxId>,
    stalling: bool,
}

impl ClientHost {
    fn actor(&self) -> ActorId {
        ActorId::Client(self.id)
    }

    fn wire(&self, to: NodeId, payload: WirePayload) -> WireMsg {
        WireMsg {
            from: self.actor(),
            to: ActorId::Node(to),
            payload,
        }
    }

    fn on_start(&mut self, core: &mut SimCore) {
        if !self.plan.txs.is_empty() {
            core.arm(self.actor(), self.plan.start_at, HostTimer::ClientIssue);
        }
    }

    fn issue_next(&mut self, core: &mut SimCore) {
        let Some(tx) = self.plan.txs.get(self.next_ix).cloned() else {
            return;
        };
        self.next_ix += 1;
        core.note_issued();
        core.trace_protocol(self.actor(), "issue", format!("txid={}", tx.txid));
        let txid = tx.txid;
        self.outstanding.insert(
            txid,
            InflightTx {
                tx: tx.clone(),
                issued_at: core.now(),
                attempts: 0,
                committed_replies: BTreeSet::new(),
                aborted_replies: BTreeSet::new(),
                commit_decisions: BTreeSet::new(),
                abort_decisions: BTreeSet::new(),
            },
        );
        self.submit(core, &tx, false);
        if !self.stalling {
            let delay = core.config().retransmit_timeout;
            core.arm(self.actor(), delay, HostTimer::ClientRetry { txid });
        }
    }

    /// Routes one submission: cross-shard work goes to the reference
    /// committee as a registration, single-shard work to the owning
    /// committee. Retransmissions broadcast to the full roster.
    fn submit(&mut self, core: &mut SimCore, tx: &Transaction, broadcast: bool) {
        if tx.is_cross_shard() {
            let Some(cross) = CrossShardTx::split(tx, self.plan.targets.shard_count) else {
                return;
            };
            let begin = Transaction {
                txid: tx.txid,
                payload: Payload::RefCommitteeOp(RcInput::Begin {
                    cross: Box::new(cross),
                }),
                client: self.id,
                shards: vec![],
            };
            let req = ClientRequest::plain(begin);
            let roster = &self.plan.targets.rc;
            let targets: &[NodeId] = if broadcast {
                roster
            } else {
                &roster[..roster.len().min(1)]
            };
            for member in targets {
                let wire = self.wire(*member, WirePayload::Submit(req.clone()));
                core.send_at(core.now(), wire);
            }
        } else {
            let Some(shard) = tx.shards.first() else {
                return;
            };
            let Some((roster, _)) = self.plan.targets.shards.get(shard) else {
                return;
            };
            let req = ClientRequest::plain(tx.clone());
            let targets: &[NodeId] = if broadcast {
                roster
            } else {
                &roster[..roster.len().min(1)]
            };
            for member in targets {
                let wire = self.wire(*member, WirePayload::Submit(req.clone()));
                core.send_at(core.now(), wire);
            }
        }
    }

    fn settle(&mut self, core: &mut SimCore, txid: TxId, committed: bool) {
        let Some(entry) = self.outstanding.remove(&txid) else {
            return;
        };
        self.settled.insert(txid);
        if committed {
            core.record_latency(core.now() - entry.issued_at);
        }
        core.trace_protocol(
            self.actor(),
            "settled",
            format!("txid={txid} committed={committed}"),
        );
        if matches!(self.plan.mode, LoopMode::Closed) {
            self.issue_next(core);
        }
    }

    fn on_wire(&mut self, core: &mut SimCore, msg: &Arc<WireMsg>) {
        match &msg.payload {
            WirePayload::Reply(reply) => {
                let Some(entry) = self.outstanding.get_mut(&reply.txid) else {
                    return;
                };
                if entry.tx.is_cross_shard() {
                    return;
                }
                let Some(shard) = entry.tx.shards.first() else {
                    return;
                };
                let Some((_, f)) = self.plan.targets.shards.get(shard) else {
                    return;
                };
                let needed = (*f + 1) as usize;
                let set = match reply.status {
                    ReceiptStatus::Committed => &mut entry.committed_replies,
                    ReceiptStatus::Aborted => &mut entry.aborted_replies,
                    _ => return,
                };
                set.insert(reply.member);
                if set.len() >= needed {
                    self.settle(core, reply.txid, reply.status == ReceiptStatus::Committed);
                }
            }
            WirePayload::Decision(decision) => {
                let Some(entry) = self.outstanding.get_mut(&decision.txid) else {
                    return;
                };
                if !entry.tx.is_cross_shard() {
                    return;
                }
                let set = if decision.commit {
                    &mut entry.commit_decisions
                } else {
                    &mut entry.abort_decisions
                };
                set.insert(decision.member);
                let needed = (self.plan.targets.rc_f + 1) as usize;
                if set.len() >= needed {
                    self.settle(core, decision.txid, decision.commit);
                }
            }
            _ => {}
        }
    }

    fn on_timer(&mut self, core: &mut SimCore, timer: HostTimer) {
        match timer {
            HostTimer::ClientIssue => match self.plan.mode {
                LoopMode::Open {
                    gap,
                    max_outstanding,
                } => {
                    if self.next_ix < self.plan.txs.len() {
                        if self.outstanding.len() < max_outstanding {
                            self.issue_next(core);
                        }
                        core.arm(self.actor(), gap, HostTimer::ClientIssue);
                    }
                }
                LoopMode::Closed => self.issue_next(core),
            },
            HostTimer::ClientRetry { txid } => {
                if self.stalling {
                    return;
                }
                let Some(entry) = self.outstanding.get_mut(&txid) else {
                    return;
                };
                entry.attempts += 1;
                if entry.attempts > CLIENT_ATTEMPTS {
                    self.outstanding.remove(&txid);
                    if matches!(self.plan.mode, LoopMode::Closed) {
                        self.issue_next(core);
                    }
                    return;
                }
                let attempts = entry.attempts;
                let tx = entry.tx.clone();
                self.submit(core, &tx, true);
                let delay = core
                    .config()
                    .retransmit_timeout
                    .mul_f64(f64::from(1u32 << attempts.min(3)));
                core.arm(self.actor(), delay, HostTimer::ClientRetry { txid });
            }
            _ => {}
        }
    }
}

/// Batched epoch transition handed to the orchestrator.
#[derive(Clone, Debug)]
pub struct TransitionSetup {
    pub batches: Vec<Vec<Move>>,
    pub start_at: SimDuration,
    /// Fixed pause between batches, covering the movers' state sync.
    pub inter_batch: SimDuration,
    pub to_epoch: Epoch,
}

struct OrchPlan {
    setup: TransitionSetup,
    rosters: BTreeMap<CommitteeId, Vec<NodeId>>,
    info: BTreeMap<CommitteeId, (Option<ShardId>, ConsensusConfig, LedgerState)>,
    next_batch: usize,
}

#[derive(Default)]
pub struct OrchestratorHost {
    plan: Option<OrchPlan>,
}

impl OrchestratorHost {
    fn on_start(&mut self, core: &mut SimCore) {
        if let Some(plan) = &self.plan {
            core.arm(ActorId::Orchestrator, plan.setup.start_at, HostTimer::Step);
        }
    }

    fn on_timer(&mut self, core: &mut SimCore, timer: HostTimer) {
        if !matches!(timer, HostTimer::Step) {
            return;
        }
        let Some(plan) = &mut self.plan else { return };
        let Some(batch) = plan.setup.batches.get(plan.next_batch).cloned() else {
            return;
        };
        plan.next_batch += 1;
        let movers: BTreeMap<NodeId, Move> = batch.iter().map(|mv| (mv.node, *mv)).collect();
        let mut affected: BTreeSet<CommitteeId> = BTreeSet::new();
        for mv in &batch {
            affected.insert(mv.from);
            affected.insert(mv.to);
            if let Some(roster) = plan.rosters.get_mut(&mv.from) {
                roster.retain(|n| *n != mv.node);
            }
            plan.rosters.entry(mv.to).or_default().push(mv.node);
        }
        core.trace_protocol(
            ActorId::Orchestrator,
            "batch",
            format!(
                "{}/{} moves={}",
                plan.next_batch,
                plan.setup.batches.len(),
                batch.len()
            ),
        );
        let epoch = plan.setup.to_epoch;
        for committee in affected {
            let roster = plan.rosters.get(&committee).cloned().unwrap_or_default();
            let Some((shard, cfg, genesis)) = plan.info.get(&committee).cloned() else {
                continue;
            };
            for member in &roster {
                let directive = if movers.get(member).map(|mv| mv.to) == Some(committee) {
                    Directive::BecomeMember {
                        committee,
                        shard,
                        cfg: cfg.clone(),
                        roster: roster.clone(),
                        genesis: genesis.clone(),
                        epoch,
                    }
                } else {
                    Directive::InstallRoster {
                        committee,
                        roster: roster.clone(),
                        epoch,
                    }
                };
                core.send(WireMsg {
                    from: ActorId::Orchestrator,
                    to: ActorId::Node(*member),
                    payload: WirePayload::Reconfigure(directive),
                });
            }
        }
        if plan.next_batch < plan.setup.batches.len() {
            core.arm(
                ActorId::Orchestrator,
                plan.setup.inter_batch,
                HostTimer::Step,
            );
        }
    }
}

pub enum Host {
    Node(NodeHost),
    Client(ClientHost),
    Orchestrator(OrchestratorHost),
}

impl Host {
    pub(crate) fn on_start(&mut self, core: &mut SimCore) {
        match self {
            Host::Node(h) => h.on_start(core),
            Host::Client(h) => h.on_start(core),
            Host::Orchestrator(h) => h.on_start(core),
        }
    }

    pub(crate) fn on_wire(&mut self, core: &mut SimCore, msg: &Arc<WireMsg>) {
        match self {
            Host::Node(h) => h.on_wire(core, msg),
            Host::Client(h) => h.on_wire(core, msg),
            Host::Orchestrator(_) => {}
        }
    }

    pub(crate) fn on_timer(&mut self, core: &mut SimCore, timer: HostTimer) {
        match self {
            Host::Node(h) => h.on_timer(core, timer),
            Host::Client(h) => h.on_timer(core, timer),
            Host::Orchestrator(h) => h.on_timer(core, timer),
        }
    }

    pub(crate) fn finish(&mut self, core: &mut SimCore) {
        if let Host::Node(h) = self {
            h.finish(core)
        }
    }
}

/// One committee's static description.
#[derive(Clone, Debug)]
pub struct CommitteeSetup {
    pub id: CommitteeId,
    /// Shard this committee serves; `None` marks the reference committee.
    pub shard: Option<ShardId>,
    pub cfg: ConsensusConfig,
    /// Roster in leader-rotation order.
    pub members: Vec<NodeId>,
    pub genesis: LedgerState,
}

/// The complete static world description a run starts from.
#[derive(Clone, Debug)]
pub struct Topology {
    pub shard_count: u32,
    pub committees: Vec<CommitteeSetup>,
    pub clients: Vec<(ClientId, ClientPlan)>,
    pub table: LatencyTable,
    /// Enclave restart guard handed to every enclave built.
    pub restart_guard: SimDuration,
    pub transition: Option<TransitionSetup>,
}

impl Topology {
    pub fn node_ids(&self) -> BTreeSet<NodeId> {
        self.committees
            .iter()
            .flat_map(|c| c.members.iter().copied())
            .collect()
    }

    pub fn client_ids(&self) -> BTreeSet<ClientId> {
        self.clients.iter().map(|(id, _)| *id).collect()
    }

    pub(crate) fn build(
        &self,
        cfg: &super::SimConfig,
    ) -> Result<BTreeMap<ActorId, Host>, SimError> {
        let mut seen_nodes = BTreeSet::new();
        for setup in &self.committees {
            setup.cfg.validate()?;
            if setup.members.len() != setup.cfg.n as usize {
                return Err(super::ConfigError::BadTopology(format!(
                    "committee {} lists {} members for n={}",
                    setup.id,
                    setup.members.len(),
                    setup.cfg.n
                ))
                .into());
            }
            for id in &setup.members {
                if !seen_nodes.insert(*id) {
                    return Err(super::ConfigError::BadTopology(format!(
                        "node {id} serves more than one committee"
                    ))
                    .into());
                }
            }
        }
        let mut seen_clients = BTreeSet::new();
        for (id, _) in &self.clients {
            if !seen_clients.insert(*id) {
                return Err(
                    super::ConfigError::BadTopology(format!("duplicate client {id}")).into(),
                );
            }
        }

        let node_ids = self.node_ids();
        let verify_keys: BTreeMap<NodeId, VerifyingKey> = node_ids
            .iter()
            .map(|id| {
                let sk = signing_key_from_seed(derive_seed(
                    cfg.master_seed,
                    "msg-key",
                    id.0 as u64,
                ));
                (*id, sk.verifying_key())
            })
            .collect();
        let enclave_keys: EnclaveRegistry = node_ids
            .iter()
            .map(|id| {
                let sk = signing_key_from_seed(derive_seed(
                    cfg.master_seed,
                    "enclave-key",
                    id.0 as u64,
                ));
                (*id, sk.verifying_key())
            })
            .collect();
        let directory = Directory {
            master_seed: cfg.master_seed,
            verify_keys,
            enclave_keys,
            rosters: self
                .committees
                .iter()
                .map(|c| (c.id, c.members.clone()))
                .collect(),
            committee_shard: self.committees.iter().map(|c| (c.id, c.shard)).collect(),
            committee_cfg: self
                .committees
                .iter()
                .map(|c| (c.id, c.cfg.clone()))
                .collect(),
            shard_count: self.shard_count,
            has_rc: self.committees.iter().any(|c| c.shard.is_none()),
            table: self.table.clone(),
            restart_guard: self.restart_guard,
        };

        let mut hosts: BTreeMap<ActorId, Host> = BTreeMap::new();
        for setup in &self.committees {
            for id in &setup.members {
                let signing = signing_key_from_seed(derive_seed(
                    cfg.master_seed,
                    "msg-key",
                    id.0 as u64,
                ));
                let enclave = setup.cfg.variant.trusted_log().then(|| {
                    Enclave::new(
                        *id,
                        cfg.master_seed,
                        SimTime::ZERO,
                        self.table.clone(),
                        self.restart_guard,
                        0,
                    )
                });
                let replica = Replica::new(ReplicaSetup {
                    cfg: setup.cfg.clone(),
                    id: *id,
                    committee: setup.members.clone(),
                    signing: signing.clone(),
                    keys: directory.roster_keys(&setup.members),
                    enclave,
                    enclave_keys: directory.enclave_keys.clone(),
                    genesis: setup.genesis.clone(),
                    validation: directory.policy_for(setup.shard),
                    table: self.table.clone(),
                    joining: false,
                });
                let behaviors = cfg
                    .adversary
                    .node_behaviors
                    .get(id)
                    .cloned()
                    .unwrap_or_default();
                hosts.insert(
                    ActorId::Node(*id),
                    Host::Node(NodeHost {
                        id: *id,
                        committee: setup.id,
                        shard: setup.shard,
                        replica,
                        signing,
                        directory: directory.clone(),
                        behaviors,
                        genesis: setup.genesis.clone(),
                        epoch: 0,
                        busy_until: SimTime::ZERO,
                        wake_armed: false,
                        extra_cost: SimDuration::ZERO,
                        request_queue: VecDeque::new(),
                        consensus_queue: VecDeque::new(),
                        pending_injections: VecDeque::new(),
                        crashed: false,
                        retired: false,
                        recovery: None,
                        saved_seal: None,
                        relay: RelayState::default(),
                        proof_high: 0,
                        high_at_crash: 0,
                        recovery_estimate: None,
                        equivocation_blocks: 0,
                    }),
                );
            }
        }
        for (id, plan) in &self.clients {
            let stalling = cfg
                .adversary
                .client_behaviors
                .get(id)
                .is_some_and(|bs| bs.contains(&super::ClientBehavior::StallingClient));
            hosts.insert(
                ActorId::Client(*id),
                Host::Client(ClientHost {
                    id: *id,
                    plan: plan.clone(),
                    next_ix: 0,
                    outstanding: BTreeMap::new(),
                    settled: BTreeSet::new(),
                    stalling,
                }),
            );
        }
        let orch_plan = self.transition.clone().map(|setup| OrchPlan {
            setup,
            rosters: self
                .committees
                .iter()
                .map(|c| (c.id, c.members.clone()))
                .collect(),
            info: self
                .committees
                .iter()
                .map(|c| (c.id, (c.shard, c.cfg.clone(), c.genesis.clone())))
                .collect(),
            next_batch: 0,
        });
        hosts.insert(
            ActorId::Orchestrator,
            Host::Orchestrator(OrchestratorHost { plan: orch_plan }),
        );
        Ok(hosts)
    }
}
