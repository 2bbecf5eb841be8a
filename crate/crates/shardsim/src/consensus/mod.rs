//! Committee-local replicated state machine.
//!
//! Four selectable protocol variants share one replica implementation:
//!
//! * `HL` — classic three-phase BFT with `2f+1` quorums over `n = 3f+1`.
//! * `AHL` — the trusted append-only log shrinks quorums to `f+1` over
//!   `n = 2f+1`; every protocol message carries an [`AppendProof`].
//! * `AHLPlus` — `AHL` plus two messaging optimizations: requests are
//!   forwarded to the leader instead of broadcast, and hosts keep request
//!   and consensus traffic in separate queues.
//! * `AHLR` — `AHLPlus` plus leader-side aggregation: followers send
//!   `Prepare`/`Commit` only to the leader, whose enclave condenses each
//!   quorum into a single [`QuorumProof`] broadcast.
//!
//! The replica in [`replica`] is a pure state machine: callbacks take the
//! current simulated time and return [`Output`]s (sends, timers, executed
//! blocks). All scheduling, delivery, and queueing live in the host.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordination::{DecisionMsg, PrepareTxMsg, VoteQuorum};
use crate::crypto::{digest_of, sign_obj, verify_obj, Digest32, Sig};
use crate::enclave::{AppendProof, QuorumProof};
use crate::ids::{NodeId, Seq, ShardId, View};
use crate::ledger::{Block, LedgerState, Payload, Receipt, Transaction};
use crate::time::SimDuration;

use ed25519_dalek::{SigningKey, VerifyingKey};

mod replica;

pub use replica::{Replica, ReplicaSetup, ReplicaStats};

/// Protocol variant selector.
#[derive(Copy, Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Variant {
    HL,
    AHL,
    AHLPlus,
    AHLR,
}

impl Variant {
    /// Variants whose messages carry enclave append proofs.
    pub fn trusted_log(self) -> bool {
        !matches!(self, Variant::HL)
    }

    /// Variants where fresh requests are forwarded to the leader instead
    /// of broadcast, and hosts keep a dedicated consensus queue.
    pub fn split_queues(self) -> bool {
        matches!(self, Variant::AHLPlus | Variant::AHLR)
    }
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{variant:?} needs n >= {needed} for f = {f}, got n = {n}")]
    CommitteeTooSmall {
        variant: Variant,
        n: u32,
        f: u32,
        needed: u32,
    },
    #[error("watermark window {window} is not a multiple of checkpoint interval {interval}")]
    WindowNotMultiple { window: u64, interval: u64 },
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("checkpoint interval must be positive")]
    ZeroInterval,
}

/// Static per-committee protocol parameters.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ConsensusConfig {
    pub variant: Variant,
    /// Committee size.
    pub n: u32,
    /// Tolerated Byzantine members.
    pub f: u32,
    /// Transactions per proposed block.
    pub batch_size: usize,
    /// Flush a partial batch after this long.
    pub batch_timeout: SimDuration,
    /// Blocks between checkpoints.
    pub checkpoint_interval: u64,
    /// Sequences a leader may run ahead of the stable checkpoint.
    pub watermark_window: u64,
    /// How long a pending request may sit unexecuted before the replica
    /// suspects the leader.
    pub request_timeout: SimDuration,
    /// How long to wait for a `NewView` before escalating; doubles per
    /// consecutive view change and resets on execution progress.
    pub viewchange_timeout: SimDuration,
}

impl ConsensusConfig {
    pub fn new(variant: Variant, n: u32, f: u32) -> Self {
        ConsensusConfig {
            variant,
            n,
            f,
            batch_size: 64,
            batch_timeout: SimDuration::from_millis(50),
            checkpoint_interval: 128,
            watermark_window: 256,
            request_timeout: SimDuration::from_secs(2),
            viewchange_timeout: SimDuration::from_secs(2),
        }
    }

    /// Matching votes needed to advance a phase.
    pub fn quorum(&self) -> usize {
        match self.variant {
            Variant::HL => (2 * self.f + 1) as usize,
            _ => (self.f + 1) as usize,
        }
    }

    /// Minimum committee size for the variant's fault budget.
    pub fn min_committee(&self) -> u32 {
        match self.variant {
            Variant::HL => 3 * self.f + 1,
            _ => 2 * self.f + 1,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n < self.min_committee() {
            return Err(ConfigError::CommitteeTooSmall {
                variant: self.variant,
                n: self.n,
                f: self.f,
                needed: self.min_committee(),
            });
        }
        if self.batch_size == 0 {
            return Err(ConfigError::ZeroBatch);
        }
        if self.checkpoint_interval == 0 {
            return Err(ConfigError::ZeroInterval);
        }
        if self.watermark_window % self.checkpoint_interval != 0 {
            return Err(ConfigError::WindowNotMultiple {
                window: self.watermark_window,
                interval: self.checkpoint_interval,
            });
        }
        Ok(())
    }
}

/// Credentials a request carries to prove it may enter this committee's
/// chain. Single-shard operations need none; cross-shard phase operations
/// carry member-signed certificates from the coordinating committee.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub enum Evidence {
    #[default]
    None,
    /// Reference-committee members endorsing a prepare dispatch.
    PrepareCert(Vec<PrepareTxMsg>),
    /// Reference-committee members announcing the terminal decision.
    DecisionCert(Vec<DecisionMsg>),
}

impl Evidence {
    /// Signatures a verifier must check; used for cost accounting.
    pub fn sig_count(&self) -> usize {
        match self {
            Evidence::None => 0,
            Evidence::PrepareCert(msgs) => msgs.len(),
            Evidence::DecisionCert(msgs) => msgs.len(),
        }
    }
}

/// A transaction submitted for ordering plus its admission evidence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClientRequest {
    pub tx: Transaction,
    pub evidence: Evidence,
}

impl ClientRequest {
    pub fn plain(tx: Transaction) -> Self {
        ClientRequest {
            tx,
            evidence: Evidence::None,
        }
    }
}

/// Admission rules the committee enforces before voting on a request.
/// Checked by the leader when batching and by every replica when accepting
/// a `PrePrepare`; a block containing an inadmissible transaction is
/// discarded silently.
#[derive(Clone, Debug)]
pub enum ValidationPolicy {
    /// Benchmarks and single-committee tests: order everything.
    AcceptAll,
    /// Sharded deployments: phase operations need certificates.
    CrossShard(Box<CrossShardPolicy>),
}

/// Roster and quorum knowledge for validating cross-shard certificates.
#[derive(Clone, Debug)]
pub struct CrossShardPolicy {
    /// Shard this committee serves; `None` for the reference committee.
    pub shard: Option<ShardId>,
    /// Distinct reference-committee endorsements needed on a certificate.
    pub rc_quorum: usize,
    pub rc_members: BTreeSet<NodeId>,
    /// Distinct voter endorsements needed per shard committee.
    pub shard_quorums: BTreeMap<ShardId, usize>,
    /// Shard committee rosters.
    pub shard_members: BTreeMap<ShardId, BTreeSet<NodeId>>,
    /// Message-signature keys for every node named above.
    pub keys: BTreeMap<NodeId, VerifyingKey>,
}

impl CrossShardPolicy {
    fn rc_endorsements<T, F, V>(&self, msgs: &[T], member: F, valid: V) -> usize
    where
        F: Fn(&T) -> NodeId,
        V: Fn(&T, &VerifyingKey) -> bool,
    {
        msgs.iter()
            .filter_map(|m| {
                let id = member(m);
                let key = self.keys.get(&id)?;
                (self.rc_members.contains(&id) && valid(m, key)).then_some(id)
            })
            .collect::<BTreeSet<_>>()
            .len()
    }

    fn validate(&self, req: &ClientRequest) -> bool {
        match (&req.tx.payload, &req.evidence) {
            (Payload::KvUpdate(_) | Payload::SmallBankPayment { .. }, _) => {
                // Multi-shard client operations must be coordinated, not
                // submitted to a shard directly.
                self.shard.is_some() && !req.tx.is_cross_shard()
            }
            (Payload::PreparePhaseOp { txid, ops }, Evidence::PrepareCert(msgs)) => {
                let Some(shard) = self.shard else { return false };
                let matching: Vec<&PrepareTxMsg> = msgs
                    .iter()
                    .filter(|m| m.txid == *txid && m.shard == shard && m.ops == *ops)
                    .collect();
                self.rc_endorsements(&matching, |m| m.member, |m, k| m.verify(k))
                    >= self.rc_quorum
            }
            (Payload::CommitPhaseOp { txid }, Evidence::DecisionCert(msgs)) => {
                self.decision_quorum(msgs, *txid, true)
            }
            (Payload::AbortPhaseOp { txid }, Evidence::DecisionCert(msgs)) => {
                self.decision_quorum(msgs, *txid, false)
            }
            (Payload::RefCommitteeOp(input), _) => {
                if self.shard.is_some() {
                    return false;
                }
                match input {
                    crate::coordination::RcInput::Begin { cross } => !cross.sub_ops.is_empty()
                        && cross
                            .involved()
                            .iter()
                            .all(|s| self.shard_quorums.contains_key(s)),
                    crate::coordination::RcInput::Vote { quorum } => {
                        self.vote_quorum_valid(quorum)
                    }
                }
            }
            _ => false,
        }
    }

    fn decision_quorum(&self, msgs: &[DecisionMsg], txid: crate::ledger::TxId, commit: bool) -> bool {
        let matching: Vec<&DecisionMsg> = msgs
            .iter()
            .filter(|m| m.txid == txid && m.commit == commit)
            .collect();
        self.rc_endorsements(&matching, |m| m.member, |m, k| m.verify(k)) >= self.rc_quorum
    }

    fn vote_quorum_valid(&self, quorum: &VoteQuorum) -> bool {
        let Some(needed) = self.shard_quorums.get(&quorum.committee) else {
            return false;
        };
        let Some(roster) = self.shard_members.get(&quorum.committee) else {
            return false;
        };
        quorum.verify(*needed, |id| {
            roster.contains(&id).then(|| self.keys.get(&id)).flatten().copied()
        })
    }
}

impl ValidationPolicy {
    pub fn validate(&self, req: &ClientRequest) -> bool {
        match self {
            ValidationPolicy::AcceptAll => true,
            ValidationPolicy::CrossShard(policy) => policy.validate(req),
        }
    }
}

/// A checkpoint a quorum vouched for: sequence, state digest, and the
/// signed `Checkpoint` messages proving it. The genesis checkpoint
/// (sequence 0) carries no evidence; it is trusted bootstrap state and is
/// never re-adopted since adoption requires strictly advancing sequences.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StableCheckpoint {
    pub seq: Seq,
    pub digest: Digest32,
    pub evidence: Vec<SignedMsg>,
}

impl StableCheckpoint {
    pub fn genesis(state: &LedgerState) -> Self {
        StableCheckpoint {
            seq: 0,
            digest: state.state_digest(),
            evidence: vec![],
        }
    }
}

/// Proof that some sequence prepared in an earlier view and must be
/// re-proposed with the same digest. Either a quorum of `Prepare` messages
/// or, under leader aggregation, the condensed [`QuorumProof`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreparedEvidence {
    pub view: View,
    pub seq: Seq,
    pub digest: Digest32,
    pub prepares: Vec<SignedMsg>,
    pub agg: Option<QuorumProof>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViewChangeMsg {
    pub new_view: View,
    pub stable: StableCheckpoint,
    pub prepared: Vec<PreparedEvidence>,
    pub proof: Option<AppendProof>,
}

impl ViewChangeMsg {
    /// Digest bound into the enclave's view-change log: one write-once slot
    /// per target view, so a replica can never endorse two conflicting
    /// view-change statements for the same view.
    pub fn content_digest(&self) -> Digest32 {
        let prepared: Vec<(View, Seq, &Digest32)> = self
            .prepared
            .iter()
            .map(|p| (p.view, p.seq, &p.digest))
            .collect();
        digest_of(&(
            "vc",
            self.new_view,
            self.stable.seq,
            &self.stable.digest,
            prepared,
        ))
    }
}

/// One slot in a `NewView`: re-propose `digest` at `seq`. `null` slots fill
/// sequence gaps with empty blocks so execution stays gap-free.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Proposal {
    pub seq: Seq,
    pub digest: Digest32,
    pub null: bool,
    pub block: Option<Block>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NewViewMsg {
    pub new_view: View,
    pub view_changes: Vec<SignedMsg>,
    pub proposals: Vec<Proposal>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum ConsensusMessage {
    Request(ClientRequest),
    PrePrepare {
        view: View,
        seq: Seq,
        digest: Digest32,
        block: Block,
        /// Admission evidence per transaction, aligned with `block.txs`.
        /// Not covered by the block digest: any valid evidence vector
        /// satisfies followers, and a leader shipping an invalid one is
        /// simply treated as faulty.
        evidence: Vec<Evidence>,
        proof: Option<AppendProof>,
    },
    Prepare {
        view: View,
        seq: Seq,
        digest: Digest32,
        proof: Option<AppendProof>,
    },
    Commit {
        view: View,
        seq: Seq,
        digest: Digest32,
        proof: Option<AppendProof>,
    },
    /// Leader-aggregated prepare quorum (`AHLR`).
    PrepareAgg(QuorumProof),
    /// Leader-aggregated commit quorum (`AHLR`).
    CommitAgg(QuorumProof),
    Checkpoint {
        seq: Seq,
        state_digest: Digest32,
        proof: Option<AppendProof>,
    },
    ViewChange(ViewChangeMsg),
    NewView(NewViewMsg),
    /// Ask peers for a block whose digest committed without the body.
    BlockFetch { seq: Seq, digest: Digest32 },
    BlockReply { seq: Seq, block: Block },
    /// Ask peers for a stable checkpoint at or above `at_least`.
    StateFetchRequest { at_least: Seq },
    StateFetchResponse {
        stable: StableCheckpoint,
        state: LedgerState,
        view: View,
    },
}

impl ConsensusMessage {
    /// Short label for traces.
    pub fn kind(&self) -> &'static str {
        match self {
            ConsensusMessage::Request(_) => "request",
            ConsensusMessage::PrePrepare { .. } => "pre-prepare",
            ConsensusMessage::Prepare { .. } => "prepare",
            ConsensusMessage::Commit { .. } => "commit",
            ConsensusMessage::PrepareAgg(_) => "prepare-agg",
            ConsensusMessage::CommitAgg(_) => "commit-agg",
            ConsensusMessage::Checkpoint { .. } => "checkpoint",
            ConsensusMessage::ViewChange(_) => "view-change",
            ConsensusMessage::NewView(_) => "new-view",
            ConsensusMessage::BlockFetch { .. } => "block-fetch",
            ConsensusMessage::BlockReply { .. } => "block-reply",
            ConsensusMessage::StateFetchRequest { .. } => "state-fetch-request",
            ConsensusMessage::StateFetchResponse { .. } => "state-fetch-response",
        }
    }
}

fn msg_signable<'a>(from: NodeId, body: &'a ConsensusMessage) -> impl Serialize + 'a {
    ("consensus-msg", from, body)
}

/// A consensus message bound to its sender.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SignedMsg {
    pub from: NodeId,
    pub body: ConsensusMessage,
    pub sig: Sig,
}

impl SignedMsg {
    pub fn sign(from: NodeId, body: ConsensusMessage, key: &SigningKey) -> Self {
        let sig = sign_obj(key, &msg_signable(from, &body));
        SignedMsg { from, body, sig }
    }

    pub fn verify(&self, key: &VerifyingKey) -> bool {
        verify_obj(key, &msg_signable(self.from, &self.body), &self.sig)
    }

    pub fn digest(&self) -> Digest32 {
        digest_of(self)
    }
}

/// Logical timers a replica arms. Generations make cancellation logical:
/// a stale generation firing is ignored.
#[derive(Copy, Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum ReplicaTimer {
    /// Flush a partial batch.
    BatchFlush { gen: u64 },
    /// A pending request has waited too long; suspect the leader.
    RequestGuard { gen: u64 },
    /// No `NewView` arrived for the pending view change; escalate.
    ViewChangeRetry { gen: u64 },
    /// Re-issue outstanding block or state fetches.
    FetchRetry { gen: u64 },
}

/// Effects returned by replica callbacks, applied by the host.
#[derive(Clone, Debug)]
pub enum Output {
    Send { to: NodeId, msg: SignedMsg },
    /// Deliver to every other committee member; the replica has already
    /// applied the message to itself.
    Broadcast { msg: SignedMsg },
    Timer { timer: ReplicaTimer, delay: SimDuration },
    Executed {
        seq: Seq,
        block: Block,
        receipts: Vec<Receipt>,
    },
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coordination::{Verdict, VoteReply};
    use crate::crypto::{derive_seed, signing_key_from_seed};
    use crate::ids::ClientId;
    use crate::ledger::{Key, StateOp};

    fn key(i: u64) -> SigningKey {
        signing_key_from_seed(derive_seed(77, "policy-key", i))
    }

    fn policy() -> CrossShardPolicy {
        let keys: BTreeMap<NodeId, VerifyingKey> = (0..9u32)
            .map(|i| (NodeId(i), key(i as u64).verifying_key()))
            .collect();
        CrossShardPolicy {
            shard: Some(1),
            rc_quorum: 2,
            rc_members: [NodeId(0), NodeId(1), NodeId(2)].into(),
            shard_quorums: [(0, 2), (1, 2)].into(),
            shard_members: [
                (0, [NodeId(3), NodeId(4), NodeId(5)].into()),
                (1, [NodeId(6), NodeId(7), NodeId(8)].into()),
            ]
            .into(),
            keys,
        }
    }

    fn prepare_request(signers: &[u32]) -> ClientRequest {
        let ops = vec![StateOp::Put {
            key: Key::text("k"),
            value: crate::ledger::Value::text("v"),
        }];
        let msgs: Vec<PrepareTxMsg> = signers
            .iter()
            .map(|i| PrepareTxMsg::new(9, 1, ops.clone(), NodeId(*i), &key(*i as u64)))
            .collect();
        ClientRequest {
            tx: Transaction::new(
                9,
                Payload::PreparePhaseOp { txid: 9, ops },
                ClientId(0),
                4,
            ),
            evidence: Evidence::PrepareCert(msgs),
        }
    }

    #[test]
    fn config_quorums_follow_variant() {
        let hl = ConsensusConfig::new(Variant::HL, 4, 1);
        assert_eq!(hl.quorum(), 3);
        hl.validate().unwrap();
        let ahl = ConsensusConfig::new(Variant::AHL, 3, 1);
        assert_eq!(ahl.quorum(), 2);
        ahl.validate().unwrap();
        assert!(matches!(
            ConsensusConfig::new(Variant::HL, 3, 1).validate(),
            Err(ConfigError::CommitteeTooSmall { needed: 4, .. })
        ));
        let mut bad = ConsensusConfig::new(Variant::AHL, 3, 1);
        bad.watermark_window = 100;
        assert!(matches!(
            bad.validate(),
            Err(ConfigError::WindowNotMultiple { .. })
        ));
    }

    #[test]
    fn prepare_cert_needs_rc_quorum() {
        let p = ValidationPolicy::CrossShard(Box::new(policy()));
        assert!(p.validate(&prepare_request(&[0, 1])));
        // one endorsement short
        assert!(!p.validate(&prepare_request(&[0])));
        // duplicate signer counts once
        assert!(!p.validate(&prepare_request(&[2, 2])));
        // shard members are not reference members
        assert!(!p.validate(&prepare_request(&[0, 6])));
    }

    #[test]
    fn decision_cert_checks_flag_and_txid() {
        let p = policy();
        let commit: Vec<DecisionMsg> = [1u32, 2]
            .iter()
            .map(|i| DecisionMsg::new(9, true, NodeId(*i), &key(*i as u64)))
            .collect();
        let req = ClientRequest {
            tx: Transaction::new(9, Payload::CommitPhaseOp { txid: 9 }, ClientId(0), 4),
            evidence: Evidence::DecisionCert(commit.clone()),
        };
        assert!(ValidationPolicy::CrossShard(Box::new(p.clone())).validate(&req));
        let abort = ClientRequest {
            tx: Transaction::new(9, Payload::AbortPhaseOp { txid: 9 }, ClientId(0), 4),
            evidence: Evidence::DecisionCert(commit),
        };
        assert!(!ValidationPolicy::CrossShard(Box::new(p)).validate(&abort));
    }

    #[test]
    fn vote_quorum_checked_against_voting_committee_roster() {
        let mut p = policy();
        p.shard = None;
        let replies: Vec<VoteReply> = [6u32, 7]
            .iter()
            .map(|i| VoteReply::new(9, 1, Verdict::PrepareOK, NodeId(*i), &key(*i as u64)))
            .collect();
        let quorum = VoteQuorum {
            txid: 9,
            committee: 1,
            verdict: Verdict::PrepareOK,
            replies,
        };
        let req = ClientRequest {
            tx: Transaction::new(
                crate::coordination::vote_txid(9, 1, Verdict::PrepareOK),
                Payload::RefCommitteeOp(crate::coordination::RcInput::Vote { quorum }),
                ClientId(0),
                4,
            ),
            evidence: Evidence::None,
        };
        assert!(ValidationPolicy::CrossShard(Box::new(p.clone())).validate(&req));
        // same request rejected by a shard committee
        p.shard = Some(1);
        assert!(!ValidationPolicy::CrossShard(Box::new(p)).validate(&req));
    }

    #[test]
    fn direct_cross_shard_client_ops_rejected() {
        let p = ValidationPolicy::CrossShard(Box::new(policy()));
        // keys "a" and "b" land on different shards of 4
        let tx = Transaction::new(
            1,
            Payload::SmallBankPayment {
                src: Key::text("acc-a"),
                dst: Key::text("acc-d"),
                amount: 1,
            },
            ClientId(0),
            4,
        );
        if tx.is_cross_shard() {
            assert!(!p.validate(&ClientRequest::plain(tx)));
        }
    }

    #[test]
    fn signed_msg_roundtrip() {
        let sk = key(0);
        let msg = SignedMsg::sign(
            NodeId(0),
            ConsensusMessage::BlockFetch {
                seq: 4,
                digest: digest_of(&"x"),
            },
            &sk,
        );
        assert!(msg.verify(&sk.verifying_key()));
        assert!(!msg.verify(&key(1).verifying_key()));
        assert_eq!(msg.body.kind(), "block-fetch");
    }
}
