//! Cross-shard commit coordination.
//!
//! A designated reference committee (RC) drives two-phase commit over the
//! involved shard committees. The RC's own state is ordinary ledger state:
//! every decision is the deterministic result of executing a
//! `RefCommitteeOp` transaction, so RC replicas stay in agreement by
//! consensus alone. This module holds the pure pieces: record types,
//! the `rc_step` transition function, quorum evidence and its verification,
//! and the kv glue used by ledger execution. Actor behaviour (timers,
//! re-drives, client relaying) lives with the simulation hosts.

use crate::crypto::{sha256, sign_obj, verify_obj, Sig};
use crate::ids::{NodeId, ShardId};
use crate::ledger::{Key, Payload, ReceiptStatus, StateOp, Transaction, TxId, Value};
use ed25519_dalek::{SigningKey, VerifyingKey};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub enum Verdict {
    PrepareOK,
    PrepareNotOK,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum RcState {
    Started,
    Preparing,
    Committed,
    Aborted,
}

impl RcState {
    pub fn is_terminal(self) -> bool {
        matches!(self, RcState::Committed | RcState::Aborted)
    }
}

/// Per-transaction record kept in the RC ledger under `"R_" + txid`.
/// `c` counts committees whose prepare verdict is still outstanding;
/// `counted` lists those already heard so a replayed quorum is detectable.
/// Invariant: `c + counted.len() == involved.len()` until an abort.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct RefTxRecord {
    pub txid: TxId,
    pub state: RcState,
    pub c: u32,
    pub involved: Vec<ShardId>,
    pub counted: Vec<ShardId>,
}

impl RefTxRecord {
    pub fn new(txid: TxId, involved: Vec<ShardId>) -> Self {
        RefTxRecord {
            txid,
            state: RcState::Started,
            c: involved.len() as u32,
            involved,
            counted: vec![],
        }
    }

    pub fn record_key(txid: TxId) -> Key {
        Key(format!("R_{txid}").into_bytes())
    }

    pub fn payload_key(txid: TxId) -> Key {
        Key(format!("X_{txid}").into_bytes())
    }
}

/// One shard member's signed verdict on a prepare.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct VoteReply {
    pub txid: TxId,
    pub committee: ShardId,
    pub verdict: Verdict,
    pub member: NodeId,
    pub sig: Sig,
}

impl VoteReply {
    fn signable(txid: TxId, committee: ShardId, verdict: Verdict, member: NodeId) -> impl Serialize {
        ("vote-reply", txid, committee, verdict, member)
    }

    pub fn new(
        txid: TxId,
        committee: ShardId,
        verdict: Verdict,
        member: NodeId,
        key: &SigningKey,
    ) -> Self {
        let sig = sign_obj(key, &Self::signable(txid, committee, verdict, member));
        VoteReply {
            txid,
            committee,
            verdict,
            member,
            sig,
        }
    }

    pub fn verify(&self, key: &VerifyingKey) -> bool {
        verify_obj(
            key,
            &Self::signable(self.txid, self.committee, self.verdict, self.member),
            &self.sig,
        )
    }
}

/// A committee's aggregate verdict: at least a quorum of matching replies
/// from distinct members.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct VoteQuorum {
    pub txid: TxId,
    pub committee: ShardId,
    pub verdict: Verdict,
    pub replies: Vec<VoteReply>,
}

impl VoteQuorum {
    /// Number of distinct members whose reply matches the quorum header.
    pub fn matching_signers(&self) -> usize {
        self.replies
            .iter()
            .filter(|r| {
                r.txid == self.txid && r.committee == self.committee && r.verdict == self.verdict
            })
            .map(|r| r.member)
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Full check including signatures; `lookup` resolves a member id to its
    /// verification key (unknown members do not count).
    pub fn verify<F>(&self, needed: usize, lookup: F) -> bool
    where
        F: Fn(NodeId) -> Option<VerifyingKey>,
    {
        let valid: BTreeSet<NodeId> = self
            .replies
            .iter()
            .filter(|r| {
                r.txid == self.txid && r.committee == self.committee && r.verdict == self.verdict
            })
            .filter(|r| lookup(r.member).is_some_and(|k| r.verify(&k)))
            .map(|r| r.member)
            .collect();
        valid.len() >= needed
    }
}

/// Deterministic transaction id for the RC transaction wrapping a quorum, so
/// duplicate submissions (client plus re-drives) dedupe in consensus.
pub fn vote_txid(txid: TxId, committee: ShardId, verdict: Verdict) -> TxId {
    let d = sha256(format!("vote:{txid}:{committee}:{verdict:?}").as_bytes());
    u64::from_le_bytes(d.0[..8].try_into().expect("8 bytes"))
}

/// Deterministic transaction id for a shard's second-phase transaction.
/// Distinct from the original id, which the prepare already consumed at
/// that committee, and identical across every injecting member so copies
/// dedupe.
pub fn phase_txid(txid: TxId, shard: ShardId, commit: bool) -> TxId {
    let d = sha256(format!("phase:{txid}:{shard}:{commit}").as_bytes());
    u64::from_le_bytes(d.0[..8].try_into().expect("8 bytes"))
}

/// A cross-shard transaction split into per-shard sub-operations.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct CrossShardTx {
    pub txid: TxId,
    pub payload: Payload,
    pub sub_ops: BTreeMap<ShardId, Vec<StateOp>>,
}

impl CrossShardTx {
    /// Splits by key ownership. Returns `None` for payloads that are not
    /// client-level operations (phase ops and RC ops are never re-split).
    pub fn split(tx: &Transaction, shard_count: u32) -> Option<CrossShardTx> {
        let mut sub_ops: BTreeMap<ShardId, Vec<StateOp>> = BTreeMap::new();
        match &tx.payload {
            Payload::KvUpdate(writes) => {
                for (k, v) in writes {
                    sub_ops.entry(k.shard_of(shard_count)).or_default().push(
                        StateOp::Put {
                            key: k.clone(),
                            value: v.clone(),
                        },
                    );
                }
            }
            Payload::SmallBankPayment { src, dst, amount } => {
                sub_ops
                    .entry(src.shard_of(shard_count))
                    .or_default()
                    .push(StateOp::Debit {
                        account: src.clone(),
                        amount: *amount,
                    });
                sub_ops
                    .entry(dst.shard_of(shard_count))
                    .or_default()
                    .push(StateOp::Credit {
                        account: dst.clone(),
                        amount: *amount,
                    });
            }
            Payload::PreparePhaseOp { .. }
            | Payload::CommitPhaseOp { .. }
            | Payload::AbortPhaseOp { .. }
            | Payload::RefCommitteeOp(_) => return None,
        }
        Some(CrossShardTx {
            txid: tx.txid,
            payload: tx.payload.clone(),
            sub_ops,
        })
    }

    pub fn involved(&self) -> Vec<ShardId> {
        self.sub_ops.keys().copied().collect()
    }

    /// The prepare transaction shard `shard` must run through its own
    /// consensus instance.
    pub fn prepare_tx(&self, shard: ShardId, client: crate::ids::ClientId) -> Option<Transaction> {
        let ops = self.sub_ops.get(&shard)?.clone();
        Some(Transaction {
            txid: self.txid,
            payload: Payload::PreparePhaseOp {
                txid: self.txid,
                ops,
            },
            client,
            shards: vec![shard],
        })
    }
}

/// Inputs to the RC state machine, carried as `Payload::RefCommitteeOp`.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum RcInput {
    Begin { cross: Box<CrossShardTx> },
    Vote { quorum: VoteQuorum },
}

#[derive(Error, Debug, Clone, Copy, PartialEq, Eq)]
pub enum RcStepError {
    /// Quorum malformed for this record: wrong transaction, a committee that
    /// is not involved, or fewer matching signers than required.
    #[error("invalid quorum")]
    InvalidQuorum,
    /// Quorum arrived after its committee was counted or after the record
    /// reached a terminal state; the caller re-announces the decision.
    #[error("stale quorum")]
    StaleQuorum,
}

/// Pure transition of one record on one verified quorum. Signature validity
/// is the caller's obligation (checked before the quorum is ordered);
/// `needed` is the per-committee quorum size re-checked structurally here.
pub fn rc_step(
    record: &RefTxRecord,
    quorum: &VoteQuorum,
    needed: usize,
) -> Result<RefTxRecord, RcStepError> {
    if quorum.txid != record.txid
        || !record.involved.contains(&quorum.committee)
        || quorum.matching_signers() < needed
    {
        return Err(RcStepError::InvalidQuorum);
    }
    if record.state.is_terminal() || record.counted.contains(&quorum.committee) {
        return Err(RcStepError::StaleQuorum);
    }
    let mut next = record.clone();
    match quorum.verdict {
        Verdict::PrepareNotOK => {
            next.state = RcState::Aborted;
        }
        Verdict::PrepareOK => {
            next.counted.push(quorum.committee);
            next.c -= 1;
            next.state = if next.c == 0 {
                RcState::Committed
            } else {
                RcState::Preparing
            };
        }
    }
    Ok(next)
}

/// Key holding the per-committee quorum sizes the RC enforces; installed in
/// the RC ledger at genesis.
pub fn quorum_config_key() -> Key {
    Key::text("C_quorum")
}

pub fn install_quorum_config(kv: &mut BTreeMap<Key, Value>, sizes: &BTreeMap<ShardId, usize>) {
    kv.insert(
        quorum_config_key(),
        Value(serde_json::to_vec(sizes).expect("serializable")),
    );
}

fn read_quorum_config(kv: &BTreeMap<Key, Value>) -> BTreeMap<ShardId, usize> {
    kv.get(&quorum_config_key())
        .and_then(|v| serde_json::from_slice(&v.0).ok())
        .unwrap_or_default()
}

pub fn read_record(kv: &BTreeMap<Key, Value>, txid: TxId) -> Option<RefTxRecord> {
    let v = kv.get(&RefTxRecord::record_key(txid))?;
    serde_json::from_slice(&v.0).ok()
}

pub fn read_cross_tx(kv: &BTreeMap<Key, Value>, txid: TxId) -> Option<CrossShardTx> {
    let v = kv.get(&RefTxRecord::payload_key(txid))?;
    serde_json::from_slice(&v.0).ok()
}

/// Applies an RC input to the RC ledger's kv map. Total and deterministic:
/// rejected inputs yield an `Aborted` receipt status with the state
/// unchanged, so every replica derives the same ledger.
pub fn apply_rc(
    kv: &mut BTreeMap<Key, Value>,
    input: &RcInput,
) -> (ReceiptStatus, Vec<(Key, Value)>, Vec<(Key, Value)>) {
    match input {
        RcInput::Begin { cross } => {
            let rkey = RefTxRecord::record_key(cross.txid);
            if kv.contains_key(&rkey) {
                // DuplicateTx: registration already exists
                return (ReceiptStatus::Aborted, vec![], vec![]);
            }
            if cross.sub_ops.is_empty() {
                return (ReceiptStatus::Aborted, vec![], vec![]);
            }
            let record = RefTxRecord::new(cross.txid, cross.involved());
            let rval = Value(serde_json::to_vec(&record).expect("serializable"));
            let xkey = RefTxRecord::payload_key(cross.txid);
            let xval = Value(serde_json::to_vec(&cross).expect("serializable"));
            kv.insert(rkey.clone(), rval.clone());
            kv.insert(xkey.clone(), xval.clone());
            (
                ReceiptStatus::Committed,
                vec![],
                vec![(rkey, rval), (xkey, xval)],
            )
        }
        RcInput::Vote { quorum } => {
            let rkey = RefTxRecord::record_key(quorum.txid);
            let Some(record) = read_record(kv, quorum.txid) else {
                return (ReceiptStatus::Aborted, vec![], vec![]);
            };
            let old = kv.get(&rkey).cloned().expect("record read above");
            let needed = read_quorum_config(kv)
                .get(&quorum.committee)
                .copied()
                .unwrap_or(usize::MAX);
            match rc_step(&record, quorum, needed) {
                Ok(next) => {
                    let nval = Value(serde_json::to_vec(&next).expect("serializable"));
                    kv.insert(rkey.clone(), nval.clone());
                    (
                        ReceiptStatus::Committed,
                        vec![(rkey.clone(), old)],
                        vec![(rkey, nval)],
                    )
                }
                Err(_) => (ReceiptStatus::Aborted, vec![(rkey, old)], vec![]),
            }
        }
    }
}

/// One RC member's signed endorsement of a prepare dispatch: shard replicas
/// accept a `PreparePhaseOp` only with a quorum of these.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct PrepareTxMsg {
    pub txid: TxId,
    pub shard: ShardId,
    pub ops: Vec<StateOp>,
    pub member: NodeId,
    pub sig: Sig,
}

impl PrepareTxMsg {
    fn signable(
        txid: TxId,
        shard: ShardId,
        ops: &[StateOp],
        member: NodeId,
    ) -> impl Serialize + '_ {
        ("prepare-tx", txid, shard, ops, member)
    }

    pub fn new(
        txid: TxId,
        shard: ShardId,
        ops: Vec<StateOp>,
        member: NodeId,
        key: &SigningKey,
    ) -> Self {
        let sig = sign_obj(key, &Self::signable(txid, shard, &ops, member));
        PrepareTxMsg {
            txid,
            shard,
            ops,
            member,
            sig,
        }
    }

    pub fn verify(&self, key: &VerifyingKey) -> bool {
        verify_obj(
            key,
            &Self::signable(self.txid, self.shard, &self.ops, self.member),
            &self.sig,
        )
    }
}

/// One RC member's signed announcement of the terminal decision.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct DecisionMsg {
    pub txid: TxId,
    pub commit: bool,
    pub member: NodeId,
    pub sig: Sig,
}

impl DecisionMsg {
    fn signable(txid: TxId, commit: bool, member: NodeId) -> impl Serialize {
        ("decision", txid, commit, member)
    }

    pub fn new(txid: TxId, commit: bool, member: NodeId, key: &SigningKey) -> Self {
        let sig = sign_obj(key, &Self::signable(txid, commit, member));
        DecisionMsg {
            txid,
            commit,
            member,
            sig,
        }
    }

    pub fn verify(&self, key: &VerifyingKey) -> bool {
        verify_obj(key, &Self::signable(self.txid, self.commit, self.member), &self.sig)
    }
}

/// Checks a bundle of per-member messages for `needed` distinct valid
/// signers agreeing on the same statement. Used by shard replicas to admit
/// prepare dispatches and terminal decisions.
pub fn distinct_valid_signers<T, F, G>(msgs: &[T], member: F, valid: G) -> usize
where
    F: Fn(&T) -> NodeId,
    G: Fn(&T) -> bool,
{
    msgs.iter()
        .filter(|m| valid(m))
        .map(|m| member(m))
        .collect::<BTreeSet<_>>()
        .len()
}
