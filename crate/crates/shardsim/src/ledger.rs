//! Key-value ledger state, transactions, blocks and deterministic execution.
//!
//! Execution is a pure function of `(state, transaction)`. Cross-shard
//! transactions never touch state directly: the prepare phase writes lock
//! tuples (`"L_" + key`) and a shadow entry with the intended writes, and the
//! commit phase applies the shadow. That keeps abort a pure deletion and
//! makes replay from genesis reproduce `kv` exactly.

use crate::coordination::{self, RcInput};
use crate::crypto::{digest_of, sha256, Digest32};
use crate::ids::{ClientId, ShardId};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

pub type TxId = u64;

/// Opaque byte-string key; account ids are text. JSON encoding is base64.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Key(pub Vec<u8>);

/// Opaque byte-string value; balances are signed integers in text. JSON
/// encoding is base64.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Value(pub Vec<u8>);

const LOCK_PREFIX: &[u8] = b"L_";
const SHADOW_PREFIX: &[u8] = b"S_";
const LOCK_MARKER: &[u8] = b"true";

impl Key {
    pub fn text(s: &str) -> Self {
        Key(s.as_bytes().to_vec())
    }

    /// Lock keys are exactly `"L_" + base key`.
    pub fn lock_key(&self) -> Key {
        let mut k = LOCK_PREFIX.to_vec();
        k.extend_from_slice(&self.0);
        Key(k)
    }

    pub fn shadow_key(txid: TxId) -> Key {
        let mut k = SHADOW_PREFIX.to_vec();
        k.extend_from_slice(txid.to_string().as_bytes());
        Key(k)
    }

    pub fn is_lock(&self) -> bool {
        self.0.starts_with(LOCK_PREFIX)
    }

    pub fn is_shadow(&self) -> bool {
        self.0.starts_with(SHADOW_PREFIX)
    }

    /// Stable shard assignment by key hash.
    pub fn shard_of(&self, shard_count: u32) -> ShardId {
        debug_assert!(shard_count > 0);
        let d = sha256(&self.0);
        u32::from_be_bytes([d.0[0], d.0[1], d.0[2], d.0[3]]) % shard_count
    }
}

impl Value {
    pub fn text(s: &str) -> Self {
        Value(s.as_bytes().to_vec())
    }

    pub fn lock_marker() -> Self {
        Value(LOCK_MARKER.to_vec())
    }

    pub fn from_i64(v: i64) -> Self {
        Value(v.to_string().into_bytes())
    }

    pub fn as_i64(&self) -> Option<i64> {
        std::str::from_utf8(&self.0).ok()?.parse().ok()
    }
}

impl fmt::Debug for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match std::str::from_utf8(&self.0) {
            Ok(s) => write!(f, "Key({s:?})"),
            Err(_) => write!(f, "Key(0x{})", hex::encode(&self.0)),
        }
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match std::str::from_utf8(&self.0) {
            Ok(s) => write!(f, "Value({s:?})"),
            Err(_) => write!(f, "Value(0x{})", hex::encode(&self.0)),
        }
    }
}

impl Serialize for Key {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use base64::Engine;
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for Key {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use base64::Engine;
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s)
            .map(Key)
            .map_err(serde::de::Error::custom)
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use base64::Engine;
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use base64::Engine;
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s)
            .map(Value)
            .map_err(serde::de::Error::custom)
    }
}

/// One primitive inside a per-shard sub-operation.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum StateOp {
    /// Unconditional write.
    Put { key: Key, value: Value },
    /// Balance check at prepare time; stages `balance - amount`.
    Debit { account: Key, amount: u64 },
    /// Stages `balance + amount`.
    Credit { account: Key, amount: u64 },
}

impl StateOp {
    pub fn key(&self) -> &Key {
        match self {
            StateOp::Put { key, .. } => key,
            StateOp::Debit { account, .. } | StateOp::Credit { account, .. } => account,
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Payload {
    KvUpdate(Vec<(Key, Value)>),
    SmallBankPayment { src: Key, dst: Key, amount: u64 },
    PreparePhaseOp { txid: TxId, ops: Vec<StateOp> },
    CommitPhaseOp { txid: TxId },
    AbortPhaseOp { txid: TxId },
    RefCommitteeOp(RcInput),
}

impl Payload {
    /// Keys this payload reads or writes. Phase-op decisions and reference
    /// committee inputs carry no keys: they are routed by committee, not by
    /// key ownership.
    pub fn touched_keys(&self) -> Vec<&Key> {
        match self {
            Payload::KvUpdate(writes) => writes.iter().map(|(k, _)| k).collect(),
            Payload::SmallBankPayment { src, dst, .. } => vec![src, dst],
            Payload::PreparePhaseOp { ops, .. } => ops.iter().map(|op| op.key()).collect(),
            Payload::CommitPhaseOp { .. }
            | Payload::AbortPhaseOp { .. }
            | Payload::RefCommitteeOp(_) => vec![],
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Transaction {
    pub txid: TxId,
    pub payload: Payload,
    pub client: ClientId,
    pub shards: Vec<ShardId>,
}

impl Transaction {
    /// `shard_count` is the number of transaction shards; `shards` is derived
    /// from key ownership and is sorted and duplicate-free.
    pub fn new(txid: TxId, payload: Payload, client: ClientId, shard_count: u32) -> Self {
        let shards: BTreeSet<ShardId> = payload
            .touched_keys()
            .into_iter()
            .map(|k| k.shard_of(shard_count))
            .collect();
        Transaction {
            txid,
            payload,
            client,
            shards: shards.into_iter().collect(),
        }
    }

    pub fn is_cross_shard(&self) -> bool {
        self.shards.len() >= 2
    }
}

pub const GENESIS_PARENT: &[u8] = b"shardsim genesis";

pub fn genesis_parent_digest() -> Digest32 {
    sha256(GENESIS_PARENT)
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub parent_digest: Digest32,
    pub txs: Vec<Transaction>,
    pub digest: Digest32,
}

impl Block {
    pub fn new(height: u64, parent_digest: Digest32, txs: Vec<Transaction>) -> Self {
        let digest = Self::compute_digest(height, &parent_digest, &txs);
        Block {
            height,
            parent_digest,
            txs,
            digest,
        }
    }

    fn compute_digest(height: u64, parent: &Digest32, txs: &[Transaction]) -> Digest32 {
        digest_of(&(height, parent, txs))
    }

    pub fn verify_digest(&self) -> bool {
        Self::compute_digest(self.height, &self.parent_digest, &self.txs) == self.digest
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum ReceiptStatus {
    Committed,
    Aborted,
    PrepareOK,
    PrepareNotOK,
}

/// Execution result. `reads` are observed `(key, value)` pairs; `writes` are
/// the key-value sets this execution applied (for a prepare these are the
/// lock tuples plus the shadow entry; deletions are not listed).
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Receipt {
    pub txid: TxId,
    pub status: ReceiptStatus,
    pub reads: Vec<(Key, Value)>,
    pub writes: Vec<(Key, Value)>,
}

impl Receipt {
    fn new(txid: TxId, status: ReceiptStatus) -> Self {
        Receipt {
            txid,
            status,
            reads: vec![],
            writes: vec![],
        }
    }
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("unknown account {0:?}")]
    UnknownAccount(Key),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("no prepared transaction {0}")]
    UnknownPreparedTx(TxId),
}

/// Shadow entry recording a prepared transaction's locks and intended writes.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct PreparedRecord {
    pub locks: Vec<Key>,
    pub writes: Vec<(Key, Value)>,
}

#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct LedgerState {
    pub kv: BTreeMap<Key, Value>,
    pub height: u64,
}

impl LedgerState {
    pub fn genesis() -> Self {
        LedgerState::default()
    }

    pub fn with_accounts<I: IntoIterator<Item = (Key, i64)>>(accounts: I) -> Self {
        let mut s = LedgerState::genesis();
        for (k, bal) in accounts {
            s.kv.insert(k, Value::from_i64(bal));
        }
        s
    }

    /// Pure execution: does not mutate `self`.
    pub fn execute_transaction(
        &self,
        tx: &Transaction,
    ) -> Result<(LedgerState, Receipt), LedgerError> {
        let mut next = self.clone();
        let receipt = next.apply_transaction(tx)?;
        Ok((next, receipt))
    }

    /// In-place twin of `execute_transaction`; on error the state is
    /// untouched.
    pub fn apply_transaction(&mut self, tx: &Transaction) -> Result<Receipt, LedgerError> {
        for k in tx.payload.touched_keys() {
            if k.0.is_empty() {
                return Err(LedgerError::MalformedPayload("empty key".into()));
            }
        }
        match &tx.payload {
            Payload::KvUpdate(writes) => self.apply_kv_update(tx.txid, writes),
            Payload::SmallBankPayment { src, dst, amount } => {
                self.apply_payment(tx.txid, src, dst, *amount)
            }
            Payload::PreparePhaseOp { txid, ops } => self.apply_prepare(*txid, ops),
            Payload::CommitPhaseOp { txid } => self.apply_commit(*txid),
            Payload::AbortPhaseOp { txid } => self.apply_abort(*txid),
            Payload::RefCommitteeOp(input) => {
                let (status, reads, writes) = coordination::apply_rc(&mut self.kv, input);
                Ok(Receipt {
                    txid: tx.txid,
                    status,
                    reads,
                    writes,
                })
            }
        }
    }

    /// Executes every transaction of `block` in order and advances `height`.
    /// Per-transaction errors become `Aborted` receipts so that all replicas
    /// reach the same state no matter how a malformed transaction slipped in.
    pub fn apply_block(&mut self, block: &Block) -> Vec<Receipt> {
        let receipts = block
            .txs
            .iter()
            .map(|tx| {
                self.apply_transaction(tx)
                    .unwrap_or_else(|_| Receipt::new(tx.txid, ReceiptStatus::Aborted))
            })
            .collect();
        self.height = block.height;
        receipts
    }

    pub fn state_digest(&self) -> Digest32 {
        digest_of(self)
    }

    pub fn total_balance(&self) -> i64 {
        self.kv
            .iter()
            .filter(|(k, _)| !k.is_lock() && !k.is_shadow())
            .filter_map(|(_, v)| v.as_i64())
            .sum()
    }

    fn locked(&self, key: &Key) -> bool {
        self.kv.contains_key(&key.lock_key())
    }

    fn read_balance(&self, account: &Key) -> Result<i64, LedgerError> {
        let v = self
            .kv
            .get(account)
            .ok_or_else(|| LedgerError::UnknownAccount(account.clone()))?;
        v.as_i64()
            .ok_or_else(|| LedgerError::MalformedPayload("non-integer balance".into()))
    }

    fn apply_kv_update(
        &mut self,
        txid: TxId,
        writes: &[(Key, Value)],
    ) -> Result<Receipt, LedgerError> {
        if writes.is_empty() {
            return Err(LedgerError::MalformedPayload("empty KvUpdate".into()));
        }
        // no-wait: a single-shard write under someone else's lock aborts
        if writes.iter().any(|(k, _)| self.locked(k)) {
            return Ok(Receipt::new(txid, ReceiptStatus::Aborted));
        }
        let mut receipt = Receipt::new(txid, ReceiptStatus::Committed);
        for (k, v) in writes {
            self.kv.insert(k.clone(), v.clone());
            receipt.writes.push((k.clone(), v.clone()));
        }
        Ok(receipt)
    }

    fn apply_payment(
        &mut self,
        txid: TxId,
        src: &Key,
        dst: &Key,
        amount: u64,
    ) -> Result<Receipt, LedgerError> {
        let amount = i64::try_from(amount)
            .map_err(|_| LedgerError::MalformedPayload("amount overflow".into()))?;
        let src_bal = self.read_balance(src)?;
        let dst_bal = self.read_balance(dst)?;
        if self.locked(src) || self.locked(dst) {
            return Ok(Receipt::new(txid, ReceiptStatus::Aborted));
        }
        let mut receipt = Receipt::new(txid, ReceiptStatus::Aborted);
        receipt.reads.push((src.clone(), Value::from_i64(src_bal)));
        receipt.reads.push((dst.clone(), Value::from_i64(dst_bal)));
        if src_bal < amount {
            return Ok(receipt);
        }
        receipt.status = ReceiptStatus::Committed;
        if src == dst {
            receipt.writes.push((src.clone(), Value::from_i64(src_bal)));
        } else {
            self.kv.insert(src.clone(), Value::from_i64(src_bal - amount));
            self.kv.insert(dst.clone(), Value::from_i64(dst_bal + amount));
            receipt
                .writes
                .push((src.clone(), Value::from_i64(src_bal - amount)));
            receipt
                .writes
                .push((dst.clone(), Value::from_i64(dst_bal + amount)));
        }
        Ok(receipt)
    }

    fn apply_prepare(&mut self, txid: TxId, ops: &[StateOp]) -> Result<Receipt, LedgerError> {
        if ops.is_empty() {
            return Err(LedgerError::MalformedPayload("empty prepare".into()));
        }
        let touched: BTreeSet<Key> = ops.iter().map(|op| op.key().clone()).collect();
        // all-or-nothing: any held lock means no lock is taken at all
        if touched.iter().any(|k| self.locked(k)) {
            return Ok(Receipt::new(txid, ReceiptStatus::PrepareNotOK));
        }
        let mut receipt = Receipt::new(txid, ReceiptStatus::PrepareNotOK);
        // stage intended writes against a scratch view; balance failures vote
        // PrepareNotOK without touching state
        let mut staged: BTreeMap<Key, Value> = BTreeMap::new();
        for op in ops {
            match op {
                StateOp::Put { key, value } => {
                    staged.insert(key.clone(), value.clone());
                }
                StateOp::Debit { account, amount } | StateOp::Credit { account, amount } => {
                    let amount = i64::try_from(*amount)
                        .map_err(|_| LedgerError::MalformedPayload("amount overflow".into()))?;
                    let bal = match staged.get(account) {
                        Some(v) => v.as_i64().ok_or_else(|| {
                            LedgerError::MalformedPayload("non-integer balance".into())
                        })?,
                        None => {
                            let b = self.read_balance(account)?;
                            receipt.reads.push((account.clone(), Value::from_i64(b)));
                            b
                        }
                    };
                    let next = match op {
                        StateOp::Debit { .. } => {
                            if bal < amount {
                                return Ok(receipt);
                            }
                            bal - amount
                        }
                        _ => bal + amount,
                    };
                    staged.insert(account.clone(), Value::from_i64(next));
                }
            }
        }
        receipt.status = ReceiptStatus::PrepareOK;
        let record = PreparedRecord {
            locks: touched.iter().cloned().collect(),
            writes: staged.into_iter().collect(),
        };
        for k in &touched {
            let lk = k.lock_key();
            self.kv.insert(lk.clone(), Value::lock_marker());
            receipt.writes.push((lk, Value::lock_marker()));
        }
        let shadow = Key::shadow_key(txid);
        let shadow_val = Value(serde_json::to_vec(&record).expect("serializable"));
        self.kv.insert(shadow.clone(), shadow_val.clone());
        receipt.writes.push((shadow, shadow_val));
        Ok(receipt)
    }

    fn take_prepared(&mut self, txid: TxId) -> Result<PreparedRecord, LedgerError> {
        let shadow = Key::shadow_key(txid);
        let val = self
            .kv
            .remove(&shadow)
            .ok_or(LedgerError::UnknownPreparedTx(txid))?;
        serde_json::from_slice(&val.0)
            .map_err(|_| LedgerError::MalformedPayload("corrupt shadow entry".into()))
    }

    fn apply_commit(&mut self, txid: TxId) -> Result<Receipt, LedgerError> {
        let record = self.take_prepared(txid)?;
        let mut receipt = Receipt::new(txid, ReceiptStatus::Committed);
        for (k, v) in record.writes {
            self.kv.insert(k.clone(), v.clone());
            receipt.writes.push((k, v));
        }
        for k in record.locks {
            self.kv.remove(&k.lock_key());
        }
        Ok(receipt)
    }

    fn apply_abort(&mut self, txid: TxId) -> Result<Receipt, LedgerError> {
        let record = self.take_prepared(txid)?;
        for k in record.locks {
            self.kv.remove(&k.lock_key());
        }
        Ok(Receipt::new(txid, ReceiptStatus::Aborted))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bank(pairs: &[(&str, i64)]) -> LedgerState {
        LedgerState::with_accounts(pairs.iter().map(|(k, b)| (Key::text(k), *b)))
    }

    fn payment(txid: TxId, src: &str, dst: &str, amount: u64) -> Transaction {
        Transaction::new(
            txid,
            Payload::SmallBankPayment {
                src: Key::text(src),
                dst: Key::text(dst),
                amount,
            },
            ClientId(0),
            1,
        )
    }

    #[test]
    fn payment_moves_balance() {
        let s = bank(&[("a", 50), ("b", 0)]);
        let (next, r) = s.execute_transaction(&payment(1, "a", "b", 10)).unwrap();
        assert_eq!(r.status, ReceiptStatus::Committed);
        assert_eq!(next.kv[&Key::text("a")].as_i64(), Some(40));
        assert_eq!(next.kv[&Key::text("b")].as_i64(), Some(10));
        // reads observed the pre-state
        assert_eq!(r.reads[0].1.as_i64(), Some(50));
    }

    #[test]
    fn payment_with_insufficient_funds_aborts_without_change() {
        let s = bank(&[("a", 50), ("b", 0)]);
        let (next, r) = s.execute_transaction(&payment(1, "a", "b", 100)).unwrap();
        assert_eq!(r.status, ReceiptStatus::Aborted);
        assert_eq!(next, s);
    }

    #[test]
    fn zero_amount_payment_commits() {
        let s = bank(&[("a", 50), ("b", 0)]);
        let (next, r) = s.execute_transaction(&payment(1, "a", "b", 0)).unwrap();
        assert_eq!(r.status, ReceiptStatus::Committed);
        assert_eq!(next.kv[&Key::text("a")].as_i64(), Some(50));
    }

    #[test]
    fn payment_to_unknown_account_errors() {
        let s = bank(&[("a", 50)]);
        let err = s.execute_transaction(&payment(1, "a", "ghost", 1)).unwrap_err();
        assert_eq!(err, LedgerError::UnknownAccount(Key::text("ghost")));
    }

    fn prepare(txid: TxId, ops: Vec<StateOp>) -> Transaction {
        Transaction::new(txid, Payload::PreparePhaseOp { txid, ops }, ClientId(0), 1)
    }

    fn commit(txid: TxId) -> Transaction {
        Transaction::new(txid, Payload::CommitPhaseOp { txid }, ClientId(0), 1)
    }

    fn abort(txid: TxId) -> Transaction {
        Transaction::new(txid, Payload::AbortPhaseOp { txid }, ClientId(0), 1)
    }

    #[test]
    fn prepare_commit_applies_writes_and_releases_locks() {
        let s = bank(&[("a", 50)]);
        let tx = prepare(
            7,
            vec![StateOp::Debit {
                account: Key::text("a"),
                amount: 10,
            }],
        );
        let (mid, r) = s.execute_transaction(&tx).unwrap();
        assert_eq!(r.status, ReceiptStatus::PrepareOK);
        assert_eq!(
            mid.kv.get(&Key::text("a").lock_key()),
            Some(&Value::lock_marker())
        );
        // balance untouched until commit
        assert_eq!(mid.kv[&Key::text("a")].as_i64(), Some(50));
        let (done, rc) = mid.execute_transaction(&commit(7)).unwrap();
        assert_eq!(rc.status, ReceiptStatus::Committed);
        assert_eq!(done.kv[&Key::text("a")].as_i64(), Some(40));
        assert!(!done.kv.contains_key(&Key::text("a").lock_key()));
        assert!(!done.kv.contains_key(&Key::shadow_key(7)));
    }

    #[test]
    fn prepare_on_locked_key_votes_not_ok_without_change() {
        let s = bank(&[("a", 50)]);
        let (mid, _) = s
            .execute_transaction(&prepare(
                1,
                vec![StateOp::Debit {
                    account: Key::text("a"),
                    amount: 1,
                }],
            ))
            .unwrap();
        let (after, r) = mid
            .execute_transaction(&prepare(
                2,
                vec![StateOp::Credit {
                    account: Key::text("a"),
                    amount: 5,
                }],
            ))
            .unwrap();
        assert_eq!(r.status, ReceiptStatus::PrepareNotOK);
        assert_eq!(after, mid);
    }

    #[test]
    fn prepare_insufficient_funds_votes_not_ok_and_takes_no_lock() {
        let s = bank(&[("a", 5)]);
        let (after, r) = s
            .execute_transaction(&prepare(
                1,
                vec![StateOp::Debit {
                    account: Key::text("a"),
                    amount: 10,
                }],
            ))
            .unwrap();
        assert_eq!(r.status, ReceiptStatus::PrepareNotOK);
        assert_eq!(after, s);
    }

    #[test]
    fn abort_restores_exact_original_state() {
        let s = bank(&[("a", 50), ("b", 9)]);
        let (mid, _) = s
            .execute_transaction(&prepare(
                3,
                vec![
                    StateOp::Debit {
                        account: Key::text("a"),
                        amount: 10,
                    },
                    StateOp::Credit {
                        account: Key::text("b"),
                        amount: 10,
                    },
                ],
            ))
            .unwrap();
        let (after, r) = mid.execute_transaction(&abort(3)).unwrap();
        assert_eq!(r.status, ReceiptStatus::Aborted);
        assert!(r.writes.is_empty());
        assert_eq!(after, s);
    }

    #[test]
    fn commit_or_abort_without_prepare_errors() {
        let s = bank(&[("a", 1)]);
        assert_eq!(
            s.execute_transaction(&commit(9)).unwrap_err(),
            LedgerError::UnknownPreparedTx(9)
        );
        assert_eq!(
            s.execute_transaction(&abort(9)).unwrap_err(),
            LedgerError::UnknownPreparedTx(9)
        );
    }

    #[test]
    fn kv_update_respects_foreign_locks() {
        let s = bank(&[("a", 50)]);
        let (mid, _) = s
            .execute_transaction(&prepare(
                1,
                vec![StateOp::Debit {
                    account: Key::text("a"),
                    amount: 1,
                }],
            ))
            .unwrap();
        let upd = Transaction::new(
            2,
            Payload::KvUpdate(vec![(Key::text("a"), Value::from_i64(0))]),
            ClientId(0),
            1,
        );
        let (after, r) = mid.execute_transaction(&upd).unwrap();
        assert_eq!(r.status, ReceiptStatus::Aborted);
        assert_eq!(after, mid);
    }

    #[test]
    fn lock_key_formatting() {
        assert_eq!(Key::text("acc1").lock_key(), Key::text("L_acc1"));
        assert!(Key::text("L_acc1").is_lock());
    }

    #[test]
    fn empty_state_digest_is_the_frozen_constant() {
        let d = LedgerState::genesis().state_digest().to_hex();
        assert_eq!(
            d,
            "7af381cd30611ec59b590561a4dcabdf839fdbb362ca7facac3cb4809f799035"
        );
    }

    #[test]
    fn digest_is_insertion_order_independent_and_value_sensitive() {
        let mut a = LedgerState::genesis();
        a.kv.insert(Key::text("x"), Value::from_i64(1));
        a.kv.insert(Key::text("y"), Value::from_i64(2));
        let mut b = LedgerState::genesis();
        b.kv.insert(Key::text("y"), Value::from_i64(2));
        b.kv.insert(Key::text("x"), Value::from_i64(1));
        assert_eq!(a.state_digest(), b.state_digest());
        b.kv.insert(Key::text("y"), Value::from_i64(3));
        assert_ne!(a.state_digest(), b.state_digest());
    }

    #[test]
    fn block_digest_round_trip() {
        let b = Block::new(1, genesis_parent_digest(), vec![payment(1, "a", "b", 1)]);
        assert!(b.verify_digest());
        let mut tampered = b.clone();
        tampered.txs.clear();
        assert!(!tampered.verify_digest());
    }

    #[test]
    fn canonical_json_shapes() {
        let tx = payment(5, "a", "b", 10);
        let json = serde_json::to_string(&tx).unwrap();
        // keys/values are base64; field names match the type declarations
        assert_eq!(
            json,
            r#"{"txid":5,"payload":{"SmallBankPayment":{"src":"YQ==","dst":"Yg==","amount":10}},"client":0,"shards":[0]}"#
        );
        let back: Transaction = serde_json::from_str(&json).unwrap();
        assert_eq!(back, tx);

        let s = bank(&[("a", 50), ("b", 0)]);
        let (_, r) = s.execute_transaction(&tx).unwrap();
        let rjson = serde_json::to_string(&r).unwrap();
        assert!(rjson.starts_with(r#"{"txid":5,"status":"Committed","reads":"#));
        let rback: Receipt = serde_json::from_str(&rjson).unwrap();
        assert_eq!(rback, r);
    }

    #[test]
    fn shard_derivation_unions_touched_keys() {
        let tx = Transaction::new(
            1,
            Payload::KvUpdate(vec![
                (Key::text("k1"), Value::from_i64(0)),
                (Key::text("k2"), Value::from_i64(0)),
                (Key::text("k3"), Value::from_i64(0)),
            ]),
            ClientId(0),
            4,
        );
        let expect: BTreeSet<ShardId> = ["k1", "k2", "k3"]
            .iter()
            .map(|k| Key::text(k).shard_of(4))
            .collect();
        assert_eq!(tx.shards, expect.into_iter().collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn execution_is_deterministic(amounts in proptest::collection::vec(0u64..100, 1..20)) {
            let s = bank(&[("a", 500), ("b", 500), ("c", 500)]);
            let accounts = ["a", "b", "c"];
            let run = || {
                let mut st = s.clone();
                for (i, amt) in amounts.iter().enumerate() {
                    let src = accounts[i % 3];
                    let dst = accounts[(i + 1) % 3];
                    let _ = st.apply_transaction(&payment(i as TxId, src, dst, *amt));
                }
                st
            };
            let one = run();
            let two = run();
            prop_assert_eq!(one.state_digest(), two.state_digest());
        }

        #[test]
        fn payments_conserve_total_balance(amounts in proptest::collection::vec(0u64..200, 1..30)) {
            let mut st = bank(&[("a", 300), ("b", 40), ("c", 7)]);
            let total = st.total_balance();
            let accounts = ["a", "b", "c"];
            for (i, amt) in amounts.iter().enumerate() {
                let src = accounts[(i * 2) % 3];
                let dst = accounts[(i * 2 + 1) % 3];
                let _ = st.apply_transaction(&payment(i as TxId, src, dst, *amt));
            }
            prop_assert_eq!(st.total_balance(), total);
        }

        #[test]
        fn prepare_then_abort_is_identity(amount in 0u64..100, use_put in any::<bool>()) {
            let s = bank(&[("a", 50), ("b", 10)]);
            let ops = if use_put {
                vec![StateOp::Put { key: Key::text("b"), value: Value::from_i64(77) }]
            } else {
                vec![StateOp::Debit { account: Key::text("a"), amount }]
            };
            let (mid, r) = s.execute_transaction(&prepare(11, ops)).unwrap();
            if r.status == ReceiptStatus::PrepareOK {
                let (after, _) = mid.execute_transaction(&abort(11)).unwrap();
                prop_assert_eq!(after, s);
            } else {
                prop_assert_eq!(mid, s.clone());
            }
        }

        #[test]
        fn lock_exclusivity(amount in 1u64..50) {
            // two prepares touching a common key cannot both vote PrepareOK
            let s = bank(&[("a", 100), ("b", 100)]);
            let p1 = prepare(1, vec![StateOp::Debit { account: Key::text("a"), amount }]);
            let p2 = prepare(2, vec![
                StateOp::Credit { account: Key::text("a"), amount },
                StateOp::Debit { account: Key::text("b"), amount },
            ]);
            let (mid, r1) = s.execute_transaction(&p1).unwrap();
            let (_, r2) = mid.execute_transaction(&p2).unwrap();
            prop_assert_eq!(r1.status, ReceiptStatus::PrepareOK);
            prop_assert_eq!(r2.status, ReceiptStatus::PrepareNotOK);
        }
    }
}
