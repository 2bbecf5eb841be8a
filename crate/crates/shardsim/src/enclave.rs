//! Simulated trusted execution environment.
//!
//! Each node owns one `Enclave`. The enclave holds a signing key the host
//! never sees, write-once attested logs (the anti-equivocation primitive),
//! a once-per-epoch randomness beacon, quorum aggregation, wait
//! certificates for randomized leader election, and sealing with a
//! rollback-safe recovery estimate. Every operation accrues a calibrated
//! latency cost that the host drains with [`Enclave::take_cost`] and turns
//! into simulated busy time.
//!
//! Signatures are real Ed25519 over canonical JSON, so forged-proof tests
//! fail cryptographically rather than by convention. Sealing is simulated:
//! the payload is stored in plaintext with a self-signature as the
//! authenticity tag, which models integrity (and rollback substitution)
//! but not confidentiality.

use crate::crypto::{derive_seed, sign_obj, signing_key_from_seed, verify_obj, Digest32, Sig};
use crate::ids::{Epoch, NodeId, Seq, View};
use crate::time::{SimDuration, SimTime};
use ed25519_dalek::{SigningKey, VerifyingKey};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Attestation registry: every node's enclave verification key, exchanged
/// out of band at setup (standing in for remote attestation).
pub type EnclaveRegistry = BTreeMap<NodeId, VerifyingKey>;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum LogId {
    PrePrepare,
    Prepare,
    Commit,
    Checkpoint,
    ViewChange,
}

impl LogId {
    pub const ALL: [LogId; 5] = [
        LogId::PrePrepare,
        LogId::Prepare,
        LogId::Commit,
        LogId::Checkpoint,
        LogId::ViewChange,
    ];

    /// The view-change log is keyed by view (sequence fixed at 0); every
    /// other log is keyed by sequence and subject to the recovery floor.
    fn sequence_keyed(self) -> bool {
        !matches!(self, LogId::ViewChange)
    }
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum EnclaveError {
    #[error("conflicting digest for occupied slot ({log_id:?}, v={view}, n={sequence})")]
    EquivocationAttempt {
        log_id: LogId,
        view: View,
        sequence: Seq,
    },
    #[error("enclave is recovering; appends refused")]
    Recovering,
    #[error("epoch {0} already invoked on this enclave")]
    EpochAlreadyInvoked(Epoch),
    #[error("restart guard active: enclave too young for a non-genesis epoch")]
    RestartGuardActive,
    #[error("fewer distinct valid signers than required")]
    InsufficientQuorum,
    #[error("aggregation inputs reference differing targets")]
    MixedTargets,
    #[error("wait timer not armed or not yet elapsed")]
    WaitNotElapsed,
    #[error("need at least 2f+1 distinct peer responses")]
    InsufficientResponses,
    #[error("sealed state fails the authenticity check")]
    SealForged,
}

/// Per-operation simulated runtimes, in wall-clock terms of the machine
/// being modeled. Defaults are measured costs; any entry can be overridden
/// from a JSON object keyed by operation name (values in microseconds).
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyTable {
    pub sign: SimDuration,
    pub verify: SimDuration,
    pub sha256: SimDuration,
    pub append: SimDuration,
    /// Aggregation cost measured at f = 8 (9 messages); other quorum sizes
    /// scale linearly with the number of verified messages.
    pub aggregate_f8: SimDuration,
    pub beacon: SimDuration,
    pub context_switch: SimDuration,
}

impl Default for LatencyTable {
    fn default() -> Self {
        LatencyTable {
            sign: SimDuration::from_micros_f64(458.4),
            verify: SimDuration::from_micros_f64(844.2),
            sha256: SimDuration::from_micros_f64(2.5),
            append: SimDuration::from_micros_f64(465.3),
            aggregate_f8: SimDuration::from_micros_f64(8031.2),
            beacon: SimDuration::from_micros_f64(482.2),
            context_switch: SimDuration::from_micros_f64(2.7),
        }
    }
}

impl LatencyTable {
    /// All-zero table: turns enclave latency modeling off.
    pub fn zero() -> Self {
        let z = SimDuration::ZERO;
        LatencyTable {
            sign: z,
            verify: z,
            sha256: z,
            append: z,
            aggregate_f8: z,
            beacon: z,
            context_switch: z,
        }
    }

    /// Applies overrides parsed from a JSON object like
    /// `{"sign": 458.4, "append": 465.3}` (microseconds).
    pub fn with_overrides(
        mut self,
        overrides: &BTreeMap<String, f64>,
    ) -> Result<Self, UnknownOperation> {
        for (op, us) in overrides {
            let slot = match op.as_str() {
                "sign" => &mut self.sign,
                "verify" => &mut self.verify,
                "sha256" => &mut self.sha256,
                "append" => &mut self.append,
                "aggregate_f8" => &mut self.aggregate_f8,
                "beacon" => &mut self.beacon,
                "context_switch" => &mut self.context_switch,
                _ => return Err(UnknownOperation(op.clone())),
            };
            *slot = SimDuration::from_micros_f64(*us);
        }
        Ok(self)
    }

    pub fn aggregate_cost(&self, f: u32) -> SimDuration {
        self.aggregate_f8.mul_f64((f + 1) as f64 / 9.0)
    }
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
#[error("unknown latency table operation {0:?}")]
pub struct UnknownOperation(pub String);

/// Signed attestation that a digest occupies slot `(view, sequence)` of the
/// named log on the issuing node's enclave.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct AppendProof {
    pub node_id: NodeId,
    pub log_id: LogId,
    pub view: View,
    pub sequence: Seq,
    pub digest: Digest32,
    pub sig: Sig,
}

fn append_signable(
    node_id: NodeId,
    log_id: LogId,
    view: View,
    sequence: Seq,
    digest: &Digest32,
) -> impl Serialize + '_ {
    ("append-proof", node_id, log_id, view, sequence, digest)
}

pub fn verify_append_proof(proof: &AppendProof, key: &VerifyingKey) -> bool {
    verify_obj(
        key,
        &append_signable(
            proof.node_id,
            proof.log_id,
            proof.view,
            proof.sequence,
            &proof.digest,
        ),
        &proof.sig,
    )
}

/// Signed `(epoch, rnd)` pair; issued only when the internal filter draw
/// came up zero.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct BeaconCert {
    pub epoch: Epoch,
    /// 256 bits of beacon randomness (a raw value, not a hash).
    pub rnd: Digest32,
    pub node_id: NodeId,
    pub sig: Sig,
}

fn beacon_signable(epoch: Epoch, rnd: &Digest32, node_id: NodeId) -> impl Serialize + '_ {
    ("beacon-cert", epoch, rnd, node_id)
}

pub fn verify_beacon_cert(cert: &BeaconCert, key: &VerifyingKey) -> bool {
    verify_obj(
        key,
        &beacon_signable(cert.epoch, &cert.rnd, cert.node_id),
        &cert.sig,
    )
}

/// Aggregated evidence that f+1 distinct replicas endorsed `(request,
/// phase, view, seq)`; replaces f+1 individual signatures on the wire.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct QuorumProof {
    pub request: Digest32,
    pub phase: LogId,
    pub view: View,
    pub seq: Seq,
    pub f: u32,
    pub node_id: NodeId,
    pub sig: Sig,
}

fn quorum_signable(
    request: &Digest32,
    phase: LogId,
    view: View,
    seq: Seq,
    f: u32,
    node_id: NodeId,
) -> impl Serialize + '_ {
    ("quorum-proof", request, phase, view, seq, f, node_id)
}

pub fn verify_quorum_proof(proof: &QuorumProof, key: &VerifyingKey) -> bool {
    verify_obj(
        key,
        &quorum_signable(
            &proof.request,
            proof.phase,
            proof.view,
            proof.seq,
            proof.f,
            proof.node_id,
        ),
        &proof.sig,
    )
}

/// Proof that the issuing enclave sat out a sampled wait; valid for leader
/// election only with `q = 0`, which is the only kind ever issued.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct WaitCertificate {
    pub node_id: NodeId,
    pub round: u64,
    pub wait_time: SimDuration,
    pub q: u64,
    pub sig: Sig,
}

fn wait_signable(node_id: NodeId, round: u64, wait_time: SimDuration, q: u64) -> impl Serialize {
    ("wait-cert", node_id, round, wait_time, q)
}

pub fn verify_wait_certificate(cert: &WaitCertificate, key: &VerifyingKey) -> bool {
    cert.q == 0
        && verify_obj(
            key,
            &wait_signable(cert.node_id, cert.round, cert.wait_time, cert.q),
            &cert.sig,
        )
}

/// Outcome of the peer-assisted recovery estimate.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct RecoveryEstimate {
    pub ckp_m: Seq,
    pub h_m: Seq,
    pub l: u64,
}

#[derive(Serialize, Deserialize)]
struct SealPayload {
    /// Latest `(view, sequence, digest)` entry per log.
    heads: BTreeMap<LogId, (View, Seq, Digest32)>,
    last_stable: Seq,
}

/// Simulated sealed blob: plaintext payload plus a self-signature tag. An
/// adversary can replay an older seal of the same owner (the rollback
/// attack) but cannot fabricate or tamper with one.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct SealedState {
    pub owner: NodeId,
    pub payload: String,
    pub tag: Sig,
}

pub struct Enclave {
    node_id: NodeId,
    signing: SigningKey,
    instantiated: SimTime,
    table: LatencyTable,
    restart_guard: SimDuration,
    logs: BTreeMap<LogId, BTreeMap<(View, Seq), Digest32>>,
    last_stable: Seq,
    /// Simulated hardware monotonic counter backing the once-per-epoch
    /// guard; the host carries it across restarts via
    /// [`Enclave::platform_counter`].
    epoch_counter: u64,
    rng: ChaCha20Rng,
    meter: SimDuration,
    recovering: Option<RecoveryEstimate>,
    /// After a recovery, sequence-keyed appends must land strictly above
    /// this floor; strictly, to cover the watermark-edge case where the
    /// last pre-crash append sits exactly at the estimate.
    append_floor: Seq,
    /// View-change appends after a recovery must land at or above this
    /// view, supplied by the recovery evidence.
    viewchange_floor: View,
    poet_armed: Option<(SimTime, SimDuration)>,
    poet_round: u64,
}

impl Enclave {
    /// `master_seed` fixes the key pair per node (the platform binding: a
    /// restarted enclave re-derives the same identity); `platform_counter`
    /// is the hardware monotonic counter value surviving restarts (0 for a
    /// first boot).
    pub fn new(
        node_id: NodeId,
        master_seed: u64,
        now: SimTime,
        table: LatencyTable,
        restart_guard: SimDuration,
        platform_counter: u64,
    ) -> Self {
        let signing = signing_key_from_seed(derive_seed(master_seed, "enclave-key", node_id.0 as u64));
        // mix the boot time into the stream so a restarted enclave does not
        // replay its previous draws
        let rng_purpose = format!("enclave-rng-{}", now);
        let rng = ChaCha20Rng::from_seed(derive_seed(master_seed, &rng_purpose, node_id.0 as u64));
        let logs = LogId::ALL
            .iter()
            .map(|id| (*id, BTreeMap::new()))
            .collect();
        Enclave {
            node_id,
            signing,
            instantiated: now,
            table,
            restart_guard,
            logs,
            last_stable: 0,
            epoch_counter: platform_counter,
            rng,
            meter: SimDuration::ZERO,
            recovering: None,
            append_floor: 0,
            viewchange_floor: 0,
            poet_armed: None,
            poet_round: 0,
        }
    }

    pub fn node_id(&self) -> NodeId {
        self.node_id
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    pub fn platform_counter(&self) -> u64 {
        self.epoch_counter
    }

    pub fn is_recovering(&self) -> bool {
        self.recovering.is_some()
    }

    pub fn last_stable(&self) -> Seq {
        self.last_stable
    }

    /// Accumulated simulated runtime since the last drain.
    pub fn take_cost(&mut self) -> SimDuration {
        std::mem::replace(&mut self.meter, SimDuration::ZERO)
    }

    fn charge(&mut self, cost: SimDuration) {
        self.meter += self.table.context_switch + cost;
    }

    fn issue_append_proof(&self, log_id: LogId, view: View, sequence: Seq, digest: Digest32) -> AppendProof {
        let sig = sign_obj(
            &self.signing,
            &append_signable(self.node_id, log_id, view, sequence, &digest),
        );
        AppendProof {
            node_id: self.node_id,
            log_id,
            view,
            sequence,
            digest,
            sig,
        }
    }

    /// Writes `digest` into the write-once slot `(view, sequence)` of the
    /// named log and returns the signed attestation. Re-appending the
    /// identical digest re-issues the proof (retransmissions are not
    /// attacks); a conflicting digest is refused.
    pub fn log_append(
        &mut self,
        log_id: LogId,
        view: View,
        sequence: Seq,
        digest: Digest32,
    ) -> Result<AppendProof, EnclaveError> {
        self.charge(self.table.append);
        if self.recovering.is_some() {
            return Err(EnclaveError::Recovering);
        }
        if log_id.sequence_keyed() {
            if sequence <= self.append_floor && self.append_floor > 0 {
                return Err(EnclaveError::Recovering);
            }
        } else if view < self.viewchange_floor {
            return Err(EnclaveError::Recovering);
        }
        let log = self.logs.entry(log_id).or_default();
        match log.get(&(view, sequence)) {
            Some(existing) if *existing != digest => Err(EnclaveError::EquivocationAttempt {
                log_id,
                view,
                sequence,
            }),
            _ => {
                log.insert((view, sequence), digest);
                Ok(self.issue_append_proof(log_id, view, sequence, digest))
            }
        }
    }

    pub fn log_entry(&self, log_id: LogId, view: View, sequence: Seq) -> Option<Digest32> {
        self.logs.get(&log_id)?.get(&(view, sequence)).copied()
    }

    /// Host notice that `seq` became a stable checkpoint; recorded for
    /// sealing and used to garbage-collect old slots.
    pub fn set_stable_checkpoint(&mut self, seq: Seq) {
        if seq > self.last_stable {
            self.last_stable = seq;
        }
    }

    /// Drops sequence-keyed slots strictly below `seq` (bookkeeping, no
    /// simulated cost). Each log's head entry survives for sealing.
    pub fn gc_below(&mut self, seq: Seq) {
        for (id, log) in &mut self.logs {
            if !id.sequence_keyed() {
                continue;
            }
            let head = log.keys().next_back().copied();
            // keep the head even when it falls below the cutoff: sealing
            // needs it
            log.retain(|&k, _| k.1 >= seq || Some(k) == head);
        }
    }

    /// Draws the epoch's randomness. The epoch is consumed no matter the
    /// outcome; a certificate is returned only when the l-bit filter value
    /// q sampled to zero. `l` may be fractional: success probability is
    /// 2^-l, exact for integer `l`.
    pub fn beacon_invoke(
        &mut self,
        now: SimTime,
        epoch: Epoch,
        l: f64,
    ) -> Result<Option<BeaconCert>, EnclaveError> {
        self.charge(self.table.beacon);
        if epoch != 0 && now.saturating_sub(self.instantiated) < self.restart_guard {
            // guard errors do not consume the epoch: otherwise forced
            // restarts could burn epochs without ever drawing
            return Err(EnclaveError::RestartGuardActive);
        }
        if epoch < self.epoch_counter {
            return Err(EnclaveError::EpochAlreadyInvoked(epoch));
        }
        self.epoch_counter = epoch + 1;
        let q_source: u64 = self.rng.gen();
        let mut rnd = [0u8; 32];
        self.rng.fill(&mut rnd);
        if !filter_hits(q_source, l) {
            return Ok(None);
        }
        let rnd = Digest32(rnd);
        let sig = sign_obj(&self.signing, &beacon_signable(epoch, &rnd, self.node_id));
        Ok(Some(BeaconCert {
            epoch,
            rnd,
            node_id: self.node_id,
            sig,
        }))
    }

    /// Verifies the supplied append proofs and issues a compact quorum
    /// proof iff at least f+1 distinct signers endorse exactly
    /// `(request, phase, view, seq)`.
    pub fn aggregate_quorum(
        &mut self,
        msgs: &[AppendProof],
        f: u32,
        request: Digest32,
        phase: LogId,
        view: View,
        seq: Seq,
        registry: &EnclaveRegistry,
    ) -> Result<QuorumProof, EnclaveError> {
        self.charge(self.table.aggregate_cost(f));
        if msgs
            .iter()
            .any(|m| m.log_id != phase || m.view != view || m.sequence != seq || m.digest != request)
        {
            return Err(EnclaveError::MixedTargets);
        }
        let signers: std::collections::BTreeSet<NodeId> = msgs
            .iter()
            .filter(|m| {
                registry
                    .get(&m.node_id)
                    .is_some_and(|k| verify_append_proof(m, k))
            })
            .map(|m| m.node_id)
            .collect();
        if signers.len() < (f + 1) as usize {
            return Err(EnclaveError::InsufficientQuorum);
        }
        let sig = sign_obj(
            &self.signing,
            &quorum_signable(&request, phase, view, seq, f, self.node_id),
        );
        Ok(QuorumProof {
            request,
            phase,
            view,
            seq,
            f,
            node_id: self.node_id,
            sig,
        })
    }

    /// Arms the wait timer for the next election round with an
    /// exponentially distributed wait and returns the sampled duration so
    /// the host can schedule its wake-up. Re-arming replaces a pending
    /// wait.
    pub fn poet_request_wait(&mut self, now: SimTime, mean: SimDuration) -> SimDuration {
        self.charge(SimDuration::ZERO);
        let mean_s = mean.as_secs_f64();
        let wait = if mean_s > 0.0 {
            let exp = Exp::new(1.0 / mean_s).expect("positive rate");
            SimDuration::from_secs_f64(exp.sample(&mut self.rng))
        } else {
            SimDuration::ZERO
        };
        self.poet_armed = Some((now + wait, wait));
        wait
    }

    /// Issues a wait certificate once the armed wait has elapsed. The l-bit
    /// filter value q is drawn fresh; only q = 0 yields a certificate, and
    /// the round is consumed either way.
    pub fn poet_certificate(
        &mut self,
        now: SimTime,
        l: u32,
    ) -> Result<Option<WaitCertificate>, EnclaveError> {
        self.charge(self.table.sign);
        let Some((deadline, wait)) = self.poet_armed else {
            return Err(EnclaveError::WaitNotElapsed);
        };
        if now < deadline {
            return Err(EnclaveError::WaitNotElapsed);
        }
        self.poet_armed = None;
        let round = self.poet_round;
        self.poet_round += 1;
        let q_source: u64 = self.rng.gen();
        let q = if l == 0 {
            0
        } else {
            q_source & ((1u64 << l.min(63)) - 1)
        };
        if q != 0 {
            return Ok(None);
        }
        let sig = sign_obj(&self.signing, &wait_signable(self.node_id, round, wait, 0));
        Ok(Some(WaitCertificate {
            node_id: self.node_id,
            round,
            wait_time: wait,
            q: 0,
            sig,
        }))
    }

    /// Seals the per-log heads and the last stable checkpoint number.
    pub fn seal(&mut self) -> SealedState {
        self.charge(self.table.sign);
        let heads = self
            .logs
            .iter()
            .filter_map(|(id, log)| {
                log.iter()
                    .next_back()
                    .map(|((v, s), d)| (*id, (*v, *s, *d)))
            })
            .collect();
        let payload = serde_json::to_string(&SealPayload {
            heads,
            last_stable: self.last_stable,
        })
        .expect("serializable");
        let tag = sign_obj(&self.signing, &("seal", self.node_id, &payload));
        SealedState {
            owner: self.node_id,
            payload,
            tag,
        }
    }

    /// Restores state from a seal and computes the recovery estimate from
    /// peer checkpoint reports: ckp_M is the largest reported value v such
    /// that at least f replicas other than the reporter sent values <= v
    /// (the maximum qualifying value; with 2f+1 distinct responses the
    /// maximum report always qualifies). The enclave then refuses all
    /// appends until [`Enclave::complete_recovery`].
    pub fn unseal_and_recover(
        &mut self,
        sealed: &SealedState,
        responses: &[(NodeId, Seq)],
        f: u32,
        l: u64,
    ) -> Result<RecoveryEstimate, EnclaveError> {
        self.charge(self.table.verify);
        if sealed.owner != self.node_id
            || !verify_obj(
                &self.verifying_key(),
                &("seal", sealed.owner, &sealed.payload),
                &sealed.tag,
            )
        {
            return Err(EnclaveError::SealForged);
        }
        let payload: SealPayload =
            serde_json::from_str(&sealed.payload).map_err(|_| EnclaveError::SealForged)?;
        let mut by_node: BTreeMap<NodeId, Seq> = BTreeMap::new();
        for (n, v) in responses {
            if *n != self.node_id {
                by_node.entry(*n).or_insert(*v);
            }
        }
        if by_node.len() < (2 * f + 1) as usize {
            return Err(EnclaveError::InsufficientResponses);
        }
        let ckp_m = by_node
            .iter()
            .filter(|(j, v)| {
                let others_leq = by_node
                    .iter()
                    .filter(|(i, w)| i != j && **w <= **v)
                    .count();
                others_leq >= f as usize
            })
            .map(|(_, v)| *v)
            .max()
            .expect("a maximum report always qualifies");
        let estimate = RecoveryEstimate {
            ckp_m,
            h_m: l + ckp_m,
            l,
        };
        for (id, (v, s, d)) in payload.heads {
            self.logs.entry(id).or_default().insert((v, s), d);
        }
        self.last_stable = payload.last_stable;
        self.recovering = Some(estimate);
        Ok(estimate)
    }

    /// Ends recovering mode on evidence of a stable checkpoint at or above
    /// H_M: `needed` distinct valid checkpoint append proofs for
    /// `(seq, digest)`. `resume_view` floors later view-change appends so a
    /// rolled-back enclave cannot re-vote an old view change.
    pub fn complete_recovery(
        &mut self,
        seq: Seq,
        digest: Digest32,
        proofs: &[AppendProof],
        needed: usize,
        registry: &EnclaveRegistry,
        resume_view: View,
    ) -> Result<(), EnclaveError> {
        self.charge(self.table.verify.mul_f64(proofs.len() as f64));
        let Some(estimate) = self.recovering else {
            return Ok(());
        };
        if seq < estimate.h_m {
            return Err(EnclaveError::InsufficientQuorum);
        }
        let signers: std::collections::BTreeSet<NodeId> = proofs
            .iter()
            .filter(|p| {
                p.log_id == LogId::Checkpoint
                    && p.view == 0
                    && p.sequence == seq
                    && p.digest == digest
                    && registry
                        .get(&p.node_id)
                        .is_some_and(|k| verify_append_proof(p, k))
            })
            .map(|p| p.node_id)
            .collect();
        if signers.len() < needed {
            return Err(EnclaveError::InsufficientQuorum);
        }
        self.recovering = None;
        self.append_floor = estimate.h_m;
        self.viewchange_floor = resume_view;
        self.last_stable = self.last_stable.max(seq);
        Ok(())
    }
}

/// True with probability 2^-l given a uniform 64-bit draw; exact for
/// integer `l` in 0..=64, nearest-representable threshold otherwise.
fn filter_hits(draw: u64, l: f64) -> bool {
    if l <= 0.0 {
        return true;
    }
    if l >= 64.0 {
        return false;
    }
    let threshold = (64.0 - l).exp2();
    (draw as f64) < threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::sha256;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn enclave(node: u32) -> Enclave {
        Enclave::new(
            NodeId(node),
            77,
            SimTime::ZERO,
            LatencyTable::default(),
            SimDuration::from_secs(2),
            0,
        )
    }

    fn registry(nodes: &[&Enclave]) -> EnclaveRegistry {
        nodes
            .iter()
            .map(|e| (e.node_id(), e.verifying_key()))
            .collect()
    }

    #[test]
    fn fresh_append_then_idempotent_then_conflict() {
        let mut e = enclave(0);
        let d = sha256(b"block");
        let p1 = e.log_append(LogId::Prepare, 0, 1, d).unwrap();
        assert!(verify_append_proof(&p1, &e.verifying_key()));
        let p2 = e.log_append(LogId::Prepare, 0, 1, d).unwrap();
        assert_eq!(p1, p2);
        let err = e.log_append(LogId::Prepare, 0, 1, sha256(b"other")).unwrap_err();
        assert_eq!(
            err,
            EnclaveError::EquivocationAttempt {
                log_id: LogId::Prepare,
                view: 0,
                sequence: 1
            }
        );
        // the slot still holds the original digest
        assert_eq!(e.log_entry(LogId::Prepare, 0, 1), Some(d));
    }

    #[test]
    fn append_proof_binds_digest_and_key() {
        let mut e = enclave(0);
        let other = enclave(1);
        let mut p = e.log_append(LogId::Commit, 2, 9, sha256(b"x")).unwrap();
        assert!(verify_append_proof(&p, &e.verifying_key()));
        assert!(!verify_append_proof(&p, &other.verifying_key()));
        p.digest.0[0] ^= 1;
        assert!(!verify_append_proof(&p, &e.verifying_key()));
    }

    #[test]
    fn logs_are_independent_per_kind() {
        let mut e = enclave(0);
        e.log_append(LogId::Prepare, 0, 1, sha256(b"a")).unwrap();
        // same slot in a different log is free
        e.log_append(LogId::Commit, 0, 1, sha256(b"b")).unwrap();
    }

    #[test]
    fn beacon_zero_bits_always_issues_and_consumes_epoch() {
        let mut e = enclave(0);
        let t = SimTime::from_secs(10);
        let cert = e.beacon_invoke(t, 0, 0.0).unwrap().unwrap();
        assert_eq!(cert.epoch, 0);
        assert!(verify_beacon_cert(&cert, &e.verifying_key()));
        assert_eq!(
            e.beacon_invoke(t, 0, 0.0).unwrap_err(),
            EnclaveError::EpochAlreadyInvoked(0)
        );
    }

    #[test]
    fn beacon_epoch_guard_survives_restart_via_platform_counter() {
        let mut e = enclave(0);
        let t = SimTime::from_secs(10);
        e.beacon_invoke(t, 3, 0.0).unwrap();
        let counter = e.platform_counter();
        // crash and reboot with the hardware counter carried over
        let mut rebooted = Enclave::new(
            NodeId(0),
            77,
            SimTime::from_secs(20),
            LatencyTable::default(),
            SimDuration::from_secs(2),
            counter,
        );
        let late = SimTime::from_secs(100);
        assert_eq!(
            rebooted.beacon_invoke(late, 3, 0.0).unwrap_err(),
            EnclaveError::EpochAlreadyInvoked(3)
        );
        assert!(rebooted.beacon_invoke(late, 4, 0.0).unwrap().is_some());
    }

    #[test]
    fn beacon_restart_guard_blocks_young_enclaves_without_consuming() {
        let mut e = Enclave::new(
            NodeId(0),
            77,
            SimTime::from_secs(50),
            LatencyTable::default(),
            SimDuration::from_secs(2),
            0,
        );
        let young = SimTime::from_secs(51);
        assert_eq!(
            e.beacon_invoke(young, 1, 0.0).unwrap_err(),
            EnclaveError::RestartGuardActive
        );
        // epoch 0 is exempt (genesis has no restart to exploit)
        assert!(e.beacon_invoke(young, 0, 0.0).unwrap().is_some());
        // after aging, the unconsumed epoch succeeds
        let old = SimTime::from_secs(60);
        assert!(e.beacon_invoke(old, 1, 0.0).unwrap().is_some());
    }

    #[test]
    fn beacon_issuance_frequency_matches_filter() {
        // 10_000 trials at l = 3: expect 1/8 within +-0.02
        let mut e = enclave(0);
        let t = SimTime::from_secs(10);
        let hits = (0..10_000)
            .filter(|i| e.beacon_invoke(t, *i, 3.0).unwrap().is_some())
            .count();
        let freq = hits as f64 / 10_000.0;
        assert!((freq - 0.125).abs() <= 0.02, "freq {freq}");
    }

    #[test]
    fn beacon_rnd_bytes_pass_chi_squared_uniformity() {
        let mut e = enclave(0);
        let t = SimTime::from_secs(10);
        let mut buckets = [0u64; 256];
        let samples = 10_000u64;
        for i in 0..samples {
            let cert = e.beacon_invoke(t, i, 0.0).unwrap().unwrap();
            buckets[cert.rnd.0[0] as usize] += 1;
        }
        let expected = samples as f64 / 256.0;
        let stat: f64 = buckets
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        let crit = ChiSquared::new(255.0).unwrap().inverse_cdf(0.99);
        assert!(stat < crit, "chi2 {stat} >= {crit}");
    }

    #[test]
    fn aggregation_requires_distinct_valid_signers_on_one_target() {
        let mut nodes: Vec<Enclave> = (0..4).map(enclave).collect();
        let d = sha256(b"req");
        let proofs: Vec<AppendProof> = nodes
            .iter_mut()
            .map(|e| e.log_append(LogId::Prepare, 0, 5, d).unwrap())
            .collect();
        let reg = registry(&nodes.iter().collect::<Vec<_>>());
        let mut agg = enclave(9);
        let proof = agg
            .aggregate_quorum(&proofs[..2], 1, d, LogId::Prepare, 0, 5, &reg)
            .unwrap();
        assert!(verify_quorum_proof(&proof, &agg.verifying_key()));
        assert_eq!(proof.f, 1);

        // two copies from one signer are one signer
        let dup = vec![proofs[0].clone(), proofs[0].clone()];
        assert_eq!(
            agg.aggregate_quorum(&dup, 1, d, LogId::Prepare, 0, 5, &reg)
                .unwrap_err(),
            EnclaveError::InsufficientQuorum
        );

        // a mixed target is rejected outright
        let mut off = proofs.clone();
        off[1].view = 1;
        assert_eq!(
            agg.aggregate_quorum(&off, 1, d, LogId::Prepare, 0, 5, &reg)
                .unwrap_err(),
            EnclaveError::MixedTargets
        );

        // a forged signature does not count toward the quorum
        let mut forged = proofs.clone();
        forged[1].sig = proofs[2].sig.clone();
        assert_eq!(
            agg.aggregate_quorum(&forged[..2], 1, d, LogId::Prepare, 0, 5, &reg)
                .unwrap_err(),
            EnclaveError::InsufficientQuorum
        );
    }

    #[test]
    fn aggregation_cost_scales_with_quorum_size() {
        let mut nodes: Vec<Enclave> = (0..9).map(enclave).collect();
        let d = sha256(b"req");
        let proofs: Vec<AppendProof> = nodes
            .iter_mut()
            .map(|e| e.log_append(LogId::Prepare, 0, 5, d).unwrap())
            .collect();
        let reg = registry(&nodes.iter().collect::<Vec<_>>());
        let mut agg = enclave(99);
        agg.take_cost();
        agg.aggregate_quorum(&proofs, 8, d, LogId::Prepare, 0, 5, &reg)
            .unwrap();
        let table = LatencyTable::default();
        assert_eq!(agg.take_cost(), table.aggregate_f8 + table.context_switch);
        agg.aggregate_quorum(&proofs[..3], 2, d, LogId::Prepare, 0, 5, &reg)
            .unwrap();
        assert_eq!(
            agg.take_cost(),
            table.aggregate_f8.mul_f64(3.0 / 9.0) + table.context_switch
        );
    }

    #[test]
    fn wait_certificate_only_after_wait_elapses() {
        let mut e = enclave(0);
        let t0 = SimTime::from_secs(5);
        assert_eq!(
            e.poet_certificate(t0, 0).unwrap_err(),
            EnclaveError::WaitNotElapsed
        );
        let wait = e.poet_request_wait(t0, SimDuration::from_secs(10));
        if wait > SimDuration::ZERO {
            assert_eq!(
                e.poet_certificate(t0, 0).unwrap_err(),
                EnclaveError::WaitNotElapsed
            );
        }
        let cert = e.poet_certificate(t0 + wait, 0).unwrap().unwrap();
        assert_eq!(cert.wait_time, wait);
        assert_eq!(cert.q, 0);
        assert!(verify_wait_certificate(&cert, &e.verifying_key()));
        // round consumed: need a fresh wait
        assert_eq!(
            e.poet_certificate(t0 + wait, 0).unwrap_err(),
            EnclaveError::WaitNotElapsed
        );
    }

    #[test]
    fn wait_times_follow_the_requested_mean() {
        let mut e = enclave(0);
        let mean = SimDuration::from_secs(10);
        let mut now = SimTime::ZERO;
        let n = 2000;
        let mut total = 0.0;
        for _ in 0..n {
            let w = e.poet_request_wait(now, mean);
            now = now + w;
            total += w.as_secs_f64();
            e.poet_certificate(now, 0).unwrap();
        }
        let avg = total / n as f64;
        assert!((avg - 10.0).abs() < 1.0, "avg {avg}");
    }

    #[test]
    fn poet_filter_hits_at_expected_rate() {
        let mut e = enclave(0);
        let mut now = SimTime::ZERO;
        let mut hits = 0;
        let n = 10_000;
        for _ in 0..n {
            let w = e.poet_request_wait(now, SimDuration::from_millis(1));
            now = now + w;
            if e.poet_certificate(now, 3).unwrap().is_some() {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.125).abs() <= 0.02, "freq {freq}");
    }

    #[test]
    fn certificates_with_nonzero_q_are_invalid_for_election() {
        let mut e = enclave(0);
        let t0 = SimTime::from_secs(5);
        let wait = e.poet_request_wait(t0, SimDuration::from_secs(1));
        if let Some(cert) = e.poet_certificate(t0 + wait, 0).unwrap() {
            let mut tampered = cert;
            tampered.q = 1;
            assert!(!verify_wait_certificate(&tampered, &e.verifying_key()));
        }
    }

    #[test]
    fn seal_round_trip_and_recovery_estimate() {
        let mut e = enclave(0);
        e.log_append(LogId::Prepare, 0, 7, sha256(b"p7")).unwrap();
        e.set_stable_checkpoint(4);
        let sealed = e.seal();

        // reboot, then recover: all five peers report ckp = 100, f = 2
        let mut rebooted = Enclave::new(
            NodeId(0),
            77,
            SimTime::from_secs(9),
            LatencyTable::default(),
            SimDuration::from_secs(2),
            e.platform_counter(),
        );
        let responses: Vec<(NodeId, Seq)> = (1..=5).map(|i| (NodeId(i), 100)).collect();
        let est = rebooted
            .unseal_and_recover(&sealed, &responses, 2, 200)
            .unwrap();
        assert_eq!(est.ckp_m, 100);
        assert_eq!(est.h_m, 300);
        assert!(rebooted.is_recovering());
        // appends refused while recovering
        assert_eq!(
            rebooted
                .log_append(LogId::Prepare, 0, 8, sha256(b"p8"))
                .unwrap_err(),
            EnclaveError::Recovering
        );
        // the sealed head was restored
        assert_eq!(rebooted.log_entry(LogId::Prepare, 0, 7), Some(sha256(b"p7")));
    }

    #[test]
    fn recovery_estimate_with_f_zero_single_response() {
        let mut e = enclave(0);
        let sealed = e.seal();
        let est = e
            .unseal_and_recover(&sealed, &[(NodeId(1), 5)], 0, 200)
            .unwrap();
        assert_eq!(est.ckp_m, 5);
        assert_eq!(est.h_m, 205);
    }

    #[test]
    fn recovery_demands_enough_distinct_responses() {
        let mut e = enclave(0);
        let sealed = e.seal();
        // f = 1 needs 3 distinct peers; duplicates and self-reports do not count
        let thin = vec![(NodeId(1), 5), (NodeId(1), 6), (NodeId(0), 9), (NodeId(2), 5)];
        assert_eq!(
            e.unseal_and_recover(&sealed, &thin, 1, 100).unwrap_err(),
            EnclaveError::InsufficientResponses
        );
    }

    #[test]
    fn forged_or_foreign_seals_are_rejected() {
        let mut e = enclave(0);
        let mut other = enclave(1);
        let sealed_other = other.seal();
        let responses = vec![(NodeId(1), 5)];
        assert_eq!(
            e.unseal_and_recover(&sealed_other, &responses, 0, 100)
                .unwrap_err(),
            EnclaveError::SealForged
        );
        let mut tampered = e.seal();
        tampered.payload.push(' ');
        assert_eq!(
            e.unseal_and_recover(&tampered, &responses, 0, 100)
                .unwrap_err(),
            EnclaveError::SealForged
        );
    }

    #[test]
    fn complete_recovery_gates_on_checkpoint_evidence_and_floors_appends() {
        let mut peers: Vec<Enclave> = (1..=3).map(enclave).collect();
        let mut e = enclave(0);
        e.set_stable_checkpoint(100);
        let sealed = e.seal();
        let responses: Vec<(NodeId, Seq)> = (1..=3).map(|i| (NodeId(i), 100)).collect();
        let est = e.unseal_and_recover(&sealed, &responses, 1, 100).unwrap();
        assert_eq!(est.h_m, 200);

        let reg = registry(&peers.iter().collect::<Vec<_>>());
        let state_d = sha256(b"state@180");
        let proofs: Vec<AppendProof> = peers
            .iter_mut()
            .map(|p| p.log_append(LogId::Checkpoint, 0, 180, state_d).unwrap())
            .collect();
        // 180 < H_M = 200: not good enough
        assert_eq!(
            e.complete_recovery(180, state_d, &proofs, 2, &reg, 3).unwrap_err(),
            EnclaveError::InsufficientQuorum
        );
        let state_d2 = sha256(b"state@200");
        let proofs2: Vec<AppendProof> = peers
            .iter_mut()
            .map(|p| p.log_append(LogId::Checkpoint, 0, 200, state_d2).unwrap())
            .collect();
        // one proof is below the needed two
        assert_eq!(
            e.complete_recovery(200, state_d2, &proofs2[..1], 2, &reg, 3)
                .unwrap_err(),
            EnclaveError::InsufficientQuorum
        );
        e.complete_recovery(200, state_d2, &proofs2, 2, &reg, 3).unwrap();
        assert!(!e.is_recovering());
        // sequence-keyed appends must land strictly above H_M
        assert_eq!(
            e.log_append(LogId::Prepare, 4, 200, sha256(b"late")).unwrap_err(),
            EnclaveError::Recovering
        );
        e.log_append(LogId::Prepare, 4, 201, sha256(b"fresh")).unwrap();
        // view-change appends below the resume view are refused
        assert_eq!(
            e.log_append(LogId::ViewChange, 2, 0, sha256(b"old vc")).unwrap_err(),
            EnclaveError::Recovering
        );
        e.log_append(LogId::ViewChange, 3, 0, sha256(b"new vc")).unwrap();
    }

    #[test]
    fn costs_accrue_and_drain() {
        let table = LatencyTable::default();
        let mut e = enclave(0);
        e.take_cost();
        e.log_append(LogId::Prepare, 0, 1, sha256(b"a")).unwrap();
        assert_eq!(e.take_cost(), table.append + table.context_switch);
        e.beacon_invoke(SimTime::from_secs(10), 0, 0.0).unwrap();
        assert_eq!(e.take_cost(), table.beacon + table.context_switch);
        assert_eq!(e.take_cost(), SimDuration::ZERO);
    }

    #[test]
    fn latency_overrides_apply_and_reject_unknown_names() {
        let mut overrides = BTreeMap::new();
        overrides.insert("sign".to_string(), 100.0);
        let t = LatencyTable::default().with_overrides(&overrides).unwrap();
        assert_eq!(t.sign, SimDuration::from_micros(100));
        assert_eq!(t.verify, LatencyTable::default().verify);
        let mut bad = BTreeMap::new();
        bad.insert("zzz".to_string(), 1.0);
        assert!(LatencyTable::default().with_overrides(&bad).is_err());
    }

    #[test]
    fn aggregate_cost_at_f8_is_the_table_value() {
        let t = LatencyTable::default();
        assert_eq!(t.aggregate_cost(8), t.aggregate_f8);
        assert_eq!(t.aggregate_cost(8).as_secs_f64(), 8031.2e-6);
    }
}
