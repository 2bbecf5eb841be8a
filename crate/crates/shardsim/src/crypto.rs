//! Digests, signatures and seed derivation.
//!
//! The repository-wide hash is SHA-256 and the signature scheme is Ed25519.
//! Canonical bytes for hashing and signing are the serde_json encoding of the
//! value; struct field order is fixed by declaration and maps are BTreeMaps,
//! so the encoding is deterministic.

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use std::fmt;

/// 256-bit digest, hex-encoded in JSON.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest32(pub [u8; 32]);

impl Digest32 {
    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        let arr: [u8; 32] = bytes.try_into().ok()?;
        Some(Digest32(arr))
    }
}

impl fmt::Debug for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest32({}..)", &self.to_hex()[..8])
    }
}

impl fmt::Display for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.to_hex()[..8])
    }
}

impl Serialize for Digest32 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest32 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest32::from_hex(&s).ok_or_else(|| serde::de::Error::custom("bad digest hex"))
    }
}

pub fn sha256(bytes: &[u8]) -> Digest32 {
    let mut h = Sha256::new();
    h.update(bytes);
    Digest32(h.finalize().into())
}

/// Digest of a value's canonical JSON encoding.
pub fn digest_of<T: Serialize>(v: &T) -> Digest32 {
    sha256(&serde_json::to_vec(v).expect("serializable"))
}

/// Ed25519 signature, hex-encoded in JSON.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Sig(pub [u8; 64]);

impl fmt::Debug for Sig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sig({}..)", &hex::encode(&self.0[..4]))
    }
}

impl Serialize for Sig {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Sig {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 64] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("bad signature length"))?;
        Ok(Sig(arr))
    }
}

/// Derive a 32-byte seed from the master seed, a purpose tag and an index.
/// Every RNG in a simulation is seeded this way, which is what makes replays
/// byte-identical.
pub fn derive_seed(master: u64, purpose: &str, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(index.to_le_bytes());
    h.finalize().into()
}

pub fn signing_key_from_seed(seed: [u8; 32]) -> SigningKey {
    SigningKey::from_bytes(&seed)
}

pub fn sign_bytes(key: &SigningKey, bytes: &[u8]) -> Sig {
    Sig(key.sign(bytes).to_bytes())
}

pub fn verify_bytes(key: &VerifyingKey, bytes: &[u8], sig: &Sig) -> bool {
    key.verify(bytes, &Signature::from_bytes(&sig.0)).is_ok()
}

/// Sign the canonical JSON encoding of a value.
pub fn sign_obj<T: Serialize>(key: &SigningKey, v: &T) -> Sig {
    sign_bytes(key, &serde_json::to_vec(v).expect("serializable"))
}

pub fn verify_obj<T: Serialize>(key: &VerifyingKey, v: &T, sig: &Sig) -> bool {
    verify_bytes(key, &serde_json::to_vec(v).expect("serializable"), sig)
}
