//! SHA-256 and Ed25519 helpers, and the membership key registry.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use sha2::{Digest, Sha256};

use crate::rng::{stream_seed, Purpose};
use crate::{Hash, NodeId};

pub type SignatureBytes = [u8; 64];

pub fn sha256(data: &[u8]) -> Hash {
    Sha256::digest(data).into()
}

pub fn sha256_parts(parts: &[&[u8]]) -> Hash {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// Deterministic signing key for a simulated identity.
pub fn derive_signing_key(seed: u64, id: NodeId) -> SigningKey {
    SigningKey::from_bytes(&stream_seed(seed, Purpose::Key, id.0, 0))
}

pub fn sign(key: &SigningKey, msg: &[u8]) -> SignatureBytes {
    key.sign(msg).to_bytes()
}

#[derive(Debug, Clone)]
pub struct Member {
    pub key: VerifyingKey,
    /// First round in which the identity takes part.
    pub joined: u64,
}

/// Public keys of all authenticated members, with admission rounds.
///
/// Verification results are memoized by message digest: the registry is
/// shared by every simulated node and the same signed bytes are checked
/// many times.
#[derive(Debug, Default)]
pub struct KeyRegistry {
    members: BTreeMap<NodeId, Member>,
    verified: Mutex<HashMap<(NodeId, Hash, SignatureBytesKey), bool>>,
}

type SignatureBytesKey = [u8; 32];

impl KeyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: NodeId, key: VerifyingKey, joined: u64) {
        self.members.insert(id, Member { key, joined });
    }

    pub fn get(&self, id: NodeId) -> Option<&Member> {
        self.members.get(&id)
    }

    pub fn is_admitted(&self, id: NodeId, round: u64) -> bool {
        self.members.get(&id).is_some_and(|m| m.joined <= round)
    }

    /// Number of identities admitted by `round`.
    pub fn network_size(&self, round: u64) -> usize {
        self.members.values().filter(|m| m.joined <= round).count()
    }

    pub fn admitted(&self, round: u64) -> impl Iterator<Item = NodeId> + '_ {
        self.members
            .iter()
            .filter(move |(_, m)| m.joined <= round)
            .map(|(id, _)| *id)
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.members.keys().copied()
    }

    pub fn fingerprint(&self, id: NodeId) -> Option<Hash> {
        self.members.get(&id).map(|m| sha256(m.key.as_bytes()))
    }

    pub fn verify(&self, id: NodeId, msg: &[u8], sig: &SignatureBytes) -> bool {
        let Some(member) = self.members.get(&id) else {
            return false;
        };
        let key = (id, sha256(msg), sha256(sig));
        if let Some(ok) = self.verified.lock().unwrap().get(&key) {
            return *ok;
        }
        let ok = member
            .key
            .verify(msg, &ed25519_dalek::Signature::from_bytes(sig))
            .is_ok();
        self.verified.lock().unwrap().insert(key, ok);
        ok
    }
}
