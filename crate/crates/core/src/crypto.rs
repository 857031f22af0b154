//! Identities, signatures and a verifiable random function built from
//! keyed SHA-256.
//!
//! Constructions (every tag is a raw ASCII prefix):
//!
//! | value       | definition                                   |
//! |-------------|----------------------------------------------|
//! | `sk`        | `H("spdl/sk" ‖ seed)`                        |
//! | `pk`        | `H("spdl/pk" ‖ sk)`                          |
//! | node id     | `H(pk)`                                      |
//! | signature   | `H("spdl/sig" ‖ sk ‖ msg)`                   |
//! | VRF `h`     | `H("spdl/vrf" ‖ sk ‖ seed)`                  |
//! | VRF `proof` | `H("spdl/proof" ‖ sk ‖ seed)`                |
//!
//! Keyed hashes are not publicly verifiable, so verification goes through a
//! [`KeyRegistry`]: a write-once table filled at bootstrap that recomputes
//! tags on behalf of verifiers and never hands secret keys out. Swapping in
//! a real signature/VRF suite only touches this module.

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// The single 256-bit hash used for ids, block hashes, signatures and VRF.
pub const HASH_ALGORITHM: &str = "SHA-256";

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Hash256(pub [u8; 32]);

impl Hash256 {
    pub const ZERO: Hash256 = Hash256([0; 32]);

    pub fn digest(bytes: &[u8]) -> Self {
        Hash256(Sha256::digest(bytes).into())
    }

    pub fn digest_parts(parts: &[&[u8]]) -> Self {
        let mut hasher = Sha256::new();
        for part in parts {
            hasher.update(part);
        }
        Hash256(hasher.finalize().into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First `n` hex characters, for trace logs.
    pub fn short(&self) -> String {
        let mut s = self.to_hex();
        s.truncate(8);
        s
    }
}

impl fmt::Display for Hash256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Hash256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Hash256({})", self.short())
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey([u8; 32]);

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey(pub [u8; 32]);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", &hex::encode(self.0)[..8])
    }
}

#[derive(Debug, Clone)]
pub struct KeyPair {
    pub sk: SecretKey,
    pub pk: PublicKey,
}

/// 256-bit node identity, `H(pk)`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId(pub Hash256);

impl NodeId {
    pub const ZERO: NodeId = NodeId(Hash256::ZERO);

    pub fn from_public_key(pk: &PublicKey) -> Self {
        NodeId(Hash256::digest(&pk.0))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        self.0.as_bytes()
    }

    pub fn short(&self) -> String {
        self.0.short()
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({})", self.short())
    }
}

pub const SIGNATURE_LEN: usize = 32;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", &hex::encode(self.0)[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VrfOutput {
    pub h: Hash256,
    pub proof: [u8; 32],
}

fn derive_public(sk: &SecretKey) -> PublicKey {
    PublicKey(Hash256::digest_parts(&[b"spdl/pk", &sk.0]).0)
}

pub fn keygen(seed: &[u8]) -> (KeyPair, NodeId) {
    let sk = SecretKey(Hash256::digest_parts(&[b"spdl/sk", seed]).0);
    let pk = derive_public(&sk);
    let id = NodeId::from_public_key(&pk);
    (KeyPair { sk, pk }, id)
}

pub fn sign(sk: &SecretKey, msg: &[u8]) -> Signature {
    Signature(Hash256::digest_parts(&[b"spdl/sig", &sk.0, msg]).0)
}

pub fn vrf_eval(sk: &SecretKey, seed: &[u8]) -> VrfOutput {
    VrfOutput {
        h: Hash256::digest_parts(&[b"spdl/vrf", &sk.0, seed]),
        proof: Hash256::digest_parts(&[b"spdl/proof", &sk.0, seed]).0,
    }
}

/// Trusted verification oracle: maps every registered public key to the
/// material needed to re-derive its tags.
#[derive(Debug, Default, Clone)]
pub struct KeyRegistry {
    keys: BTreeMap<PublicKey, SecretKey>,
}

impl KeyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a key pair. The public key must actually derive from the
    /// secret key.
    pub fn register(&mut self, pair: &KeyPair) -> Result<()> {
        if derive_public(&pair.sk) != pair.pk {
            return Err(Error::invalid("public key does not match secret key"));
        }
        self.keys.insert(pair.pk, pair.sk.clone());
        Ok(())
    }

    pub fn contains(&self, pk: &PublicKey) -> bool {
        self.keys.contains_key(pk)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Verifies a raw signature. Fails with an invalid-argument error when
    /// `sig` is not exactly [`SIGNATURE_LEN`] bytes.
    pub fn verify(&self, pk: &PublicKey, msg: &[u8], sig: &[u8]) -> Result<bool> {
        let sig: [u8; SIGNATURE_LEN] = sig.try_into().map_err(|_| {
            Error::invalid(format!(
                "signature must be {SIGNATURE_LEN} bytes, got {}",
                sig.len()
            ))
        })?;
        Ok(self.verify_signature(pk, msg, &Signature(sig)))
    }

    pub fn verify_signature(&self, pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
        match self.keys.get(pk) {
            Some(sk) => sign(sk, msg) == *sig,
            None => false,
        }
    }

    pub fn vrf_verify(&self, pk: &PublicKey, h: &Hash256, proof: &[u8; 32], seed: &[u8]) -> bool {
        match self.keys.get(pk) {
            Some(sk) => {
                let expected = vrf_eval(sk, seed);
                expected.h == *h && expected.proof == *proof
            }
            None => false,
        }
    }
}
