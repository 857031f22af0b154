//! VRF leader lottery with reputation gating.

use crate::crypto::{Hash256, KeyRegistry, NodeId, PublicKey, VrfOutput};
use crate::{Error, Result};

/// A lottery entry that has passed VRF verification.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: NodeId,
    pub h: Hash256,
    pub proof: [u8; 32],
    pub reputation: f64,
}

/// A node's lottery ticket as it arrives over the network.
#[derive(Debug, Clone, PartialEq)]
pub struct VrfSubmission {
    pub pk: PublicKey,
    pub id: NodeId,
    pub output: VrfOutput,
    pub arrival_tick: u64,
}

/// Outcome of filtering submissions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Admission {
    pub candidates: Vec<Candidate>,
    /// Failed VRF or identity check.
    pub forged: usize,
    /// Arrived after the deadline.
    pub late: usize,
}

/// Keeps the submissions that arrived by `deadline` and carry a valid proof
/// for `seed` under a registered key whose hash is the claimed id.
pub fn admit_candidates(
    submissions: &[VrfSubmission],
    registry: &KeyRegistry,
    seed: &[u8],
    deadline: u64,
    reputation: impl Fn(&NodeId) -> f64,
) -> Admission {
    let mut out = Admission::default();
    for sub in submissions {
        if sub.arrival_tick > deadline {
            out.late += 1;
            continue;
        }
        let valid = sub.id == NodeId::from_public_key(&sub.pk)
            && registry.vrf_verify(&sub.pk, &sub.output.h, &sub.output.proof, seed);
        if !valid {
            out.forged += 1;
            continue;
        }
        if out.candidates.iter().any(|c| c.id == sub.id) {
            continue;
        }
        out.candidates.push(Candidate {
            id: sub.id,
            h: sub.output.h,
            proof: sub.output.proof,
            reputation: reputation(&sub.id),
        });
    }
    out
}

/// Largest `h` among candidates with positive reputation; equal `h` values
/// go to the lowest id.
pub fn elect_leader(candidates: &[Candidate]) -> Result<NodeId> {
    candidates
        .iter()
        .filter(|c| c.reputation > 0.0)
        .max_by(|a, b| a.h.cmp(&b.h).then_with(|| b.id.cmp(&a.id)))
        .map(|c| c.id)
        .ok_or(Error::ElectionFailed)
}

/// VRF input for one election attempt.
pub fn election_seed(epoch: u64, attempt: u64, prev_block_hash: &Hash256) -> [u8; 32] {
    Hash256::digest_parts(&[
        b"spdl/seed",
        &epoch.to_be_bytes(),
        &attempt.to_be_bytes(),
        prev_block_hash.as_bytes(),
    ])
    .0
}
