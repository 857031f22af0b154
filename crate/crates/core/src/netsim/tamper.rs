//! Rewrites a Byzantine node's outbound consensus traffic.

use std::collections::BTreeMap;

use rand::Rng;

use super::adversary::Strategy;
use crate::consensus::{ConsensusMessage, Outbound, Phase};
use crate::crypto::{Hash256, KeyPair, NodeId, Signature};
use crate::ledger::Block;
use crate::learning::GradientVector;
use crate::privacy::GaussianSampler;

/// Per-round memory of the conflicting proposals a node has sent.
#[derive(Debug, Default)]
pub(crate) struct Tamper {
    pairs: BTreeMap<u64, (Hash256, Hash256)>,
}

fn forge(mut msg: ConsensusMessage) -> ConsensusMessage {
    msg.sig = Signature([0xab; 32]);
    msg
}

fn rebuild(keys: &KeyPair, msg: &ConsensusMessage, block: Block) -> ConsensusMessage {
    let hash = block.hash;
    ConsensusMessage::pre_prepare(
        keys,
        msg.sender,
        msg.epoch,
        msg.round,
        msg.view,
        Some(block),
        hash,
        msg.view_changes.clone(),
    )
}

fn with_delta(block: &Block, delta: GradientVector) -> Block {
    Block::new(
        block.height,
        block.epoch,
        block.round,
        block.prev_hash,
        delta,
        block.proposer,
        block.txs.clone(),
    )
}

impl Tamper {
    pub fn reset(&mut self) {
        self.pairs.clear();
    }

    /// `peers` is the roster in order; the first half and the second half
    /// receive conflicting content when the strategy splits.
    pub fn apply<R: Rng + ?Sized>(
        &mut self,
        strategy: &Strategy,
        keys: &KeyPair,
        peers: &[NodeId],
        out: Vec<Outbound>,
        rng: &mut R,
    ) -> Vec<Outbound> {
        match strategy {
            Strategy::Silent => Vec::new(),
            Strategy::DeltaSubstitution => out
                .into_iter()
                .map(|o| match o {
                    Outbound::Broadcast(m) if m.phase == Phase::PrePrepare && m.block.is_some() => {
                        let block = m.block.as_ref().expect("checked");
                        let scale = 1.0 + block.delta.norm();
                        let mut sampler = GaussianSampler::new();
                        let values = block
                            .delta
                            .as_slice()
                            .iter()
                            .map(|_| scale * sampler.sample(rng))
                            .collect();
                        let delta = GradientVector::new(values).expect("finite");
                        Outbound::Broadcast(rebuild(keys, &m, with_delta(block, delta)))
                    }
                    other => other,
                })
                .collect(),
            Strategy::EquivocateConsensus => {
                let mut result = Vec::new();
                for o in out {
                    match o {
                        Outbound::Broadcast(m) => self.equivocate(keys, peers, m, rng, &mut result),
                        send => result.push(send),
                    }
                }
                result
            }
            _ => out,
        }
    }

    fn equivocate<R: Rng + ?Sized>(
        &mut self,
        keys: &KeyPair,
        peers: &[NodeId],
        m: ConsensusMessage,
        rng: &mut R,
        result: &mut Vec<Outbound>,
    ) {
        let half = peers.len() / 2;
        let split = |a: ConsensusMessage, b: ConsensusMessage, result: &mut Vec<Outbound>| {
            for (i, id) in peers.iter().enumerate() {
                let msg = if i < half { a.clone() } else { b.clone() };
                result.push(Outbound::Send(*id, msg));
            }
        };
        match m.phase {
            Phase::PrePrepare => match &m.block {
                Some(block) if m.view == 0 => {
                    let mut values = block.delta.as_slice().to_vec();
                    values[0] += 1e-12;
                    let delta = GradientVector::new(values).expect("finite");
                    let alt = rebuild(keys, &m, with_delta(block, delta));
                    self.pairs.insert(m.view, (m.block_hash, alt.block_hash));
                    split(m, alt, result);
                }
                _ => {
                    result.push(Outbound::Broadcast(forge(m.clone())));
                    result.push(Outbound::Broadcast(m));
                }
            },
            Phase::Prepare | Phase::Commit => {
                let other = match self.pairs.get(&m.view) {
                    Some(&(a, b)) if m.block_hash == a => b,
                    Some(&(a, b)) if m.block_hash == b => a,
                    _ => Hash256(rng.gen()),
                };
                let conflicting = ConsensusMessage::vote(keys, m.phase, m.sender, m.epoch, m.round, m.view, other);
                let (first, second) = match self.pairs.get(&m.view) {
                    Some(&(_, b)) if m.block_hash == b => (conflicting, m.clone()),
                    _ => (m.clone(), conflicting),
                };
                split(first, second, result);
                result.push(Outbound::Broadcast(m));
            }
            Phase::ViewChange => {
                let mut bogus = m.clone();
                bogus.view += 5;
                result.push(Outbound::Broadcast(forge(bogus)));
                result.push(Outbound::Broadcast(m));
            }
        }
    }
}
