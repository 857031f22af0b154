//! PBFT-style agreement on one aggregated gradient per round.
//!
//! A round runs in numbered views. View 0 is led by the epoch leader, which
//! proposes a block carrying its aggregate. Every node, the leader included,
//! checks the proposal against its own recomputed aggregate and answers with
//! PREPARE; a quorum of PREPAREs makes the proposal *prepared* and triggers
//! COMMIT; a quorum of COMMITs decides it. A node that times out sends
//! VIEW-CHANGE for the next view, carrying its highest prepared certificate.
//! The leader of the new view (chosen by a fresh lottery) must re-propose the
//! highest certified value found in the quorum of VIEW-CHANGEs it cites, or
//! else proposes the round's *null* value, which abandons the round. Nodes
//! that have decided answer VIEW-CHANGEs with the signed proposal and commit
//! quorum so stragglers can decide too.
//!
//! Signatures cover a fixed header; the proposed block, the cited
//! VIEW-CHANGEs and the prepared certificate are bound into it by hash.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::codec::{Decoder, Encoder};
use crate::crypto::{sign, Hash256, KeyPair, KeyRegistry, NodeId, PublicKey, Signature};
use crate::gar::GarSpec;
use crate::learning::{sgd_update, GradientVector, ModelParams};
use crate::ledger::{Block, Chain};
use crate::{Error, Result};

/// Minimum number of distinct voters for a decision: `⌈(2n+1)/3⌉`, which
/// equals `2f+1` when `n = 3f+1`.
pub fn quorum(n: usize) -> usize {
    (2 * n + 1).div_ceil(3)
}

/// Largest `f` with `3f+1 ≤ n`.
pub fn max_faults(n: usize) -> usize {
    n.saturating_sub(1) / 3
}

/// Value whose commitment abandons `round`; the proposing view is bound in.
pub fn null_hash(epoch: u64, round: u64, view: u64) -> Hash256 {
    Hash256::digest_parts(&[
        b"spdl/null",
        &epoch.to_be_bytes(),
        &round.to_be_bytes(),
        &view.to_be_bytes(),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    PrePrepare,
    Prepare,
    Commit,
    ViewChange,
}

impl Phase {
    fn code(self) -> u64 {
        match self {
            Phase::PrePrepare => 0,
            Phase::Prepare => 1,
            Phase::Commit => 2,
            Phase::ViewChange => 3,
        }
    }

    fn from_code(code: u64) -> Result<Self> {
        Ok(match code {
            0 => Phase::PrePrepare,
            1 => Phase::Prepare,
            2 => Phase::Commit,
            3 => Phase::ViewChange,
            other => return Err(Error::Decode(format!("unknown phase {other}"))),
        })
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::PrePrepare => "PRE-PREPARE",
            Phase::Prepare => "PREPARE",
            Phase::Commit => "COMMIT",
            Phase::ViewChange => "VIEW-CHANGE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Vote {
    Accept,
}

/// A proposal plus a quorum of matching PREPAREs.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCert {
    /// Carried without its cited VIEW-CHANGEs; the signature still verifies.
    pub pre_prepare: Box<ConsensusMessage>,
    pub prepares: Vec<ConsensusMessage>,
}

impl PreparedCert {
    pub fn view(&self) -> u64 {
        self.pre_prepare.view
    }

    pub fn hash(&self) -> Hash256 {
        self.pre_prepare.block_hash
    }

    fn encode(&self, enc: &mut Encoder) {
        self.pre_prepare.encode(enc);
        enc.u64(self.prepares.len() as u64);
        for p in &self.prepares {
            p.encode(enc);
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let pre_prepare = Box::new(ConsensusMessage::decode(dec)?);
        let count = dec.u64()?;
        let mut prepares = Vec::new();
        for _ in 0..count {
            prepares.push(ConsensusMessage::decode(dec)?);
        }
        Ok(Self {
            pre_prepare,
            prepares,
        })
    }

    fn digest(&self) -> Hash256 {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        Hash256::digest(enc.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMessage {
    pub phase: Phase,
    pub sender: NodeId,
    pub epoch: u64,
    pub round: u64,
    pub view: u64,
    /// Proposed block (PRE-PREPARE of a non-null value only).
    pub block: Option<Block>,
    pub block_hash: Hash256,
    pub vote: Vote,
    /// Hash of the cited VIEW-CHANGEs (PRE-PREPARE in a view above 0).
    pub justification_digest: Hash256,
    pub view_changes: Vec<ConsensusMessage>,
    /// Hash of `prepared` (VIEW-CHANGE only).
    pub prepared_digest: Hash256,
    pub prepared: Option<PreparedCert>,
    pub sig: Signature,
}

fn digest_messages(msgs: &[ConsensusMessage]) -> Hash256 {
    if msgs.is_empty() {
        return Hash256::ZERO;
    }
    let mut enc = Encoder::new();
    enc.u64(msgs.len() as u64);
    for m in msgs {
        m.encode(&mut enc);
    }
    Hash256::digest(enc.as_bytes())
}

impl ConsensusMessage {
    fn unsigned(phase: Phase, sender: NodeId, epoch: u64, round: u64, view: u64, block_hash: Hash256) -> Self {
        Self {
            phase,
            sender,
            epoch,
            round,
            view,
            block: None,
            block_hash,
            vote: Vote::Accept,
            justification_digest: Hash256::ZERO,
            view_changes: Vec::new(),
            prepared_digest: Hash256::ZERO,
            prepared: None,
            sig: Signature([0; 32]),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn pre_prepare(
        keys: &KeyPair,
        sender: NodeId,
        epoch: u64,
        round: u64,
        view: u64,
        block: Option<Block>,
        block_hash: Hash256,
        view_changes: Vec<ConsensusMessage>,
    ) -> Self {
        let mut m = Self::unsigned(Phase::PrePrepare, sender, epoch, round, view, block_hash);
        m.block = block;
        m.justification_digest = digest_messages(&view_changes);
        m.view_changes = view_changes;
        m.signed(keys)
    }

    pub fn vote(keys: &KeyPair, phase: Phase, sender: NodeId, epoch: u64, round: u64, view: u64, block_hash: Hash256) -> Self {
        assert!(matches!(phase, Phase::Prepare | Phase::Commit));
        Self::unsigned(phase, sender, epoch, round, view, block_hash).signed(keys)
    }

    pub fn view_change(
        keys: &KeyPair,
        sender: NodeId,
        epoch: u64,
        round: u64,
        new_view: u64,
        prepared: Option<PreparedCert>,
    ) -> Self {
        let mut m = Self::unsigned(Phase::ViewChange, sender, epoch, round, new_view, Hash256::ZERO);
        m.prepared_digest = prepared.as_ref().map_or(Hash256::ZERO, PreparedCert::digest);
        m.prepared = prepared;
        m.signed(keys)
    }

    /// Re-signs after the caller changed a field.
    pub fn signed(mut self, keys: &KeyPair) -> Self {
        self.sig = sign(&keys.sk, &self.signing_bytes());
        self
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.u64(self.phase.code())
            .fixed(self.sender.as_bytes())
            .u64(self.epoch)
            .u64(self.round)
            .u64(self.view)
            .fixed(self.block_hash.as_bytes())
            .u64(0)
            .fixed(self.justification_digest.as_bytes())
            .fixed(self.prepared_digest.as_bytes());
        enc.finish()
    }

    pub fn encode(&self, enc: &mut Encoder) {
        enc.fixed(&self.signing_bytes());
        match &self.block {
            Some(b) => {
                enc.u64(1);
                b.encode(enc);
            }
            None => {
                enc.u64(0);
            }
        }
        enc.u64(self.view_changes.len() as u64);
        for m in &self.view_changes {
            m.encode(enc);
        }
        match &self.prepared {
            Some(c) => {
                enc.u64(1);
                c.encode(enc);
            }
            None => {
                enc.u64(0);
            }
        }
        enc.fixed(&self.sig.0);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish()
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let phase = Phase::from_code(dec.u64()?)?;
        let sender = NodeId(Hash256(dec.fixed()?));
        let epoch = dec.u64()?;
        let round = dec.u64()?;
        let view = dec.u64()?;
        let block_hash = Hash256(dec.fixed()?);
        if dec.u64()? != 0 {
            return Err(Error::Decode("unknown vote".into()));
        }
        let justification_digest = Hash256(dec.fixed()?);
        let prepared_digest = Hash256(dec.fixed()?);
        let block = match dec.u64()? {
            0 => None,
            _ => Some(Block::decode(dec)?),
        };
        let count = dec.u64()?;
        let mut view_changes = Vec::new();
        for _ in 0..count {
            view_changes.push(ConsensusMessage::decode(dec)?);
        }
        let prepared = match dec.u64()? {
            0 => None,
            _ => Some(PreparedCert::decode(dec)?),
        };
        let sig = Signature(dec.fixed()?);
        Ok(Self {
            phase,
            sender,
            epoch,
            round,
            view,
            block,
            block_hash,
            vote: Vote::Accept,
            justification_digest,
            view_changes,
            prepared_digest,
            prepared,
            sig,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes);
        let m = Self::decode(&mut dec)?;
        dec.expect_end()?;
        Ok(m)
    }

    /// Hash of the full encoding; orders deliveries.
    pub fn digest(&self) -> Hash256 {
        Hash256::digest(&self.to_bytes())
    }

    /// The same proposal without its cited VIEW-CHANGEs.
    pub fn stripped(&self) -> Self {
        let mut m = self.clone();
        m.view_changes.clear();
        m
    }

    /// Payloads agree with the signed digests.
    fn payloads_consistent(&self) -> bool {
        let block_ok = match &self.block {
            Some(b) => b.hash == self.block_hash && b.is_sealed(),
            None => true,
        };
        let prepared_ok = match &self.prepared {
            Some(c) => c.digest() == self.prepared_digest,
            None => self.prepared_digest == Hash256::ZERO,
        };
        block_ok && prepared_ok
    }
}

/// Members of the round, ordered by id, with the fault bound they assume.
#[derive(Debug, Clone)]
pub struct Roster {
    members: Vec<(NodeId, PublicKey)>,
    f: usize,
}

impl Roster {
    pub fn new(mut members: Vec<(NodeId, PublicKey)>) -> Result<Self> {
        members.sort_by_key(|(id, _)| *id);
        if members.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::config("duplicate node id in roster"));
        }
        if members.is_empty() {
            return Err(Error::config("empty roster"));
        }
        let f = max_faults(members.len());
        Ok(Self { members, f })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn f(&self) -> usize {
        self.f
    }

    pub fn quorum(&self) -> usize {
        quorum(self.members.len())
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.members.iter().map(|(id, _)| *id)
    }

    pub fn index_of(&self, id: &NodeId) -> Option<usize> {
        self.members.binary_search_by_key(id, |(m, _)| *m).ok()
    }

    pub fn public_key(&self, id: &NodeId) -> Option<&PublicKey> {
        self.index_of(id).map(|i| &self.members[i].1)
    }

    pub fn verify(&self, registry: &KeyRegistry, msg: &ConsensusMessage) -> bool {
        match self.public_key(&msg.sender) {
            Some(pk) => registry.verify_signature(pk, &msg.signing_bytes(), &msg.sig),
            None => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RejectReason {
    BadSig,
    BadLink,
    DeltaMismatch,
    WrongLeader,
    BadJustification,
    Malformed,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::BadSig => "bad-sig",
            RejectReason::BadLink => "bad-link",
            RejectReason::DeltaMismatch => "delta-mismatch",
            RejectReason::WrongLeader => "wrong-leader",
            RejectReason::BadJustification => "bad-justification",
            RejectReason::Malformed => "malformed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validation {
    Accept,
    Reject(RejectReason),
}

fn check_block(block: &Block, tip: &Block, epoch: u64, round: u64, local: Option<&GradientVector>, delta_tol: f64) -> Validation {
    if block.prev_hash != tip.hash || block.height != tip.height + 1 {
        return Validation::Reject(RejectReason::BadLink);
    }
    if block.epoch != epoch || block.round != round || !block.txs.is_empty() {
        return Validation::Reject(RejectReason::Malformed);
    }
    if let Some(local) = local {
        let close = local.dim() == block.delta.dim()
            && local
                .as_slice()
                .iter()
                .zip(block.delta.as_slice())
                .all(|(a, b)| (a - b).abs() < delta_tol);
        if !close {
            return Validation::Reject(RejectReason::DeltaMismatch);
        }
    }
    Validation::Accept
}

/// Builds the leader's block and its signed PRE-PREPARE for view 0.
/// `grads` are in roster order with absent senders as zero vectors.
pub fn leader_propose(
    keys: &KeyPair,
    me: NodeId,
    grads: &[GradientVector],
    gar: GarSpec,
    chain: &Chain,
    epoch: u64,
    round: u64,
) -> Result<(Block, ConsensusMessage)> {
    let delta = gar.aggregate(grads)?;
    let tip = chain.tip();
    let block = Block::new(tip.height + 1, epoch, round, tip.hash, delta, me, Vec::new());
    let msg = ConsensusMessage::pre_prepare(keys, me, epoch, round, 0, Some(block.clone()), block.hash, Vec::new());
    Ok((block, msg))
}

/// Checks a view-0 proposal: signature by `leader`, link to the local tip,
/// and componentwise agreement with the locally recomputed aggregate.
pub fn follower_validate(
    msg: &ConsensusMessage,
    leader: &PublicKey,
    registry: &KeyRegistry,
    local_grads: &[GradientVector],
    gar: GarSpec,
    chain: &Chain,
    delta_tol: f64,
) -> Validation {
    if msg.phase != Phase::PrePrepare || NodeId::from_public_key(leader) != msg.sender {
        return Validation::Reject(RejectReason::WrongLeader);
    }
    if !registry.verify_signature(leader, &msg.signing_bytes(), &msg.sig) {
        return Validation::Reject(RejectReason::BadSig);
    }
    let Some(block) = msg.block.as_ref().filter(|_| msg.payloads_consistent()) else {
        return Validation::Reject(RejectReason::Malformed);
    };
    let local = gar.aggregate(local_grads).ok();
    if local.is_none() {
        return Validation::Reject(RejectReason::DeltaMismatch);
    }
    check_block(block, chain.tip(), msg.epoch, msg.round, local.as_ref(), delta_tol)
}

pub const PENALTY_FACTOR: f64 = 0.5;
pub const SNAP_TO_ZERO_BELOW: f64 = 0.05;

/// Per-node reputation in `[0, 1]`, starting at 1 and only ever reduced.
#[derive(Debug, Clone, PartialEq)]
pub struct ReputationTable {
    values: BTreeMap<NodeId, f64>,
}

impl ReputationTable {
    pub fn new(ids: impl IntoIterator<Item = NodeId>) -> Self {
        Self {
            values: ids.into_iter().map(|id| (id, 1.0)).collect(),
        }
    }

    pub fn get(&self, id: &NodeId) -> f64 {
        self.values.get(id).copied().unwrap_or(0.0)
    }

    pub fn penalize(&mut self, id: &NodeId) {
        if let Some(r) = self.values.get_mut(id) {
            *r *= PENALTY_FACTOR;
            if *r < SNAP_TO_ZERO_BELOW {
                *r = 0.0;
            }
        }
    }

    /// Penalizes every node whose gradient has a negative inner product with
    /// `delta`; returns the penalized ids.
    pub fn update<'a>(
        &mut self,
        grads: impl IntoIterator<Item = (NodeId, &'a GradientVector)>,
        delta: &GradientVector,
    ) -> Vec<NodeId> {
        let mut hit = Vec::new();
        for (id, g) in grads {
            if g.dot(delta) < 0.0 {
                self.penalize(&id);
                hit.push(id);
            }
        }
        hit
    }

    pub fn min(&self) -> f64 {
        self.values.values().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &f64)> {
        self.values.iter()
    }
}

/// Applies a decided block: append, SGD step, reputation update.
pub fn decide(
    block: &Block,
    mut chain: Chain,
    x: &ModelParams,
    gamma: f64,
    mut reputations: ReputationTable,
    grads: &[(NodeId, GradientVector)],
) -> Result<(Chain, ModelParams, ReputationTable)> {
    chain.append(block.clone())?;
    let x = sgd_update(x, &block.delta, gamma)?;
    reputations.update(grads.iter().map(|(id, g)| (*id, g)), &block.delta);
    Ok((chain, x, reputations))
}

/// One line of the round trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub tick: u64,
    pub node: NodeId,
    pub phase: Phase,
    pub view: u64,
    pub action: String,
    pub block: Hash256,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tick={} node={} phase={} view={} action={} block={}",
            self.tick,
            self.node.short(),
            self.phase,
            self.view,
            self.action,
            self.block.short()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsensusParams {
    /// Ticks a node waits in a view before asking for the next one.
    pub delta2: u64,
    pub delta_tol: f64,
}

impl Default for ConsensusParams {
    fn default() -> Self {
        Self {
            delta2: 8,
            delta_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outbound {
    Broadcast(ConsensusMessage),
    Send(NodeId, ConsensusMessage),
}

/// What a node committed to for the round.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    /// View of the commit quorum.
    pub view: u64,
    pub hash: Hash256,
    /// `None` when the round's null value was decided.
    pub block: Option<Block>,
    pub tick: u64,
}

/// Everything a node needs besides its own state to process messages.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub keys: &'a KeyPair,
    pub roster: &'a Roster,
    pub registry: &'a KeyRegistry,
    pub params: ConsensusParams,
}

/// One node's consensus state for a single round.
#[derive(Debug, Clone)]
pub struct RoundState {
    me: NodeId,
    epoch: u64,
    round: u64,
    tip: Block,
    local_delta: Option<GradientVector>,
    view: u64,
    timer_start: u64,
    timeouts: u32,
    vc_target: u64,
    leaders: BTreeMap<u64, NodeId>,
    accepted: Option<Hash256>,
    accepted_msg: BTreeMap<u64, ConsensusMessage>,
    known: BTreeMap<Hash256, ConsensusMessage>,
    buffered: Vec<ConsensusMessage>,
    prepares: BTreeMap<(u64, Hash256), BTreeMap<NodeId, ConsensusMessage>>,
    commits: BTreeMap<(u64, Hash256), BTreeMap<NodeId, ConsensusMessage>>,
    commit_sent: BTreeSet<u64>,
    prepared: Option<PreparedCert>,
    view_changes: BTreeMap<u64, BTreeMap<NodeId, ConsensusMessage>>,
    decision: Option<Decision>,
    transferred: BTreeSet<NodeId>,
    invalid: usize,
    duplicates: usize,
    rejections: Vec<(u64, RejectReason)>,
    trace_enabled: bool,
    trace: Vec<TraceEntry>,
}

impl RoundState {
    /// `local_delta` is this node's own aggregate over its received
    /// gradients, or `None` if aggregation failed.
    pub fn new(
        me: NodeId,
        epoch: u64,
        round: u64,
        tip: Block,
        local_delta: Option<GradientVector>,
        leader: NodeId,
        now: u64,
    ) -> Self {
        Self {
            me,
            epoch,
            round,
            tip,
            local_delta,
            view: 0,
            timer_start: now,
            timeouts: 0,
            vc_target: 0,
            leaders: BTreeMap::from([(0, leader)]),
            accepted: None,
            accepted_msg: BTreeMap::new(),
            known: BTreeMap::new(),
            buffered: Vec::new(),
            prepares: BTreeMap::new(),
            commits: BTreeMap::new(),
            commit_sent: BTreeSet::new(),
            prepared: None,
            view_changes: BTreeMap::new(),
            decision: None,
            transferred: BTreeSet::new(),
            invalid: 0,
            duplicates: 0,
            rejections: Vec::new(),
            trace_enabled: false,
            trace: Vec::new(),
        }
    }

    pub fn with_trace(mut self, enabled: bool) -> Self {
        self.trace_enabled = enabled;
        self
    }

    pub fn me(&self) -> NodeId {
        self.me
    }

    pub fn view(&self) -> u64 {
        self.view
    }

    pub fn decision(&self) -> Option<&Decision> {
        self.decision.as_ref()
    }

    pub fn leader(&self, view: u64) -> Option<NodeId> {
        self.leaders.get(&view).copied()
    }

    pub fn local_delta(&self) -> Option<&GradientVector> {
        self.local_delta.as_ref()
    }

    /// Messages dropped for a bad signature or unknown sender.
    pub fn invalid_count(&self) -> usize {
        self.invalid
    }

    /// Repeated votes from a sender already counted in that phase.
    pub fn duplicate_count(&self) -> usize {
        self.duplicates
    }

    pub fn rejections(&self) -> &[(u64, RejectReason)] {
        &self.rejections
    }

    pub fn prepare_count(&self, view: u64, hash: &Hash256) -> usize {
        self.prepares.get(&(view, *hash)).map_or(0, BTreeMap::len)
    }

    pub fn commit_count(&self, view: u64, hash: &Hash256) -> usize {
        self.commits.get(&(view, *hash)).map_or(0, BTreeMap::len)
    }

    pub fn take_trace(&mut self) -> Vec<TraceEntry> {
        std::mem::take(&mut self.trace)
    }

    /// Views this node has asked to move to but has no leader for yet.
    pub fn pending_elections(&self) -> Vec<u64> {
        let mut out = Vec::new();
        if self.decision.is_none() && self.vc_target > self.view && !self.leaders.contains_key(&self.vc_target) {
            out.push(self.vc_target);
        }
        out
    }

    /// Highest view for which this node has sent VIEW-CHANGE (0 if none).
    pub fn view_change_target(&self) -> u64 {
        self.vc_target
    }

    fn log(&mut self, now: u64, phase: Phase, view: u64, action: impl Into<String>, block: Hash256) {
        if self.trace_enabled {
            self.trace.push(TraceEntry {
                tick: now,
                node: self.me,
                phase,
                view,
                action: action.into(),
                block,
            });
        }
    }

    /// Kicks off view 0; the leader emits its proposal.
    pub fn start(&mut self, ctx: &RoundContext<'_>, now: u64) -> Vec<Outbound> {
        self.timer_start = now;
        self.propose_if_leader(ctx, now)
    }

    fn propose_if_leader(&mut self, ctx: &RoundContext<'_>, now: u64) -> Vec<Outbound> {
        if self.leaders.get(&self.view) != Some(&self.me) {
            return Vec::new();
        }
        let view = self.view;
        let msg = if view == 0 {
            let Some(delta) = self.local_delta.clone() else {
                return Vec::new();
            };
            let block = Block::new(
                self.tip.height + 1,
                self.epoch,
                self.round,
                self.tip.hash,
                delta,
                self.me,
                Vec::new(),
            );
            let hash = block.hash;
            ConsensusMessage::pre_prepare(ctx.keys, self.me, self.epoch, self.round, 0, Some(block), hash, Vec::new())
        } else {
            let q = ctx.roster.quorum();
            let Some(vcs) = self.view_changes.get(&view) else {
                return Vec::new();
            };
            if vcs.len() < q {
                return Vec::new();
            }
            let cited: Vec<ConsensusMessage> = vcs.values().take(q).cloned().collect();
            let (block, hash) = match highest_cert(&cited) {
                Some(cert) => (cert.pre_prepare.block.clone(), cert.hash()),
                None => (None, null_hash(self.epoch, self.round, view)),
            };
            ConsensusMessage::pre_prepare(ctx.keys, self.me, self.epoch, self.round, view, block, hash, cited)
        };
        self.log(now, Phase::PrePrepare, view, "propose", msg.block_hash);
        vec![Outbound::Broadcast(msg)]
    }

    /// Records the leader of `view` once its lottery has run.
    pub fn set_leader(&mut self, ctx: &RoundContext<'_>, view: u64, leader: NodeId, now: u64) -> Vec<Outbound> {
        self.leaders.entry(view).or_insert(leader);
        self.try_enter(ctx, now)
    }

    /// Processes one delivered message.
    pub fn handle(&mut self, ctx: &RoundContext<'_>, msg: &ConsensusMessage, now: u64) -> Vec<Outbound> {
        if msg.epoch != self.epoch || msg.round != self.round {
            return Vec::new();
        }
        if !ctx.roster.verify(ctx.registry, msg) || !msg.payloads_consistent() {
            self.invalid += 1;
            self.log(now, msg.phase, msg.view, "drop-invalid", msg.block_hash);
            return Vec::new();
        }
        match msg.phase {
            Phase::PrePrepare => self.on_pre_prepare(ctx, msg, now),
            Phase::Prepare => self.on_prepare(ctx, msg, now),
            Phase::Commit => self.on_commit(ctx, msg, now),
            Phase::ViewChange => self.on_view_change(ctx, msg, now),
        }
    }

    fn on_pre_prepare(&mut self, ctx: &RoundContext<'_>, msg: &ConsensusMessage, now: u64) -> Vec<Outbound> {
        let Some(leader) = self.leaders.get(&msg.view).copied() else {
            if msg.view > self.view {
                self.buffered.push(msg.clone());
            }
            return Vec::new();
        };
        if msg.sender != leader {
            self.rejections.push((msg.view, RejectReason::WrongLeader));
            self.log(now, Phase::PrePrepare, msg.view, "reject wrong-leader", msg.block_hash);
            return Vec::new();
        }
        self.known.entry(msg.block_hash).or_insert_with(|| msg.stripped());
        let mut out = Vec::new();
        if self.decision.is_none() {
            if msg.view > self.view {
                self.buffered.push(msg.clone());
            } else if msg.view == self.view && self.vc_target <= self.view && self.accepted.is_none() {
                match self.validate_proposal(ctx, msg) {
                    Validation::Accept => {
                        self.accepted = Some(msg.block_hash);
                        self.accepted_msg.insert(msg.view, msg.stripped());
                        self.log(now, Phase::PrePrepare, msg.view, "accept", msg.block_hash);
                        let prepare = ConsensusMessage::vote(
                            ctx.keys,
                            Phase::Prepare,
                            self.me,
                            self.epoch,
                            self.round,
                            msg.view,
                            msg.block_hash,
                        );
                        out.push(Outbound::Broadcast(prepare));
                        out.extend(self.check_prepared(ctx, msg.view, msg.block_hash, now));
                    }
                    Validation::Reject(reason) => {
                        self.rejections.push((msg.view, reason));
                        self.log(now, Phase::PrePrepare, msg.view, format!("reject {reason}"), msg.block_hash);
                    }
                }
            }
        }
        out.extend(self.check_decide(ctx, now));
        out
    }

    fn validate_proposal(&self, ctx: &RoundContext<'_>, msg: &ConsensusMessage) -> Validation {
        if msg.view == 0 {
            let Some(block) = &msg.block else {
                return Validation::Reject(RejectReason::Malformed);
            };
            if block.proposer != msg.sender {
                return Validation::Reject(RejectReason::Malformed);
            }
            if self.local_delta.is_none() {
                return Validation::Reject(RejectReason::DeltaMismatch);
            }
            return check_block(
                block,
                &self.tip,
                self.epoch,
                self.round,
                self.local_delta.as_ref(),
                ctx.params.delta_tol,
            );
        }
        if digest_messages(&msg.view_changes) != msg.justification_digest {
            return Validation::Reject(RejectReason::BadJustification);
        }
        let senders: BTreeSet<NodeId> = msg.view_changes.iter().map(|m| m.sender).collect();
        let all_valid = msg.view_changes.iter().all(|vc| {
            vc.phase == Phase::ViewChange
                && vc.view == msg.view
                && vc.epoch == self.epoch
                && vc.round == self.round
                && ctx.roster.verify(ctx.registry, vc)
                && vc.payloads_consistent()
                && vc.prepared.as_ref().is_none_or(|c| self.cert_valid(ctx, c, msg.view))
        });
        if !all_valid || senders.len() != msg.view_changes.len() || senders.len() < ctx.roster.quorum() {
            return Validation::Reject(RejectReason::BadJustification);
        }
        match highest_cert(&msg.view_changes) {
            Some(cert) => {
                if msg.block_hash != cert.hash() || msg.block != cert.pre_prepare.block {
                    return Validation::Reject(RejectReason::BadJustification);
                }
                match &msg.block {
                    Some(block) => check_block(block, &self.tip, self.epoch, self.round, None, 0.0),
                    None => Validation::Accept,
                }
            }
            None => {
                if msg.block.is_some() || msg.block_hash != null_hash(self.epoch, self.round, msg.view) {
                    Validation::Reject(RejectReason::BadJustification)
                } else {
                    Validation::Accept
                }
            }
        }
    }

    fn cert_valid(&self, ctx: &RoundContext<'_>, cert: &PreparedCert, below: u64) -> bool {
        let pp = &cert.pre_prepare;
        let v = pp.view;
        if pp.phase != Phase::PrePrepare
            || v >= below
            || pp.epoch != self.epoch
            || pp.round != self.round
            || self.leaders.get(&v) != Some(&pp.sender)
            || !ctx.roster.verify(ctx.registry, pp)
            || !pp.payloads_consistent()
        {
            return false;
        }
        let null_ok = pp.block.is_none() && (0..=v).any(|w| pp.block_hash == null_hash(self.epoch, self.round, w));
        if pp.block.is_none() && !null_ok {
            return false;
        }
        let mut senders = BTreeSet::new();
        for p in &cert.prepares {
            if p.phase != Phase::Prepare
                || p.view != v
                || p.block_hash != pp.block_hash
                || p.epoch != self.epoch
                || p.round != self.round
                || !ctx.roster.verify(ctx.registry, p)
            {
                return false;
            }
            senders.insert(p.sender);
        }
        senders.len() >= ctx.roster.quorum()
    }

    /// Counts a PREPARE; emits COMMIT once the accepted proposal reaches a
    /// quorum.
    pub fn on_prepare(&mut self, ctx: &RoundContext<'_>, msg: &ConsensusMessage, now: u64) -> Vec<Outbound> {
        let set = self.prepares.entry((msg.view, msg.block_hash)).or_default();
        if set.contains_key(&msg.sender) {
            self.duplicates += 1;
            return Vec::new();
        }
        set.insert(msg.sender, msg.clone());
        self.check_prepared(ctx, msg.view, msg.block_hash, now)
    }

    fn check_prepared(&mut self, ctx: &RoundContext<'_>, view: u64, hash: Hash256, now: u64) -> Vec<Outbound> {
        if self.decision.is_some()
            || view != self.view
            || self.accepted != Some(hash)
            || self.vc_target > view
            || self.commit_sent.contains(&view)
        {
            return Vec::new();
        }
        let q = ctx.roster.quorum();
        let Some(set) = self.prepares.get(&(view, hash)) else {
            return Vec::new();
        };
        if set.len() < q {
            return Vec::new();
        }
        let cert = PreparedCert {
            pre_prepare: Box::new(self.accepted_msg[&view].clone()),
            prepares: set.values().take(q).cloned().collect(),
        };
        if self.prepared.as_ref().is_none_or(|c| c.view() < view) {
            self.prepared = Some(cert);
        }
        self.commit_sent.insert(view);
        self.log(now, Phase::Prepare, view, "prepared", hash);
        let commit = ConsensusMessage::vote(ctx.keys, Phase::Commit, self.me, self.epoch, self.round, view, hash);
        let mut out = vec![Outbound::Broadcast(commit)];
        out.extend(self.check_decide(ctx, now));
        out
    }

    /// Counts a COMMIT; decides once a quorum backs a known value.
    pub fn on_commit(&mut self, ctx: &RoundContext<'_>, msg: &ConsensusMessage, now: u64) -> Vec<Outbound> {
        let set = self.commits.entry((msg.view, msg.block_hash)).or_default();
        if set.contains_key(&msg.sender) {
            self.duplicates += 1;
            return Vec::new();
        }
        set.insert(msg.sender, msg.clone());
        self.check_decide(ctx, now)
    }

    fn check_decide(&mut self, ctx: &RoundContext<'_>, now: u64) -> Vec<Outbound> {
        if self.decision.is_some() {
            return Vec::new();
        }
        let q = ctx.roster.quorum();
        let found = self
            .commits
            .iter()
            .find(|((_, h), set)| set.len() >= q && self.known.contains_key(h))
            .map(|((v, h), _)| (*v, *h));
        let Some((view, hash)) = found else {
            return Vec::new();
        };
        let block = self.known[&hash].block.clone();
        self.decision = Some(Decision {
            view,
            hash,
            block,
            tick: now,
        });
        self.log(now, Phase::Commit, view, "decide", hash);
        let pending: Vec<NodeId> = self
            .view_changes
            .values()
            .flat_map(|m| m.keys().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut out = Vec::new();
        for peer in pending {
            out.extend(self.transfer_to(ctx, peer));
        }
        out
    }

    fn transfer_to(&mut self, ctx: &RoundContext<'_>, peer: NodeId) -> Vec<Outbound> {
        let Some(decision) = &self.decision else {
            return Vec::new();
        };
        if peer == self.me || !self.transferred.insert(peer) {
            return Vec::new();
        }
        let q = ctx.roster.quorum();
        let mut out = vec![Outbound::Send(peer, self.known[&decision.hash].clone())];
        out.extend(
            self.commits[&(decision.view, decision.hash)]
                .values()
                .take(q)
                .map(|m| Outbound::Send(peer, m.clone())),
        );
        out
    }

    /// Stores a VIEW-CHANGE, joins a view change backed by `f+1` nodes and
    /// enters a new view once a quorum asks for it.
    pub fn on_view_change(&mut self, ctx: &RoundContext<'_>, msg: &ConsensusMessage, now: u64) -> Vec<Outbound> {
        if msg.view == 0 || msg.prepared.as_ref().is_some_and(|c| !self.cert_valid(ctx, c, msg.view)) {
            self.invalid += 1;
            self.log(now, Phase::ViewChange, msg.view, "drop-bad-cert", Hash256::ZERO);
            return Vec::new();
        }
        let set = self.view_changes.entry(msg.view).or_default();
        if set.contains_key(&msg.sender) {
            self.duplicates += 1;
            return Vec::new();
        }
        set.insert(msg.sender, msg.clone());
        if self.decision.is_some() {
            return self.transfer_to(ctx, msg.sender);
        }
        let mut out = Vec::new();
        let floor = self.view.max(self.vc_target);
        let mut per_sender: BTreeMap<NodeId, u64> = BTreeMap::new();
        for (&v, senders) in self.view_changes.range(floor + 1..) {
            for id in senders.keys() {
                per_sender.entry(*id).or_insert(v);
            }
        }
        let f = ctx.roster.f();
        if per_sender.len() > f {
            let mut views: Vec<u64> = per_sender.into_values().collect();
            views.sort_unstable_by(|a, b| b.cmp(a));
            let target = views[f];
            out.extend(self.send_view_change(ctx, target, now, "join"));
        }
        out.extend(self.try_enter(ctx, now));
        out
    }

    fn send_view_change(&mut self, ctx: &RoundContext<'_>, target: u64, now: u64, why: &str) -> Vec<Outbound> {
        if target <= self.vc_target {
            return Vec::new();
        }
        self.vc_target = target;
        self.timer_start = now;
        self.log(now, Phase::ViewChange, target, why, Hash256::ZERO);
        let msg = ConsensusMessage::view_change(ctx.keys, self.me, self.epoch, self.round, target, self.prepared.clone());
        vec![Outbound::Broadcast(msg)]
    }

    fn try_enter(&mut self, ctx: &RoundContext<'_>, now: u64) -> Vec<Outbound> {
        if self.decision.is_some() {
            return Vec::new();
        }
        let q = ctx.roster.quorum();
        let lowest = (self.view + 1).max(self.vc_target);
        let target = self
            .view_changes
            .range(lowest..)
            .rev()
            .find(|(v, set)| set.len() >= q && self.leaders.contains_key(v))
            .map(|(v, _)| *v);
        let Some(view) = target else {
            return Vec::new();
        };
        self.view = view;
        self.vc_target = self.vc_target.max(view);
        self.timer_start = now;
        self.timeouts = 0;
        self.accepted = None;
        self.log(now, Phase::ViewChange, view, "enter-view", Hash256::ZERO);
        let mut out = self.propose_if_leader(ctx, now);
        let buffered = std::mem::take(&mut self.buffered);
        for msg in &buffered {
            if msg.view == view {
                out.extend(self.on_pre_prepare(ctx, msg, now));
            } else if msg.view > view {
                self.buffered.push(msg.clone());
            }
        }
        out
    }

    /// Fires the view timer: after `δ2` ticks without a decision (doubling
    /// with each consecutive expiry) the node asks for the next view.
    pub fn on_timeout(&mut self, ctx: &RoundContext<'_>, now: u64) -> Vec<Outbound> {
        if self.decision.is_some() {
            return Vec::new();
        }
        let wait = ctx.params.delta2.saturating_mul(1 << self.timeouts.min(6));
        if now < self.timer_start + wait {
            return Vec::new();
        }
        self.timeouts += 1;
        let target = self.view.max(self.vc_target) + 1;
        self.send_view_change(ctx, target, now, "timeout")
    }
}

fn highest_cert(vcs: &[ConsensusMessage]) -> Option<&PreparedCert> {
    vcs.iter()
        .filter_map(|m| m.prepared.as_ref())
        .max_by(|a, b| a.view().cmp(&b.view()).then_with(|| a.hash().cmp(&b.hash())))
}

#[cfg(test)]
mod tests;
