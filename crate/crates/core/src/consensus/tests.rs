use super::*;
use crate::crypto::keygen;
use crate::gar::GarKind;
use crate::ledger::{make_genesis, Transaction};
use proptest::prelude::*;

struct Net {
    keys: Vec<KeyPair>,
    ids: Vec<NodeId>,
    roster: Roster,
    registry: KeyRegistry,
    chain: Chain,
}

impl Net {
    fn new(n: usize) -> Self {
        let mut pairs: Vec<(KeyPair, NodeId)> = (0..n).map(|i| keygen(format!("c{i}").as_bytes())).collect();
        pairs.sort_by_key(|(_, id)| *id);
        let mut registry = KeyRegistry::new();
        for (k, _) in &pairs {
            registry.register(k).unwrap();
        }
        let roster = Roster::new(pairs.iter().map(|(k, id)| (*id, k.pk)).collect()).unwrap();
        let txs = pairs.iter().map(|(k, _)| Transaction::register(k.pk, "sim", 0)).collect();
        let chain = Chain::new(make_genesis(txs, 1).unwrap()).unwrap();
        Self {
            ids: pairs.iter().map(|(_, id)| *id).collect(),
            keys: pairs.into_iter().map(|(k, _)| k).collect(),
            roster,
            registry,
            chain,
        }
    }

    fn ctx(&self, i: usize) -> RoundContext<'_> {
        RoundContext {
            keys: &self.keys[i],
            roster: &self.roster,
            registry: &self.registry,
            params: ConsensusParams::default(),
        }
    }

    fn state(&self, i: usize, delta: f64, leader: usize) -> RoundState {
        RoundState::new(
            self.ids[i],
            0,
            0,
            self.chain.tip().clone(),
            Some(GradientVector::new(vec![delta]).unwrap()),
            self.ids[leader],
            0,
        )
    }

    fn vote(&self, i: usize, phase: Phase, view: u64, hash: Hash256) -> ConsensusMessage {
        ConsensusMessage::vote(&self.keys[i], phase, self.ids[i], 0, 0, view, hash)
    }
}

/// Runs the nodes until quiet. Node `silent` (if any) sends nothing; the
/// leader of view `v` is node `leader_of(v)`.
fn run(net: &Net, states: &mut [RoundState], silent: Option<usize>, leader_of: impl Fn(u64) -> usize) -> u64 {
    let n = states.len();
    let mut queue: Vec<(usize, Option<usize>, ConsensusMessage)> = Vec::new();
    let push = |queue: &mut Vec<_>, from: usize, out: Vec<Outbound>| {
        if Some(from) == silent {
            return;
        }
        for o in out {
            match o {
                Outbound::Broadcast(m) => queue.push((from, None, m)),
                Outbound::Send(to, m) => queue.push((from, net.roster.index_of(&to), m)),
            }
        }
    };
    for i in 0..n {
        let out = states[i].start(&net.ctx(i), 0);
        push(&mut queue, i, out);
    }
    for tick in 1..500 {
        let mut batch = std::mem::take(&mut queue);
        batch.sort_by_key(|(from, _, m)| (*from, m.digest()));
        for (from, to, msg) in batch {
            for i in 0..n {
                if to.is_some_and(|t| t != i) {
                    continue;
                }
                let _ = from;
                let out = states[i].handle(&net.ctx(i), &msg, tick);
                push(&mut queue, i, out);
            }
        }
        for i in 0..n {
            let out = states[i].on_timeout(&net.ctx(i), tick);
            push(&mut queue, i, out);
            for v in states[i].pending_elections() {
                for j in 0..n {
                    let out = states[j].set_leader(&net.ctx(j), v, net.ids[leader_of(v)], tick);
                    push(&mut queue, j, out);
                }
            }
        }
        let honest_done = (0..n).filter(|&i| Some(i) != silent).all(|i| states[i].decision().is_some());
        if honest_done && queue.is_empty() {
            return tick;
        }
    }
    panic!("round did not terminate");
}

#[test]
fn quorum_matches_fault_bound() {
    for f in 1..=10 {
        let n = 3 * f + 1;
        assert_eq!(quorum(n), 2 * f + 1);
        assert_eq!(max_faults(n), f);
    }
}

proptest! {
    #[test]
    fn quorum_is_smallest_safe_threshold(n in 4usize..=40) {
        let f = max_faults(n);
        let q = quorum(n);
        // Two quorums overlap in more than f nodes and a quorum survives f
        // silent nodes.
        prop_assert!(2 * q > n + f);
        prop_assert!(q <= n - f);
    }

    #[test]
    fn reputation_never_increases(signs in proptest::collection::vec(any::<bool>(), 1..40)) {
        let id = NodeId(Hash256([1; 32]));
        let mut table = ReputationTable::new([id]);
        let delta = GradientVector::new(vec![1.0, 0.0]).unwrap();
        let mut last = table.get(&id);
        for s in signs {
            let g = GradientVector::new(vec![if s { 1.0 } else { -1.0 }, 3.0]).unwrap();
            table.update([(id, &g)], &delta);
            let now = table.get(&id);
            prop_assert!(now <= last && (0.0..=1.0).contains(&now));
            last = now;
        }
    }
}

#[test]
fn three_prepares_trigger_commit_with_four_nodes() {
    let net = Net::new(4);
    let mut s = net.state(1, 0.5, 0);
    let ctx = net.ctx(1);
    let (block, pp) = leader_propose(
        &net.keys[0],
        net.ids[0],
        &vec![GradientVector::new(vec![0.5]).unwrap(); 4],
        GarSpec::new(GarKind::Average, 1),
        &net.chain,
        0,
        0,
    )
    .unwrap();
    let out = s.handle(&ctx, &pp, 1);
    assert!(matches!(&out[..], [Outbound::Broadcast(m)] if m.phase == Phase::Prepare));
    for (k, i) in [0usize, 2].into_iter().enumerate() {
        let out = s.handle(&ctx, &net.vote(i, Phase::Prepare, 0, block.hash), 2);
        assert!(out.is_empty(), "no commit after {} prepares", k + 1);
    }
    let out = s.handle(&ctx, &net.vote(3, Phase::Prepare, 0, block.hash), 2);
    assert!(matches!(&out[..], [Outbound::Broadcast(m)] if m.phase == Phase::Commit));
    for i in 0..3 {
        s.handle(&ctx, &net.vote(i, Phase::Commit, 0, block.hash), 3);
    }
    assert_eq!(s.decision().unwrap().block.as_ref(), Some(&block));
}

#[test]
fn duplicate_votes_do_not_reach_quorum() {
    // Seven nodes, f = 2: five PREPARE messages of which two repeat one
    // sender leave only three distinct voters.
    let net = Net::new(7);
    let mut s = net.state(1, 0.0, 0);
    let ctx = net.ctx(1);
    let pp = s.start(&net.ctx(1), 0);
    assert!(pp.is_empty());
    let block = Block::new(1, 0, 0, net.chain.tip().hash, GradientVector::zeros(1), net.ids[0], vec![]);
    let proposal = ConsensusMessage::pre_prepare(&net.keys[0], net.ids[0], 0, 0, 0, Some(block.clone()), block.hash, vec![]);
    s.handle(&ctx, &proposal, 1);
    let mut commits = 0;
    for i in [2usize, 3, 4, 4, 4] {
        let out = s.handle(&ctx, &net.vote(i, Phase::Prepare, 0, block.hash), 2);
        commits += out.iter().filter(|o| matches!(o, Outbound::Broadcast(m) if m.phase == Phase::Commit)).count();
    }
    assert_eq!(commits, 0);
    assert_eq!(s.duplicate_count(), 2);
    assert_eq!(s.prepare_count(0, &block.hash), 3);
}

#[test]
fn forged_signatures_are_ignored_and_counted() {
    let net = Net::new(4);
    let mut s = net.state(1, 0.0, 0);
    let mut m = net.vote(2, Phase::Prepare, 0, Hash256::ZERO);
    m.sig.0[0] ^= 1;
    assert!(s.handle(&net.ctx(1), &m, 1).is_empty());
    let mut outsider = m.clone();
    outsider.sender = NodeId(Hash256([9; 32]));
    s.handle(&net.ctx(1), &outsider, 1);
    assert_eq!(s.invalid_count(), 2);
    assert_eq!(s.prepare_count(0, &Hash256::ZERO), 0);
}

#[test]
fn follower_validation_outcomes() {
    let net = Net::new(4);
    let grads: Vec<GradientVector> = [0.0, 0.1, 0.2, 10.0].iter().map(|&v| GradientVector::new(vec![v]).unwrap()).collect();
    let gar = GarSpec::new(GarKind::Krum, 1);
    let (block, pp) = leader_propose(&net.keys[0], net.ids[0], &grads, gar, &net.chain, 0, 0).unwrap();
    assert_eq!(block.delta.as_slice(), &[0.0]);
    let (again, _) = leader_propose(&net.keys[0], net.ids[0], &grads, gar, &net.chain, 0, 0).unwrap();
    assert_eq!(again.hash, block.hash);
    let validate = |m: &ConsensusMessage| follower_validate(m, &net.keys[0].pk, &net.registry, &grads, gar, &net.chain, 1e-9);
    assert_eq!(validate(&pp), Validation::Accept);

    let tip = net.chain.tip();
    let sub = Block::new(1, 0, 0, tip.hash, GradientVector::new(vec![3.3]).unwrap(), net.ids[0], vec![]);
    let bad = ConsensusMessage::pre_prepare(&net.keys[0], net.ids[0], 0, 0, 0, Some(sub.clone()), sub.hash, vec![]);
    assert_eq!(validate(&bad), Validation::Reject(RejectReason::DeltaMismatch));

    let stale = Block::new(1, 0, 0, Hash256::digest(b"old"), block.delta.clone(), net.ids[0], vec![]);
    let bad = ConsensusMessage::pre_prepare(&net.keys[0], net.ids[0], 0, 0, 0, Some(stale.clone()), stale.hash, vec![]);
    assert_eq!(validate(&bad), Validation::Reject(RejectReason::BadLink));

    let mut forged = pp.clone();
    forged.sig.0[5] ^= 0x10;
    assert_eq!(validate(&forged), Validation::Reject(RejectReason::BadSig));

    let identical: Vec<GradientVector> = vec![GradientVector::new(vec![0.7]).unwrap(); 4];
    let (b, _) = leader_propose(&net.keys[0], net.ids[0], &identical, gar, &net.chain, 0, 0).unwrap();
    assert_eq!(b.delta, identical[0]);
}

#[test]
fn decide_updates_chain_model_and_reputation() {
    let net = Net::new(4);
    let delta = GradientVector::new(vec![2.0]).unwrap();
    let block = Block::new(1, 0, 0, net.chain.tip().hash, delta.clone(), net.ids[0], vec![]);
    let x = ModelParams::new(vec![1.0]).unwrap();
    let grads = vec![
        (net.ids[0], delta.clone()),
        (net.ids[1], delta.scaled(-1.0)),
        (net.ids[2], GradientVector::zeros(1)),
    ];
    let reps = ReputationTable::new(net.ids.iter().copied());
    let (chain, x, reps) = decide(&block, net.chain.clone(), &x, 0.25, reps, &grads).unwrap();
    assert_eq!(chain.len(), 2);
    assert_eq!(x.as_slice(), &[0.5]);
    assert_eq!(reps.get(&net.ids[0]), 1.0);
    assert_eq!(reps.get(&net.ids[1]), 0.5);
    assert_eq!(reps.get(&net.ids[2]), 1.0);

    let mut table = ReputationTable::new([net.ids[3]]);
    for _ in 0..4 {
        table.penalize(&net.ids[3]);
    }
    assert_eq!(table.get(&net.ids[3]), 0.0625);
    table.penalize(&net.ids[3]);
    assert_eq!(table.get(&net.ids[3]), 0.0);

    assert!(decide(&block, chain, &x, 0.1, reps, &grads).is_err());
}

#[test]
fn honest_round_commits_without_view_change() {
    let net = Net::new(4);
    let mut states: Vec<RoundState> = (0..4).map(|i| net.state(i, 0.3, 2)).collect();
    let ticks = run(&net, &mut states, None, |v| v as usize % 4);
    assert!(ticks <= 4, "took {ticks} ticks");
    for s in &states {
        let d = s.decision().unwrap();
        assert_eq!(d.view, 0);
        assert_eq!(d.block.as_ref().unwrap().delta.as_slice(), &[0.3]);
        assert_eq!(s.view_change_target(), 0);
    }
}

#[test]
fn silent_leader_round_is_abandoned() {
    let net = Net::new(4);
    let mut states: Vec<RoundState> = (0..4).map(|i| net.state(i, 0.3, 1)).collect();
    run(&net, &mut states, Some(1), |v| (v as usize + 1) % 4);
    for (i, s) in states.iter().enumerate() {
        if i == 1 {
            continue;
        }
        let d = s.decision().unwrap();
        assert!(d.block.is_none());
        assert_eq!(d.hash, null_hash(0, 0, 1));
    }
}

#[test]
fn f_view_changes_do_not_move_the_view() {
    let net = Net::new(4);
    let mut s = net.state(0, 0.0, 1);
    let vc = ConsensusMessage::view_change(&net.keys[3], net.ids[3], 0, 0, 1, None);
    let out = s.handle(&net.ctx(0), &vc, 1);
    assert!(out.is_empty());
    s.set_leader(&net.ctx(0), 1, net.ids[2], 1);
    assert_eq!(s.view(), 0);
    let vc2 = ConsensusMessage::view_change(&net.keys[2], net.ids[2], 0, 0, 1, None);
    let out = s.handle(&net.ctx(0), &vc2, 2);
    // f+1 requests: the node joins but still lacks a quorum.
    assert!(matches!(&out[..], [Outbound::Broadcast(m)] if m.phase == Phase::ViewChange && m.view == 1));
    assert_eq!(s.view(), 0);
}

#[test]
fn equivocating_leader_cannot_split_honest_nodes() {
    // Node 0 leads and sends two different valid blocks; it then votes for
    // whichever block each peer holds. Every honest node must end with the
    // same decision.
    let net = Net::new(4);
    let mut states: Vec<RoundState> = (0..4).map(|i| net.state(i, 0.3, 0)).collect();
    let tip = net.chain.tip();
    let blocks: Vec<Block> = [0.3, 0.3 + 1e-12]
        .iter()
        .map(|&d| Block::new(1, 0, 0, tip.hash, GradientVector::new(vec![d]).unwrap(), net.ids[0], vec![]))
        .collect();
    let mut queue: Vec<(usize, usize, ConsensusMessage)> = Vec::new();
    for (peer, b) in [(1, &blocks[0]), (2, &blocks[0]), (3, &blocks[1])] {
        let pp = ConsensusMessage::pre_prepare(&net.keys[0], net.ids[0], 0, 0, 0, Some(b.clone()), b.hash, vec![]);
        queue.push((0, peer, pp));
        queue.push((0, peer, net.vote(0, Phase::Prepare, 0, b.hash)));
        queue.push((0, peer, net.vote(0, Phase::Commit, 0, b.hash)));
    }
    for tick in 1..300 {
        let batch = std::mem::take(&mut queue);
        for (_, to, msg) in batch {
            let out = states[to].handle(&net.ctx(to), &msg, tick);
            for o in out {
                match o {
                    Outbound::Broadcast(m) => (1..4).for_each(|j| queue.push((to, j, m.clone()))),
                    Outbound::Send(id, m) => queue.push((to, net.roster.index_of(&id).unwrap(), m)),
                }
            }
        }
        for i in 1..4 {
            let mut out = states[i].on_timeout(&net.ctx(i), tick);
            for v in states[i].pending_elections() {
                for j in 1..4 {
                    let o = states[j].set_leader(&net.ctx(j), v, net.ids[(v as usize) % 4], tick);
                    for m in o {
                        if let Outbound::Broadcast(m) = m {
                            (1..4).for_each(|k| queue.push((j, k, m.clone())));
                        }
                    }
                }
            }
            for o in out.drain(..) {
                if let Outbound::Broadcast(m) = o {
                    (1..4).for_each(|j| queue.push((i, j, m.clone())));
                }
            }
        }
        if (1..4).all(|i| states[i].decision().is_some()) && queue.is_empty() {
            break;
        }
    }
    let d: Vec<Hash256> = (1..4).map(|i| states[i].decision().expect("decided").hash).collect();
    assert!(d.windows(2).all(|w| w[0] == w[1]), "{d:?}");
}

#[test]
fn message_encoding_roundtrip() {
    let net = Net::new(4);
    let block = Block::new(1, 0, 0, net.chain.tip().hash, GradientVector::new(vec![1.5]).unwrap(), net.ids[0], vec![]);
    let pp = ConsensusMessage::pre_prepare(&net.keys[0], net.ids[0], 0, 0, 0, Some(block.clone()), block.hash, vec![]);
    let cert = PreparedCert {
        pre_prepare: Box::new(pp.clone()),
        prepares: (0..3).map(|i| net.vote(i, Phase::Prepare, 0, block.hash)).collect(),
    };
    let vc = ConsensusMessage::view_change(&net.keys[1], net.ids[1], 0, 0, 1, Some(cert));
    for m in [pp, vc] {
        let back = ConsensusMessage::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        assert!(net.roster.verify(&net.registry, &back));
    }
}

#[test]
fn trace_lines_are_recorded() {
    let net = Net::new(4);
    let mut states: Vec<RoundState> = (0..4).map(|i| net.state(i, 0.1, 0).with_trace(true)).collect();
    run(&net, &mut states, None, |v| v as usize % 4);
    let lines: Vec<String> = states[0].take_trace().iter().map(ToString::to_string).collect();
    assert!(lines.iter().any(|l| l.contains("action=propose")));
    assert!(lines.iter().any(|l| l.contains("phase=COMMIT") && l.contains("action=decide")));
}
