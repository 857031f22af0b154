//! Node runtime and the per-round driver.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;

use super::adversary::Strategy;
use super::bus::{Bus, BusStats};
use super::tamper::Tamper;
use super::{RoundDiagnostics, RoundMetrics, RunReport, Scheme, SimConfig, SimData, SimStats};
use crate::consensus::{
    decide, max_faults, null_hash, ConsensusParams, Outbound, ReputationTable, Roster, RoundContext, RoundState,
};
use crate::crypto::{keygen, vrf_eval, Hash256, KeyPair, KeyRegistry, NodeId, VrfOutput};
use crate::election::{admit_candidates, elect_leader, election_seed, VrfSubmission};
use crate::gar::{average_aggregate, GarKind, GarSpec};
use crate::learning::{
    compute_gradient, full_loss, sample_batch, sgd_update, test_error, Batch, Dataset, GradientVector, LossKind,
    ModelParams, Record,
};
use crate::ledger::{make_genesis, Block, Chain, Transaction};
use crate::par::Exec;
use crate::privacy::{DpConfig, GaussianSampler};
use crate::rng::{stream_rng, StreamRng};
use crate::{Error, Result};

#[derive(Debug)]
struct Node {
    id: NodeId,
    keys: KeyPair,
    byzantine: bool,
    data: Dataset,
    model: ModelParams,
    chain: Option<Chain>,
    reputations: ReputationTable,
    batch_rng: StreamRng,
    noise_rng: StreamRng,
    adv_rng: StreamRng,
    tamper: Tamper,
    clean: Option<GradientVector>,
    outgoing: Option<GradientVector>,
    fault: Option<Error>,
}

impl Node {
    fn local_compute(&mut self, cfg: &SimConfig, dp: Option<&DpConfig>, strategy: &Strategy) -> Result<()> {
        let batch = sample_batch(&self.data, cfg.batch_size, &mut self.batch_rng)?;
        let g = compute_gradient(&self.model, &self.data, &batch, &cfg.loss)?;
        let sent = match dp {
            Some(dp) => dp.privatize(&g, &mut self.noise_rng)?,
            None => g.clone(),
        };
        self.clean = Some(match dp {
            Some(dp) => crate::privacy::clip_gradient(&g, dp.clip)?,
            None => g,
        });
        if !self.byzantine {
            self.outgoing = Some(sent);
            return Ok(());
        }
        let d = sent.dim();
        self.outgoing = match strategy {
            Strategy::Silent => None,
            Strategy::RandomGaussian { scale } => {
                let mut sampler = GaussianSampler::new();
                let values = (0..d).map(|_| scale * sampler.sample(&mut self.adv_rng)).collect();
                Some(GradientVector::new(values)?)
            }
            Strategy::SignFlip { scale } => Some(sent.scaled(-scale)),
            Strategy::Constant(v) if v.len() == 1 => Some(GradientVector::new(vec![v[0]; d])?),
            Strategy::Constant(v) => Some(GradientVector::new(v.clone())?),
            Strategy::Honest | Strategy::EquivocateConsensus | Strategy::DeltaSubstitution => Some(sent),
        };
        Ok(())
    }

    fn ctx<'a>(&'a self, roster: &'a Roster, registry: &'a KeyRegistry, params: ConsensusParams) -> RoundContext<'a> {
        RoundContext {
            keys: &self.keys,
            roster,
            registry,
            params,
        }
    }
}

struct Slot {
    state: RoundState,
    inbox: Vec<crate::consensus::ConsensusMessage>,
    out: Vec<Outbound>,
}

struct BcOutcome {
    ticks: u64,
    leader: Option<NodeId>,
    committed: bool,
    block_hash: Option<Hash256>,
    views: u64,
}

/// All nodes of one simulated deployment, advanced a round at a time.
pub struct World {
    cfg: SimConfig,
    nodes: Vec<Node>,
    roster: Roster,
    registry: KeyRegistry,
    peers: Vec<NodeId>,
    index_of: BTreeMap<NodeId, usize>,
    honest: Vec<usize>,
    test: Dataset,
    full_train: Option<Dataset>,
    gar: GarSpec,
    bus: Bus,
    round: u64,
    leader: Option<NodeId>,
    attempt_base: u64,
    received: Vec<GradientVector>,
    pick_rng: StreamRng,
    metrics: Vec<RoundMetrics>,
    trace: Vec<String>,
    stats: SimStats,
}

/// Extra lottery attempts with fresh seeds before a round is given up.
const ELECTION_RELAUNCHES: u64 = 3;

fn check_strategy(s: &Strategy, d: usize) -> Result<()> {
    match s {
        Strategy::Constant(v) if v.len() != 1 && v.len() != d => Err(Error::config(format!(
            "constant attack vector has {} entries, model has {d}",
            v.len()
        ))),
        _ => Ok(()),
    }
}

fn ms(since: Instant, until: Instant) -> f64 {
    until.duration_since(since).as_secs_f64() * 1e3
}

impl World {
    pub fn new(cfg: SimConfig, data: SimData) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.nodes;
        if data.partitions.len() != n {
            return Err(Error::config(format!(
                "{} partitions for {n} nodes",
                data.partitions.len()
            )));
        }
        let p = data.test.num_features();
        for (i, part) in data.partitions.iter().enumerate() {
            if part.num_features() != p {
                return Err(Error::config(format!("partition {i} has {} features, test set {p}", part.num_features())));
            }
            if part.len() < cfg.batch_size {
                return Err(Error::config(format!(
                    "partition {i} has {} records, batch size is {}",
                    part.len(),
                    cfg.batch_size
                )));
            }
        }
        if let LossKind::SoftmaxCrossEntropy { classes } = cfg.loss.kind {
            if data.test.num_classes() > classes {
                return Err(Error::config("dataset has more classes than the model"));
            }
        }
        let d = cfg.loss.param_dim(p);
        check_strategy(&cfg.script.default, d)?;
        for s in cfg.script.overrides.values() {
            check_strategy(s, d)?;
        }
        let byz_count = cfg.byzantine_count();
        if byz_count >= n {
            return Err(Error::config("at least one node must be honest"));
        }
        let byz: Vec<usize> = sample(&mut stream_rng(cfg.seed, "byzantine", 0), n, byz_count).into_vec();

        let mut registry = KeyRegistry::new();
        let mut txs = Vec::with_capacity(n);
        let mut nodes = Vec::with_capacity(n);
        for (i, part) in data.partitions.iter().enumerate() {
            let (keys, id) = keygen(format!("spdl/node/{}/{i}", cfg.seed).as_bytes());
            registry.register(&keys)?;
            txs.push(Transaction::register(keys.pk, format!("sim://{i}"), 0));
            nodes.push(Node {
                id,
                keys,
                byzantine: byz.contains(&i),
                data: part.clone(),
                model: ModelParams::zeros(d),
                chain: None,
                reputations: ReputationTable::new(std::iter::empty()),
                batch_rng: stream_rng(cfg.seed, "batch", i as u64),
                noise_rng: stream_rng(cfg.seed, "noise", i as u64),
                adv_rng: stream_rng(cfg.seed, "adversary", i as u64),
                tamper: Tamper::default(),
                clean: None,
                outgoing: None,
                fault: None,
            });
        }
        let roster = Roster::new(nodes.iter().map(|nd| (nd.id, nd.keys.pk)).collect())?;
        let peers: Vec<NodeId> = roster.ids().collect();
        let index_of = nodes.iter().enumerate().map(|(i, nd)| (nd.id, i)).collect();
        if cfg.scheme == Scheme::Spdl {
            let genesis = make_genesis(txs, d)?;
            let chain = Chain::new(genesis)?;
            for node in &mut nodes {
                node.chain = Some(chain.clone());
                node.reputations = ReputationTable::new(peers.iter().copied());
            }
        }
        let honest = (0..n).filter(|i| !nodes[*i].byzantine).collect();
        let full_train = if cfg.diagnostics {
            let records: Vec<Record> = data.partitions.iter().flat_map(|d| d.records().iter().cloned()).collect();
            Some(Dataset::new(records, p, data.test.num_classes())?)
        } else {
            None
        };
        let gar = match cfg.scheme {
            Scheme::Spdl => GarSpec::new(cfg.gar, max_faults(n)),
            _ => GarSpec::new(GarKind::Average, 0),
        };
        Ok(Self {
            pick_rng: stream_rng(cfg.seed, "pick", 0),
            bus: Bus::new(n),
            cfg,
            nodes,
            roster,
            registry,
            peers,
            index_of,
            honest,
            test: data.test,
            full_train,
            gar,
            round: 0,
            leader: None,
            attempt_base: 0,
            received: Vec::new(),
            metrics: Vec::new(),
            trace: Vec::new(),
            stats: SimStats::default(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn finished(&self) -> bool {
        self.round >= self.cfg.rounds
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|n| n.id).collect()
    }

    pub fn is_byzantine(&self, i: usize) -> bool {
        self.nodes[i].byzantine
    }

    pub fn honest_indices(&self) -> &[usize] {
        &self.honest
    }

    pub fn model(&self, i: usize) -> &ModelParams {
        &self.nodes[i].model
    }

    pub fn chain(&self, i: usize) -> Option<&Chain> {
        self.nodes[i].chain.as_ref()
    }

    pub fn reputations(&self, i: usize) -> &ReputationTable {
        &self.nodes[i].reputations
    }

    /// Gradients received in the last exchange, in roster (id) order, with
    /// zero vectors for senders that stayed silent.
    pub fn received(&self) -> &[GradientVector] {
        &self.received
    }

    /// Roster order of node ids.
    pub fn roster_ids(&self) -> &[NodeId] {
        &self.peers
    }

    pub fn metrics(&self) -> &[RoundMetrics] {
        &self.metrics
    }

    pub fn stats(&self) -> SimStats {
        self.stats
    }

    pub fn bus_stats(&self) -> BusStats {
        self.bus.stats()
    }

    #[cfg(test)]
    pub(super) fn penalize_everyone(&mut self) {
        let ids = self.peers.clone();
        for node in &mut self.nodes {
            for id in &ids {
                while node.reputations.get(id) > 0.0 {
                    node.reputations.penalize(id);
                }
            }
        }
    }

    pub fn into_report(self) -> RunReport {
        let first = self.honest[0];
        RunReport {
            final_model: self.nodes[first].model.clone(),
            chain: self.nodes[first].chain.clone(),
            byzantine: self.nodes.iter().filter(|n| n.byzantine).map(|n| n.id).collect(),
            metrics: self.metrics,
            stats: self.stats,
            bus: self.bus.stats(),
            trace: self.trace,
        }
    }

    fn take_faults(&mut self) -> Result<()> {
        for node in &mut self.nodes {
            if let Some(e) = node.fault.take() {
                return Err(e);
            }
        }
        Ok(())
    }

    /// Runs one full round and returns its metrics.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        if self.finished() {
            return Err(Error::Simulation("all configured rounds have run".into()));
        }
        let t = self.round;
        let epoch = t / self.cfg.epoch_length;
        let strategy = self.cfg.script.at(t).clone();
        let d = self.nodes[0].model.dim();

        let start = Instant::now();
        self.bus.begin_round(t)?;

        let t0 = Instant::now();
        let dp = match self.cfg.scheme {
            Scheme::Pure => None,
            _ => self.cfg.dp,
        };
        {
            let cfg = &self.cfg;
            let strategy = &strategy;
            self.cfg.exec.for_each_mut(&mut self.nodes, |_, node| {
                if let Err(e) = node.local_compute(cfg, dp.as_ref(), strategy) {
                    node.fault = Some(e);
                }
            });
        }
        self.take_faults()?;
        let t1 = Instant::now();

        self.bus.begin_exchange()?;
        for i in 0..self.nodes.len() {
            if let Some(g) = self.nodes[i].outgoing.take() {
                let pos = self.roster.index_of(&self.nodes[i].id).expect("member");
                self.bus.post_gradient(pos, g)?;
            }
        }
        self.received = self
            .bus
            .close_exchange()?
            .into_iter()
            .map(|g| g.unwrap_or_else(|| GradientVector::zeros(d)))
            .collect();
        let t2 = Instant::now();

        let outcome = match self.cfg.scheme {
            Scheme::Spdl => self.consensus_stage(epoch, t, &strategy)?,
            _ => self.direct_stage()?,
        };
        self.bus.end_round()?;
        let t3 = Instant::now();
        let round_ms = ms(start, Instant::now());

        self.check_replicas()?;
        let first = self.honest[0];
        let model = &self.nodes[first].model;
        let test_err = match self.cfg.loss.kind {
            LossKind::SoftmaxCrossEntropy { .. } => Some(test_error(model, &self.test, &self.cfg.loss)?),
            LossKind::LeastSquares => None,
        };
        let diagnostics = match &self.full_train {
            Some(full) => Some(self.diagnostics(full, dp.as_ref())?),
            None => None,
        };
        let reputation_min = match self.cfg.scheme {
            Scheme::Spdl => self.nodes[first].reputations.min(),
            _ => 1.0,
        };
        let metrics = RoundMetrics {
            epoch,
            round: t,
            leader: outcome.leader,
            committed: outcome.committed,
            block_hash: outcome.block_hash,
            test_error: test_err,
            lgc_ticks: 1,
            ge_ticks: 1,
            bc_ticks: outcome.ticks,
            t_lgc_ms: ms(t0, t1),
            t_ge_ms: ms(t1, t2),
            t_bc_ms: ms(t2, t3),
            t_round_ms: round_ms,
            views: outcome.views,
            reputation_min,
            diagnostics,
        };
        self.metrics.push(metrics.clone());
        self.round += 1;
        Ok(metrics)
    }

    fn diagnostics(&self, full: &Dataset, dp: Option<&DpConfig>) -> Result<RoundDiagnostics> {
        let model = &self.nodes[self.honest[0]].model;
        let train_loss = full_loss(model, full, &self.cfg.loss)?;
        let grad_norm = compute_gradient(model, full, &Batch::all(full), &self.cfg.loss)?.norm();
        let clean: Vec<&GradientVector> = self
            .honest
            .iter()
            .filter_map(|&i| self.nodes[i].clean.as_ref())
            .collect();
        let d = model.dim();
        let mut mean = vec![0.0; d];
        for g in &clean {
            for (m, v) in mean.iter_mut().zip(g.as_slice()) {
                *m += v / clean.len() as f64;
            }
        }
        let honest_spread = clean
            .iter()
            .map(|g| crate::learning::sq_distance(g.as_slice(), &mean))
            .sum::<f64>()
            / (clean.len().max(1) * d) as f64;
        let noise_var = dp.map_or(0.0, |dp| dp.sigma() * dp.sigma());
        Ok(RoundDiagnostics {
            train_loss,
            grad_norm,
            honest_spread,
            noise_var,
        })
    }

    fn check_replicas(&self) -> Result<()> {
        let first = &self.nodes[self.honest[0]];
        let bits = first.model.bits();
        let tip = first.chain.as_ref().map(|c| c.tip().hash);
        for (i, node) in self.nodes.iter().enumerate() {
            if node.model.bits() != bits {
                return Err(Error::Simulation(format!("round {}: model of node {i} diverged", self.round)));
            }
            if node.chain.as_ref().map(|c| c.tip().hash) != tip {
                return Err(Error::Simulation(format!("round {}: chain of node {i} diverged", self.round)));
            }
        }
        Ok(())
    }

    /// Pure, DP-only and honest-pick rounds: no consensus, every node
    /// applies the same update to its own replica.
    fn direct_stage(&mut self) -> Result<BcOutcome> {
        let delta = match self.cfg.scheme {
            Scheme::HonestPick => {
                let k = self.pick_rng.gen_range(0..self.honest.len());
                let id = self.nodes[self.honest[k]].id;
                let pos = self.roster.index_of(&id).expect("member");
                Some(self.received[pos].clone())
            }
            _ => None,
        };
        let received = &self.received;
        let gamma = self.cfg.gamma;
        self.cfg.exec.for_each_mut(&mut self.nodes, |_, node| {
            let step = match &delta {
                Some(d) => Ok(d.clone()),
                None => average_aggregate(received),
            };
            match step.and_then(|s| sgd_update(&node.model, &s, gamma)) {
                Ok(x) => node.model = x,
                Err(e) => node.fault = Some(e),
            }
        });
        self.take_faults()?;
        Ok(BcOutcome {
            ticks: 0,
            leader: None,
            committed: true,
            block_hash: None,
            views: 0,
        })
    }

    /// Runs one lottery; every honest node must reach the same winner.
    fn lottery(&mut self, epoch: u64, attempt: u64, prev: &Hash256, now: u64, strategy: &Strategy) -> Result<NodeId> {
        self.stats.elections += 1;
        let seed = election_seed(epoch, attempt, prev);
        let mut subs = Vec::new();
        for node in &mut self.nodes {
            let silent = node.byzantine && *strategy == Strategy::Silent;
            if silent {
                continue;
            }
            subs.push(VrfSubmission {
                pk: node.keys.pk,
                id: node.id,
                output: vrf_eval(&node.keys.sk, &seed),
                arrival_tick: now + 1,
            });
            if node.byzantine && *strategy == Strategy::EquivocateConsensus {
                subs.push(VrfSubmission {
                    pk: node.keys.pk,
                    id: node.id,
                    output: VrfOutput {
                        h: Hash256([0xff; 32]),
                        proof: node.adv_rng.gen(),
                    },
                    arrival_tick: now + 1,
                });
            }
        }
        let deadline = now + self.cfg.delta1;
        let mut winner = None;
        for (k, &i) in self.honest.iter().enumerate() {
            let reps = &self.nodes[i].reputations;
            let adm = admit_candidates(&subs, &self.registry, &seed, deadline, |id| reps.get(id));
            if k == 0 {
                self.stats.forged_tickets += adm.forged as u64;
            }
            let w = elect_leader(&adm.candidates)?;
            match winner {
                None => winner = Some(w),
                Some(prev) if prev != w => {
                    return Err(Error::Simulation(format!(
                        "round {}: honest nodes elected different leaders",
                        self.round
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(winner.expect("at least one honest node"))
    }

    fn dispatch(&mut self, i: usize, out: Vec<Outbound>, strategy: &Strategy) -> Result<()> {
        let node = &mut self.nodes[i];
        let out = if node.byzantine {
            node.tamper.apply(strategy, &node.keys, &self.peers, out, &mut node.adv_rng)
        } else {
            out
        };
        let index_of = &self.index_of;
        self.bus.post(i, node.id, out, |id| index_of.get(id).copied())
    }

    /// Ends a round without a decision because no eligible leader exists.
    /// Nothing was committed by any honest node, so every replica keeps its
    /// state.
    fn abandon(&mut self, leader: Option<NodeId>, ticks: u64, views: u64) -> Result<BcOutcome> {
        self.stats.abandoned_rounds += 1;
        if views > 0 {
            self.stats.view_change_rounds += 1;
        }
        self.attempt_base += views + 1;
        self.leader = None;
        Ok(BcOutcome {
            ticks,
            leader,
            committed: false,
            block_hash: None,
            views,
        })
    }

    fn consensus_stage(&mut self, epoch: u64, t: u64, strategy: &Strategy) -> Result<BcOutcome> {
        let n = self.nodes.len();
        let first = self.honest[0];
        let tip: Block = self.nodes[first].chain.as_ref().expect("consensus chain").tip().clone();
        let params = ConsensusParams {
            delta2: self.cfg.delta2,
            delta_tol: self.cfg.delta_tol,
        };
        let mut tick = 0u64;
        let carry = self
            .leader
            .filter(|l| !t.is_multiple_of(self.cfg.epoch_length) && self.nodes[first].reputations.get(l) > 0.0);
        let leader0 = match carry {
            Some(l) => l,
            None => {
                let mut elected = None;
                for _ in 0..=ELECTION_RELAUNCHES {
                    let attempt = self.attempt_base;
                    match self.lottery(epoch, attempt, &tip.hash, tick, strategy) {
                        Ok(l) => {
                            elected = Some(l);
                            break;
                        }
                        Err(Error::ElectionFailed) => {
                            self.stats.election_failures += 1;
                            self.attempt_base += 1;
                        }
                        Err(e) => return Err(e),
                    }
                }
                tick += self.cfg.delta1;
                match elected {
                    Some(l) => l,
                    None => return self.abandon(None, tick, 0),
                }
            }
        };
        let mut leaders = BTreeMap::from([(0u64, leader0)]);

        self.bus.begin_consensus()?;
        let gar = self.gar;
        let received = &self.received;
        let deltas = self
            .cfg
            .exec
            .map(n, |_| gar.aggregate_with(received, Exec::Sequential).ok());
        let mut slots: Vec<Slot> = self
            .nodes
            .iter_mut()
            .zip(deltas)
            .map(|(node, delta)| {
                node.tamper.reset();
                Slot {
                    state: RoundState::new(node.id, epoch, t, tip.clone(), delta, leader0, tick)
                        .with_trace(self.cfg.trace),
                    inbox: Vec::new(),
                    out: Vec::new(),
                }
            })
            .collect();
        for i in 0..n {
            let out = slots[i].state.start(&self.nodes[i].ctx(&self.roster, &self.registry, params), tick);
            self.dispatch(i, out, strategy)?;
        }

        let mut scheduled: BTreeMap<u64, u64> = BTreeMap::new();
        let mut failed_views: Vec<u64> = Vec::new();
        loop {
            tick += 1;
            for (slot, inbox) in slots.iter_mut().zip(self.bus.deliver()?) {
                slot.inbox = inbox;
            }
            {
                let (nodes, roster, registry) = (&self.nodes, &self.roster, &self.registry);
                self.cfg.exec.for_each_mut(&mut slots, |i, slot| {
                    let ctx = nodes[i].ctx(roster, registry, params);
                    let mut out = Vec::new();
                    for msg in std::mem::take(&mut slot.inbox) {
                        out.extend(slot.state.handle(&ctx, &msg, tick));
                    }
                    out.extend(slot.state.on_timeout(&ctx, tick));
                    slot.out = out;
                });
            }
            for i in 0..n {
                let out = std::mem::take(&mut slots[i].out);
                self.dispatch(i, out, strategy)?;
            }
            for &i in &self.honest {
                for v in slots[i].state.pending_elections() {
                    if !leaders.contains_key(&v) && !failed_views.contains(&v) {
                        scheduled.entry(v).or_insert(tick + self.cfg.delta1);
                    }
                }
            }
            let due: Vec<u64> = scheduled.iter().filter(|(_, &at)| at <= tick).map(|(v, _)| *v).collect();
            for v in due {
                scheduled.remove(&v);
                let l = match self.lottery(epoch, self.attempt_base + v, &tip.hash, tick - self.cfg.delta1, strategy) {
                    Ok(l) => l,
                    Err(Error::ElectionFailed) => {
                        self.stats.election_failures += 1;
                        failed_views.push(v);
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                leaders.insert(v, l);
                for i in 0..n {
                    let ctx = self.nodes[i].ctx(&self.roster, &self.registry, params);
                    let out = slots[i].state.set_leader(&ctx, v, l, tick);
                    self.dispatch(i, out, strategy)?;
                }
            }
            let any_decided = self.honest.iter().any(|&i| slots[i].state.decision().is_some());
            if !failed_views.is_empty() && !any_decided {
                let views = leaders.keys().chain(&failed_views).copied().max().unwrap_or(0);
                return self.abandon(Some(leader0), tick, views);
            }
            let honest_done = self.honest.iter().all(|&i| slots[i].state.decision().is_some());
            let nodes = &self.nodes;
            if honest_done && !self.bus.in_flight_from(|i| !nodes[i].byzantine) {
                break;
            }
            let highest = self
                .honest
                .iter()
                .map(|&i| slots[i].state.view().max(slots[i].state.view_change_target()))
                .max()
                .unwrap_or(0);
            if highest > self.cfg.max_views {
                return Err(Error::Simulation(format!(
                    "round {t}: no decision after {} views",
                    self.cfg.max_views
                )));
            }
        }

        let decision = slots[first].state.decision().cloned().expect("decided");
        for &i in &self.honest {
            let s = &slots[i].state;
            if s.decision().map(|d| d.hash) != Some(decision.hash) {
                return Err(Error::Simulation(format!("round {t}: honest nodes decided different values")));
            }
            self.stats.invalid_messages += s.invalid_count() as u64;
            self.stats.duplicate_messages += s.duplicate_count() as u64;
            self.stats.rejected_proposals += s.rejections().len() as u64;
        }
        if self.cfg.trace {
            let mut entries: Vec<_> = slots.iter_mut().flat_map(|s| s.state.take_trace()).collect();
            entries.sort_by_key(|e| (e.tick, e.node));
            self.trace.extend(entries.into_iter().map(|e| format!("epoch={epoch} round={t} {e}")));
        }
        let views = leaders.keys().chain(&failed_views).copied().max().unwrap_or(0);
        if views > 0 {
            self.stats.view_change_rounds += 1;
        }
        self.attempt_base += views + 1;

        let committed = match &decision.block {
            Some(block) => {
                let grads: Vec<(NodeId, GradientVector)> =
                    self.peers.iter().copied().zip(self.received.iter().cloned()).collect();
                let gamma = self.cfg.gamma;
                self.cfg.exec.for_each_mut(&mut self.nodes, |_, node| {
                    let chain = node.chain.take().expect("consensus chain");
                    let reps = std::mem::replace(&mut node.reputations, ReputationTable::new(std::iter::empty()));
                    match decide(block, chain, &node.model, gamma, reps, &grads) {
                        Ok((c, x, r)) => {
                            node.chain = Some(c);
                            node.model = x;
                            node.reputations = r;
                        }
                        Err(e) => node.fault = Some(e),
                    }
                });
                self.take_faults()?;
                self.leader = Some(block.proposer);
                true
            }
            None => {
                let view = (0..=views)
                    .find(|&v| null_hash(epoch, t, v) == decision.hash)
                    .ok_or_else(|| Error::Simulation(format!("round {t}: unknown null value")))?;
                self.leader = leaders.get(&view).copied();
                self.stats.abandoned_rounds += 1;
                false
            }
        };
        Ok(BcOutcome {
            ticks: tick,
            leader: Some(leader0),
            committed,
            block_hash: committed.then_some(decision.hash),
            views,
        })
    }
}
