//! Synchronous message bus with an enforced stage order.
//!
//! Every round walks `Compute → GradientExchange → Consensus`. Consensus
//! traffic is refused until the round's gradient exchange has closed.

use crate::consensus::{ConsensusMessage, Outbound};
use crate::crypto::{Hash256, NodeId};
use crate::learning::GradientVector;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Idle,
    Compute,
    GradientExchange,
    Consensus,
}

#[derive(Debug, Clone)]
struct Envelope {
    from: usize,
    from_id: NodeId,
    to: Option<usize>,
    digest: Hash256,
    msg: ConsensusMessage,
}

/// Message counters for a whole run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BusStats {
    pub gradient_messages: u64,
    pub consensus_messages: u64,
    pub deliveries: u64,
}

#[derive(Debug)]
pub struct Bus {
    n: usize,
    round: u64,
    stage: Stage,
    exchange_closed: bool,
    gradients: Vec<Option<GradientVector>>,
    queue: Vec<Envelope>,
    stats: BusStats,
}

impl Bus {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            round: 0,
            stage: Stage::Idle,
            exchange_closed: false,
            gradients: vec![None; n],
            queue: Vec::new(),
            stats: BusStats::default(),
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn stats(&self) -> BusStats {
        self.stats
    }

    fn expect(&self, stage: Stage, what: &str) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Simulation(format!(
                "round {}: {what} during {:?}, expected {:?}",
                self.round, self.stage, stage
            )));
        }
        Ok(())
    }

    pub fn begin_round(&mut self, round: u64) -> Result<()> {
        self.expect(Stage::Idle, "begin round")?;
        self.round = round;
        self.stage = Stage::Compute;
        self.exchange_closed = false;
        self.gradients.iter_mut().for_each(|g| *g = None);
        self.queue.clear();
        Ok(())
    }

    pub fn begin_exchange(&mut self) -> Result<()> {
        self.expect(Stage::Compute, "begin gradient exchange")?;
        self.stage = Stage::GradientExchange;
        Ok(())
    }

    /// Reliable broadcast of one node's gradient.
    pub fn post_gradient(&mut self, from: usize, g: GradientVector) -> Result<()> {
        self.expect(Stage::GradientExchange, "gradient post")?;
        if from >= self.n || self.gradients[from].is_some() {
            return Err(Error::Simulation(format!("duplicate or unknown gradient sender {from}")));
        }
        self.stats.gradient_messages += (self.n - 1) as u64;
        self.gradients[from] = Some(g);
        Ok(())
    }

    /// Ends the exchange and returns what every node received, indexed by
    /// sender (`None` for nodes that sent nothing).
    pub fn close_exchange(&mut self) -> Result<Vec<Option<GradientVector>>> {
        self.expect(Stage::GradientExchange, "close gradient exchange")?;
        self.exchange_closed = true;
        Ok(std::mem::replace(&mut self.gradients, vec![None; self.n]))
    }

    pub fn begin_consensus(&mut self) -> Result<()> {
        if !self.exchange_closed {
            return Err(Error::Simulation(format!(
                "round {}: consensus started before the gradient exchange closed",
                self.round
            )));
        }
        self.expect(Stage::GradientExchange, "begin consensus")?;
        self.stage = Stage::Consensus;
        Ok(())
    }

    /// Queues a node's outbound messages; `resolve` maps ids to indices.
    pub fn post(
        &mut self,
        from: usize,
        from_id: NodeId,
        out: Vec<Outbound>,
        resolve: impl Fn(&NodeId) -> Option<usize>,
    ) -> Result<()> {
        self.expect(Stage::Consensus, "consensus post")?;
        for o in out {
            let (to, msg) = match o {
                Outbound::Broadcast(m) => (None, m),
                Outbound::Send(id, m) => match resolve(&id) {
                    Some(i) => (Some(i), m),
                    None => continue,
                },
            };
            self.stats.consensus_messages += 1;
            self.queue.push(Envelope {
                from,
                from_id,
                to,
                digest: msg.digest(),
                msg,
            });
        }
        Ok(())
    }

    /// Hands out everything queued, per recipient, ordered by
    /// `(sender id, message digest)`.
    pub fn deliver(&mut self) -> Result<Vec<Vec<ConsensusMessage>>> {
        self.expect(Stage::Consensus, "delivery")?;
        let mut batch = std::mem::take(&mut self.queue);
        batch.sort_by_key(|m| (m.from_id, m.digest));
        let mut inboxes = vec![Vec::new(); self.n];
        for env in batch {
            match env.to {
                Some(i) => {
                    inboxes[i].push(env.msg);
                    self.stats.deliveries += 1;
                }
                None => {
                    for inbox in &mut inboxes {
                        inbox.push(env.msg.clone());
                    }
                    self.stats.deliveries += self.n as u64;
                }
            }
        }
        Ok(inboxes)
    }

    /// True while a message from a node matching `pred` is queued.
    pub fn in_flight_from(&self, pred: impl Fn(usize) -> bool) -> bool {
        self.queue.iter().any(|e| pred(e.from))
    }

    /// Closes the round. Pure and DP-only rounds skip consensus.
    pub fn end_round(&mut self) -> Result<()> {
        if !matches!(self.stage, Stage::Consensus | Stage::GradientExchange) || !self.exchange_closed {
            return Err(Error::Simulation(format!(
                "round {}: ended in {:?}",
                self.round, self.stage
            )));
        }
        self.queue.clear();
        self.stage = Stage::Idle;
        Ok(())
    }
}
