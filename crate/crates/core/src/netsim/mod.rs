//! Deterministic synchronous network simulator and node runtime.
//!
//! A run is a sequence of rounds. Each round every node computes a local
//! gradient (LGC), the gradients are reliably broadcast (GE), and then the
//! block consensus (BC) certifies one aggregate that every node applies.
//! Time is counted in ticks; wall-clock milliseconds are reported alongside.
//!
//! Randomness per node `i` (its position in the partition list):
//!
//! | stream                              | use                         |
//! |-------------------------------------|-----------------------------|
//! | `stream_rng(seed, "batch", i)`      | mini-batch sampling         |
//! | `stream_rng(seed, "noise", i)`      | DP perturbation             |
//! | `stream_rng(seed, "adversary", i)`  | Byzantine behaviour         |
//! | `stream_rng(seed, "byzantine", 0)`  | which nodes are Byzantine   |
//! | `stream_rng(seed, "pick", 0)`       | honest-pick baseline draws  |
//!
//! Node keys come from `keygen("spdl/node/{seed}/{i}")`.

mod adversary;
mod bus;
pub mod regret;
mod tamper;
mod world;


use std::fmt;
use std::str::FromStr;

pub use adversary::{AdversaryScript, Strategy};
pub use bus::{Bus, BusStats, Stage};
pub use world::World;

use crate::crypto::{Hash256, NodeId};
use crate::gar::GarKind;
use crate::learning::{Dataset, LossSpec, ModelParams};
use crate::ledger::Chain;
use crate::par::Exec;
use crate::privacy::DpConfig;
use crate::{Error, Result};

/// Which protocol the nodes run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// No clipping, no noise; every node applies the plain average.
    Pure,
    /// Clipping and noise; plain average; no consensus.
    Dp,
    /// Clipping and noise, robust aggregation and block consensus.
    Spdl,
    /// Regret baseline: every node applies the gradient of one honest node
    /// drawn uniformly each round. Uses DP if configured.
    HonestPick,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Pure => "pure",
            Scheme::Dp => "dp",
            Scheme::Spdl => "spdl",
            Scheme::HonestPick => "honest-pick",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pure" => Ok(Scheme::Pure),
            "dp" => Ok(Scheme::Dp),
            "spdl" => Ok(Scheme::Spdl),
            "honest-pick" => Ok(Scheme::HonestPick),
            other => Err(Error::config(format!("unknown scheme {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub nodes: usize,
    /// Fraction of nodes that are Byzantine; the count is `⌊ratio·N⌋`.
    pub byz_ratio: f64,
    pub script: AdversaryScript,
    pub rounds: u64,
    /// Rounds per epoch; a fresh view-0 lottery runs at each epoch start.
    pub epoch_length: u64,
    /// Ticks reserved for a leader lottery.
    pub delta1: u64,
    /// Base view timeout in ticks.
    pub delta2: u64,
    pub gamma: f64,
    pub batch_size: usize,
    pub gar: GarKind,
    pub scheme: Scheme,
    /// Ignored by [`Scheme::Pure`].
    pub dp: Option<DpConfig>,
    pub loss: LossSpec,
    pub delta_tol: f64,
    pub seed: u64,
    pub exec: Exec,
    /// Highest view a round may reach before the run is aborted.
    pub max_views: u64,
    pub trace: bool,
    /// Record full-data loss, gradient norm and gradient spread per round.
    pub diagnostics: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            nodes: 10,
            byz_ratio: 0.0,
            script: AdversaryScript::default(),
            rounds: 100,
            epoch_length: 10,
            delta1: 2,
            delta2: 8,
            gamma: 0.1,
            batch_size: 32,
            gar: GarKind::Krum,
            scheme: Scheme::Spdl,
            dp: None,
            loss: LossSpec::softmax(10),
            delta_tol: 1e-9,
            seed: 0,
            exec: Exec::default(),
            max_views: 32,
            trace: false,
            diagnostics: false,
        }
    }
}

impl SimConfig {
    pub fn byzantine_count(&self) -> usize {
        ((self.byz_ratio * self.nodes as f64) + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let min_nodes = if self.scheme == Scheme::Spdl { 4 } else { 1 };
        if self.nodes < min_nodes {
            return Err(Error::config(format!(
                "scheme {} needs at least {min_nodes} nodes, got {}",
                self.scheme, self.nodes
            )));
        }
        if !(0.0..1.0).contains(&self.byz_ratio) {
            return Err(Error::config(format!("byzantine ratio {} outside [0, 1)", self.byz_ratio)));
        }
        if self.epoch_length == 0 {
            return Err(Error::config("epoch length must be positive"));
        }
        if self.delta1 == 0 || self.delta2 == 0 {
            return Err(Error::config("tick bounds must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.delta_tol >= 0.0 && self.delta_tol.is_finite()) {
            return Err(Error::config("delta tolerance must be finite and >= 0"));
        }
        if self.scheme == Scheme::Spdl && self.gar == GarKind::Krum {
            let f = crate::consensus::max_faults(self.nodes);
            if self.nodes < f + 3 {
                return Err(Error::config("krum needs N >= f+3"));
            }
        }
        Ok(())
    }
}

/// Training partitions (one per node) and the shared test set.
#[derive(Debug, Clone)]
pub struct SimData {
    pub partitions: Vec<Dataset>,
    pub test: Dataset,
}

/// Per-round quantities used by the regret harness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundDiagnostics {
    /// Full training loss after the round's update.
    pub train_loss: f64,
    /// Norm of the full training gradient after the update.
    pub grad_norm: f64,
    /// Per-coordinate spread of honest clipped gradients around their mean.
    pub honest_spread: f64,
    /// Per-coordinate DP noise variance `σ²`.
    pub noise_var: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub epoch: u64,
    pub round: u64,
    /// View-0 leader; `None` without consensus.
    pub leader: Option<NodeId>,
    /// A block was appended (consensus) or the update applied (no consensus).
    pub committed: bool,
    pub block_hash: Option<Hash256>,
    /// `None` for regression losses.
    pub test_error: Option<f64>,
    pub lgc_ticks: u64,
    pub ge_ticks: u64,
    pub bc_ticks: u64,
    pub t_lgc_ms: f64,
    pub t_ge_ms: f64,
    pub t_bc_ms: f64,
    pub t_round_ms: f64,
    /// Highest view any lottery ran for.
    pub views: u64,
    pub reputation_min: f64,
    pub diagnostics: Option<RoundDiagnostics>,
}

/// Counters summed over a run, as seen by honest nodes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimStats {
    pub elections: u64,
    /// Lotteries that found no candidate with positive reputation.
    pub election_failures: u64,
    pub forged_tickets: u64,
    pub invalid_messages: u64,
    pub duplicate_messages: u64,
    pub rejected_proposals: u64,
    pub view_change_rounds: u64,
    pub abandoned_rounds: u64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub metrics: Vec<RoundMetrics>,
    pub final_model: ModelParams,
    /// Honest replica of the chain; `None` without consensus.
    pub chain: Option<Chain>,
    pub byzantine: Vec<NodeId>,
    pub stats: SimStats,
    pub bus: BusStats,
    pub trace: Vec<String>,
}

/// Runs every configured round.
pub fn run_experiment(cfg: &SimConfig, data: &SimData) -> Result<RunReport> {
    let mut world = World::new(cfg.clone(), data.clone())?;
    while !world.finished() {
        world.run_round()?;
    }
    Ok(world.into_report())
}
