//! Paired runs for empirical regret: a run with Byzantine nodes against a
//! clean baseline that applies one honest gradient per round.

use super::{run_experiment, RunReport, Scheme, SimConfig, SimData};
use crate::{Error, Result};

/// Running sums `R(τ) = Σ_{t<τ} (a_t − b_t)` for `τ = 1..=T`.
pub fn empirical_regret(losses: &[f64], baseline: &[f64]) -> Result<Vec<f64>> {
    if losses.len() != baseline.len() {
        return Err(Error::invalid(format!(
            "loss traces differ in length: {} vs {}",
            losses.len(),
            baseline.len()
        )));
    }
    let mut acc = 0.0;
    Ok(losses
        .iter()
        .zip(baseline)
        .map(|(a, b)| {
            acc += a - b;
            acc
        })
        .collect())
}

/// Both runs plus the constants estimated from them.
#[derive(Debug, Clone)]
pub struct RegretRun {
    pub byzantine: RunReport,
    pub baseline: RunReport,
    /// `R(τ)` for `τ = 1..=T`.
    pub regret: Vec<f64>,
    /// Largest full-gradient norm seen on either trajectory.
    pub l1: f64,
    /// Per-coordinate spread of honest gradients, averaged over rounds.
    pub sigma_f_sq: f64,
    /// Per-coordinate DP noise variance.
    pub sigma_sq: f64,
}

fn losses(report: &RunReport) -> Result<Vec<f64>> {
    report
        .metrics
        .iter()
        .map(|m| {
            m.diagnostics
                .map(|d| d.train_loss)
                .ok_or_else(|| Error::Simulation("diagnostics were not recorded".into()))
        })
        .collect()
}

/// Runs `cfg` as given and a clean [`Scheme::HonestPick`] baseline with the
/// same seed and data, both with diagnostics on.
pub fn paired_regret(cfg: &SimConfig, data: &SimData) -> Result<RegretRun> {
    let mut byz_cfg = cfg.clone();
    byz_cfg.diagnostics = true;
    let mut base_cfg = byz_cfg.clone();
    base_cfg.byz_ratio = 0.0;
    base_cfg.scheme = Scheme::HonestPick;

    let byzantine = run_experiment(&byz_cfg, data)?;
    let baseline = run_experiment(&base_cfg, data)?;
    let regret = empirical_regret(&losses(&byzantine)?, &losses(&baseline)?)?;

    let diag = |r: &RunReport| r.metrics.iter().filter_map(|m| m.diagnostics).collect::<Vec<_>>();
    let (db, dc) = (diag(&byzantine), diag(&baseline));
    let l1 = db.iter().chain(&dc).map(|d| d.grad_norm).fold(0.0, f64::max);
    let sigma_f_sq = db.iter().map(|d| d.honest_spread).sum::<f64>() / db.len() as f64;
    let sigma_sq = db.first().map_or(0.0, |d| d.noise_var);
    Ok(RegretRun {
        byzantine,
        baseline,
        regret,
        l1,
        sigma_f_sq,
        sigma_sq,
    })
}
