//! Gaussian mechanism: norm clipping, noise calibration and perturbation.

use rand::Rng;

use crate::learning::GradientVector;
use crate::{Error, Result};

/// Which round count enters the calibration formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CalibrationMode {
    /// The budget covers all `T` rounds together.
    #[default]
    WholeRun,
    /// The budget is spent afresh every round (`T = 1` in the formula).
    PerRound,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpConfig {
    pub epsilon: f64,
    pub delta: f64,
    /// Clipping norm, which is also the L2 sensitivity bound.
    pub clip: f64,
    pub gamma: f64,
    pub rounds: u64,
    pub mode: CalibrationMode,
    sigma: f64,
}

impl DpConfig {
    /// Builds a config whose noise scale sits exactly at the lower bound.
    pub fn calibrated(
        epsilon: f64,
        delta: f64,
        clip: f64,
        gamma: f64,
        rounds: u64,
        mode: CalibrationMode,
    ) -> Result<Self> {
        if !(clip > 0.0 && clip.is_finite()) {
            return Err(Error::config(format!("clip norm {clip} must be positive")));
        }
        let t = match mode {
            CalibrationMode::WholeRun => rounds.max(1),
            CalibrationMode::PerRound => 1,
        };
        let sigma = calibrate_sigma(clip, t, gamma, epsilon, delta)?;
        Ok(Self {
            epsilon,
            delta,
            clip,
            gamma,
            rounds,
            mode,
            sigma,
        })
    }

    /// Replaces the noise scale; it may only grow past the calibrated bound.
    pub fn with_sigma(mut self, sigma: f64) -> Result<Self> {
        if !(sigma >= self.sigma && sigma.is_finite()) {
            return Err(Error::config(format!(
                "noise scale {sigma} is below the required {}",
                self.sigma
            )));
        }
        self.sigma = sigma;
        Ok(self)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Clip to `C`, then add `N(0, σ²)` to every coordinate.
    pub fn privatize<R: Rng + ?Sized>(&self, g: &GradientVector, rng: &mut R) -> Result<GradientVector> {
        perturb(&clip_gradient(g, self.clip)?, self.sigma, rng)
    }
}

/// Smallest compliant noise scale, `C·T·γ·sqrt(2 ln(1.25/δ)) / ε`.
pub fn calibrate_sigma(clip: f64, rounds: u64, gamma: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !(clip >= 0.0 && clip.is_finite()) {
        return Err(Error::invalid(format!("clip norm {clip} must be >= 0")));
    }
    if rounds == 0 {
        return Err(Error::invalid("round count must be at least 1"));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("learning rate {gamma} must be positive")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("epsilon {epsilon} must be positive")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta {delta} must lie in (0, 1)")));
    }
    let radicand = 2.0 * (1.25 / delta).ln();
    Ok(clip * rounds as f64 * gamma * radicand.sqrt() / epsilon)
}

/// Rescales `g` onto the ball of radius `clip` when it lies outside.
pub fn clip_gradient(g: &GradientVector, clip: f64) -> Result<GradientVector> {
    if !(clip > 0.0 && clip.is_finite()) {
        return Err(Error::invalid(format!("clip norm {clip} must be positive")));
    }
    let norm = g.norm();
    if norm <= clip {
        return Ok(g.clone());
    }
    let mut out = g.scaled(clip / norm);
    // Rounding can leave the scaled norm a hair above the bound.
    while out.norm() > clip {
        out = out.scaled(1.0 - f64::EPSILON);
    }
    Ok(out)
}

/// Standard normal draws by the Marsaglia polar method. Both variates of each
/// accepted pair are used, in the order they are produced.
#[derive(Debug, Default, Clone)]
pub struct GaussianSampler {
    spare: Option<f64>,
}

impl GaussianSampler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        loop {
            let u = 2.0 * rng.gen::<f64>() - 1.0;
            let v = 2.0 * rng.gen::<f64>() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let m = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * m);
                return u * m;
            }
        }
    }
}

/// `g + G` with independent `G_j ~ N(0, σ²)`.
pub fn perturb<R: Rng + ?Sized>(g: &GradientVector, sigma: f64, rng: &mut R) -> Result<GradientVector> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("noise scale {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(g.clone());
    }
    let mut sampler = GaussianSampler::new();
    let values = g
        .as_slice()
        .iter()
        .map(|v| v + sigma * sampler.sample(rng))
        .collect();
    GradientVector::new(values)
}
