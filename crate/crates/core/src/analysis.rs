//! Closed-form resilience and regret bounds, plus a Monte Carlo check of the
//! resilience inequality `⟨E h, g⟩ ≥ k‖g‖²` under Krum.
//!
//! Variances `sigma_f_sq` and `sigma_sq` are per coordinate.

use rand::Rng;

use crate::gar::krum_select;
use crate::learning::{dot, GradientVector};
use crate::netsim::Strategy;
use crate::par::Exec;
use crate::privacy::GaussianSampler;
use crate::rng::stream_rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisParams {
    /// Byzantine count.
    pub f: usize,
    pub d: usize,
    /// Norm of the true gradient.
    pub g_norm: f64,
    /// Honest gradient variance bound.
    pub sigma_f_sq: f64,
    /// DP noise variance.
    pub sigma_sq: f64,
    pub clip: f64,
    pub epsilon: f64,
    pub delta: f64,
    /// Lipschitz constant of the loss.
    pub l1: f64,
    pub rounds: u64,
}

impl AnalysisParams {
    /// `2C²·ln(1.25/δ)/ε²`, the single-release Gaussian noise variance.
    pub fn dp_variance(&self) -> f64 {
        2.0 * self.clip * self.clip * (1.25 / self.delta).ln() / (self.epsilon * self.epsilon)
    }

    fn check(&self) -> Result<()> {
        let values = [
            self.g_norm,
            self.sigma_f_sq,
            self.sigma_sq,
            self.clip,
            self.epsilon,
            self.delta,
            self.l1,
        ];
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("analysis parameters must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// `C₂ = (‖g‖²/(18d)·f^(−3/4) − σ_f²)^(1/2)`; `None` when the radicand is
/// not positive.
pub fn c2(p: &AnalysisParams) -> Option<f64> {
    let f = p.f as f64;
    let radicand = p.g_norm * p.g_norm / (18.0 * p.d as f64) * f.powf(-0.75) - p.sigma_f_sq;
    (radicand > 0.0).then(|| radicand.sqrt())
}

/// `‖g‖²·f^(−3/4) > 18dσ_f²` and `ε > sqrt(2C·ln(1.25/δ))/C₂`. Vacuously
/// true without Byzantine nodes.
pub fn check_resilience_preconditions(p: &AnalysisParams) -> bool {
    if p.f == 0 {
        return true;
    }
    let f = p.f as f64;
    let lhs = p.g_norm * p.g_norm * f.powf(-0.75);
    if lhs <= 18.0 * p.d as f64 * p.sigma_f_sq {
        return false;
    }
    match c2(p) {
        Some(c2) => p.epsilon > (2.0 * p.clip * (1.25 / p.delta).ln()).sqrt() / c2,
        None => false,
    }
}

/// `k = 1 − (3√2·f^(3/2)·√d/‖g‖)·(σ_f² + 2C²ln(1.25/δ)/ε²)`.
pub fn compute_k(p: &AnalysisParams) -> Result<f64> {
    p.check()?;
    if p.g_norm == 0.0 {
        return Err(Error::invalid("gradient norm must be positive"));
    }
    if p.f == 0 {
        return Ok(1.0);
    }
    let f = p.f as f64;
    let factor = 3.0 * std::f64::consts::SQRT_2 * f.powf(1.5) * (p.d as f64).sqrt() / p.g_norm;
    Ok(1.0 - factor * (p.sigma_f_sq + p.dp_variance()))
}

/// `ρ = 6L₁·f^(3/2)·sqrt(d(σ² + σ_f²)) / (1 − L₁)`; the regret bound is `ρ√T`.
pub fn compute_regret_coefficient(p: &AnalysisParams) -> Result<f64> {
    p.check()?;
    if p.l1 >= 1.0 {
        return Err(Error::invalid(format!("Lipschitz constant {} must be below 1", p.l1)));
    }
    let f = p.f as f64;
    Ok(6.0 * p.l1 * f.powf(1.5) * (p.d as f64 * (p.sigma_sq + p.sigma_f_sq)).sqrt() / (1.0 - p.l1))
}

/// `ρ√T` for `p.rounds`.
pub fn regret_bound(p: &AnalysisParams) -> Result<f64> {
    Ok(compute_regret_coefficient(p)? * (p.rounds as f64).sqrt())
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub trials: usize,
}

const CHUNKS: usize = 64;

/// Estimates `⟨E h, g⟩/‖g‖²` for Krum over `n = max(3f+1, f+3)` inputs:
/// `n−f` honest gradients `g + N(0, σ_f²) + N(0, σ²)` and `f` adversarial
/// ones built by `adversary`. `g = (‖g‖/√d)·1`. Trials are split into fixed
/// chunks, each with its own `stream_rng(seed, "monte-carlo", chunk)`, and
/// summed in chunk order.
pub fn monte_carlo_resilience(
    p: &AnalysisParams,
    adversary: &Strategy,
    trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<Estimate> {
    p.check()?;
    if trials < 2 || p.d == 0 || p.g_norm == 0.0 {
        return Err(Error::invalid("need at least 2 trials, d > 0 and ‖g‖ > 0"));
    }
    if let Strategy::Constant(v) = adversary {
        if v.len() != 1 && v.len() != p.d {
            return Err(Error::invalid("constant adversary vector has the wrong dimension"));
        }
    }
    let n = (3 * p.f + 1).max(p.f + 3);
    let g = vec![p.g_norm / (p.d as f64).sqrt(); p.d];
    let g_sq = dot(&g, &g);
    let (sf, s) = (p.sigma_f_sq.sqrt(), p.sigma_sq.sqrt());
    let chunks = exec.map(CHUNKS, |c| -> Result<(f64, f64)> {
        let count = trials / CHUNKS + usize::from(c < trials % CHUNKS);
        let mut rng = stream_rng(seed, "monte-carlo", c as u64);
        let mut normal = GaussianSampler::new();
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        let mut honest_like = |rng: &mut rand_chacha::ChaCha20Rng| -> Vec<f64> {
            g.iter()
                .map(|gi| gi + sf * normal.sample(rng) + s * normal.sample(rng))
                .collect()
        };
        for _ in 0..count {
            let mut grads = Vec::with_capacity(n);
            for _ in 0..n - p.f {
                grads.push(GradientVector::new(honest_like(&mut rng))?);
            }
            for _ in 0..p.f {
                let v = match adversary {
                    Strategy::SignFlip { scale } => honest_like(&mut rng).iter().map(|x| -scale * x).collect(),
                    Strategy::RandomGaussian { scale } => {
                        let mut z = GaussianSampler::new();
                        (0..p.d).map(|_| scale * z.sample(&mut rng)).collect()
                    }
                    Strategy::Constant(v) if v.len() == 1 => vec![v[0]; p.d],
                    Strategy::Constant(v) => v.clone(),
                    Strategy::Silent => vec![0.0; p.d],
                    _ => honest_like(&mut rng),
                };
                grads.push(GradientVector::new(v)?);
            }
            // Shuffle so that ties inside Krum do not favour either group.
            for i in (1..n).rev() {
                grads.swap(i, rng.gen_range(0..=i));
            }
            let (_, h) = krum_select(&grads, p.f)?;
            let x = dot(h.as_slice(), &g) / g_sq;
            sum += x;
            sum_sq += x * x;
        }
        Ok((sum, sum_sq))
    });
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for c in chunks {
        let (a, b) = c?;
        sum += a;
        sum_sq += b;
    }
    let t = trials as f64;
    let mean = sum / t;
    let var = ((sum_sq - t * mean * mean) / (t - 1.0)).max(0.0);
    Ok(Estimate {
        mean,
        std_err: (var / t).sqrt(),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dashu_float::FBig;
    use crate::netsim::Strategy;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};

    const PREC: usize = 256;

    fn big(x: f64) -> FBig {
        FBig::try_from(x).unwrap().with_precision(PREC).value()
    }

    fn example() -> AnalysisParams {
        AnalysisParams {
            f: 1,
            d: 4,
            g_norm: 10.0,
            sigma_f_sq: 0.01,
            sigma_sq: 0.0,
            clip: 1.0,
            epsilon: std::f64::consts::SQRT_2,
            delta: 1.25 * (-1.0f64).exp(),
            l1: 0.5,
            rounds: 1,
        }
    }

    // Independent high-precision evaluations. f^(3/2) = f·√f and
    // f^(-3/4) = 1/√(√f·f) avoid powf on big floats.
    fn oracle_k(p: &AnalysisParams) -> f64 {
        if p.f == 0 {
            return 1.0;
        }
        let f = big(p.f as f64);
        let f32 = &f * f.sqrt();
        let ln = (big(1.25) / big(p.delta)).ln();
        let c = big(p.clip);
        let eps = big(p.epsilon);
        let noise = big(2.0) * &c * &c * ln / (&eps * &eps);
        let factor = big(3.0) * big(2.0).sqrt() * f32 * big(p.d as f64).sqrt() / big(p.g_norm);
        (big(1.0) - factor * (big(p.sigma_f_sq) + noise)).to_f64().value()
    }

    fn oracle_rho(p: &AnalysisParams) -> f64 {
        let f = big(p.f as f64);
        let f32 = &f * f.sqrt();
        let inner = big(p.d as f64) * (big(p.sigma_sq) + big(p.sigma_f_sq));
        let l1 = big(p.l1);
        (big(6.0) * &l1 * f32 * inner.sqrt() / (big(1.0) - l1)).to_f64().value()
    }

    fn oracle_pre(p: &AnalysisParams) -> (f64, f64, f64, f64) {
        let f = big(p.f as f64);
        let f_m34 = big(1.0) / (f.sqrt() * f.sqrt().sqrt());
        let g2 = big(p.g_norm) * big(p.g_norm);
        let lhs = &g2 * &f_m34;
        let rhs = big(18.0) * big(p.d as f64) * big(p.sigma_f_sq);
        let c2 = (g2 / (big(18.0) * big(p.d as f64)) * f_m34 - big(p.sigma_f_sq)).sqrt();
        let threshold = (big(2.0) * big(p.clip) * (big(1.25) / big(p.delta)).ln()).sqrt() / &c2;
        (
            lhs.to_f64().value(),
            rhs.to_f64().value(),
            c2.to_f64().value(),
            threshold.to_f64().value(),
        )
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn worked_example() {
        let p = example();
        let k = compute_k(&p).unwrap();
        let oracle = oracle_k(&p);
        assert!(rel(k, oracle) < 1e-12, "{k} vs {oracle}");
        assert!((k - 0.142_986_581_201_904_4).abs() < 1e-12);
        let (lhs, rhs, c2v, threshold) = oracle_pre(&p);
        assert!(lhs > rhs);
        assert!(rel(c2(&p).unwrap(), c2v) < 1e-12);
        assert!(p.epsilon > threshold);
        assert!(check_resilience_preconditions(&p));
    }

    #[test]
    fn no_byzantine_nodes() {
        let mut p = example();
        p.f = 0;
        assert_eq!(compute_k(&p).unwrap(), 1.0);
        assert_eq!(compute_regret_coefficient(&p).unwrap(), 0.0);
        assert!(check_resilience_preconditions(&p));
    }

    #[test]
    fn boundary_and_errors() {
        let mut p = example();
        p.sigma_f_sq = 0.0;
        p.epsilon = 1e9;
        assert!(check_resilience_preconditions(&p));
        // ‖g‖²·f^(−3/4) = 18dσ_f² exactly with f = 1.
        p.g_norm = 6.0;
        p.d = 2;
        p.sigma_f_sq = 1.0;
        assert!(!check_resilience_preconditions(&p));
        p.g_norm = 0.0;
        assert!(compute_k(&p).is_err());
        let mut p = example();
        p.l1 = 1.0;
        assert!(compute_regret_coefficient(&p).is_err());
    }

    #[test]
    fn regret_coefficient_direct_value() {
        let mut p = example();
        p.d = 1;
        p.sigma_sq = 0.25;
        p.sigma_f_sq = 0.75;
        assert!((compute_regret_coefficient(&p).unwrap() - 6.0).abs() < 1e-12);
        p.rounds = 16;
        assert!((regret_bound(&p).unwrap() - 24.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_gradient_halves_the_gap() {
        let p = example();
        let mut q = p;
        q.g_norm *= 2.0;
        let (k1, k2) = (compute_k(&p).unwrap(), compute_k(&q).unwrap());
        assert!(((1.0 - k2) - (1.0 - k1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn formulas_match_high_precision_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let p = AnalysisParams {
                f: rng.gen_range(1..12),
                d: rng.gen_range(1..1000),
                g_norm: rng.gen_range(0.1..100.0),
                sigma_f_sq: rng.gen_range(0.0..2.0),
                sigma_sq: rng.gen_range(0.0..2.0),
                clip: rng.gen_range(0.1..5.0),
                epsilon: rng.gen_range(0.01..10.0),
                delta: 10f64.powf(-rng.gen_range(1.0..9.0)),
                l1: rng.gen_range(0.0..0.99),
                rounds: rng.gen_range(1..1000),
            };
            let k = compute_k(&p).unwrap();
            let ok = oracle_k(&p);
            // 1 − k can cancel; compare the gap.
            assert!(rel(1.0 - k, 1.0 - ok) < 1e-12, "{p:?}: {k} vs {ok}");
            let rho = compute_regret_coefficient(&p).unwrap();
            let orho = oracle_rho(&p);
            if orho > 0.0 {
                assert!(rel(rho, orho) < 1e-12, "{p:?}: {rho} vs {orho}");
            }
            if let Some(c) = c2(&p) {
                let (_, _, oc, _) = oracle_pre(&p);
                assert!(rel(c, oc) < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn rho_is_monotone(
            l1 in 0.0f64..0.9, f in 1usize..10, d in 1usize..100, s in 0.0f64..3.0, sf in 0.0f64..3.0,
            bump in 0.001f64..0.09,
        ) {
            let p = AnalysisParams {
                f, d, g_norm: 1.0, sigma_f_sq: sf, sigma_sq: s, clip: 1.0, epsilon: 1.0, delta: 1e-5, l1, rounds: 1,
            };
            let base = compute_regret_coefficient(&p).unwrap();
            let cases = [
                AnalysisParams { l1: l1 + bump, ..p },
                AnalysisParams { f: f + 1, ..p },
                AnalysisParams { d: d + 1, ..p },
                AnalysisParams { sigma_sq: s + bump, ..p },
            ];
            for q in cases {
                prop_assert!(compute_regret_coefficient(&q).unwrap() >= base);
            }
        }
    }

    #[test]
    fn deterministic_input_gives_exactly_one() {
        let mut p = example();
        p.f = 0;
        p.sigma_f_sq = 0.0;
        let est = monte_carlo_resilience(&p, &Strategy::SignFlip { scale: 4.0 }, 1000, 1, Exec::default()).unwrap();
        assert_eq!(est.mean, 1.0);
        assert_eq!(est.std_err, 0.0);
    }

    #[test]
    fn unbiased_without_byzantine_nodes() {
        let mut p = example();
        p.f = 0;
        p.sigma_f_sq = 4.0;
        let est = monte_carlo_resilience(&p, &Strategy::Honest, 20_000, 2, Exec::default()).unwrap();
        assert!((est.mean - 1.0).abs() <= 3.0 * est.std_err, "{est:?}");
    }

    #[test]
    fn execution_mode_does_not_change_the_estimate() {
        let p = example();
        let s = Strategy::RandomGaussian { scale: 3.0 };
        let a = monte_carlo_resilience(&p, &s, 2000, 3, Exec::Sequential).unwrap();
        let b = monte_carlo_resilience(&p, &s, 2000, 3, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
