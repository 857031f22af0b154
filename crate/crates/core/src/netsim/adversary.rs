//! Byzantine behaviours and per-round scripts.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::{Error, Result};

/// What a Byzantine node does in one round.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    /// Follows the protocol.
    Honest,
    /// Sends nothing at all: no gradient, no lottery ticket, no votes.
    Silent,
    /// Sends a fresh `N(0, scale²)` vector instead of its gradient.
    RandomGaussian { scale: f64 },
    /// Sends `−scale` times its own (privatized) gradient.
    SignFlip { scale: f64 },
    /// Sends a fixed vector; a single value is broadcast to every coordinate.
    Constant(Vec<f64>),
    /// Honest gradient; in consensus proposes two conflicting blocks,
    /// splits and repeats its votes, and sends forged lottery tickets and
    /// forged VIEW-CHANGEs.
    EquivocateConsensus,
    /// Honest gradient and votes; as leader proposes an arbitrary delta.
    DeltaSubstitution,
}

impl Strategy {
    pub fn sends_gradient(&self) -> bool {
        !matches!(self, Strategy::Silent)
    }

    pub fn attacks_consensus(&self) -> bool {
        matches!(
            self,
            Strategy::Silent | Strategy::EquivocateConsensus | Strategy::DeltaSubstitution
        )
    }

    /// Picks one of the consensus-level attacks uniformly.
    pub fn random_consensus_attack<R: Rng + ?Sized>(rng: &mut R) -> Self {
        match rng.gen_range(0..3) {
            0 => Strategy::Silent,
            1 => Strategy::EquivocateConsensus,
            _ => Strategy::DeltaSubstitution,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Honest => f.write_str("honest"),
            Strategy::Silent => f.write_str("silent"),
            Strategy::RandomGaussian { scale } => write!(f, "random-gaussian:{scale}"),
            Strategy::SignFlip { scale } => write!(f, "sign-flip:{scale}"),
            Strategy::Constant(v) => {
                f.write_str("constant:")?;
                let parts: Vec<String> = v.iter().map(ToString::to_string).collect();
                f.write_str(&parts.join(","))
            }
            Strategy::EquivocateConsensus => f.write_str("equivocate"),
            Strategy::DeltaSubstitution => f.write_str("delta-substitution"),
        }
    }
}

fn parse_scale(name: &str, arg: Option<&str>, default: f64) -> Result<f64> {
    let scale = match arg {
        None => default,
        Some(s) => s
            .parse::<f64>()
            .map_err(|_| Error::config(format!("bad scale {s:?} for {name}")))?,
    };
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::config(format!("{name} scale must be positive")));
    }
    Ok(scale)
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts `honest`, `silent`, `random-gaussian[:scale]`,
    /// `sign-flip[:scale]`, `constant:v1[,v2,...]`, `equivocate` and
    /// `delta-substitution`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        match name {
            "honest" => Ok(Strategy::Honest),
            "silent" => Ok(Strategy::Silent),
            "random-gaussian" => Ok(Strategy::RandomGaussian {
                scale: parse_scale(name, arg, 1.0)?,
            }),
            "sign-flip" => Ok(Strategy::SignFlip {
                scale: parse_scale(name, arg, 4.0)?,
            }),
            "constant" => {
                let arg = arg.ok_or_else(|| Error::config("constant needs a value"))?;
                let values = arg
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .ok()
                            .filter(|x| x.is_finite())
                            .ok_or_else(|| Error::config(format!("bad constant {v:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Strategy::Constant(values))
            }
            "equivocate" | "equivocate-consensus" => Ok(Strategy::EquivocateConsensus),
            "delta-substitution" => Ok(Strategy::DeltaSubstitution),
            other => Err(Error::config(format!("unknown adversary strategy {other:?}"))),
        }
    }
}

/// A default strategy with optional per-round replacements.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryScript {
    pub default: Strategy,
    pub overrides: BTreeMap<u64, Strategy>,
}

impl AdversaryScript {
    pub fn constant(strategy: Strategy) -> Self {
        Self {
            default: strategy,
            overrides: BTreeMap::new(),
        }
    }

    pub fn with_override(mut self, round: u64, strategy: Strategy) -> Self {
        self.overrides.insert(round, strategy);
        self
    }

    /// A uniformly random consensus-level attack for every round.
    pub fn random_consensus<R: Rng + ?Sized>(rounds: u64, rng: &mut R) -> Self {
        let overrides = (0..rounds)
            .map(|t| (t, Strategy::random_consensus_attack(rng)))
            .collect();
        Self {
            default: Strategy::Honest,
            overrides,
        }
    }

    pub fn at(&self, round: u64) -> &Strategy {
        self.overrides.get(&round).unwrap_or(&self.default)
    }
}

impl Default for AdversaryScript {
    fn default() -> Self {
        Self::constant(Strategy::Honest)
    }
}
