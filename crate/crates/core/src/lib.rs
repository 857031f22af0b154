//! Deterministic simulator and library for blockchain-secured, differentially
//! private, Byzantine-fault-tolerant decentralized learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`learning`]: softmax / least-squares models, batch sampling, SGD.
//! - [`privacy`]: clipping, Gaussian noise calibration and perturbation.
//! - [`gar`]: gradient aggregation rules (Krum, coordinate median, average).
//! - [`crypto`] and [`codec`]: keyed-hash identities, signatures, VRF and the
//!   canonical byte encoding every signed or hashed structure uses.
//! - [`ledger`]: the hash-chained block store.
//! - [`election`]: VRF leader lottery with reputation gating.
//! - [`consensus`]: the PBFT-style round that certifies one aggregate per round.
//! - [`netsim`]: the synchronous scheduler, adversaries and node runtime.
//! - [`analysis`]: closed-form bounds and Monte Carlo checks.
//! - [`experiment`]: configuration, datasets, CSV output and the grid runner.
//!
//! Data-parallel inner loops run on rayon when the `parallel` feature is on
//! (the default) and fall back to plain iterators otherwise. Results are
//! identical either way; see [`par::Exec`].

pub mod analysis;
pub mod codec;
pub mod consensus;
pub mod crypto;
pub mod election;
mod error;
pub mod experiment;
pub mod gar;
pub mod learning;
pub mod ledger;
pub mod netsim;
pub mod par;
pub mod privacy;
pub mod rng;

pub use error::{Error, IntegrityCheck, Result};
