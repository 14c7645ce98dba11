//! Simulator and protocol library for a blockchain-backed collaborative
//! intrusion detection network.
//!
//! IDS peers rate each other's credibility through challenges, diffuse
//! per-host trust scores with an adopt-then-combine rule, and commit their
//! lists to a trust-chain whose leaders are elected by a hybrid
//! proof-of-work/proof-of-stake lottery.

pub mod audit;
pub mod chain;
pub mod codec;
pub mod config;
pub mod consensus;
pub mod crypto;
pub mod net_sim;
pub mod node;
pub mod report;
pub mod rng;
pub mod scenario;
pub mod trust_model;

use std::fmt;

use serde::{Deserialize, Serialize};

/// Identifier of a CIDN member, bound to a public key by the registry.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

pub type Hash = [u8; 32];

pub const ZERO_HASH: Hash = [0u8; 32];

pub use chain::{Block, BlockHeader, Chain, ChainState, EvidenceRecord, Transaction};

pub use config::ScenarioConfig;
pub use consensus::{ConsensusParams, Rejection};
pub use trust_model::TrustParams;
