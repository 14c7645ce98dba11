//! Credibility and host-trust arithmetic.
//!
//! Peers earn credibility by answering challenges: every answer either
//! yields a satisfaction sample (moving the accumulated satisfaction) or is
//! `Unsure` (moving the unsure rate). Credibility then interpolates between
//! the accumulated satisfaction and the initial trust score depending on how
//! often a peer dodges challenges.
//!
//! External hosts are scored per monitoring interval from detector counts,
//! accumulated with the same forgetting factor, and combined across peers
//! with credibility-derived weights.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::NodeId;

#[derive(Debug, Error, PartialEq)]
pub enum TrustError {
    #[error("parameter `{name}` = {value} outside {range}")]
    Param {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("normal count {k} exceeds packet count {n}")]
    CountOverflow { k: u64, n: u64 },
    #[error("network size must be at least 1")]
    EmptyNetwork,
    #[error("satisfaction is undefined for an Unsure answer")]
    UnsureSatisfaction,
}

/// The model constants shared by every node of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "RawTrustParams")]
pub struct TrustParams {
    /// Forgetting factor, weight given to past behaviour.
    pub lambda: f64,
    /// Severity exponent punishing Unsure answers.
    pub phi: f64,
    /// Credibility threshold below which a peer's data is ignored.
    pub theta: f64,
    /// Initial trust given to newcomers and unseen hosts.
    pub tau: f64,
    /// Blacklist threshold on accumulated host trust.
    pub zeta: f64,
    /// Packets per monitoring interval.
    pub interval_len: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrustParams {
    lambda: f64,
    phi: f64,
    theta: f64,
    tau: f64,
    zeta: f64,
    interval_len: u64,
}

impl TryFrom<RawTrustParams> for TrustParams {
    type Error = TrustError;

    fn try_from(r: RawTrustParams) -> Result<Self, Self::Error> {
        TrustParams::new(r.lambda, r.phi, r.theta, r.tau, r.zeta, r.interval_len)
    }
}

fn open_unit(name: &'static str, value: f64) -> Result<(), TrustError> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(TrustError::Param {
            name,
            value,
            range: "(0,1)",
        })
    }
}

impl TrustParams {
    pub fn new(
        lambda: f64,
        phi: f64,
        theta: f64,
        tau: f64,
        zeta: f64,
        interval_len: u64,
    ) -> Result<Self, TrustError> {
        open_unit("lambda", lambda)?;
        open_unit("theta", theta)?;
        open_unit("zeta", zeta)?;
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(TrustError::Param {
                name: "phi",
                value: phi,
                range: "(0,inf)",
            });
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(TrustError::Param {
                name: "tau",
                value: tau,
                range: "[0,1]",
            });
        }
        if interval_len == 0 {
            return Err(TrustError::Param {
                name: "interval_len",
                value: 0.0,
                range: "[1,inf)",
            });
        }
        Ok(Self {
            lambda,
            phi,
            theta,
            tau,
            zeta,
            interval_len,
        })
    }
}

impl Default for TrustParams {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            phi: 1.0,
            theta: 0.8,
            tau: 0.5,
            zeta: 0.3,
            interval_len: 50,
        }
    }
}

/// A peer's answer to a challenge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Answer {
    Priority(f64),
    Unsure,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChallengeOutcome {
    /// Priority the challenger knows to be correct.
    pub expected: f64,
    pub actual: Answer,
}

/// Satisfaction drawn from one answered challenge: the complement of the
/// absolute gap between the expected and the actual priority.
pub fn satisfaction(c: &ChallengeOutcome) -> Result<f64, TrustError> {
    match c.actual {
        Answer::Priority(p) => Ok((1.0 - (c.expected - p).abs()).clamp(0.0, 1.0)),
        Answer::Unsure => Err(TrustError::UnsureSatisfaction),
    }
}

/// What an observer knows about one peer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeerTrustState {
    pub gamma: f64,
    pub alpha: f64,
    pub crd: f64,
}

impl PeerTrustState {
    pub fn fresh(p: &TrustParams) -> Self {
        Self {
            gamma: p.tau,
            alpha: 0.0,
            crd: p.tau,
        }
    }

    /// Routes an answer to the matching update.
    pub fn observe(self, c: &ChallengeOutcome, p: &TrustParams) -> Self {
        match satisfaction(c) {
            Ok(sat) => update_satisfaction(self, sat, p),
            Err(_) => update_unsure(self, p),
        }
    }
}

fn ewma(obs: f64, old: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * obs + lambda * old
}

pub fn update_satisfaction(state: PeerTrustState, sat: f64, p: &TrustParams) -> PeerTrustState {
    debug_assert!((0.0..=1.0).contains(&sat));
    let gamma = ewma(sat, state.gamma, p.lambda).clamp(0.0, 1.0);
    let alpha = ewma(0.0, state.alpha, p.lambda).clamp(0.0, 1.0);
    PeerTrustState {
        gamma,
        alpha,
        crd: compute_credibility(gamma, alpha, p),
    }
}

/// An Unsure answer carries no satisfaction sample, so only the unsure rate moves.
pub fn update_unsure(state: PeerTrustState, p: &TrustParams) -> PeerTrustState {
    let alpha = ewma(1.0, state.alpha, p.lambda).clamp(0.0, 1.0);
    PeerTrustState {
        gamma: state.gamma,
        alpha,
        crd: compute_credibility(state.gamma, alpha, p),
    }
}

pub fn compute_credibility(gamma: f64, alpha: f64, p: &TrustParams) -> f64 {
    ((1.0 - alpha).powf(p.phi) * (gamma - p.tau) + p.tau).clamp(0.0, 1.0)
}

/// Relative weights an observer gives to every member, itself included.
///
/// The observer's self-credibility is 1, which always clears `theta`, so
/// the normalizer is never zero and the result always sums to 1.
pub fn compute_weights(
    observer: NodeId,
    crds: &BTreeMap<NodeId, f64>,
    p: &TrustParams,
) -> BTreeMap<NodeId, f64> {
    let eligible = |id: &NodeId, c: f64| *id == observer || c >= p.theta;
    let total: f64 = 1.0
        + crds
            .iter()
            .filter(|(id, c)| **id != observer && eligible(id, **c))
            .map(|(_, c)| *c)
            .sum::<f64>();

    let mut weights: BTreeMap<NodeId, f64> = crds
        .iter()
        .filter(|(id, _)| **id != observer)
        .map(|(id, c)| (*id, if eligible(id, *c) { *c / total } else { 0.0 }))
        .collect();
    weights.insert(observer, 1.0 / total);
    weights
}

/// Probability that the next packet is normal after `k` of `n` were.
pub fn measure_instantaneous_trust(k: u64, n: u64) -> Result<f64, TrustError> {
    if k > n {
        return Err(TrustError::CountOverflow { k, n });
    }
    Ok((1.0 + k as f64) / (2.0 + n as f64))
}

/// What an observer knows about one monitored host.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HostTrustState {
    pub tr_ids: f64,
    pub normal_count: u64,
    pub packet_count: u64,
    pub blacklisted: bool,
}

impl HostTrustState {
    pub fn fresh(p: &TrustParams) -> Self {
        update_blacklist(
            Self {
                tr_ids: p.tau,
                normal_count: 0,
                packet_count: 0,
                blacklisted: false,
            },
            p,
        )
    }

    /// Records one interval's detector counts.
    pub fn record(&mut self, normal: u64, packets: u64) {
        debug_assert!(normal <= packets);
        self.normal_count += normal;
        self.packet_count += packets;
    }
}

pub fn update_accumulated_trust(
    state: HostTrustState,
    tr_inst: f64,
    p: &TrustParams,
) -> HostTrustState {
    HostTrustState {
        tr_ids: ewma(tr_inst, state.tr_ids, p.lambda),
        normal_count: 0,
        packet_count: 0,
        blacklisted: state.blacklisted,
    }
}

/// Weighted combination of the peers' accumulated scores for one host.
///
/// Peers without a score, or with zero weight, drop out and the remaining
/// weights are renormalized. If nothing remains, `own` is returned.
pub fn combine_trust(
    weights: &BTreeMap<NodeId, f64>,
    scores: &BTreeMap<NodeId, f64>,
    own: f64,
) -> f64 {
    let mut mass = 0.0;
    let mut acc = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (id, w) in weights {
        if *w <= 0.0 {
            continue;
        }
        if let Some(s) = scores.get(id) {
            mass += w;
            acc += w * s;
            lo = lo.min(*s);
            hi = hi.max(*s);
        }
    }
    if mass <= 0.0 {
        return own;
    }
    // Renormalizing can leave the hull by an ulp.
    (acc / mass).clamp(lo, hi)
}

pub fn update_blacklist(mut state: HostTrustState, p: &TrustParams) -> HostTrustState {
    state.blacklisted = state.tr_ids <= p.zeta;
    state
}

/// Mean credibility the network places on a node: its own self-credibility
/// of 1 plus what every other member reports, over the network size.
pub fn average_credibility(
    target: NodeId,
    reports: &BTreeMap<NodeId, f64>,
    n_total: usize,
) -> Result<f64, TrustError> {
    if n_total < 1 {
        return Err(TrustError::EmptyNetwork);
    }
    let others: f64 = reports
        .iter()
        .filter(|(id, _)| **id != target)
        .map(|(_, c)| *c)
        .sum();
    Ok((1.0 + others) / n_total as f64)
}
