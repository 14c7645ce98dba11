//! Hybrid proof-of-work/proof-of-stake leader election.
//!
//! A node first passes the credibility lottery: the digest of its identity,
//! the parent hash and its proposed payload must fall under the loose
//! target scaled by the credibility the network places on it. It then
//! searches a bounded counter space for a hash prefix below a target that
//! grows with its stake (certainty of its published host scores) and with
//! the time since it last led a block.
//!
//! Validation re-derives every input from the parent chain state, so a
//! block is valid or invalid for all validators alike.

use std::collections::BTreeMap;

use ed25519_dalek::SigningKey;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{
    compute_block_id, verify_transaction, Block, BlockHeader, ChainState, Transaction,
};
use crate::codec::{self, Writer};
use crate::crypto::{self, KeyRegistry};
use crate::trust_model::average_credibility;
use crate::{Hash, NodeId, ZERO_HASH};

#[derive(Debug, Error, PartialEq)]
pub enum ConsensusError {
    #[error("consensus parameter `{name}` = {value} outside {range}")]
    Param {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("no forks to resolve")]
    NoForks,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "RawConsensusParams")]
pub struct ConsensusParams {
    /// Loose target for the credibility lottery.
    pub d_cred: f64,
    /// Scale of the stake-and-time mining target.
    pub d_stake: f64,
    /// Prefix width compared against the mining target.
    pub r_bits: u32,
    /// Maximum counter value, i.e. hash attempts per round.
    pub q_max: u64,
    /// Cap on the elapsed-time factor.
    pub t_cap: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConsensusParams {
    d_cred: f64,
    d_stake: f64,
    r_bits: u32,
    q_max: u64,
    t_cap: u64,
}

impl TryFrom<RawConsensusParams> for ConsensusParams {
    type Error = ConsensusError;

    fn try_from(r: RawConsensusParams) -> Result<Self, Self::Error> {
        ConsensusParams::new(r.d_cred, r.d_stake, r.r_bits, r.q_max, r.t_cap)
    }
}

impl ConsensusParams {
    pub fn new(
        d_cred: f64,
        d_stake: f64,
        r_bits: u32,
        q_max: u64,
        t_cap: u64,
    ) -> Result<Self, ConsensusError> {
        let bad = |name, value, range| Err(ConsensusError::Param { name, value, range });
        if !(d_cred > 0.0 && d_cred <= 1.0) {
            return bad("d_cred", d_cred, "(0,1]");
        }
        if !(d_stake > 0.0 && d_stake.is_finite()) {
            return bad("d_stake", d_stake, "(0,inf)");
        }
        if !(8..=64).contains(&r_bits) {
            return bad("r_bits", r_bits as f64, "[8,64]");
        }
        if q_max == 0 {
            return bad("q_max", 0.0, "[1,inf)");
        }
        if t_cap == 0 {
            return bad("t_cap", 0.0, "[1,inf)");
        }
        Ok(Self {
            d_cred,
            d_stake,
            r_bits,
            q_max,
            t_cap,
        })
    }

    /// Largest admissible mining target, one prefix step below 1.
    pub fn target_ceiling(&self) -> f64 {
        1.0 - (-(self.r_bits.min(f64::MANTISSA_DIGITS) as f64)).exp2()
    }
}

/// Why a block was refused. Checks run in the order listed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rejection {
    UnknownLeader,
    UnknownParent,
    StaleGenTime,
    PayloadOrder,
    InvalidTransaction,
    NotEligible,
    TargetMismatch,
    CtrOutOfRange,
    MiningConditionFailed,
    BadBlockId,
    BadLeaderSignature,
}

impl Rejection {
    pub fn code(self) -> &'static str {
        match self {
            Rejection::UnknownLeader => "unknown_leader",
            Rejection::UnknownParent => "unknown_parent",
            Rejection::StaleGenTime => "stale_gen_time",
            Rejection::PayloadOrder => "payload_order",
            Rejection::InvalidTransaction => "invalid_transaction",
            Rejection::NotEligible => "not_eligible",
            Rejection::TargetMismatch => "target_mismatch",
            Rejection::CtrOutOfRange => "ctr_out_of_range",
            Rejection::MiningConditionFailed => "mining_condition_failed",
            Rejection::BadBlockId => "bad_block_id",
            Rejection::BadLeaderSignature => "bad_leader_signature",
        }
    }
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

/// Leading 64 bits of a digest as a fraction in [0, 1).
pub fn frac(h: &Hash) -> f64 {
    prefix_frac(h, 64)
}

/// Leading `bits` bits of a digest as a fraction in [0, 1).
///
/// Prefixes wider than 53 bits are truncated to 53 so the integer converts
/// to f64 exactly; otherwise an all-ones prefix would round up to 1.0.
pub fn prefix_frac(h: &Hash, bits: u32) -> f64 {
    debug_assert!((1..=64).contains(&bits));
    let bits = bits.min(f64::MANTISSA_DIGITS);
    let lead = u64::from_be_bytes(h[..8].try_into().unwrap()) >> (64 - bits);
    lead as f64 / (bits as f64).exp2()
}

pub fn g_value(id: NodeId, prev_hash: &Hash, payload: &[Transaction]) -> Hash {
    let mut w = Writer::new();
    w.u32(id.0).bytes(prev_hash);
    codec::encode_payload(&mut w, payload);
    crypto::sha256(&w.finish())
}

/// Credibility lottery. Returns the verdict and the digest that seeds mining.
pub fn check_eligibility(
    id: NodeId,
    d_cred: f64,
    avg_cred: f64,
    prev_hash: &Hash,
    payload: &[Transaction],
) -> (bool, Hash) {
    let g = g_value(id, prev_hash, payload);
    (frac(&g) < d_cred * avg_cred, g)
}

/// Binary entropy in bits, zero at the endpoints.
pub fn binary_entropy(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    -x * x.log2() - (1.0 - x) * (1.0 - x).log2()
}

/// Certainty carried by a published trust list.
pub fn compute_stake(trust: &[f64]) -> f64 {
    trust.iter().map(|x| 1.0 - binary_entropy(*x)).sum()
}

pub fn compute_target(params: &ConsensusParams, stake: f64, time_since: u64) -> f64 {
    let time = time_since.clamp(1, params.t_cap) as f64;
    (params.d_stake * stake * time).min(params.target_ceiling())
}

pub fn mining_hash(g: &Hash, gen_time: u64, ctr: u64) -> Hash {
    let mut buf = [0u8; 48];
    buf[..32].copy_from_slice(g);
    buf[32..40].copy_from_slice(&gen_time.to_be_bytes());
    buf[40..].copy_from_slice(&ctr.to_be_bytes());
    crypto::sha256(&buf)
}

pub fn mining_condition(g: &Hash, gen_time: u64, ctr: u64, target_v: f64, r_bits: u32) -> bool {
    prefix_frac(&mining_hash(g, gen_time, ctr), r_bits) < target_v
}

/// Inputs to one node's election, as every validator would re-derive them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningContext {
    pub g_value: Hash,
    pub avg_cred: f64,
    pub stake: f64,
    pub time_since: u64,
    pub target_v: f64,
}

/// Membership and parameters shared by every validator of a run.
pub struct ValidationEnv<'a> {
    pub params: &'a ConsensusParams,
    pub registry: &'a KeyRegistry,
    /// Credibility assumed for observers with nothing on chain yet.
    pub tau: f64,
}

impl ValidationEnv<'_> {
    /// Average credibility of `id` from committed state at `round`.
    pub fn avg_cred(&self, parent: &ChainState, id: NodeId, round: u64) -> f64 {
        let on_chain = parent.credibility_of(id);
        let reports: BTreeMap<NodeId, f64> = self
            .registry
            .admitted(round)
            .filter(|o| *o != id)
            .map(|o| (o, on_chain.get(&o).copied().unwrap_or(self.tau)))
            .collect();
        average_credibility(id, &reports, self.registry.network_size(round).max(1))
            .expect("network size clamped to 1")
    }

    /// Leader stake: its latest trust list in the parent state, superseded
    /// by its own transaction in the payload if it carries one.
    pub fn stake(&self, parent: &ChainState, id: NodeId, payload: &[Transaction]) -> f64 {
        payload
            .iter()
            .find(|tx| tx.ids_id == id)
            .map(|tx| tx.trust.as_slice())
            .or_else(|| parent.trust_list(id))
            .map(compute_stake)
            .unwrap_or(0.0)
    }

    pub fn time_since(&self, parent: &ChainState, id: NodeId, gen_time: u64) -> u64 {
        let last = parent.last_led.get(&id).copied().unwrap_or(0);
        gen_time.saturating_sub(last).clamp(1, self.params.t_cap)
    }

    pub fn context(
        &self,
        parent: &ChainState,
        id: NodeId,
        gen_time: u64,
        payload: &[Transaction],
    ) -> MiningContext {
        let avg_cred = self.avg_cred(parent, id, gen_time);
        let g_value = g_value(id, &parent.tip, payload);
        let stake = self.stake(parent, id, payload);
        let time_since = self.time_since(parent, id, gen_time);
        MiningContext {
            g_value,
            avg_cred,
            stake,
            time_since,
            target_v: compute_target(self.params, stake, time_since),
        }
    }
}

#[derive(Debug, Clone)]
pub enum MineOutcome {
    Mined { block: Block, attempts: u64 },
    Exhausted { attempts: u64 },
}

impl MineOutcome {
    pub fn attempts(&self) -> u64 {
        match self {
            MineOutcome::Mined { attempts, .. } | MineOutcome::Exhausted { attempts } => *attempts,
        }
    }
}

/// Bounded counter search. Exhaustion is a normal outcome.
#[allow(clippy::too_many_arguments)]
pub fn generate_block(
    ctx: &MiningContext,
    leader: NodeId,
    gen_time: u64,
    prev_hash: Hash,
    params: &ConsensusParams,
    payload: Vec<Transaction>,
    key: &SigningKey,
) -> MineOutcome {
    for ctr in 1..=params.q_max {
        if mining_condition(&ctx.g_value, gen_time, ctr, ctx.target_v, params.r_bits) {
            let block = Block {
                header: BlockHeader {
                    block_id: ZERO_HASH,
                    leader_id: leader,
                    gen_time,
                    prev_hash,
                    ctr,
                    target_v: ctx.target_v,
                },
                transactions: payload,
                leader_signature: [0u8; 64],
            }
            .seal(key);
            return MineOutcome::Mined {
                block,
                attempts: ctr,
            };
        }
    }
    MineOutcome::Exhausted {
        attempts: params.q_max,
    }
}

/// Leader weight of an accepted block, the fork-choice increment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeaderWeight {
    pub stake: f64,
    pub avg_cred: f64,
    pub time_since: u64,
}

impl LeaderWeight {
    pub fn score(&self) -> f64 {
        self.stake * self.avg_cred
    }
}

/// Full validation of `b` on top of `parent`.
pub fn validate_block(
    b: &Block,
    parent: &ChainState,
    env: &ValidationEnv,
) -> Result<LeaderWeight, Rejection> {
    let h = &b.header;
    let leader = h.leader_id;
    if !env.registry.is_admitted(leader, h.gen_time) {
        return Err(Rejection::UnknownLeader);
    }
    if h.prev_hash != parent.tip {
        return Err(Rejection::UnknownParent);
    }
    if h.gen_time <= parent.tip_time {
        return Err(Rejection::StaleGenTime);
    }
    if b.transactions
        .windows(2)
        .any(|w| w[0].ids_id >= w[1].ids_id)
    {
        return Err(Rejection::PayloadOrder);
    }
    for tx in &b.transactions {
        let newer = parent
            .latest
            .get(&tx.ids_id)
            .is_none_or(|old| tx.round > old.round);
        if !newer
            || tx.round >= h.gen_time
            || !env.registry.is_admitted(tx.ids_id, tx.round)
            || !verify_transaction(tx, env.registry)
        {
            return Err(Rejection::InvalidTransaction);
        }
    }

    let ctx = env.context(parent, leader, h.gen_time, &b.transactions);
    if frac(&ctx.g_value) >= env.params.d_cred * ctx.avg_cred {
        return Err(Rejection::NotEligible);
    }
    if ctx.target_v.to_bits() != h.target_v.to_bits() {
        return Err(Rejection::TargetMismatch);
    }
    if h.ctr == 0 || h.ctr > env.params.q_max {
        return Err(Rejection::CtrOutOfRange);
    }
    if !mining_condition(
        &ctx.g_value,
        h.gen_time,
        h.ctr,
        ctx.target_v,
        env.params.r_bits,
    ) {
        return Err(Rejection::MiningConditionFailed);
    }
    if compute_block_id(h, &b.transactions) != h.block_id {
        return Err(Rejection::BadBlockId);
    }
    if !env
        .registry
        .verify(leader, &codec::block_signed_bytes(b), &b.leader_signature)
    {
        return Err(Rejection::BadLeaderSignature);
    }
    Ok(LeaderWeight {
        stake: ctx.stake,
        avg_cred: ctx.avg_cred,
        time_since: ctx.time_since,
    })
}

/// A competing chain suffix, summarized by its tip and accumulated score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForkSummary {
    pub tip: Hash,
    pub score: f64,
}

/// Validates a suffix on top of `base` and sums its leader weights.
pub fn score_fork(
    base: &ChainState,
    suffix: &[Block],
    env: &ValidationEnv,
) -> Result<ForkSummary, (usize, Rejection)> {
    let mut state = base.clone();
    let mut score = 0.0;
    for (i, b) in suffix.iter().enumerate() {
        let w = validate_block(b, &state, env).map_err(|r| (i, r))?;
        score += w.score();
        state.apply(b, b.hash());
    }
    Ok(ForkSummary {
        tip: state.tip,
        score,
    })
}

/// Index of the fork to work on: highest accumulated stake x credibility,
/// ties to the smallest tip hash.
pub fn resolve(forks: &[ForkSummary]) -> Result<usize, ConsensusError> {
    forks
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.score.total_cmp(&b.score).then_with(|| b.tip.cmp(&a.tip)))
        .map(|(i, _)| i)
        .ok_or(ConsensusError::NoForks)
}
