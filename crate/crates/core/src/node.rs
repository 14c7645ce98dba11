//! One simulated CIDN member: challenge-based peer credibility, host trust
//! diffusion through the trust-chain, block production, and the adversarial
//! behaviours (Sybil fakes, betrayal, collusion).

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::net::Ipv4Addr;
use std::sync::Arc;

use bytes::Bytes;
use ed25519_dalek::SigningKey;
use rand::Rng;

use crate::chain::{
    build_transaction, genesis, verify_transaction, Block, ChainState, EvidenceRecord, Transaction,
    TxContent,
};
use crate::codec::{self, Reader, Writer};
use crate::config::{AnswerStrategy, Identity, Role, ScoreStrategy};
use crate::consensus::{
    frac, generate_block, validate_block, LeaderWeight, MineOutcome, Rejection, ValidationEnv,
};
use crate::crypto::{self, KeyRegistry, SignatureBytes};
use crate::net_sim::{host_traffic, Message, MessageKind, TrafficModel};
use crate::rng::{self, Purpose, StreamRng};
use crate::trust_model::{
    combine_trust, compute_weights, measure_instantaneous_trust, update_accumulated_trust,
    update_blacklist, Answer, ChallengeOutcome, HostTrustState, PeerTrustState, TrustParams,
};
use crate::{Hash, NodeId};

/// A block that passed full validation, with the state it produces.
#[derive(Debug)]
pub struct ValidBlock {
    pub block: Arc<Block>,
    pub hash: Hash,
    pub state: Arc<ChainState>,
    pub weight: LeaderWeight,
    /// Sum of leader weights from genesis up to and including this block.
    pub cum_score: f64,
    pub height: u64,
}

/// Decoded-message memo keyed by the leading 32 bytes (a transaction or
/// block id) and confirmed by full byte equality, so a hit is exact.
type CacheSlot<T> = Vec<(Bytes, Option<Arc<T>>)>;

struct DecodeCache<T> {
    map: HashMap<Hash, CacheSlot<T>>,
}

impl<T> Default for DecodeCache<T> {
    fn default() -> Self {
        Self {
            map: HashMap::new(),
        }
    }
}

impl<T> DecodeCache<T> {
    fn get_or(&mut self, bytes: &Bytes, decode: impl FnOnce(&[u8]) -> Option<T>) -> Option<Arc<T>> {
        let key = if bytes.len() >= 32 {
            bytes[..32].try_into().unwrap()
        } else {
            crypto::sha256(bytes)
        };
        let slot = self.map.entry(key).or_default();
        if let Some((_, v)) = slot.iter().find(|(b, _)| b == bytes) {
            return v.clone();
        }
        let v = decode(bytes).map(Arc::new);
        slot.push((bytes.clone(), v.clone()));
        v
    }

    fn clear(&mut self) {
        self.map.clear();
    }
}

/// Every block any member has validated during a run.
///
/// Validity is a pure function of the block bytes: the parent state is
/// fixed by `prev_hash`. Members therefore share verdicts instead of
/// re-running signature and mining checks once per receiver.
pub struct BlockStore {
    genesis: Arc<ValidBlock>,
    valid: HashMap<Hash, Arc<ValidBlock>>,
    order: Vec<Hash>,
    verdicts: HashMap<(Hash, SignatureBytes), Result<Hash, Rejection>>,
    blocks: DecodeCache<Block>,
    txs: DecodeCache<Transaction>,
}

impl Default for BlockStore {
    fn default() -> Self {
        Self::new()
    }
}

impl BlockStore {
    pub fn new() -> Self {
        let g = genesis();
        let hash = g.hash();
        let entry = Arc::new(ValidBlock {
            state: Arc::new(ChainState::from_genesis(&g)),
            block: Arc::new(g),
            hash,
            weight: LeaderWeight {
                stake: 0.0,
                avg_cred: 0.0,
                time_since: 0,
            },
            cum_score: 0.0,
            height: 0,
        });
        Self {
            valid: HashMap::from([(hash, entry.clone())]),
            order: vec![hash],
            genesis: entry,
            verdicts: HashMap::new(),
            blocks: DecodeCache::default(),
            txs: DecodeCache::default(),
        }
    }

    pub fn genesis(&self) -> &Arc<ValidBlock> {
        &self.genesis
    }

    pub fn get(&self, hash: &Hash) -> Option<&Arc<ValidBlock>> {
        self.valid.get(hash)
    }

    /// Valid blocks in the order they were first accepted (parents first).
    pub fn iter(&self) -> impl Iterator<Item = &Arc<ValidBlock>> {
        self.order.iter().map(|h| &self.valid[h])
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Drops decode memos; called once per round since every copy of a
    /// message is delivered in the same round.
    pub fn begin_round(&mut self) {
        self.blocks.clear();
        self.txs.clear();
    }

    fn decode_block(&mut self, bytes: &Bytes) -> Option<Arc<Block>> {
        self.blocks.get_or(bytes, |b| codec::decode_block(b).ok())
    }

    /// Decodes and authenticates a gossiped transaction.
    fn decode_tx(&mut self, bytes: &Bytes, registry: &KeyRegistry) -> Option<Arc<Transaction>> {
        self.txs.get_or(bytes, |b| {
            codec::decode_tx(b).ok().filter(|tx| {
                registry.is_admitted(tx.ids_id, tx.round) && verify_transaction(tx, registry)
            })
        })
    }

    /// Validates `block` on top of its (already accepted) parent.
    pub fn admit(
        &mut self,
        block: Arc<Block>,
        env: &ValidationEnv,
    ) -> Result<Arc<ValidBlock>, Rejection> {
        let hash = block.hash();
        let key = (hash, block.leader_signature);
        if let Some(v) = self.verdicts.get(&key) {
            return v.map(|h| self.valid[&h].clone());
        }
        let Some(parent) = self.valid.get(&block.header.prev_hash).cloned() else {
            return Err(Rejection::UnknownParent);
        };
        let verdict = validate_block(&block, &parent.state, env);
        let out = match verdict {
            Ok(weight) => {
                let entry = self.valid.entry(hash).or_insert_with(|| {
                    self.order.push(hash);
                    Arc::new(ValidBlock {
                        state: Arc::new(parent.state.successor(&block, hash)),
                        block,
                        hash,
                        weight,
                        cum_score: parent.cum_score + weight.score(),
                        height: parent.height + 1,
                    })
                });
                Ok(entry.clone())
            }
            Err(r) => Err(r),
        };
        self.verdicts
            .insert(key, out.as_ref().map(|v| v.hash).map_err(|r| *r));
        out
    }
}

/// Fork-choice order: accumulated score, then the smaller tip hash wins.
#[derive(Debug, Clone, Copy, PartialEq)]
struct LeafKey {
    score: f64,
    tip: Hash,
}

impl Eq for LeafKey {}

impl Ord for LeafKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.tip.cmp(&self.tip))
    }
}

impl PartialOrd for LeafKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Run-wide inputs every member reads during a round.
pub struct RoundCtx<'a> {
    pub round: u64,
    pub trust: &'a TrustParams,
    pub env: &'a ValidationEnv<'a>,
    pub challenge_prob: f64,
    pub broadcast_alerts: bool,
    pub store: &'a mut BlockStore,
}

/// A message a member wants sent; `to: None` means every other member.
#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub kind: MessageKind,
    pub to: Option<NodeId>,
    pub payload: Bytes,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ElectionTally {
    pub samples: u64,
    pub stake: f64,
    pub avg_cred: f64,
    pub time: f64,
    /// Sum of per-round stake x avg_cred x time.
    pub weight: f64,
}

impl ElectionTally {
    pub fn mean(&self, v: f64) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            v / self.samples as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NodeStats {
    pub invalid_blocks: u64,
    pub reorgs: u64,
    pub blocks_mined: u64,
    pub hash_attempts: u64,
    pub txs_published: u64,
    pub alerts_received: u64,
    pub election: ElectionTally,
}

/// Per-round activity a driver may aggregate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundReport {
    pub mined: Option<Hash>,
    pub invalid_blocks: u64,
    pub reorged: bool,
    pub combined: bool,
}

struct MonitoredHost {
    index: usize,
    ip: Ipv4Addr,
    model: TrafficModel,
    state: HostTrustState,
    rng: StreamRng,
    evidence: EvidenceRecord,
}

struct Pending {
    target: NodeId,
    expected: f64,
    issued: u64,
}

/// Answer to a challenge about an item whose true priority is `expected`.
pub fn respond_to_challenge(
    strategy: AnswerStrategy,
    know_prob: f64,
    expected: f64,
    rng: &mut impl Rng,
) -> Answer {
    match strategy {
        AnswerStrategy::Truthful => {
            if rng.gen_bool(know_prob) {
                Answer::Priority(expected)
            } else {
                Answer::Unsure
            }
        }
        AnswerStrategy::Invert => Answer::Priority(1.0 - expected),
        AnswerStrategy::Extreme => Answer::Priority(if expected < 0.5 { 1.0 } else { 0.0 }),
        AnswerStrategy::Random => Answer::Priority(rng.gen::<f64>()),
        AnswerStrategy::Unsure => Answer::Unsure,
    }
}

/// Committed view the adversaries distort: the mean of every published
/// score per host and per peer in `state`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetworkView {
    pub host_means: BTreeMap<Ipv4Addr, f64>,
    pub cred_means: BTreeMap<NodeId, f64>,
}

impl NetworkView {
    pub fn from_state(state: &ChainState) -> Self {
        let mut hosts: BTreeMap<Ipv4Addr, (f64, u32)> = BTreeMap::new();
        let mut creds: BTreeMap<NodeId, (f64, u32)> = BTreeMap::new();
        for tx in state.latest.values() {
            for (h, t) in tx.hosts.iter().zip(&tx.trust) {
                let e = hosts.entry(*h).or_default();
                e.0 += t;
                e.1 += 1;
            }
            for (p, c) in tx.peers.iter().zip(&tx.creds) {
                let e = creds.entry(*p).or_default();
                e.0 += c;
                e.1 += 1;
            }
        }
        let mean = |(s, n): (f64, u32)| s / n as f64;
        Self {
            host_means: hosts.into_iter().map(|(k, v)| (k, mean(v))).collect(),
            cred_means: creds.into_iter().map(|(k, v)| (k, mean(v))).collect(),
        }
    }
}

/// The false lists an active adversary publishes. Signatures stay honest;
/// only content is distorted. Allies are always rated fully credible.
pub fn adversarial_transaction(
    honest: &TxContent,
    strategy: ScoreStrategy,
    allies: &BTreeSet<NodeId>,
    view: &NetworkView,
    interval_len: u64,
    fabricate_hosts: bool,
) -> TxContent {
    let mut out = honest.clone();
    for (p, c) in out.peers.iter().zip(out.creds.iter_mut()) {
        *c = if allies.contains(p) {
            1.0
        } else {
            strategy.apply(*c)
        };
    }
    if fabricate_hosts {
        // Nothing monitored: claim the inverse of what the network believes.
        out.hosts = view.host_means.keys().copied().collect();
        out.trust = view
            .host_means
            .values()
            .map(|m| strategy.apply(*m))
            .collect();
        out.evidence = Vec::new();
        for (p, c) in out.peers.iter().zip(out.creds.iter_mut()) {
            if !allies.contains(p) {
                *c = strategy.apply(view.cred_means.get(p).copied().unwrap_or(1.0));
            }
        }
    } else {
        for (h, t) in out.hosts.iter().zip(out.trust.iter_mut()) {
            *t = strategy.apply(view.host_means.get(h).copied().unwrap_or(*t));
        }
    }
    out.evidence = out
        .hosts
        .iter()
        .zip(&out.trust)
        .map(|(h, t)| EvidenceRecord {
            host: *h,
            alert_digests: Vec::new(),
            normal: (t * interval_len as f64).round() as u64,
            packets: interval_len,
        })
        .collect();
    out
}

pub fn alert_digest(id: NodeId, ip: Ipv4Addr, round: u64, flagged: u64) -> Hash {
    crypto::sha256_parts(&[
        b"alert",
        &id.0.to_be_bytes(),
        &ip.octets(),
        &round.to_be_bytes(),
        &flagged.to_be_bytes(),
    ])
}

fn encode_challenge(nonce: u64, priority: f64) -> Bytes {
    let mut w = Writer::new();
    w.u64(nonce).f64(priority);
    Bytes::from(w.finish())
}

fn decode_challenge(b: &[u8]) -> Option<(u64, f64)> {
    let mut r = Reader::new(b);
    let v = (r.u64().ok()?, r.f64().ok()?);
    r.finish().ok()?;
    (0.0..=1.0).contains(&v.1).then_some(v)
}

fn encode_response(nonce: u64, a: Answer) -> Bytes {
    let mut w = Writer::new();
    w.u64(nonce);
    match a {
        Answer::Priority(p) => w.u32(0).f64(p),
        Answer::Unsure => w.u32(1).f64(0.0),
    };
    Bytes::from(w.finish())
}

fn decode_response(b: &[u8]) -> Option<(u64, Answer)> {
    let mut r = Reader::new(b);
    let nonce = r.u64().ok()?;
    let tag = r.u32().ok()?;
    let p = r.f64().ok()?;
    r.finish().ok()?;
    match tag {
        0 if (0.0..=1.0).contains(&p) => Some((nonce, Answer::Priority(p))),
        1 => Some((nonce, Answer::Unsure)),
        _ => None,
    }
}

/// How long an unanswered challenge is kept before it is forgotten.
const CHALLENGE_TTL: u64 = 8;

pub struct Node {
    pub id: NodeId,
    pub role: Role,
    pub joined: u64,
    know_prob: f64,
    key: SigningKey,
    seed: u64,
    /// Members this node never distrusts (coalition or fellow fakes).
    allies: BTreeSet<NodeId>,
    private_fork: bool,
    hosts: Vec<MonitoredHost>,
    peers: BTreeMap<NodeId, PeerTrustState>,
    challenge_rngs: HashMap<NodeId, StreamRng>,
    response_rngs: HashMap<NodeId, StreamRng>,
    outstanding: BTreeMap<u64, Pending>,
    next_nonce: u64,
    pool: BTreeMap<NodeId, Arc<Transaction>>,
    own_tx: Option<Arc<Transaction>>,
    last_published: Option<TxContent>,
    // Block tree view.
    known: HashSet<Hash>,
    followable: HashSet<Hash>,
    leaves: BTreeSet<LeafKey>,
    orphans: HashMap<Hash, Vec<Arc<Block>>>,
    canonical: Vec<Hash>,
    tip: Arc<ValidBlock>,
    combined_at: Hash,
    own_blocks: Vec<Arc<Block>>,
    synced: bool,
    pub stats: NodeStats,
}

impl Node {
    /// `hosts` lists (index, ip, p_mal) of the hosts this member monitors.
    pub fn new(
        identity: &Identity,
        seed: u64,
        hosts: &[(usize, Ipv4Addr, f64)],
        allies: BTreeSet<NodeId>,
        trust: &TrustParams,
        store: &BlockStore,
    ) -> Self {
        let id = identity.id;
        let g = store.genesis().clone();
        let private_fork = matches!(
            identity.role,
            Role::Colluder {
                private_fork: true,
                ..
            }
        );
        Self {
            id,
            role: identity.role,
            joined: identity.joined,
            know_prob: identity.know_prob,
            key: crypto::derive_signing_key(seed, id),
            seed,
            allies,
            private_fork,
            hosts: hosts
                .iter()
                .map(|&(index, ip, p_mal)| MonitoredHost {
                    index,
                    ip,
                    model: TrafficModel {
                        p_mal,
                        false_positive: identity.false_positive,
                        false_negative: identity.false_negative,
                    },
                    state: HostTrustState::fresh(trust),
                    rng: rng::stream(seed, Purpose::Traffic, id.0, index as u32),
                    evidence: EvidenceRecord {
                        host: ip,
                        alert_digests: Vec::new(),
                        normal: 0,
                        packets: 0,
                    },
                })
                .collect(),
            peers: BTreeMap::new(),
            challenge_rngs: HashMap::new(),
            response_rngs: HashMap::new(),
            outstanding: BTreeMap::new(),
            next_nonce: 0,
            pool: BTreeMap::new(),
            own_tx: None,
            last_published: None,
            known: HashSet::from([g.hash]),
            followable: HashSet::from([g.hash]),
            leaves: BTreeSet::from([LeafKey {
                score: 0.0,
                tip: g.hash,
            }]),
            orphans: HashMap::new(),
            canonical: vec![g.hash],
            combined_at: g.hash,
            tip: g,
            own_blocks: Vec::new(),
            synced: false,
            stats: NodeStats::default(),
        }
    }

    pub fn verifying_key(&self) -> ed25519_dalek::VerifyingKey {
        self.key.verifying_key()
    }

    pub fn is_active(&self, round: u64) -> bool {
        round >= self.joined
    }

    pub fn tip(&self) -> &Arc<ValidBlock> {
        &self.tip
    }

    /// Canonical chain as block hashes from genesis.
    pub fn canonical(&self) -> &[Hash] {
        &self.canonical
    }

    pub fn peer_states(&self) -> &BTreeMap<NodeId, PeerTrustState> {
        &self.peers
    }

    pub fn credibility_of(&self, peer: NodeId) -> Option<f64> {
        self.peers.get(&peer).map(|s| s.crd)
    }

    /// Current Eq. (4) weight map.
    pub fn weights(&self, trust: &TrustParams) -> BTreeMap<NodeId, f64> {
        compute_weights(self.id, &self.crds(), trust)
    }

    /// (host index, trust state) for every monitored host.
    pub fn host_states(&self) -> impl Iterator<Item = (usize, &HostTrustState)> {
        self.hosts.iter().map(|h| (h.index, &h.state))
    }

    pub fn blacklist(&self) -> BTreeSet<Ipv4Addr> {
        self.hosts
            .iter()
            .filter(|h| h.state.blacklisted)
            .map(|h| h.ip)
            .collect()
    }

    fn crds(&self) -> BTreeMap<NodeId, f64> {
        self.peers.iter().map(|(id, s)| (*id, s.crd)).collect()
    }

    /// One round of Alg. 2. `deliveries` are the messages handed over by
    /// the network at the end of the previous round.
    pub fn run_round(
        &mut self,
        ctx: &mut RoundCtx,
        deliveries: &[Message],
    ) -> (Vec<Outgoing>, RoundReport) {
        let round = ctx.round;
        let mut out = Vec::new();
        let mut report = RoundReport::default();
        if !self.is_active(round) {
            return (out, report);
        }
        self.admit_peers(ctx);
        if !self.synced {
            self.sync(ctx);
        }

        // (1) Blocks, then gossiped transactions.
        let reorgs_before = self.stats.reorgs;
        let own = std::mem::take(&mut self.own_blocks);
        for b in own {
            self.ingest_block(b, ctx, &mut report);
        }
        for m in deliveries
            .iter()
            .filter(|m| m.kind == MessageKind::BlockProposal)
        {
            match ctx.store.decode_block(&m.payload) {
                Some(b) => self.ingest_block(b, ctx, &mut report),
                None => report.invalid_blocks += 1,
            }
        }
        self.stats.invalid_blocks += report.invalid_blocks;
        self.adopt_best(ctx.store);
        report.reorged = self.stats.reorgs > reorgs_before;
        if let Some(tx) = self.own_tx.take() {
            self.pool.insert(self.id, tx);
        }
        for m in deliveries
            .iter()
            .filter(|m| m.kind == MessageKind::Transaction)
        {
            if let Some(tx) = ctx.store.decode_tx(&m.payload, ctx.env.registry) {
                let newer = self
                    .pool
                    .get(&tx.ids_id)
                    .is_none_or(|old| tx.round > old.round);
                if newer {
                    self.pool.insert(tx.ids_id, tx);
                }
            }
        }
        self.stats.alerts_received += deliveries
            .iter()
            .filter(|m| m.kind == MessageKind::Alert)
            .count() as u64;

        // (2) Adopt-then-combine over the newest committed block.
        if self.tip.hash != self.combined_at {
            self.combined_at = self.tip.hash;
            self.combine(ctx.trust);
            report.combined = true;
        }

        // (3) Blacklist.
        for h in &mut self.hosts {
            h.state = update_blacklist(h.state, ctx.trust);
        }

        // (4) Local traffic for hosts still let through.
        for h in &mut self.hosts {
            if h.state.blacklisted {
                h.evidence = EvidenceRecord {
                    host: h.ip,
                    alert_digests: Vec::new(),
                    normal: 0,
                    packets: 0,
                };
                continue;
            }
            let (k, n) = host_traffic(&h.model, ctx.trust.interval_len, &mut h.rng);
            h.state.record(k, n);
            let inst = measure_instantaneous_trust(h.state.normal_count, h.state.packet_count)
                .expect("detector counts are consistent");
            h.state = update_blacklist(
                update_accumulated_trust(h.state, inst, ctx.trust),
                ctx.trust,
            );
            let alert_digests = if k < n {
                vec![alert_digest(self.id, h.ip, round, n - k)]
            } else {
                Vec::new()
            };
            if ctx.broadcast_alerts {
                for d in &alert_digests {
                    out.push(Outgoing {
                        kind: MessageKind::Alert,
                        to: None,
                        payload: Bytes::copy_from_slice(d),
                    });
                }
            }
            h.evidence = EvidenceRecord {
                host: h.ip,
                alert_digests,
                normal: k,
                packets: n,
            };
        }

        // (5) Answer, challenge, evaluate.
        self.challenges(ctx, deliveries, &mut out);

        // (6) Publish on change.
        if let Some(tx) = self.publish(ctx) {
            let bytes = Bytes::from(codec::tx_bytes(&tx));
            // Like any other copy, our own transaction is pooled next round.
            self.own_tx = Some(Arc::new(tx));
            out.push(Outgoing {
                kind: MessageKind::Transaction,
                to: None,
                payload: bytes,
            });
        }

        // (7) Election.
        if let Some(block) = self.mine(ctx) {
            report.mined = Some(block.hash());
            out.push(Outgoing {
                kind: MessageKind::BlockProposal,
                to: None,
                payload: Bytes::from(codec::block_bytes(&block)),
            });
            self.own_blocks.push(Arc::new(block));
        }
        (out, report)
    }

    fn admit_peers(&mut self, ctx: &RoundCtx) {
        for p in ctx.env.registry.admitted(ctx.round) {
            if p != self.id {
                self.peers
                    .entry(p)
                    .or_insert_with(|| PeerTrustState::fresh(ctx.trust));
            }
        }
    }

    /// A late joiner starts from every block validated so far.
    fn sync(&mut self, ctx: &mut RoundCtx) {
        self.synced = true;
        let all: Vec<Arc<ValidBlock>> = ctx.store.iter().skip(1).cloned().collect();
        for v in all {
            self.accept(&v, ctx.store);
        }
    }

    fn ingest_block(&mut self, b: Arc<Block>, ctx: &mut RoundCtx, report: &mut RoundReport) {
        let hash = b.hash();
        if self.known.contains(&hash) {
            return;
        }
        if !self.known.contains(&b.header.prev_hash) {
            self.fetch_ancestors(b.header.prev_hash, ctx.store);
        }
        if !self.known.contains(&b.header.prev_hash) {
            let waiting = self.orphans.entry(b.header.prev_hash).or_default();
            if !waiting.iter().any(|w| w.hash() == hash) {
                waiting.push(b);
            }
            return;
        }
        let mut queue = vec![b];
        while let Some(b) = queue.pop() {
            match ctx.store.admit(b, ctx.env) {
                Ok(v) => {
                    self.accept(&v, ctx.store);
                    if let Some(children) = self.orphans.remove(&v.hash) {
                        queue.extend(children);
                    }
                }
                Err(_) => report.invalid_blocks += 1,
            }
        }
    }

    /// Pulls missing ancestors from the peer that relayed a block. That
    /// peer built on or accepted every ancestor, so each one is already in
    /// the shared store with its verdict; the pull itself is lossless.
    fn fetch_ancestors(&mut self, mut hash: Hash, store: &BlockStore) {
        let mut path = Vec::new();
        while !self.known.contains(&hash) {
            let Some(v) = store.get(&hash) else { return };
            hash = v.block.header.prev_hash;
            path.push(v.clone());
        }
        for v in path.into_iter().rev() {
            self.accept(&v, store);
        }
    }

    fn accept(&mut self, v: &ValidBlock, store: &BlockStore) {
        if !self.known.insert(v.hash) {
            return;
        }
        let parent = v.block.header.prev_hash;
        let follow = self.followable.contains(&parent)
            && (!self.private_fork || self.allies.contains(&v.block.header.leader_id));
        if follow {
            self.followable.insert(v.hash);
            let p = &store
                .get(&parent)
                .expect("parents are stored first")
                .cum_score;
            self.leaves.remove(&LeafKey {
                score: *p,
                tip: parent,
            });
            self.leaves.insert(LeafKey {
                score: v.cum_score,
                tip: v.hash,
            });
        }
    }

    /// Moves the canonical chain to the best followable leaf.
    fn adopt_best(&mut self, store: &BlockStore) {
        let best = self
            .leaves
            .last()
            .expect("genesis is always a candidate")
            .tip;
        if best == self.tip.hash {
            return;
        }
        let mut path = Vec::new();
        let mut cur = store
            .get(&best)
            .expect("accepted blocks are stored")
            .clone();
        while self.canonical.get(cur.height as usize) != Some(&cur.hash) {
            path.push(cur.hash);
            cur = store
                .get(&cur.block.header.prev_hash)
                .expect("parent stored")
                .clone();
        }
        let keep = cur.height as usize + 1;
        if keep < self.canonical.len() {
            self.stats.reorgs += 1;
        }
        self.canonical.truncate(keep);
        self.canonical.extend(path.into_iter().rev());
        self.tip = store.get(&best).unwrap().clone();
    }

    fn combine(&mut self, trust: &TrustParams) {
        if self.tip.block.is_genesis() || self.hosts.is_empty() {
            return;
        }
        let weights = compute_weights(self.id, &self.crds(), trust);
        let block = self.tip.block.clone();
        for h in &mut self.hosts {
            let mut scores: BTreeMap<NodeId, f64> = block
                .transactions
                .iter()
                .filter(|tx| tx.ids_id != self.id)
                .filter_map(|tx| {
                    tx.hosts
                        .iter()
                        .position(|ip| *ip == h.ip)
                        .map(|i| (tx.ids_id, tx.trust[i]))
                })
                .collect();
            scores.insert(self.id, h.state.tr_ids);
            h.state.tr_ids = combine_trust(&weights, &scores, h.state.tr_ids);
        }
    }

    fn challenges(&mut self, ctx: &mut RoundCtx, deliveries: &[Message], out: &mut Vec<Outgoing>) {
        let round = ctx.round;
        let seed = self.seed;
        let me = self.id;
        let answer = self.role.answer_at(round);
        for m in deliveries
            .iter()
            .filter(|m| m.kind == MessageKind::Challenge && m.sender != me)
        {
            let Some((nonce, expected)) = decode_challenge(&m.payload) else {
                continue;
            };
            let rng = self
                .response_rngs
                .entry(m.sender)
                .or_insert_with(|| rng::stream(seed, Purpose::Response, me.0, m.sender.0));
            let a = respond_to_challenge(answer, self.know_prob, expected, rng);
            out.push(Outgoing {
                kind: MessageKind::ChallengeResponse,
                to: Some(m.sender),
                payload: encode_response(nonce, a),
            });
        }

        if !matches!(self.role, Role::Fake { .. }) {
            let targets: Vec<NodeId> = self.peers.keys().copied().collect();
            for p in targets {
                let rng = self
                    .challenge_rngs
                    .entry(p)
                    .or_insert_with(|| rng::stream(seed, Purpose::Challenge, me.0, p.0));
                if !rng.gen_bool(ctx.challenge_prob) {
                    continue;
                }
                let expected: f64 = rng.gen();
                let nonce = self.next_nonce;
                self.next_nonce += 1;
                self.outstanding.insert(
                    nonce,
                    Pending {
                        target: p,
                        expected,
                        issued: round,
                    },
                );
                out.push(Outgoing {
                    kind: MessageKind::Challenge,
                    to: Some(p),
                    payload: encode_challenge(nonce, expected),
                });
            }
        }

        for m in deliveries
            .iter()
            .filter(|m| m.kind == MessageKind::ChallengeResponse)
        {
            let Some((nonce, actual)) = decode_response(&m.payload) else {
                continue;
            };
            let matches = self
                .outstanding
                .get(&nonce)
                .is_some_and(|p| p.target == m.sender);
            if !matches {
                continue;
            }
            let pending = self.outstanding.remove(&nonce).unwrap();
            let state = self
                .peers
                .entry(pending.target)
                .or_insert_with(|| PeerTrustState::fresh(ctx.trust));
            *state = state.observe(
                &ChallengeOutcome {
                    expected: pending.expected,
                    actual,
                },
                ctx.trust,
            );
        }
        self.outstanding
            .retain(|_, p| p.issued + CHALLENGE_TTL > round);
    }

    fn honest_content(&self, round: u64) -> TxContent {
        TxContent {
            ids_id: self.id,
            round,
            peers: self.peers.keys().copied().collect(),
            creds: self.peers.values().map(|s| s.crd).collect(),
            hosts: self.hosts.iter().map(|h| h.ip).collect(),
            trust: self.hosts.iter().map(|h| h.state.tr_ids).collect(),
            evidence: self.hosts.iter().map(|h| h.evidence.clone()).collect(),
        }
    }

    fn publish(&mut self, ctx: &RoundCtx) -> Option<Transaction> {
        let round = ctx.round;
        let honest = self.honest_content(round);
        let content = match self.role.scores_at(round) {
            ScoreStrategy::Truthful if !matches!(self.role, Role::Fake { .. }) => honest,
            s => {
                let view = NetworkView::from_state(&self.tip.state);
                let fake = matches!(self.role, Role::Fake { .. });
                adversarial_transaction(
                    &honest,
                    s,
                    &self.allies,
                    &view,
                    ctx.trust.interval_len,
                    fake,
                )
            }
        };
        let changed = self.last_published.as_ref().is_none_or(|last| {
            last.peers != content.peers
                || last.creds != content.creds
                || last.hosts != content.hosts
                || last.trust != content.trust
        });
        if !changed {
            return None;
        }
        self.last_published = Some(content.clone());
        self.stats.txs_published += 1;
        Some(build_transaction(content, &self.key).expect("lists built aligned"))
    }

    /// Newest pending transaction per member that the tip has not yet seen.
    fn payload(&self, ctx: &RoundCtx) -> Vec<Transaction> {
        let latest = &self.tip.state.latest;
        self.pool
            .values()
            .filter(|tx| {
                tx.round < ctx.round
                    && latest
                        .get(&tx.ids_id)
                        .is_none_or(|old| tx.round > old.round)
                    && ctx.env.registry.is_admitted(tx.ids_id, tx.round)
            })
            .map(|tx| (**tx).clone())
            .collect()
    }

    fn mine(&mut self, ctx: &mut RoundCtx) -> Option<Block> {
        let round = ctx.round;
        if round <= self.tip.state.tip_time {
            return None;
        }
        let payload = self.payload(ctx);
        let mctx = ctx.env.context(&self.tip.state, self.id, round, &payload);
        let e = &mut self.stats.election;
        e.samples += 1;
        e.stake += mctx.stake;
        e.avg_cred += mctx.avg_cred;
        e.time += mctx.time_since as f64;
        e.weight += mctx.stake * mctx.avg_cred * mctx.time_since as f64;
        if frac(&mctx.g_value) >= ctx.env.params.d_cred * mctx.avg_cred {
            return None;
        }
        let outcome = generate_block(
            &mctx,
            self.id,
            round,
            self.tip.hash,
            ctx.env.params,
            payload,
            &self.key,
        );
        self.stats.hash_attempts += outcome.attempts();
        match outcome {
            MineOutcome::Mined { block, .. } => {
                self.stats.blocks_mined += 1;
                Some(block)
            }
            MineOutcome::Exhausted { .. } => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn honest_answers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = respond_to_challenge(AnswerStrategy::Truthful, 1.0, 0.37, &mut rng);
        assert_eq!(a, Answer::Priority(0.37));
        let sat = crate::trust_model::satisfaction(&ChallengeOutcome {
            expected: 0.37,
            actual: a,
        })
        .unwrap();
        assert_eq!(sat, 1.0);
        for _ in 0..100 {
            assert_eq!(
                respond_to_challenge(AnswerStrategy::Truthful, 0.0, 0.5, &mut rng),
                Answer::Unsure
            );
        }
    }

    #[test]
    fn betrayal_answers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = respond_to_challenge(AnswerStrategy::Invert, 1.0, 0.9, &mut rng);
        let Answer::Priority(p) = a else { panic!() };
        assert!((p - 0.1).abs() < 1e-12);
        let sat = crate::trust_model::satisfaction(&ChallengeOutcome {
            expected: 0.9,
            actual: a,
        })
        .unwrap();
        assert!((sat - 0.2).abs() < 1e-12);
        assert_eq!(
            respond_to_challenge(AnswerStrategy::Extreme, 1.0, 0.9, &mut rng),
            Answer::Priority(0.0)
        );
        assert_eq!(
            respond_to_challenge(AnswerStrategy::Extreme, 1.0, 0.2, &mut rng),
            Answer::Priority(1.0)
        );
    }

    #[test]
    fn message_codecs_round_trip() {
        assert_eq!(
            decode_challenge(&encode_challenge(7, 0.25)),
            Some((7, 0.25))
        );
        assert_eq!(
            decode_response(&encode_response(3, Answer::Unsure)),
            Some((3, Answer::Unsure))
        );
        assert_eq!(
            decode_response(&encode_response(3, Answer::Priority(0.5))),
            Some((3, Answer::Priority(0.5)))
        );
        assert_eq!(decode_challenge(&encode_challenge(7, 1.5)), None);
        assert_eq!(decode_response(b"short"), None);
    }

    fn honest_tx() -> TxContent {
        TxContent {
            ids_id: NodeId(0),
            round: 3,
            peers: vec![NodeId(1), NodeId(2)],
            creds: vec![0.9, 0.8],
            hosts: vec![Ipv4Addr::new(10, 0, 0, 1)],
            trust: vec![0.9],
            evidence: vec![EvidenceRecord {
                host: Ipv4Addr::new(10, 0, 0, 1),
                alert_digests: vec![],
                normal: 5,
                packets: 5,
            }],
        }
    }

    #[test]
    fn inversion_of_scores() {
        let out = adversarial_transaction(
            &honest_tx(),
            ScoreStrategy::Invert,
            &BTreeSet::new(),
            &NetworkView::default(),
            10,
            false,
        );
        assert!((out.trust[0] - 0.1).abs() < 1e-12);
        assert!((out.creds[0] - 0.1).abs() < 1e-12);
        assert_eq!(out.evidence[0].normal, 1);
    }

    #[test]
    fn colluders_emit_identical_lists() {
        let view = NetworkView {
            host_means: BTreeMap::from([(Ipv4Addr::new(10, 0, 0, 1), 0.85)]),
            cred_means: BTreeMap::new(),
        };
        let allies = BTreeSet::from([NodeId(0), NodeId(5)]);
        let mut other = honest_tx();
        other.ids_id = NodeId(5);
        other.trust = vec![0.95];
        for s in [ScoreStrategy::Invert, ScoreStrategy::Constant(0.6)] {
            let a = adversarial_transaction(&honest_tx(), s, &allies, &view, 10, false);
            let b = adversarial_transaction(&other, s, &allies, &view, 10, false);
            assert_eq!(a.trust, b.trust);
            assert_eq!(a.evidence, b.evidence);
        }
    }

    #[test]
    fn fresh_fake_publishes_empty_trust_list() {
        let blank = TxContent {
            ids_id: NodeId(9),
            round: 4,
            peers: vec![NodeId(0)],
            creds: vec![0.5],
            ..Default::default()
        };
        let out = adversarial_transaction(
            &blank,
            ScoreStrategy::Invert,
            &BTreeSet::new(),
            &NetworkView::default(),
            10,
            true,
        );
        assert!(out.trust.is_empty());
        assert_eq!(crate::consensus::compute_stake(&out.trust), 0.0);
        assert_eq!(out.creds, vec![0.0]);
    }

    #[test]
    fn leaf_order_matches_resolve() {
        use crate::consensus::{resolve, ForkSummary};
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let forks: Vec<ForkSummary> = (0..5)
                .map(|_| ForkSummary {
                    tip: [rng.gen_range(0..3u8); 32],
                    score: rng.gen_range(0..3) as f64,
                })
                .collect();
            let keys: BTreeSet<LeafKey> = forks
                .iter()
                .map(|f| LeafKey {
                    score: f.score,
                    tip: f.tip,
                })
                .collect();
            let best = keys.last().unwrap();
            let r = forks[resolve(&forks).unwrap()];
            assert_eq!((best.score, best.tip), (r.score, r.tip));
        }
    }
}
