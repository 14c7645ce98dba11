//! Scenario driver: builds the CIDN described by a config, runs the
//! synchronous round loop, and records metrics and the chain export.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::audit;
use crate::chain::Block;
use crate::config::{BehaviorClass, Identity, Role, ScenarioConfig};
use crate::consensus::ValidationEnv;
use crate::crypto::KeyRegistry;
use crate::net_sim::{Message, Network};
use crate::node::{BlockStore, Node, RoundCtx};
use crate::{codec, NodeId};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub blocks_produced: u64,
    /// Blocks produced this round beyond the first.
    pub competing_blocks: u64,
    /// Distinct canonical tips among honest members after the round.
    pub distinct_tips: u64,
    pub height: u64,
    pub reorgs: u64,
    pub invalid_blocks: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub crd_honest: Option<f64>,
    pub crd_betrayal: Option<f64>,
    pub crd_sybil: Option<f64>,
    pub crd_collusion: Option<f64>,
    pub messages_delivered: u64,
    pub messages_dropped: u64,
}

/// One row of `host_classes.csv`: honest monitoring of hosts sharing a p_mal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostClassRow {
    pub round: u64,
    pub p_mal: f64,
    pub malicious: bool,
    pub monitored_pairs: u64,
    pub blacklisted_pairs: u64,
}

/// One row of `nodes.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRow {
    pub node: u32,
    pub class: String,
    pub joined: u64,
    /// Blocks led on the reference member's canonical chain.
    pub blocks_led: u64,
    pub blocks_mined: u64,
    pub txs_published: u64,
    pub mean_stake: f64,
    pub mean_avg_cred: f64,
    pub mean_time: f64,
    /// Mean of the per-round stake x avg_cred x time.
    pub mean_weight: f64,
}

pub struct Simulation {
    cfg: ScenarioConfig,
    roster: Vec<Identity>,
    registry: KeyRegistry,
    store: BlockStore,
    nodes: Vec<Node>,
    net: Network,
    inbox: BTreeMap<NodeId, Vec<Message>>,
    round: u64,
    reference: NodeId,
    verbose: bool,
    metrics: Vec<RoundMetrics>,
    host_rows: Vec<HostClassRow>,
    events: Vec<String>,
    blacklists: Vec<BTreeSet<Ipv4Addr>>,
    last_stats: (u64, u64),
}

impl Simulation {
    /// `cfg` must already be validated.
    pub fn new(cfg: &ScenarioConfig, verbose: bool) -> Self {
        let roster = cfg.roster();
        let store = BlockStore::new();
        let mut registry = KeyRegistry::new();
        let mut nodes = Vec::with_capacity(roster.len());
        for ident in &roster {
            let hosts: Vec<(usize, Ipv4Addr, f64)> = ident
                .hosts
                .iter()
                .map(|&h| (h, cfg.host_ip(h), cfg.hosts[h].p_mal))
                .collect();
            let allies: BTreeSet<NodeId> = roster
                .iter()
                .filter(|o| match (ident.role, o.role) {
                    (Role::Colluder { group_id: a, .. }, Role::Colluder { group_id: b, .. }) => {
                        a == b
                    }
                    (Role::Fake { .. }, Role::Fake { .. }) => true,
                    _ => false,
                })
                .map(|o| o.id)
                .collect();
            let node = Node::new(ident, cfg.rng_seed, &hosts, allies, &cfg.trust, &store);
            registry.insert(ident.id, node.verifying_key(), ident.joined);
            nodes.push(node);
        }
        let reference = roster
            .iter()
            .find(|r| r.role == Role::Honest)
            .or_else(|| roster.iter().find(|r| r.joined == 0))
            .map(|r| r.id)
            .expect("validated config has a member");
        let mut events = Vec::new();
        for r in roster.iter().filter(|r| r.joined > 0) {
            events.push(
                json!({"round": r.joined, "event": "scheduled_join", "node": r.id.0}).to_string(),
            );
        }
        Self {
            net: Network::new(
                cfg.rng_seed,
                cfg.network.drop_prob,
                cfg.network.delay_rounds,
            ),
            blacklists: vec![BTreeSet::new(); nodes.len()],
            cfg: cfg.clone(),
            roster,
            registry,
            store,
            nodes,
            inbox: BTreeMap::new(),
            round: 0,
            reference,
            verbose,
            metrics: Vec::new(),
            host_rows: Vec::new(),
            events,
            last_stats: (0, 0),
        }
    }

    /// Runs every configured round.
    pub fn run(cfg: &ScenarioConfig, verbose: bool) -> Self {
        let mut sim = Self::new(cfg, verbose);
        while sim.round < cfg.rounds {
            sim.step();
        }
        sim
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0 as usize]
    }

    pub fn roster(&self) -> &[Identity] {
        &self.roster
    }

    pub fn registry(&self) -> &KeyRegistry {
        &self.registry
    }

    pub fn store(&self) -> &BlockStore {
        &self.store
    }

    pub fn metrics(&self) -> &[RoundMetrics] {
        &self.metrics
    }

    /// The member whose canonical chain is exported.
    pub fn reference(&self) -> NodeId {
        self.reference
    }

    pub fn class_of(&self, id: NodeId) -> BehaviorClass {
        self.roster[id.0 as usize].role.class()
    }

    /// Canonical chain of `id`, genesis first.
    pub fn chain_of(&self, id: NodeId) -> Vec<Arc<Block>> {
        self.node(id)
            .canonical()
            .iter()
            .map(|h| {
                self.store
                    .get(h)
                    .expect("canonical blocks are stored")
                    .block
                    .clone()
            })
            .collect()
    }

    /// Executes one round: every member acts on last round's deliveries,
    /// then the network hands over what is due.
    pub fn step(&mut self) {
        self.round += 1;
        let round = self.round;
        self.store.begin_round();
        let env = ValidationEnv {
            params: &self.cfg.consensus,
            registry: &self.registry,
            tau: self.cfg.trust.tau,
        };
        let mut ctx = RoundCtx {
            round,
            trust: &self.cfg.trust,
            env: &env,
            challenge_prob: self.cfg.network.challenge_prob,
            broadcast_alerts: self.cfg.network.broadcast_alerts,
            store: &mut self.store,
        };
        let members: Vec<NodeId> = self.registry.admitted(round).collect();
        let mut produced = 0;
        let mut reorgs = 0;
        let mut invalid = 0;
        for node in &mut self.nodes {
            let deliveries = self.inbox.remove(&node.id).unwrap_or_default();
            let (out, report) = node.run_round(&mut ctx, &deliveries);
            if let Some(h) = report.mined {
                produced += 1;
                self.events
                    .push(json!({"round": round, "event": "block_mined", "node": node.id.0, "hash": codec::hash_hex(&h)}).to_string());
            }
            if report.reorged {
                reorgs += 1;
                self.events
                    .push(json!({"round": round, "event": "reorg", "node": node.id.0}).to_string());
            }
            if report.invalid_blocks > 0 {
                invalid += report.invalid_blocks;
                self.events.push(
                    json!({"round": round, "event": "invalid_blocks", "node": node.id.0, "count": report.invalid_blocks})
                        .to_string(),
                );
            }
            for o in out {
                match o.to {
                    Some(to) => {
                        self.net.send(o.kind, node.id, to, o.payload, round);
                    }
                    None => {
                        self.net.broadcast(
                            o.kind,
                            node.id,
                            members.iter().copied(),
                            o.payload,
                            round,
                        );
                    }
                }
            }
        }
        self.inbox = self.net.step(round);
        self.record(round, produced, reorgs, invalid);
    }

    fn honest(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.role == Role::Honest)
    }

    fn record(&mut self, round: u64, produced: u64, reorgs: u64, invalid: u64) {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        let mut classes: BTreeMap<u64, (f64, bool, u64, u64)> = BTreeMap::new();
        for n in self.honest() {
            for (h, st) in n.host_states() {
                let spec = &self.cfg.hosts[h];
                let bad = spec.is_malicious();
                match (st.blacklisted, bad) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
                let e = classes
                    .entry(spec.p_mal.to_bits())
                    .or_insert((spec.p_mal, bad, 0, 0));
                e.2 += 1;
                e.3 += st.blacklisted as u64;
            }
        }
        let ratio = |a: u64, b: u64| (a + b > 0).then(|| a as f64 / (a + b) as f64);
        let mut sorted: Vec<_> = classes.into_values().collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (p_mal, malicious, monitored, blacklisted) in sorted {
            self.host_rows.push(HostClassRow {
                round,
                p_mal,
                malicious,
                monitored_pairs: monitored,
                blacklisted_pairs: blacklisted,
            });
        }

        let mut crd: BTreeMap<BehaviorClass, (f64, u64)> = BTreeMap::new();
        for obs in self.honest() {
            for (peer, st) in obs.peer_states() {
                let e = crd.entry(self.class_of(*peer)).or_default();
                e.0 += st.crd;
                e.1 += 1;
            }
        }
        let mean = |c: BehaviorClass| crd.get(&c).map(|(s, n)| s / *n as f64);
        let tips: BTreeSet<_> = self.honest().map(|n| n.tip().hash).collect();
        let stats = self.net.stats();
        let (delivered, dropped) = self.last_stats;
        self.last_stats = (stats.delivered, stats.dropped);

        for (i, n) in self.nodes.iter().enumerate() {
            if !n.is_active(round) {
                continue;
            }
            let now = n.blacklist();
            for ip in now.difference(&self.blacklists[i]) {
                self.events
                    .push(json!({"round": round, "event": "blacklisted", "node": n.id.0, "host": ip.to_string()}).to_string());
            }
            for ip in self.blacklists[i].difference(&now) {
                self.events
                    .push(json!({"round": round, "event": "unblacklisted", "node": n.id.0, "host": ip.to_string()}).to_string());
            }
            if self.verbose {
                self.events.push(
                    json!({
                        "round": round,
                        "event": "snapshot",
                        "node": n.id.0,
                        "tip": codec::hash_hex(&n.tip().hash),
                        "creds": n.peer_states().iter().map(|(p, s)| (p.0.to_string(), s.crd)).collect::<BTreeMap<_, _>>(),
                        "trust": n.host_states().map(|(h, s)| (self.cfg.host_ip(h).to_string(), s.tr_ids)).collect::<BTreeMap<_, _>>(),
                        "blacklist": now.iter().map(|ip| ip.to_string()).collect::<Vec<_>>(),
                    })
                    .to_string(),
                );
            }
            self.blacklists[i] = now;
        }

        self.metrics.push(RoundMetrics {
            round,
            blocks_produced: produced,
            competing_blocks: produced.saturating_sub(1),
            distinct_tips: tips.len() as u64,
            height: self.node(self.reference).tip().height,
            reorgs,
            invalid_blocks: invalid,
            precision: ratio(tp, fp),
            recall: ratio(tp, fn_),
            crd_honest: mean(BehaviorClass::Honest),
            crd_betrayal: mean(BehaviorClass::Betrayal),
            crd_sybil: mean(BehaviorClass::Sybil),
            crd_collusion: mean(BehaviorClass::Collusion),
            messages_delivered: stats.delivered - delivered,
            messages_dropped: stats.dropped - dropped,
        });
    }

    pub fn node_rows(&self) -> Vec<NodeRow> {
        let mut led: BTreeMap<NodeId, u64> = BTreeMap::new();
        for b in self.chain_of(self.reference).iter().skip(1) {
            *led.entry(b.header.leader_id).or_default() += 1;
        }
        self.nodes
            .iter()
            .map(|n| {
                let e = &n.stats.election;
                NodeRow {
                    node: n.id.0,
                    class: n.role.class().name().to_string(),
                    joined: n.joined,
                    blocks_led: led.get(&n.id).copied().unwrap_or(0),
                    blocks_mined: n.stats.blocks_mined,
                    txs_published: n.stats.txs_published,
                    mean_stake: e.mean(e.stake),
                    mean_avg_cred: e.mean(e.avg_cred),
                    mean_time: e.mean(e.time),
                    mean_weight: e.mean(e.weight),
                }
            })
            .collect()
    }

    pub fn host_class_rows(&self) -> &[HostClassRow] {
        &self.host_rows
    }

    pub fn events(&self) -> &[String] {
        &self.events
    }

    /// JSON Lines export of the reference member's canonical chain.
    pub fn chain_export(&self) -> String {
        audit::export_chain(self.chain_of(self.reference).iter().map(|b| b.as_ref()))
    }

    /// Writes every output file into `dir` (created if missing).
    pub fn write_outputs(&self, dir: &Path) -> Result<(), ScenarioError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ScenarioError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_csv(&dir.join("metrics.csv"), &self.metrics, METRIC_HEADERS)?;
        write_csv(&dir.join("host_classes.csv"), &self.host_rows, HOST_HEADERS)?;
        write_csv(&dir.join("nodes.csv"), &self.node_rows(), NODE_HEADERS)?;
        let mut events = self.events.join("\n");
        if !events.is_empty() {
            events.push('\n');
        }
        let path = dir.join("events.jsonl");
        fs::write(&path, events).map_err(io_err(&path))?;
        let path = dir.join("chain.jsonl");
        fs::write(&path, self.chain_export()).map_err(io_err(&path))?;
        let path = dir.join("config.effective.json");
        fs::write(&path, self.cfg.to_json() + "\n").map_err(io_err(&path))?;
        Ok(())
    }
}

pub const METRIC_HEADERS: &[&str] = &[
    "round",
    "blocks_produced",
    "competing_blocks",
    "distinct_tips",
    "height",
    "reorgs",
    "invalid_blocks",
    "precision",
    "recall",
    "crd_honest",
    "crd_betrayal",
    "crd_sybil",
    "crd_collusion",
    "messages_delivered",
    "messages_dropped",
];

pub const HOST_HEADERS: &[&str] = &[
    "round",
    "p_mal",
    "malicious",
    "monitored_pairs",
    "blacklisted_pairs",
];

pub const NODE_HEADERS: &[&str] = &[
    "node",
    "class",
    "joined",
    "blocks_led",
    "blocks_mined",
    "txs_published",
    "mean_stake",
    "mean_avg_cred",
    "mean_time",
    "mean_weight",
];

/// Headers are written even with no rows, so an empty run is still readable.
fn write_csv<T: Serialize>(path: &Path, rows: &[T], headers: &[&str]) -> Result<(), ScenarioError> {
    let err = |e: csv::Error| ScenarioError::Io {
        path: path.to_path_buf(),
        source: io::Error::other(e.to_string()),
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(headers).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| err(e.into_error().into()))?;
    fs::write(path, bytes).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}
