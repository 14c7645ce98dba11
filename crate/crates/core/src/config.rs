//! Scenario configuration: a single JSON document, fail-closed on unknown
//! fields, validated as a whole so every offending field is reported.

use std::collections::BTreeSet;
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::ConsensusParams;
use crate::trust_model::TrustParams;
use crate::NodeId;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    pub rounds: u64,
    pub rng_seed: u64,
    pub trust: TrustParams,
    pub consensus: ConsensusParams,
    pub network: NetworkSpec,
    pub hosts: Vec<HostSpec>,
    pub nodes: Vec<NodeSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub drop_prob: f64,
    pub delay_rounds: u64,
    /// Per (challenger, target, round) probability of issuing a challenge.
    pub challenge_prob: f64,
    #[serde(default)]
    pub broadcast_alerts: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostSpec {
    /// Probability that any given packet from this host is malicious.
    pub p_mal: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ip: Option<Ipv4Addr>,
    /// Ground-truth label; defaults to `p_mal >= 0.5`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub malicious: Option<bool>,
}

impl HostSpec {
    pub fn is_malicious(&self) -> bool {
        self.malicious.unwrap_or(self.p_mal >= 0.5)
    }
}

fn one() -> u32 {
    1
}

fn full() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    /// Number of identical nodes this entry expands to.
    #[serde(default = "one")]
    pub count: u32,
    /// Explicit host indices monitored by each node of the entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hosts: Option<Vec<usize>>,
    /// Alternatively, take this many hosts round-robin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host_count: Option<usize>,
    #[serde(default)]
    pub false_positive: f64,
    #[serde(default)]
    pub false_negative: f64,
    /// Chance of knowing a challenged item (else the answer is Unsure).
    #[serde(default = "full")]
    pub know_prob: f64,
    #[serde(default)]
    pub behavior: Behavior,
}

/// How a node answers challenges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerStrategy {
    /// Correct priority when known, else Unsure.
    Truthful,
    /// `1 - expected`.
    Invert,
    /// The endpoint of [0,1] farthest from the expected priority.
    Extreme,
    /// A uniform random priority.
    Random,
    Unsure,
}

/// How a node distorts the scores it publishes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreStrategy {
    Truthful,
    Invert,
    Constant(f64),
}

impl ScoreStrategy {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            ScoreStrategy::Truthful => v,
            ScoreStrategy::Invert => 1.0 - v,
            ScoreStrategy::Constant(c) => c,
        }
    }
}

fn invert_scores() -> ScoreStrategy {
    ScoreStrategy::Invert
}

fn invert_answers() -> AnswerStrategy {
    AnswerStrategy::Invert
}

fn random_answers() -> AnswerStrategy {
    AnswerStrategy::Random
}

fn truthful_answers() -> AnswerStrategy {
    AnswerStrategy::Truthful
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Behavior {
    #[default]
    Honest,
    /// A controller that injects `n_fakes` fresh identities at `spawn_round`.
    /// The entry itself has no CIDN identity.
    Sybil {
        n_fakes: u32,
        spawn_round: u64,
        #[serde(default = "random_answers")]
        answer: AnswerStrategy,
        #[serde(default = "invert_scores")]
        scores: ScoreStrategy,
    },
    /// Honest until `turn_round`, adversarial from then on.
    Betrayal {
        turn_round: u64,
        #[serde(default = "invert_answers")]
        answer: AnswerStrategy,
        #[serde(default = "invert_scores")]
        scores: ScoreStrategy,
    },
    Collusion {
        group_id: u32,
        #[serde(default = "truthful_answers")]
        answer: AnswerStrategy,
        #[serde(default = "invert_scores")]
        scores: ScoreStrategy,
        /// Mine only on blocks led by the coalition.
        #[serde(default)]
        private_fork: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorClass {
    Honest,
    Betrayal,
    Sybil,
    Collusion,
}

impl BehaviorClass {
    pub const ALL: [BehaviorClass; 4] = [
        BehaviorClass::Honest,
        BehaviorClass::Betrayal,
        BehaviorClass::Sybil,
        BehaviorClass::Collusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BehaviorClass::Honest => "honest",
            BehaviorClass::Betrayal => "betrayal",
            BehaviorClass::Sybil => "sybil",
            BehaviorClass::Collusion => "collusion",
        }
    }
}

/// Per-identity behaviour after expanding the config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Role {
    Honest,
    Fake {
        answer: AnswerStrategy,
        scores: ScoreStrategy,
    },
    Traitor {
        turn_round: u64,
        answer: AnswerStrategy,
        scores: ScoreStrategy,
    },
    Colluder {
        group_id: u32,
        answer: AnswerStrategy,
        scores: ScoreStrategy,
        private_fork: bool,
    },
}

impl Role {
    pub fn class(&self) -> BehaviorClass {
        match self {
            Role::Honest => BehaviorClass::Honest,
            Role::Fake { .. } => BehaviorClass::Sybil,
            Role::Traitor { .. } => BehaviorClass::Betrayal,
            Role::Colluder { .. } => BehaviorClass::Collusion,
        }
    }

    /// Answer strategy in force at `round`.
    pub fn answer_at(&self, round: u64) -> AnswerStrategy {
        match *self {
            Role::Honest => AnswerStrategy::Truthful,
            Role::Fake { answer, .. } | Role::Colluder { answer, .. } => answer,
            Role::Traitor {
                turn_round, answer, ..
            } if round >= turn_round => answer,
            Role::Traitor { .. } => AnswerStrategy::Truthful,
        }
    }

    pub fn scores_at(&self, round: u64) -> ScoreStrategy {
        match *self {
            Role::Honest => ScoreStrategy::Truthful,
            Role::Fake { scores, .. } | Role::Colluder { scores, .. } => scores,
            Role::Traitor {
                turn_round, scores, ..
            } if round >= turn_round => scores,
            Role::Traitor { .. } => ScoreStrategy::Truthful,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identity {
    pub id: NodeId,
    pub role: Role,
    pub hosts: Vec<usize>,
    pub false_positive: f64,
    pub false_negative: f64,
    pub know_prob: f64,
    pub joined: u64,
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn host_ip(&self, index: usize) -> Ipv4Addr {
        self.hosts[index].ip.unwrap_or_else(|| {
            Ipv4Addr::from(u32::from(Ipv4Addr::new(10, 0, 0, 0)) + index as u32 + 1)
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            errs.push(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                self.schema_version
            ));
        }
        let net = &self.network;
        if !(0.0..1.0).contains(&net.drop_prob) {
            errs.push(format!("network.drop_prob: {} not in [0,1)", net.drop_prob));
        }
        if !(net.challenge_prob > 0.0 && net.challenge_prob <= 1.0) {
            errs.push(format!(
                "network.challenge_prob: {} not in (0,1]",
                net.challenge_prob
            ));
        }
        if self.hosts.is_empty() {
            errs.push("hosts: at least one host required".into());
        }
        for (i, h) in self.hosts.iter().enumerate() {
            if !(0.0..=1.0).contains(&h.p_mal) {
                errs.push(format!("hosts[{i}].p_mal: {} not in [0,1]", h.p_mal));
            }
        }
        let ips: BTreeSet<Ipv4Addr> = (0..self.hosts.len()).map(|i| self.host_ip(i)).collect();
        if ips.len() != self.hosts.len() {
            errs.push("hosts: duplicate ip addresses".into());
        }
        if self.trust.tau <= 0.0 || self.trust.tau >= 1.0 {
            errs.push(format!(
                "trust.tau: {} must be strictly inside (0,1) when hosts exist",
                self.trust.tau
            ));
        }

        let mut members = 0;
        for (i, n) in self.nodes.iter().enumerate() {
            let at = |f: &str| format!("nodes[{i}].{f}");
            if n.count == 0 {
                errs.push(format!("{}: must be at least 1", at("count")));
            }
            for (name, v) in [
                ("false_positive", n.false_positive),
                ("false_negative", n.false_negative),
                ("know_prob", n.know_prob),
            ] {
                if !(0.0..=1.0).contains(&v) {
                    errs.push(format!("{}: {v} not in [0,1]", at(name)));
                }
            }
            let sybil = matches!(n.behavior, Behavior::Sybil { .. });
            match (&n.hosts, n.host_count, sybil) {
                (None, None, true) => {}
                (_, _, true) => errs.push(format!(
                    "{}: a sybil controller monitors no hosts",
                    at("hosts")
                )),
                (Some(_), Some(_), _) | (None, None, _) => errs.push(format!(
                    "{}: give exactly one of `hosts` or `host_count`",
                    at("hosts")
                )),
                (Some(list), None, _) => {
                    if list.is_empty() {
                        errs.push(format!("{}: assignment must be non-empty", at("hosts")));
                    }
                    for h in list.iter().filter(|h| **h >= self.hosts.len()) {
                        errs.push(format!("{}: host index {h} out of range", at("hosts")));
                    }
                }
                (None, Some(c), _) => {
                    if c == 0 || c > self.hosts.len() {
                        errs.push(format!(
                            "{}: {c} not in [1,{}]",
                            at("host_count"),
                            self.hosts.len()
                        ));
                    }
                }
            }
            match n.behavior {
                Behavior::Sybil {
                    n_fakes,
                    spawn_round,
                    scores,
                    ..
                } => {
                    if n_fakes == 0 {
                        errs.push(format!("{}: must be at least 1", at("behavior.n_fakes")));
                    }
                    if spawn_round == 0 || spawn_round > self.rounds {
                        errs.push(format!(
                            "{}: {spawn_round} outside [1,{}]",
                            at("behavior.spawn_round"),
                            self.rounds
                        ));
                    }
                    check_scores(&mut errs, &at("behavior.scores"), scores);
                }
                Behavior::Betrayal {
                    turn_round, scores, ..
                } => {
                    if turn_round == 0 || turn_round > self.rounds {
                        errs.push(format!(
                            "{}: {turn_round} outside [1,{}]",
                            at("behavior.turn_round"),
                            self.rounds
                        ));
                    }
                    check_scores(&mut errs, &at("behavior.scores"), scores);
                }
                Behavior::Collusion { scores, .. } => {
                    check_scores(&mut errs, &at("behavior.scores"), scores)
                }
                Behavior::Honest => {}
            }
            if !sybil {
                members += n.count as usize;
            }
        }
        if members == 0 {
            errs.push("nodes: at least one non-sybil node required".into());
        }
        if errs.is_empty() {
            let roster = self.roster();
            let covered: BTreeSet<usize> = roster
                .iter()
                .filter(|r| r.joined == 0)
                .flat_map(|r| r.hosts.iter().copied())
                .collect();
            for h in (0..self.hosts.len()).filter(|h| !covered.contains(h)) {
                errs.push(format!("hosts[{h}]: not monitored by any node"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    /// Expands node entries into identities. Regular nodes take ids in entry
    /// order; sybil fakes are numbered after all of them so that adding an
    /// attacker never renumbers an honest node.
    pub fn roster(&self) -> Vec<Identity> {
        let mut out = Vec::new();
        let mut cursor = 0usize;
        let mut fakes = Vec::new();
        for n in &self.nodes {
            if let Behavior::Sybil {
                n_fakes,
                spawn_round,
                answer,
                scores,
            } = n.behavior
            {
                for _ in 0..n_fakes {
                    fakes.push((Role::Fake { answer, scores }, spawn_round, n.know_prob));
                }
                continue;
            }
            let role = match n.behavior {
                Behavior::Honest => Role::Honest,
                Behavior::Betrayal {
                    turn_round,
                    answer,
                    scores,
                } => Role::Traitor {
                    turn_round,
                    answer,
                    scores,
                },
                Behavior::Collusion {
                    group_id,
                    answer,
                    scores,
                    private_fork,
                } => Role::Colluder {
                    group_id,
                    answer,
                    scores,
                    private_fork,
                },
                Behavior::Sybil { .. } => unreachable!(),
            };
            for _ in 0..n.count {
                let hosts = match (&n.hosts, n.host_count) {
                    (Some(list), _) => {
                        let mut l = list.clone();
                        l.sort_unstable();
                        l.dedup();
                        l
                    }
                    (None, Some(c)) => {
                        let mut l: Vec<usize> = (0..c)
                            .map(|k| (cursor + k) % self.hosts.len().max(1))
                            .collect();
                        cursor = (cursor + c) % self.hosts.len().max(1);
                        l.sort_unstable();
                        l.dedup();
                        l
                    }
                    (None, None) => Vec::new(),
                };
                out.push(Identity {
                    id: NodeId(out.len() as u32),
                    role,
                    hosts,
                    false_positive: n.false_positive,
                    false_negative: n.false_negative,
                    know_prob: n.know_prob,
                    joined: 0,
                });
            }
        }
        for (role, joined, know_prob) in fakes {
            out.push(Identity {
                id: NodeId(out.len() as u32),
                role,
                hosts: Vec::new(),
                false_positive: 0.0,
                false_negative: 0.0,
                know_prob,
                joined,
            });
        }
        out
    }
}

fn check_scores(errs: &mut Vec<String>, at: &str, s: ScoreStrategy) {
    if let ScoreStrategy::Constant(c) = s {
        if !(c > 0.0 && c < 1.0) {
            errs.push(format!("{at}: constant {c} not in (0,1)"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"{
        "schema_version": 1,
        "name": "t",
        "rounds": 10,
        "rng_seed": 1,
        "trust": {"lambda":0.9,"phi":1,"theta":0.8,"tau":0.5,"zeta":0.3,"interval_len":20},
        "consensus": {"d_cred":1,"d_stake":0.05,"r_bits":16,"q_max":100,"t_cap":20},
        "network": {"drop_prob":0,"delay_rounds":0,"challenge_prob":0.5},
        "hosts": [{"p_mal":0.0},{"p_mal":0.9}],
        "nodes": [
            {"count":2,"host_count":1},
            {"hosts":[0,1],"behavior":{"kind":"betrayal","turn_round":5}},
            {"behavior":{"kind":"sybil","n_fakes":2,"spawn_round":3}}
        ]
    }"#;

    #[test]
    fn parses_and_expands() {
        let cfg = ScenarioConfig::parse(MINIMAL).unwrap();
        let roster = cfg.roster();
        assert_eq!(roster.len(), 5);
        assert_eq!(roster[0].hosts, vec![0]);
        assert_eq!(roster[1].hosts, vec![1]);
        assert_eq!(roster[2].role.class(), BehaviorClass::Betrayal);
        assert_eq!(roster[3].joined, 3);
        assert!(matches!(
            roster[4].role,
            Role::Fake {
                answer: AnswerStrategy::Random,
                ..
            }
        ));
        assert_eq!(cfg.host_ip(1), Ipv4Addr::new(10, 0, 0, 2));
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ScenarioConfig::parse(MINIMAL).unwrap();
        assert_eq!(ScenarioConfig::parse(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = MINIMAL.replace("\"rounds\": 10", "\"rounds\": 10, \"colour\": 3");
        assert!(
            matches!(ScenarioConfig::parse(&bad), Err(ConfigError::Parse(m)) if m.contains("colour"))
        );
        let bad = MINIMAL.replace("\"turn_round\":5", "\"turn_round\":5,\"x\":1");
        assert!(matches!(
            ScenarioConfig::parse(&bad),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn invalid_fields_are_all_listed() {
        let bad = MINIMAL
            .replace("\"schema_version\": 1", "\"schema_version\": 2")
            .replace("\"drop_prob\":0", "\"drop_prob\":1")
            .replace("\"turn_round\":5", "\"turn_round\":50");
        let Err(ConfigError::Invalid(errs)) = ScenarioConfig::parse(&bad) else {
            panic!("expected validation failure");
        };
        assert_eq!(errs.len(), 3, "{errs:?}");
        assert!(errs.iter().any(|e| e.starts_with("schema_version")));
        assert!(errs.iter().any(|e| e.starts_with("network.drop_prob")));
        assert!(errs
            .iter()
            .any(|e| e.starts_with("nodes[1].behavior.turn_round")));
    }

    #[test]
    fn every_host_needs_a_monitor() {
        let bad = MINIMAL.replace("{\"p_mal\":0.9}]", "{\"p_mal\":0.9},{\"p_mal\":0.1}]");
        let bad = bad.replace("{\"hosts\":[0,1],", "{\"hosts\":[0],");
        let Err(ConfigError::Invalid(errs)) = ScenarioConfig::parse(&bad) else {
            panic!("expected validation failure");
        };
        assert!(errs.iter().any(|e| e.contains("not monitored")), "{errs:?}");
    }

    #[test]
    fn roles_switch_at_turn_round() {
        let r = Role::Traitor {
            turn_round: 5,
            answer: AnswerStrategy::Extreme,
            scores: ScoreStrategy::Invert,
        };
        assert_eq!(r.answer_at(4), AnswerStrategy::Truthful);
        assert_eq!(r.answer_at(5), AnswerStrategy::Extreme);
        assert_eq!(r.scores_at(5).apply(0.9), 1.0 - 0.9);
    }
}
