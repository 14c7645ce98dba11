//! Chain export and offline verification.
//!
//! An export is JSON Lines, one block per line from genesis. Each line holds
//! the canonical block bytes in hex plus a readable copy of the header; the
//! verifier trusts only the bytes and requires the readable fields to agree.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::chain::{genesis, Block, Chain};
use crate::codec;
use crate::config::ScenarioConfig;
use crate::consensus::{validate_block, Rejection, ValidationEnv};
use crate::crypto::{derive_signing_key, KeyRegistry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportLine {
    pub index: u64,
    pub hash: String,
    pub block_id: String,
    pub leader_id: u32,
    pub gen_time: u64,
    pub prev_hash: String,
    pub ctr: u64,
    pub target_v: f64,
    pub tx_count: u64,
    pub bytes: String,
}

impl ExportLine {
    pub fn new(index: u64, b: &Block) -> Self {
        let h = &b.header;
        Self {
            index,
            hash: codec::hash_hex(&b.hash()),
            block_id: codec::hash_hex(&h.block_id),
            leader_id: h.leader_id.0,
            gen_time: h.gen_time,
            prev_hash: codec::hash_hex(&h.prev_hash),
            ctr: h.ctr,
            target_v: h.target_v,
            tx_count: b.transactions.len() as u64,
            bytes: hex::encode(codec::block_bytes(b)),
        }
    }
}

pub fn export_chain<'a>(blocks: impl IntoIterator<Item = &'a Block>) -> String {
    let mut out = String::new();
    for (i, b) in blocks.into_iter().enumerate() {
        out.push_str(
            &serde_json::to_string(&ExportLine::new(i as u64, b)).expect("export serializes"),
        );
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Failure {
    Empty,
    Malformed(String),
    HashMismatch,
    FieldMismatch(&'static str),
    NotGenesis,
    Linkage,
    Invalid(Rejection),
}

impl Failure {
    pub fn code(&self) -> String {
        match self {
            Failure::Empty => "empty".into(),
            Failure::Malformed(_) => "malformed".into(),
            Failure::HashMismatch => "hash_mismatch".into(),
            Failure::FieldMismatch(f) => format!("field_mismatch:{f}"),
            Failure::NotGenesis => "not_genesis".into(),
            Failure::Linkage => "linkage".into(),
            Failure::Invalid(r) => r.code().into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Malformed(m) => write!(f, "malformed: {m}"),
            other => f.write_str(&other.code()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyReport {
    /// Blocks that passed, genesis included.
    pub verified: usize,
    /// Index of the first bad line and why.
    pub failure: Option<(usize, Failure)>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.failure {
            None => write!(f, "ok: {} blocks verified", self.verified),
            Some((i, why)) => write!(
                f,
                "FAILED at block {i}: {why} ({} blocks verified before it)",
                self.verified
            ),
        }
    }
}

/// Membership implied by a config: keys and admission rounds.
pub fn registry_for(cfg: &ScenarioConfig) -> KeyRegistry {
    let mut reg = KeyRegistry::new();
    for ident in cfg.roster() {
        reg.insert(
            ident.id,
            derive_signing_key(cfg.rng_seed, ident.id).verifying_key(),
            ident.joined,
        );
    }
    reg
}

fn parse_line(i: usize, line: &str) -> Result<Block, Failure> {
    let l: ExportLine =
        serde_json::from_str(line).map_err(|e| Failure::Malformed(e.to_string()))?;
    let raw = hex::decode(&l.bytes).map_err(|e| Failure::Malformed(e.to_string()))?;
    let b = codec::decode_block(&raw).map_err(|e| Failure::Malformed(e.to_string()))?;
    if codec::hash_hex(&b.hash()) != l.hash {
        return Err(Failure::HashMismatch);
    }
    let h = &b.header;
    let checks: [(&'static str, bool); 8] = [
        ("index", l.index == i as u64),
        ("block_id", codec::hash_hex(&h.block_id) == l.block_id),
        ("leader_id", h.leader_id.0 == l.leader_id),
        ("gen_time", h.gen_time == l.gen_time),
        ("prev_hash", codec::hash_hex(&h.prev_hash) == l.prev_hash),
        ("ctr", h.ctr == l.ctr),
        ("target_v", h.target_v.to_bits() == l.target_v.to_bits()),
        ("tx_count", b.transactions.len() as u64 == l.tx_count),
    ];
    if let Some((name, _)) = checks.iter().find(|(_, ok)| !ok) {
        return Err(Failure::FieldMismatch(name));
    }
    Ok(b)
}

/// Replays full validation of an exported chain against `cfg`.
pub fn verify_chain(export: &str, cfg: &ScenarioConfig) -> VerifyReport {
    let registry = registry_for(cfg);
    let env = ValidationEnv {
        params: &cfg.consensus,
        registry: &registry,
        tau: cfg.trust.tau,
    };
    let fail = |verified, i, why| VerifyReport {
        verified,
        failure: Some((i, why)),
    };
    let mut chain: Option<Chain> = None;
    let mut verified = 0;
    for (i, line) in export.lines().enumerate() {
        let b = match parse_line(i, line) {
            Ok(b) => b,
            Err(why) => return fail(verified, i, why),
        };
        match chain.as_mut() {
            None => {
                if b != genesis() {
                    return fail(verified, i, Failure::NotGenesis);
                }
                chain = Some(Chain::new(b));
            }
            Some(c) => {
                if b.header.prev_hash != c.tip() {
                    return fail(verified, i, Failure::Linkage);
                }
                if let Err(r) = validate_block(&b, c.state(), &env) {
                    return fail(verified, i, Failure::Invalid(r));
                }
                if c.append_block(std::sync::Arc::new(b)).is_err() {
                    return fail(verified, i, Failure::Linkage);
                }
            }
        }
        verified += 1;
    }
    if chain.is_none() {
        return fail(0, 0, Failure::Empty);
    }
    VerifyReport {
        verified,
        failure: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn genesis_only_export_verifies() {
        let cfg = crate::config::ScenarioConfig::parse(include_str!(
            "../../../scenarios/baseline_honest.json"
        ))
        .unwrap();
        let text = export_chain(&[genesis()]);
        let r = verify_chain(&text, &cfg);
        assert!(r.ok(), "{r}");
        assert_eq!(r.verified, 1);
    }

    #[test]
    fn empty_and_garbage_exports_fail() {
        let cfg = crate::config::ScenarioConfig::parse(include_str!(
            "../../../scenarios/baseline_honest.json"
        ))
        .unwrap();
        assert_eq!(verify_chain("", &cfg).failure, Some((0, Failure::Empty)));
        let r = verify_chain("{not json}\n", &cfg);
        assert!(matches!(r.failure, Some((0, Failure::Malformed(_)))));
    }

    #[test]
    fn readable_fields_must_agree_with_bytes() {
        let cfg = crate::config::ScenarioConfig::parse(include_str!(
            "../../../scenarios/baseline_honest.json"
        ))
        .unwrap();
        let text = export_chain(&[genesis()]).replace("\"gen_time\":0", "\"gen_time\":1");
        assert_eq!(
            verify_chain(&text, &cfg).failure,
            Some((0, Failure::FieldMismatch("gen_time")))
        );
    }
}
