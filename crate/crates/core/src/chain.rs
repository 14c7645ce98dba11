//! Trust-chain data model: transactions, blocks and the append-only chain.

use std::collections::{BTreeMap, HashSet};
use std::net::Ipv4Addr;
use std::sync::Arc;

use ed25519_dalek::SigningKey;
use thiserror::Error;

use crate::codec::{self, Writer};
use crate::crypto::{self, KeyRegistry, SignatureBytes};
use crate::{Hash, NodeId, ZERO_HASH};

/// Leader id carried by the genesis header; never a registered member.
pub const GENESIS_LEADER: NodeId = NodeId(u32::MAX);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChainError {
    #[error("list lengths disagree: {0}")]
    LengthMismatch(&'static str),
    #[error("block does not extend the tip (expects parent {expected}, cites {found})")]
    Linkage { expected: String, found: String },
    #[error("block {0} already on chain")]
    Duplicate(String),
}

/// Evidence justifying one host score.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceRecord {
    pub host: Ipv4Addr,
    /// Digests of the alerts raised for this host during the interval.
    pub alert_digests: Vec<Hash>,
    pub normal: u64,
    pub packets: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transaction {
    pub tx_id: Hash,
    pub ids_id: NodeId,
    /// Round in which the issuer built this transaction.
    pub round: u64,
    pub peers: Vec<NodeId>,
    pub creds: Vec<f64>,
    pub hosts: Vec<Ipv4Addr>,
    pub trust: Vec<f64>,
    pub evidence: Vec<EvidenceRecord>,
    pub signature: SignatureBytes,
}

/// Unsigned content of a transaction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TxContent {
    pub ids_id: NodeId,
    pub round: u64,
    pub peers: Vec<NodeId>,
    pub creds: Vec<f64>,
    pub hosts: Vec<Ipv4Addr>,
    pub trust: Vec<f64>,
    pub evidence: Vec<EvidenceRecord>,
}

pub fn build_transaction(c: TxContent, key: &SigningKey) -> Result<Transaction, ChainError> {
    if c.peers.len() != c.creds.len() {
        return Err(ChainError::LengthMismatch("peers/creds"));
    }
    if c.hosts.len() != c.trust.len() || c.hosts.len() != c.evidence.len() {
        return Err(ChainError::LengthMismatch("hosts/trust/evidence"));
    }
    let mut tx = Transaction {
        tx_id: ZERO_HASH,
        ids_id: c.ids_id,
        round: c.round,
        peers: c.peers,
        creds: c.creds,
        hosts: c.hosts,
        trust: c.trust,
        evidence: c.evidence,
        signature: [0u8; 64],
    };
    let body = codec::tx_body_bytes(&tx);
    tx.tx_id = crypto::sha256(&body);
    tx.signature = crypto::sign(key, &body);
    Ok(tx)
}

fn unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

/// Structural checks plus identifier and signature checks.
pub fn verify_transaction(tx: &Transaction, registry: &KeyRegistry) -> bool {
    if tx.peers.len() != tx.creds.len()
        || tx.hosts.len() != tx.trust.len()
        || tx.hosts.len() != tx.evidence.len()
    {
        return false;
    }
    if !tx.creds.iter().chain(&tx.trust).all(|v| unit(*v)) {
        return false;
    }
    let evidence_ok = tx
        .evidence
        .iter()
        .zip(&tx.hosts)
        .all(|(e, h)| e.host == *h && e.normal <= e.packets);
    if !evidence_ok {
        return false;
    }
    let body = codec::tx_body_bytes(tx);
    crypto::sha256(&body) == tx.tx_id && registry.verify(tx.ids_id, &body, &tx.signature)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockHeader {
    pub block_id: Hash,
    pub leader_id: NodeId,
    /// Logical round in which the block was generated.
    pub gen_time: u64,
    pub prev_hash: Hash,
    pub ctr: u64,
    pub target_v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub header: BlockHeader,
    /// Sorted by issuer id, at most one per issuer.
    pub transactions: Vec<Transaction>,
    pub leader_signature: SignatureBytes,
}

/// Identifier committed in the header: the digest of every other header
/// field plus the payload.
pub fn compute_block_id(header: &BlockHeader, txs: &[Transaction]) -> Hash {
    let mut w = Writer::new();
    codec::encode_header_fields(&mut w, header);
    codec::encode_payload(&mut w, txs);
    crypto::sha256(&w.finish())
}

pub fn hash_block(b: &Block) -> Hash {
    crypto::sha256(&codec::block_signed_bytes(b))
}

impl Block {
    pub fn hash(&self) -> Hash {
        hash_block(self)
    }

    pub fn is_genesis(&self) -> bool {
        self.header.leader_id == GENESIS_LEADER
    }

    /// Fills in `block_id` and the leader signature.
    pub fn seal(mut self, key: &SigningKey) -> Self {
        self.header.block_id = compute_block_id(&self.header, &self.transactions);
        self.leader_signature = crypto::sign(key, &codec::block_signed_bytes(&self));
        self
    }
}

pub fn genesis() -> Block {
    let mut header = BlockHeader {
        block_id: ZERO_HASH,
        leader_id: GENESIS_LEADER,
        gen_time: 0,
        prev_hash: ZERO_HASH,
        ctr: 0,
        target_v: 0.0,
    };
    header.block_id = compute_block_id(&header, &[]);
    Block {
        header,
        transactions: Vec::new(),
        leader_signature: [0u8; 64],
    }
}

/// State derived from a block sequence, enough to validate a successor.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub tip: Hash,
    pub tip_time: u64,
    pub height: u64,
    /// Most recent committed transaction of every issuer.
    pub latest: BTreeMap<NodeId, Arc<Transaction>>,
    /// GenTime of every leader's most recent block.
    pub last_led: BTreeMap<NodeId, u64>,
}

impl ChainState {
    pub fn from_genesis(g: &Block) -> Self {
        Self {
            tip: g.hash(),
            tip_time: g.header.gen_time,
            height: 0,
            latest: BTreeMap::new(),
            last_led: BTreeMap::new(),
        }
    }

    pub fn apply(&mut self, b: &Block, hash: Hash) {
        for tx in &b.transactions {
            self.latest.insert(tx.ids_id, Arc::new(tx.clone()));
        }
        if !b.is_genesis() {
            self.last_led.insert(b.header.leader_id, b.header.gen_time);
        }
        self.tip = hash;
        self.tip_time = b.header.gen_time;
        self.height += 1;
    }

    pub fn successor(&self, b: &Block, hash: Hash) -> Self {
        let mut next = self.clone();
        next.apply(b, hash);
        next
    }

    /// Credibility each observer last committed for `target`.
    pub fn credibility_of(&self, target: NodeId) -> BTreeMap<NodeId, f64> {
        self.latest
            .iter()
            .filter(|(obs, _)| **obs != target)
            .filter_map(|(obs, tx)| {
                tx.peers
                    .iter()
                    .position(|p| *p == target)
                    .map(|i| (*obs, tx.creds[i]))
            })
            .collect()
    }

    pub fn trust_list(&self, id: NodeId) -> Option<&[f64]> {
        self.latest.get(&id).map(|tx| tx.trust.as_slice())
    }
}

/// Append-only chain from genesis with its derived state.
#[derive(Debug, Clone)]
pub struct Chain {
    blocks: Vec<Arc<Block>>,
    hashes: Vec<Hash>,
    block_ids: HashSet<Hash>,
    state: ChainState,
}

impl Default for Chain {
    fn default() -> Self {
        Self::new(genesis())
    }
}

impl Chain {
    pub fn new(genesis: Block) -> Self {
        let hash = genesis.hash();
        let state = ChainState::from_genesis(&genesis);
        Self {
            block_ids: HashSet::from([genesis.header.block_id]),
            blocks: vec![Arc::new(genesis)],
            hashes: vec![hash],
            state,
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn blocks(&self) -> &[Arc<Block>] {
        &self.blocks
    }

    pub fn hashes(&self) -> &[Hash] {
        &self.hashes
    }

    pub fn tip(&self) -> Hash {
        self.state.tip
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn contains(&self, hash: &Hash) -> bool {
        self.hashes.contains(hash)
    }

    /// Extends the chain. Consensus validation is the caller's job; this
    /// only enforces linkage and uniqueness.
    pub fn append_block(&mut self, b: Arc<Block>) -> Result<(), ChainError> {
        if self.block_ids.contains(&b.header.block_id) {
            return Err(ChainError::Duplicate(hex::encode(b.header.block_id)));
        }
        if b.header.prev_hash != self.state.tip {
            return Err(ChainError::Linkage {
                expected: hex::encode(self.state.tip),
                found: hex::encode(b.header.prev_hash),
            });
        }
        let hash = b.hash();
        self.state.apply(&b, hash);
        self.block_ids.insert(b.header.block_id);
        self.hashes.push(hash);
        self.blocks.push(b);
        Ok(())
    }

    /// Drops every block above `height`, rebuilding the derived state.
    pub fn truncate(&mut self, height: usize) {
        if height + 1 >= self.blocks.len() {
            return;
        }
        let kept: Vec<Arc<Block>> = self.blocks[1..=height].to_vec();
        *self = Chain::new((*self.blocks[0]).clone());
        for b in kept {
            self.append_block(b).expect("prefix of a valid chain");
        }
    }

    pub fn height_of(&self, hash: &Hash) -> Option<usize> {
        self.hashes.iter().position(|h| h == hash)
    }
}

pub fn chain_state_credibility(chain: &Chain, target: NodeId) -> BTreeMap<NodeId, f64> {
    chain.state().credibility_of(target)
}
