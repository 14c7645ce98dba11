//! Canonical byte encoding of transactions and blocks.
//!
//! Fields appear in a fixed order, integers are big-endian, reals are
//! IEEE-754 binary64 big-endian, lists carry a u32 count and nested
//! transactions carry a u32 byte length. Hashes and signatures are taken
//! over these bytes, so the layout must never change silently.

use std::net::Ipv4Addr;

use thiserror::Error;

use crate::chain::{Block, BlockHeader, EvidenceRecord, Transaction};
use crate::{Hash, NodeId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("unexpected end of input at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("declared length {0} exceeds remaining input")]
    BadLength(u32),
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_bits().to_be_bytes());
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    pub fn len(&mut self, n: usize) -> &mut Self {
        self.u32(u32::try_from(n).expect("list longer than u32::MAX"))
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or(CodecError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_bits(self.u64()?))
    }

    /// Reads a list count, bounded by the bytes left so a corrupt count
    /// cannot trigger a huge allocation.
    pub fn count(&mut self, min_item: usize) -> Result<usize, CodecError> {
        let n = self.u32()?;
        if (n as usize).saturating_mul(min_item.max(1)) > self.remaining() {
            return Err(CodecError::BadLength(n));
        }
        Ok(n as usize)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(self) -> Result<(), CodecError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(CodecError::Trailing(n)),
        }
    }
}

fn ip(w: &mut Writer, a: Ipv4Addr) {
    w.bytes(&a.octets());
}

fn read_ip(r: &mut Reader) -> Result<Ipv4Addr, CodecError> {
    Ok(Ipv4Addr::from(r.array::<4>()?))
}

/// Encodes every signed field of a transaction (everything but `tx_id` and
/// `signature`).
pub fn encode_tx_body(w: &mut Writer, tx: &Transaction) {
    w.u32(tx.ids_id.0).u64(tx.round);
    w.len(tx.peers.len());
    for p in &tx.peers {
        w.u32(p.0);
    }
    w.len(tx.creds.len());
    for c in &tx.creds {
        w.f64(*c);
    }
    w.len(tx.hosts.len());
    for h in &tx.hosts {
        ip(w, *h);
    }
    w.len(tx.trust.len());
    for t in &tx.trust {
        w.f64(*t);
    }
    w.len(tx.evidence.len());
    for e in &tx.evidence {
        ip(w, e.host);
        w.u64(e.normal).u64(e.packets);
        w.len(e.alert_digests.len());
        for d in &e.alert_digests {
            w.bytes(d);
        }
    }
}

pub fn tx_body_bytes(tx: &Transaction) -> Vec<u8> {
    let mut w = Writer::new();
    encode_tx_body(&mut w, tx);
    w.finish()
}

pub fn encode_tx(w: &mut Writer, tx: &Transaction) {
    w.bytes(&tx.tx_id);
    encode_tx_body(w, tx);
    w.bytes(&tx.signature);
}

pub fn tx_bytes(tx: &Transaction) -> Vec<u8> {
    let mut w = Writer::new();
    encode_tx(&mut w, tx);
    w.finish()
}

fn decode_tx_inner(r: &mut Reader) -> Result<Transaction, CodecError> {
    let tx_id = r.array::<32>()?;
    let ids_id = NodeId(r.u32()?);
    let round = r.u64()?;
    let n = r.count(4)?;
    let peers = (0..n)
        .map(|_| r.u32().map(NodeId))
        .collect::<Result<_, _>>()?;
    let n = r.count(8)?;
    let creds = (0..n).map(|_| r.f64()).collect::<Result<_, _>>()?;
    let n = r.count(4)?;
    let hosts = (0..n).map(|_| read_ip(r)).collect::<Result<_, _>>()?;
    let n = r.count(8)?;
    let trust = (0..n).map(|_| r.f64()).collect::<Result<_, _>>()?;
    let n = r.count(24)?;
    let mut evidence = Vec::with_capacity(n);
    for _ in 0..n {
        let host = read_ip(r)?;
        let normal = r.u64()?;
        let packets = r.u64()?;
        let d = r.count(32)?;
        let alert_digests = (0..d).map(|_| r.array::<32>()).collect::<Result<_, _>>()?;
        evidence.push(EvidenceRecord {
            host,
            alert_digests,
            normal,
            packets,
        });
    }
    let signature = r.array::<64>()?;
    Ok(Transaction {
        tx_id,
        ids_id,
        round,
        peers,
        creds,
        hosts,
        trust,
        evidence,
        signature,
    })
}

pub fn decode_tx(bytes: &[u8]) -> Result<Transaction, CodecError> {
    let mut r = Reader::new(bytes);
    let tx = decode_tx_inner(&mut r)?;
    r.finish()?;
    Ok(tx)
}

/// Header fields that feed the block identifier.
pub fn encode_header_fields(w: &mut Writer, h: &BlockHeader) {
    w.u32(h.leader_id.0)
        .u64(h.gen_time)
        .bytes(&h.prev_hash)
        .u64(h.ctr)
        .f64(h.target_v);
}

pub fn encode_header(w: &mut Writer, h: &BlockHeader) {
    w.bytes(&h.block_id);
    encode_header_fields(w, h);
}

pub fn encode_payload(w: &mut Writer, txs: &[Transaction]) {
    w.len(txs.len());
    for tx in txs {
        let bytes = tx_bytes(tx);
        w.len(bytes.len()).bytes(&bytes);
    }
}

pub fn payload_bytes(txs: &[Transaction]) -> Vec<u8> {
    let mut w = Writer::new();
    encode_payload(&mut w, txs);
    w.finish()
}

/// Header and payload, the bytes covered by the block hash and the
/// leader's signature.
pub fn block_signed_bytes(b: &Block) -> Vec<u8> {
    let mut w = Writer::new();
    encode_header(&mut w, &b.header);
    encode_payload(&mut w, &b.transactions);
    w.finish()
}

pub fn block_bytes(b: &Block) -> Vec<u8> {
    let mut w = Writer::new();
    encode_header(&mut w, &b.header);
    encode_payload(&mut w, &b.transactions);
    w.bytes(&b.leader_signature);
    w.finish()
}

pub fn decode_block(bytes: &[u8]) -> Result<Block, CodecError> {
    let mut r = Reader::new(bytes);
    let header = BlockHeader {
        block_id: r.array()?,
        leader_id: NodeId(r.u32()?),
        gen_time: r.u64()?,
        prev_hash: r.array::<32>()?,
        ctr: r.u64()?,
        target_v: r.f64()?,
    };
    let n = r.count(4)?;
    let mut transactions = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()?;
        if len as usize > r.remaining() {
            return Err(CodecError::BadLength(len));
        }
        let mut sub = Reader::new(r.take(len as usize)?);
        transactions.push(decode_tx_inner(&mut sub)?);
        sub.finish()?;
    }
    let leader_signature = r.array::<64>()?;
    r.finish()?;
    Ok(Block {
        header,
        transactions,
        leader_signature,
    })
}

pub fn hash_hex(h: &Hash) -> String {
    hex::encode(h)
}
