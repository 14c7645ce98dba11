//! Round-based message fabric with seeded loss and fixed delay, plus the
//! synthetic traffic source that feeds each node's detector.

use std::collections::{BTreeMap, HashMap};

use bytes::Bytes;
use rand::Rng;
use serde::Serialize;

use crate::rng::{self, Purpose, StreamRng};
use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum MessageKind {
    Transaction,
    BlockProposal,
    Challenge,
    ChallengeResponse,
    Alert,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub sender: NodeId,
    pub receiver: NodeId,
    pub payload: Bytes,
    pub sent_at: u64,
    pub deliver_at: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct NetStats {
    pub scheduled: u64,
    pub dropped: u64,
    pub delivered: u64,
}

/// Messages sent during round `t` are due at `t + delay_rounds` and are
/// handed over by `step(t + delay_rounds)`, which the driver runs after all
/// nodes have acted in that round.
pub struct Network {
    seed: u64,
    drop_prob: f64,
    delay_rounds: u64,
    queue: BTreeMap<u64, Vec<Message>>,
    drop_streams: HashMap<(NodeId, NodeId), StreamRng>,
    stats: NetStats,
}

impl Network {
    pub fn new(seed: u64, drop_prob: f64, delay_rounds: u64) -> Self {
        assert!((0.0..=1.0).contains(&drop_prob), "drop_prob {drop_prob}");
        Self {
            seed,
            drop_prob,
            delay_rounds,
            queue: BTreeMap::new(),
            drop_streams: HashMap::new(),
            stats: NetStats::default(),
        }
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    pub fn in_flight(&self) -> usize {
        self.queue.values().map(Vec::len).sum()
    }

    /// Schedules one copy; returns its delivery round, or `None` if lost.
    pub fn send(
        &mut self,
        kind: MessageKind,
        sender: NodeId,
        receiver: NodeId,
        payload: Bytes,
        round: u64,
    ) -> Option<u64> {
        let seed = self.seed;
        let stream = self
            .drop_streams
            .entry((sender, receiver))
            .or_insert_with(|| rng::stream(seed, Purpose::Drop, sender.0, receiver.0));
        let lost = stream.gen_bool(self.drop_prob);
        if lost {
            self.stats.dropped += 1;
            return None;
        }
        let deliver_at = round + self.delay_rounds;
        self.stats.scheduled += 1;
        self.queue.entry(deliver_at).or_default().push(Message {
            kind,
            sender,
            receiver,
            payload,
            sent_at: round,
            deliver_at,
        });
        Some(deliver_at)
    }

    /// One independent copy per receiver; the sender is skipped.
    pub fn broadcast(
        &mut self,
        kind: MessageKind,
        sender: NodeId,
        receivers: impl IntoIterator<Item = NodeId>,
        payload: Bytes,
        round: u64,
    ) -> Vec<(NodeId, Option<u64>)> {
        receivers
            .into_iter()
            .filter(|r| *r != sender)
            .map(|r| (r, self.send(kind, sender, r, payload.clone(), round)))
            .collect()
    }

    /// Hands over everything due at `round`, per receiver, ordered by
    /// sender then kind (send order within ties).
    pub fn step(&mut self, round: u64) -> BTreeMap<NodeId, Vec<Message>> {
        let mut out: BTreeMap<NodeId, Vec<Message>> = BTreeMap::new();
        let due: Vec<u64> = self.queue.range(..=round).map(|(r, _)| *r).collect();
        for r in due {
            for m in self.queue.remove(&r).unwrap_or_default() {
                out.entry(m.receiver).or_default().push(m);
            }
        }
        for msgs in out.values_mut() {
            msgs.sort_by_key(|m| (m.sender, m.kind));
            self.stats.delivered += msgs.len() as u64;
        }
        out
    }
}

/// Ground truth of a monitored host and the observing detector's error rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficModel {
    pub p_mal: f64,
    pub false_positive: f64,
    pub false_negative: f64,
}

/// Simulates one monitoring interval and returns (detected normal, total).
pub fn host_traffic(model: &TrafficModel, interval_len: u64, rng: &mut impl Rng) -> (u64, u64) {
    let mut normal = 0;
    for _ in 0..interval_len {
        let malicious = rng.gen_bool(model.p_mal);
        let flagged = if malicious {
            !rng.gen_bool(model.false_negative)
        } else {
            rng.gen_bool(model.false_positive)
        };
        if !flagged {
            normal += 1;
        }
    }
    (normal, interval_len)
}
