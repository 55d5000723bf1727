//! Probabilistic scheduling of message deliveries over chains of causally
//! ordered messages, plus a uniform random baseline.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::MessageId;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum PctcpError {
    #[error("depth must be at least 1")]
    InvalidDepth,
    #[error("event bound {n} is smaller than depth - 1 = {needed}")]
    BoundTooSmall { n: u64, needed: u64 },
    #[error("message {0} registered twice")]
    DuplicateRegistration(MessageId),
    #[error("message {0} is not registered")]
    UnknownMessage(MessageId),
    #[error("delivery of {got} notified but {expected:?} was scheduled")]
    OutOfOrderNotification {
        expected: Option<MessageId>,
        got: MessageId,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Pctcp,
    Random,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Pctcp => "pctcp",
            Strategy::Random => "random",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pctcp" => Ok(Strategy::Pctcp),
            "random" => Ok(Strategy::Random),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

/// Record of a scheduler's random choices and deliveries for one run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleDump {
    pub strategy: Strategy,
    pub seed: u64,
    pub depth: usize,
    pub event_bound: u64,
    pub change_points: Vec<u64>,
    pub chains: Vec<Vec<MessageId>>,
    /// Chain indices from highest to lowest priority at the end of the run.
    pub final_priority: Vec<usize>,
    pub deliveries: Vec<MessageId>,
}

/// Common interface of the delivery schedulers used by the driver.
pub trait DeliveryScheduler: Send {
    /// Registers a message with (a superset of the registered part of) its
    /// causal past.
    fn register(&mut self, m: MessageId, preds: &[MessageId]) -> Result<(), PctcpError>;
    /// Chooses one of `enabled` for delivery, or `None` if it is empty.
    fn next_delivery(&mut self, enabled: &BTreeSet<MessageId>) -> Option<MessageId>;
    /// Confirms that the message returned by `next_delivery` was delivered.
    fn notify_delivered(&mut self, m: MessageId) -> Result<(), PctcpError>;
    /// Notes that a registered message left the pool by other means.
    fn mark_delivered_externally(&mut self, m: MessageId);
    fn dump(&self) -> ScheduleDump;
}

#[derive(Clone, Debug)]
struct Chain {
    messages: Vec<MessageId>,
    /// Index of the first message not yet delivered.
    head: usize,
}

/// The PCTCP scheduler.
///
/// Registered messages are partitioned online into chains. Chain `i` sits in
/// one of the buckets `B_1, B_2, ...`, where `B_k` holds at most `k` chains
/// whose tails are pairwise concurrent; with width `w` at most `w` buckets
/// are ever opened, giving at most `w(w+1)/2` chains.
#[derive(Clone, Debug)]
pub struct Pctcp {
    seed: u64,
    depth: usize,
    event_bound: u64,
    prio_rng: ChaCha8Rng,
    chains: Vec<Chain>,
    buckets: Vec<Vec<usize>>,
    chain_of: HashMap<MessageId, usize>,
    past: HashMap<MessageId, BTreeSet<MessageId>>,
    delivered: BTreeSet<MessageId>,
    /// Chains at their initial priorities, highest first.
    ranked: Vec<usize>,
    /// Chains lowered by a change point, keyed by the reserved priority.
    lowered: BTreeMap<usize, usize>,
    change_points: Vec<u64>,
    delivered_count: u64,
    last_returned: Option<MessageId>,
    deliveries: Vec<MessageId>,
}

impl Pctcp {
    pub fn new(seed: u64, event_bound: u64, depth: usize) -> Result<Self, PctcpError> {
        if depth == 0 {
            return Err(PctcpError::InvalidDepth);
        }
        let needed = depth as u64 - 1;
        if event_bound < needed {
            return Err(PctcpError::BoundTooSmall {
                n: event_bound,
                needed,
            });
        }
        let mut prio_rng = ChaCha8Rng::seed_from_u64(seed);
        prio_rng.set_stream(0);
        let mut cp_rng = ChaCha8Rng::seed_from_u64(seed);
        cp_rng.set_stream(1);
        let change_points = if needed == 0 {
            Vec::new()
        } else {
            sample(&mut cp_rng, event_bound as usize, needed as usize)
                .into_iter()
                .map(|i| i as u64 + 1)
                .collect()
        };
        Ok(Pctcp {
            seed,
            depth,
            event_bound,
            prio_rng,
            chains: Vec::new(),
            buckets: Vec::new(),
            chain_of: HashMap::new(),
            past: HashMap::new(),
            delivered: BTreeSet::new(),
            ranked: Vec::new(),
            lowered: BTreeMap::new(),
            change_points,
            delivered_count: 0,
            last_returned: None,
            deliveries: Vec::new(),
        })
    }

    pub fn change_points(&self) -> &[u64] {
        &self.change_points
    }

    pub fn chain_count(&self) -> usize {
        self.chains.len()
    }

    pub fn chains(&self) -> Vec<Vec<MessageId>> {
        self.chains.iter().map(|c| c.messages.clone()).collect()
    }

    pub fn chain_of(&self, m: MessageId) -> Option<usize> {
        self.chain_of.get(&m).copied()
    }

    /// Chain indices ordered from highest to lowest current priority.
    pub fn priority_order(&self) -> Vec<usize> {
        self.ranked
            .iter()
            .copied()
            .chain(self.lowered.values().rev().copied())
            .collect()
    }

    fn open_chain(&mut self, m: MessageId) -> usize {
        let c = self.chains.len();
        self.chains.push(Chain {
            messages: vec![m],
            head: 0,
        });
        let pos = self.prio_rng.random_range(0..=self.ranked.len());
        self.ranked.insert(pos, c);
        c
    }

    fn advance_head(&mut self, c: usize) {
        let chain = &mut self.chains[c];
        while chain.head < chain.messages.len() && self.delivered.contains(&chain.messages[chain.head]) {
            chain.head += 1;
        }
    }
}

impl DeliveryScheduler for Pctcp {
    fn register(&mut self, m: MessageId, preds: &[MessageId]) -> Result<(), PctcpError> {
        if self.chain_of.contains_key(&m) {
            return Err(PctcpError::DuplicateRegistration(m));
        }
        let mut closure = BTreeSet::new();
        for p in preds {
            if let Some(pp) = self.past.get(p) {
                closure.insert(*p);
                closure.extend(pp.iter().copied());
            }
        }
        let placed = self.buckets.iter().enumerate().find_map(|(i, b)| {
            b.iter()
                .position(|&c| {
                    let tail = *self.chains[c].messages.last().expect("chains are non-empty");
                    closure.contains(&tail)
                })
                .map(|pos| (i, pos))
        });
        let chain = match placed {
            Some((i, pos)) => {
                let c = self.buckets[i][pos];
                self.chains[c].messages.push(m);
                if i > 0 {
                    let mut current = std::mem::take(&mut self.buckets[i]);
                    current.remove(pos);
                    let mut previous = std::mem::replace(&mut self.buckets[i - 1], current);
                    previous.push(c);
                    self.buckets[i] = previous;
                }
                c
            }
            None => {
                let c = self.open_chain(m);
                let mut top = self.buckets.last_mut().map(std::mem::take).unwrap_or_default();
                top.push(c);
                self.buckets.push(top);
                c
            }
        };
        self.chain_of.insert(m, chain);
        self.past.insert(m, closure);
        self.advance_head(chain);
        Ok(())
    }

    fn next_delivery(&mut self, enabled: &BTreeSet<MessageId>) -> Option<MessageId> {
        let order = self.priority_order();
        let pick = order.into_iter().find_map(|c| {
            let chain = &self.chains[c];
            chain.messages[chain.head..]
                .iter()
                .find(|m| enabled.contains(m))
                .copied()
        });
        let pick = pick.or_else(|| enabled.iter().find(|m| !self.chain_of.contains_key(m)).copied());
        self.last_returned = pick;
        pick
    }

    fn notify_delivered(&mut self, m: MessageId) -> Result<(), PctcpError> {
        if self.last_returned != Some(m) {
            return Err(PctcpError::OutOfOrderNotification {
                expected: self.last_returned,
                got: m,
            });
        }
        self.last_returned = None;
        self.delivered.insert(m);
        self.deliveries.push(m);
        self.delivered_count += 1;
        if let Some(c) = self.chain_of.get(&m).copied() {
            self.advance_head(c);
            if let Some(k) = self.change_points.iter().position(|&p| p == self.delivered_count) {
                self.ranked.retain(|&x| x != c);
                self.lowered.retain(|_, &mut x| x != c);
                self.lowered.insert(k + 1, c);
            }
        }
        Ok(())
    }

    fn mark_delivered_externally(&mut self, m: MessageId) {
        if self.delivered.insert(m) {
            if let Some(c) = self.chain_of.get(&m).copied() {
                self.advance_head(c);
            }
        }
        if self.last_returned == Some(m) {
            self.last_returned = None;
        }
    }

    fn dump(&self) -> ScheduleDump {
        ScheduleDump {
            strategy: Strategy::Pctcp,
            seed: self.seed,
            depth: self.depth,
            event_bound: self.event_bound,
            change_points: self.change_points.clone(),
            chains: self.chains(),
            final_priority: self.priority_order(),
            deliveries: self.deliveries.clone(),
        }
    }
}

/// Baseline that delivers a uniformly random enabled message.
#[derive(Clone, Debug)]
pub struct RandomWalk {
    seed: u64,
    rng: ChaCha8Rng,
    last_returned: Option<MessageId>,
    deliveries: Vec<MessageId>,
}

impl RandomWalk {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        RandomWalk {
            seed,
            rng,
            last_returned: None,
            deliveries: Vec::new(),
        }
    }
}

impl DeliveryScheduler for RandomWalk {
    fn register(&mut self, _m: MessageId, _preds: &[MessageId]) -> Result<(), PctcpError> {
        Ok(())
    }

    fn next_delivery(&mut self, enabled: &BTreeSet<MessageId>) -> Option<MessageId> {
        let pick = if enabled.is_empty() {
            None
        } else {
            let i = self.rng.random_range(0..enabled.len());
            enabled.iter().nth(i).copied()
        };
        self.last_returned = pick;
        pick
    }

    fn notify_delivered(&mut self, m: MessageId) -> Result<(), PctcpError> {
        if self.last_returned != Some(m) {
            return Err(PctcpError::OutOfOrderNotification {
                expected: self.last_returned,
                got: m,
            });
        }
        self.last_returned = None;
        self.deliveries.push(m);
        Ok(())
    }

    fn mark_delivered_externally(&mut self, m: MessageId) {
        if self.last_returned == Some(m) {
            self.last_returned = None;
        }
    }

    fn dump(&self) -> ScheduleDump {
        ScheduleDump {
            strategy: Strategy::Random,
            seed: self.seed,
            depth: 0,
            event_bound: 0,
            change_points: Vec::new(),
            chains: Vec::new(),
            final_priority: Vec::new(),
            deliveries: self.deliveries.clone(),
        }
    }
}

/// Builds a boxed scheduler for `strategy`.
pub fn scheduler(
    strategy: Strategy,
    seed: u64,
    event_bound: u64,
    depth: usize,
) -> Result<Box<dyn DeliveryScheduler>, PctcpError> {
    Ok(match strategy {
        Strategy::Pctcp => Box::new(Pctcp::new(seed, event_bound, depth)?),
        Strategy::Random => Box::new(RandomWalk::new(seed)),
    })
}
