//! DropEdge and DropNode training views, redrawn every epoch.

use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::EventLog;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropKind {
    Edge,
    Node,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropPolicy {
    pub kind: DropKind,
    pub p: f64,
    pub seed: u64,
}

impl FromStr for DropKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "edge" | "dropedge" => Ok(Self::Edge),
            "node" | "dropnode" => Ok(Self::Node),
            _ => Err(format!("unknown drop kind `{s}`")),
        }
    }
}

impl DropPolicy {
    pub fn new(kind: DropKind, p: f64, seed: u64) -> Result<Self, String> {
        if !(0.0..=1.0).contains(&p) {
            return Err(format!("drop probability {p} outside [0, 1]"));
        }
        Ok(Self { kind, p, seed })
    }

    fn rng(&self, epoch: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        rng
    }
}

/// Per-event keep flags over the whole log; only events in the training
/// range can be dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainView {
    pub keep: Vec<bool>,
    pub train: Range<usize>,
}

impl TrainView {
    pub fn identity(log: &EventLog, train: Range<usize>) -> Self {
        Self {
            keep: vec![true; log.len()],
            train,
        }
    }

    /// Indices of retained training events, in log order.
    pub fn kept(&self) -> Vec<usize> {
        self.train.clone().filter(|&i| self.keep[i]).collect()
    }

    pub fn retained(&self) -> usize {
        self.keep[self.train.clone()].iter().filter(|&&k| k).count()
    }
}

pub fn drop_edges(log: &EventLog, train: Range<usize>, policy: &DropPolicy, epoch: u64) -> TrainView {
    let mut rng = policy.rng(epoch);
    let mut view = TrainView::identity(log, train.clone());
    for i in train {
        view.keep[i] = rng.random::<f64>() >= policy.p;
    }
    view
}

pub fn drop_nodes(log: &EventLog, train: Range<usize>, policy: &DropPolicy, epoch: u64) -> TrainView {
    let mut rng = policy.rng(epoch);
    let dropped: Vec<bool> = (0..log.num_nodes()).map(|_| rng.random::<f64>() < policy.p).collect();
    drop_node_set(log, train, &dropped)
}

/// Removes every training event incident to a flagged node.
pub fn drop_node_set(log: &EventLog, train: Range<usize>, dropped: &[bool]) -> TrainView {
    let mut view = TrainView::identity(log, train.clone());
    for e in &log.events()[train] {
        view.keep[e.idx] = !(dropped[e.src] || dropped[e.dst]);
    }
    view
}

pub fn draw_view(log: &EventLog, train: Range<usize>, policy: &DropPolicy, epoch: u64) -> TrainView {
    match policy.kind {
        DropKind::Edge => drop_edges(log, train, policy, epoch),
        DropKind::Node => drop_nodes(log, train, policy, epoch),
    }
}
