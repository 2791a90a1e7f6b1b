//! Continuous-time dynamic graphs: a chronological stream of `(src, dst, t)`
//! interactions with optional edge and node features.

pub mod eventfile;
mod ingest;
mod negatives;
mod sampler;
mod split;
pub mod synth;

use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ingest::{ingest_csv, parse_csv, CsvFormat};
pub use negatives::{negatives_with, sample_negatives};
pub use sampler::{NeighborIndex, NeighborSample};
pub use split::{chrono_split, ChronoSplit};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("no events in input")]
    Empty,
    #[error("invalid event log: {0}")]
    Invalid(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("density needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("event file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub src: usize,
    pub dst: usize,
    pub t: f64,
    pub edge_feat: Vec<f64>,
    /// Position in the log after sorting.
    pub idx: usize,
}

/// Immutable, time-sorted interaction log.
#[derive(Clone, Debug, PartialEq)]
pub struct EventLog {
    events: Vec<Event>,
    num_nodes: usize,
    d_e: usize,
    d_v: usize,
    /// Row-major `num_nodes × d_v`.
    node_feat: Vec<f64>,
}

/// Raw interaction before it is placed in a log.
#[derive(Clone, Debug, PartialEq)]
pub struct RawEvent {
    pub src: usize,
    pub dst: usize,
    pub t: f64,
    pub edge_feat: Vec<f64>,
}

impl RawEvent {
    pub fn new(src: usize, dst: usize, t: f64) -> Self {
        Self {
            src,
            dst,
            t,
            edge_feat: Vec::new(),
        }
    }
}

impl EventLog {
    /// Builds a log from raw events: validates, stable-sorts by time and
    /// assigns ordinal indices. `num_nodes` defaults to `max id + 1`.
    pub fn new(
        raw: Vec<RawEvent>,
        num_nodes: Option<usize>,
        d_v: usize,
        node_feat: Option<Vec<f64>>,
    ) -> Result<Self> {
        if raw.is_empty() {
            return Err(GraphError::Empty);
        }
        let d_e = raw[0].edge_feat.len();
        let max_id = raw.iter().map(|e| e.src.max(e.dst)).max().unwrap_or(0);
        let num_nodes = num_nodes.unwrap_or(max_id + 1);
        if max_id >= num_nodes {
            return Err(GraphError::Invalid(format!(
                "node id {max_id} >= num_nodes {num_nodes}"
            )));
        }
        for (i, e) in raw.iter().enumerate() {
            if !e.t.is_finite() || e.t < 0.0 {
                return Err(GraphError::Invalid(format!("event {i}: bad timestamp {}", e.t)));
            }
            if e.edge_feat.len() != d_e {
                return Err(GraphError::Invalid(format!(
                    "event {i}: {} edge features, expected {d_e}",
                    e.edge_feat.len()
                )));
            }
        }
        let node_feat = node_feat.unwrap_or_else(|| vec![0.0; num_nodes * d_v]);
        if node_feat.len() != num_nodes * d_v {
            return Err(GraphError::Invalid(format!(
                "node features: {} values for {num_nodes}×{d_v}",
                node_feat.len()
            )));
        }
        let mut raw = raw;
        raw.sort_by(|a, b| a.t.total_cmp(&b.t));
        let events = raw
            .into_iter()
            .enumerate()
            .map(|(idx, r)| Event {
                src: r.src,
                dst: r.dst,
                t: r.t,
                edge_feat: r.edge_feat,
                idx,
            })
            .collect();
        Ok(Self {
            events,
            num_nodes,
            d_e,
            d_v,
            node_feat,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn d_e(&self) -> usize {
        self.d_e
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn node_feat(&self, node: usize) -> &[f64] {
        &self.node_feat[node * self.d_v..(node + 1) * self.d_v]
    }

    pub fn node_feats(&self) -> &[f64] {
        &self.node_feat
    }

    pub fn unique_edges(&self) -> usize {
        self.events
            .iter()
            .map(|e| (e.src, e.dst))
            .collect::<HashSet<_>>()
            .len()
    }

    pub fn stats(&self, dataset: &str, train_ratio: f64) -> DatasetStats {
        let train_end = ((train_ratio * self.len() as f64) + 1e-9).floor() as usize;
        DatasetStats {
            dataset: dataset.to_string(),
            num_nodes: self.num_nodes,
            num_events: self.len(),
            unique_edges: self.unique_edges(),
            d_e: self.d_e,
            density_train: density(self, 0..train_end.min(self.len())).unwrap_or(f64::NAN),
        }
    }
}

/// `2|E| / (|V|(|V|-1))` over the events in `range`.
pub fn density(log: &EventLog, range: Range<usize>) -> Result<f64> {
    let v = log.num_nodes();
    if v < 2 {
        return Err(GraphError::TooFewNodes(v));
    }
    let e = range.end.min(log.len()).saturating_sub(range.start) as f64;
    Ok(2.0 * e / (v as f64 * (v as f64 - 1.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub dataset: String,
    pub num_nodes: usize,
    pub num_events: usize,
    pub unique_edges: usize,
    pub d_e: usize,
    pub density_train: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(pairs: &[(usize, usize, f64)]) -> EventLog {
        EventLog::new(
            pairs.iter().map(|&(s, d, t)| RawEvent::new(s, d, t)).collect(),
            None,
            0,
            None,
        )
        .unwrap()
    }

    #[test]
    fn density_examples() {
        let tri = log(&[(0, 1, 0.0), (1, 2, 1.0), (0, 2, 2.0)]);
        assert_eq!(density(&tri, 0..3).unwrap(), 1.0);
        let pair = log(&[(0, 1, 0.0)]);
        assert_eq!(density(&pair, 0..1).unwrap(), 1.0);
        let single = log(&[(0, 0, 0.0)]);
        assert!(matches!(density(&single, 0..1), Err(GraphError::TooFewNodes(1))));
    }

    #[test]
    fn density_at_dataset_scale() {
        // 2·59835 / (1899·1898)
        let v = 1899.0_f64;
        let d = 2.0 * 59835.0 / (v * (v - 1.0));
        assert!((d - 0.0332).abs() < 5e-5, "{d}");
    }

    #[test]
    fn sorting_is_stable() {
        let a = log(&[(0, 1, 2.0), (1, 2, 1.0), (2, 3, 1.0)]);
        let e = a.events();
        assert_eq!((e[0].src, e[1].src, e[2].src), (1, 2, 0));
        assert_eq!(e.iter().map(|e| e.idx).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(EventLog::new(vec![], None, 0, None), Err(GraphError::Empty)));
        let neg = EventLog::new(vec![RawEvent::new(0, 1, -1.0)], None, 0, None);
        assert!(neg.is_err());
        let mut e = RawEvent::new(0, 1, 0.0);
        e.edge_feat = vec![1.0];
        let mixed = EventLog::new(vec![e, RawEvent::new(1, 0, 1.0)], None, 0, None);
        assert!(mixed.is_err());
    }
}
