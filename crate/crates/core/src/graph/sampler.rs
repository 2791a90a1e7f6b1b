use std::ops::Range;

use super::EventLog;

#[derive(Clone, Copy, Debug)]
struct Entry {
    t: f64,
    idx: usize,
    partner: usize,
}

/// Per-node interaction history over the visible events of a log.
///
/// Interactions are undirected for lookup: both endpoints record the partner.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    adj: Vec<Vec<Entry>>,
}

/// The `L` most recent partners of a node before a query time, zero-padded.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSample {
    pub node: usize,
    pub query_time: f64,
    pub neighbor_ids: Vec<usize>,
    pub neighbor_times: Vec<f64>,
    /// Row-major `L × d_e`.
    pub neighbor_edge_feats: Vec<f64>,
    pub real_count: usize,
    pub mask: Vec<bool>,
}

impl NeighborSample {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

impl NeighborIndex {
    /// Indexes events in `visible` whose `keep` flag (if given) is set.
    pub fn build(log: &EventLog, visible: Range<usize>, keep: Option<&[bool]>) -> Self {
        let mut adj = vec![Vec::new(); log.num_nodes()];
        let end = visible.end.min(log.len());
        for e in &log.events()[visible.start.min(end)..end] {
            if keep.is_some_and(|k| !k[e.idx]) {
                continue;
            }
            adj[e.src].push(Entry {
                t: e.t,
                idx: e.idx,
                partner: e.dst,
            });
            if e.dst != e.src {
                adj[e.dst].push(Entry {
                    t: e.t,
                    idx: e.idx,
                    partner: e.src,
                });
            }
        }
        Self { adj }
    }

    pub fn full(log: &EventLog) -> Self {
        Self::build(log, 0..log.len(), None)
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adj[node].len()
    }

    /// Most-recent-first partners with `t_e < t`; equal times resolve to the
    /// larger log index first.
    pub fn sample(&self, log: &EventLog, node: usize, t: f64, l: usize) -> NeighborSample {
        let d_e = log.d_e();
        let list = &self.adj[node];
        let cut = list.partition_point(|e| e.t < t);
        let take = cut.min(l);
        let mut ids = vec![0; l];
        let mut times = vec![0.0; l];
        let mut feats = vec![0.0; l * d_e];
        let mut mask = vec![false; l];
        for (slot, e) in list[..cut].iter().rev().take(take).enumerate() {
            ids[slot] = e.partner;
            times[slot] = e.t;
            mask[slot] = true;
            feats[slot * d_e..(slot + 1) * d_e].copy_from_slice(&log.events()[e.idx].edge_feat);
        }
        NeighborSample {
            node,
            query_time: t,
            neighbor_ids: ids,
            neighbor_times: times,
            neighbor_edge_feats: feats,
            real_count: take,
            mask,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::RawEvent;

    fn log(pairs: &[(usize, usize, f64)]) -> EventLog {
        EventLog::new(
            pairs.iter().map(|&(s, d, t)| RawEvent::new(s, d, t)).collect(),
            Some(10),
            0,
            None,
        )
        .unwrap()
    }

    #[test]
    fn pads_short_histories() {
        let g = log(&[(0, 1, 1.0), (2, 0, 2.0), (0, 3, 5.0)]);
        let idx = NeighborIndex::full(&g);
        let s = idx.sample(&g, 0, 5.0, 4);
        assert_eq!(s.real_count, 2);
        assert_eq!(s.neighbor_ids, vec![2, 1, 0, 0]);
        assert_eq!(s.mask, vec![true, true, false, false]);
        assert_eq!(s.neighbor_times, vec![2.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn keeps_latest_window() {
        let pairs: Vec<_> = (0..7).map(|i| (0, i + 1, i as f64)).collect();
        let g = log(&pairs);
        let s = NeighborIndex::full(&g).sample(&g, 0, 100.0, 4);
        assert_eq!(s.neighbor_ids, vec![7, 6, 5, 4]);
    }

    #[test]
    fn equal_times_prefer_larger_index() {
        let g = log(&[(0, 1, 1.0), (0, 2, 1.0)]);
        let s = NeighborIndex::full(&g).sample(&g, 0, 2.0, 2);
        assert_eq!(s.neighbor_ids, vec![2, 1]);
    }

    #[test]
    fn isolated_node_is_fully_padded() {
        let g = log(&[(0, 1, 1.0)]);
        let s = NeighborIndex::full(&g).sample(&g, 5, 2.0, 3);
        assert_eq!(s.real_count, 0);
        assert!(s.mask.iter().all(|m| !m));
    }

    #[test]
    fn keep_mask_hides_events() {
        let g = log(&[(0, 1, 1.0), (0, 2, 2.0)]);
        let idx = NeighborIndex::build(&g, 0..2, Some(&[true, false]));
        let s = idx.sample(&g, 0, 3.0, 2);
        assert_eq!(s.real_count, 1);
        assert_eq!(s.neighbor_ids[0], 1);
    }
}
