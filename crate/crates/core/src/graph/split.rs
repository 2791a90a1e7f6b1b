use std::collections::HashSet;
use std::ops::Range;

use super::{EventLog, GraphError, Result};

/// Contiguous chronological train / validation / test ranges over a log.
#[derive(Clone, Debug, PartialEq)]
pub struct ChronoSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub ratios: (f64, f64, f64),
    /// Nodes first seen after the training boundary.
    pub unseen_nodes: Vec<usize>,
}

pub fn chrono_split(log: &EventLog, ratios: (f64, f64, f64)) -> Result<ChronoSplit> {
    let (a, b, c) = ratios;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(GraphError::Split(format!(
            "ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    let n = log.len();
    if n < 3 {
        return Err(GraphError::Split(format!("need at least 3 events, got {n}")));
    }
    let cut = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let t_end = cut(a);
    let v_end = cut(a + b).min(n);
    if t_end == 0 || v_end <= t_end || v_end >= n {
        return Err(GraphError::Split(format!(
            "ratios {ratios:?} leave an empty segment for {n} events"
        )));
    }
    let seen: HashSet<usize> = log.events()[..t_end]
        .iter()
        .flat_map(|e| [e.src, e.dst])
        .collect();
    let mut unseen: Vec<usize> = log.events()[t_end..]
        .iter()
        .flat_map(|e| [e.src, e.dst])
        .filter(|v| !seen.contains(v))
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    unseen.sort_unstable();
    Ok(ChronoSplit {
        train: 0..t_end,
        val: t_end..v_end,
        test: v_end..n,
        ratios,
        unseen_nodes: unseen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::RawEvent;

    fn chain(n: usize) -> EventLog {
        let raw = (0..n).map(|i| RawEvent::new(i, i + 1, i as f64)).collect();
        EventLog::new(raw, None, 0, None).unwrap()
    }

    #[test]
    fn floor_boundaries() {
        let s = chrono_split(&chain(100), (0.3, 0.2, 0.5)).unwrap();
        assert_eq!((s.train, s.val, s.test), (0..30, 30..50, 50..100));
        let s = chrono_split(&chain(10), (0.1, 0.1, 0.8)).unwrap();
        assert_eq!((s.train, s.val, s.test), (0..1, 1..2, 2..10));
    }

    #[test]
    fn dataset_scale_train_size() {
        // floor(0.1 · 59835)
        let s = chrono_split(&chain(59835), (0.1, 0.1, 0.8)).unwrap();
        assert_eq!(s.train.len(), 5983);
    }

    #[test]
    fn unseen_nodes_are_reported() {
        let s = chrono_split(&chain(10), (0.1, 0.1, 0.8)).unwrap();
        // train holds 0–1 only
        assert_eq!(s.unseen_nodes, (2..=10).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_ratios_and_tiny_logs() {
        assert!(chrono_split(&chain(2), (0.3, 0.3, 0.4)).is_err());
        assert!(chrono_split(&chain(10), (0.5, 0.5, 0.5)).is_err());
        assert!(chrono_split(&chain(10), (0.0, 0.5, 0.5)).is_err());
    }
}
