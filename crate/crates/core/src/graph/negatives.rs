use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EventLog;

/// One negative `(src, random dst, t)` per positive in `range`; destinations
/// are uniform over all node ids with no collision rejection.
pub fn sample_negatives(log: &EventLog, range: Range<usize>, seed: u64) -> Vec<(usize, usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    negatives_with(log, range, &mut rng)
}

pub fn negatives_with<R: Rng + ?Sized>(
    log: &EventLog,
    range: Range<usize>,
    rng: &mut R,
) -> Vec<(usize, usize, f64)> {
    let n = log.num_nodes();
    log.events()[range]
        .iter()
        .map(|e| (e.src, rng.random_range(0..n), e.t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::RawEvent;

    #[test]
    fn deterministic_under_seed() {
        let raw = (0..50).map(|i| RawEvent::new(i % 7, (i + 1) % 7, i as f64)).collect();
        let g = EventLog::new(raw, None, 0, None).unwrap();
        assert_eq!(sample_negatives(&g, 0..50, 3), sample_negatives(&g, 0..50, 3));
        assert_ne!(sample_negatives(&g, 0..50, 3), sample_negatives(&g, 0..50, 4));
    }

    #[test]
    fn single_node_support() {
        let raw = (0..5).map(|i| RawEvent::new(0, 0, i as f64)).collect();
        let g = EventLog::new(raw, None, 0, None).unwrap();
        assert!(sample_negatives(&g, 0..5, 1).iter().all(|&(_, d, _)| d == 0));
    }
}
