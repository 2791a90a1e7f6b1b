//! Planted-community interaction streams for desk-scale experiments.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};

use super::{EventLog, GraphError, RawEvent, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub nodes: usize,
    pub events: usize,
    pub communities: usize,
    pub seed: u64,
    /// Fraction of events whose destination is uniform over all nodes.
    pub noise: f64,
    /// Probability of re-contacting one of the source's recent partners.
    pub repeat_prob: f64,
    /// Zipf exponent of per-node activity.
    pub activity_skew: f64,
    /// Width of the community-informative node features (0 disables them).
    pub feature_dim: usize,
    pub mean_gap: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nodes: 200,
            events: 5000,
            communities: 2,
            seed: 0,
            noise: 0.05,
            repeat_prob: 0.5,
            activity_skew: 1.0,
            feature_dim: 8,
            mean_gap: 1.0,
        }
    }
}

pub fn community_of(node: usize, nodes: usize, communities: usize) -> usize {
    node * communities / nodes
}

const RECENT_PARTNERS: usize = 5;

/// Generates a log. With one community, sources and destinations are
/// uniform (no structure). Otherwise sources follow a Zipf activity profile
/// and destinations stay inside the source's community, except for the
/// `noise` fraction which is uniform over all nodes.
pub fn generate(cfg: &SynthConfig) -> Result<EventLog> {
    if cfg.communities == 0 || cfg.nodes < 2 * cfg.communities || cfg.events == 0 {
        return Err(GraphError::Invalid(format!(
            "synthetic log needs communities ≥ 1, nodes ≥ 2·communities and events ≥ 1 \
             (got nodes={}, events={}, communities={})",
            cfg.nodes, cfg.events, cfg.communities
        )));
    }
    if !(0.0..=1.0).contains(&cfg.noise) || !(0.0..=1.0).contains(&cfg.repeat_prob) || cfg.mean_gap <= 0.0 {
        return Err(GraphError::Invalid("noise and repeat_prob must lie in [0, 1], mean_gap > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.nodes;
    let c = cfg.communities;

    let mut rank: Vec<usize> = (0..n).collect();
    rank.shuffle(&mut rng);
    let activity: Vec<f64> = if c == 1 {
        vec![1.0; n]
    } else {
        rank.iter().map(|&r| (1.0 + r as f64).powf(-cfg.activity_skew)).collect()
    };
    let members: Vec<Vec<usize>> = (0..c)
        .map(|k| (0..n).filter(|&v| community_of(v, n, c) == k).collect())
        .collect();
    let by_activity = WeightedIndex::new(&activity).map_err(|e| GraphError::Invalid(e.to_string()))?;
    let within: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| WeightedIndex::new(m.iter().map(|&v| activity[v])).unwrap())
        .collect();
    let gap = Exp::new(1.0 / cfg.mean_gap).map_err(|e| GraphError::Invalid(e.to_string()))?;

    let mut recent: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut raw = Vec::with_capacity(cfg.events);
    let mut t = 0.0;
    for _ in 0..cfg.events {
        t += gap.sample(&mut rng);
        let src = by_activity.sample(&mut rng);
        let dst = if c == 1 || rng.random::<f64>() < cfg.noise {
            pick_other(&mut rng, n, src, |r| r.random_range(0..n))
        } else if !recent[src].is_empty() && rng.random::<f64>() < cfg.repeat_prob {
            recent[src][rng.random_range(0..recent[src].len())]
        } else {
            let k = community_of(src, n, c);
            pick_other(&mut rng, n, src, |r| members[k][within[k].sample(r)])
        };
        if c > 1 && community_of(dst, n, c) == community_of(src, n, c) {
            remember(&mut recent[src], dst);
            remember(&mut recent[dst], src);
        }
        raw.push(RawEvent::new(src, dst, t));
    }

    let d_v = cfg.feature_dim;
    let centroids: Vec<f64> = (0..c * d_v).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut node_feat = Vec::with_capacity(n * d_v);
    for v in 0..n {
        let k = community_of(v, n, c);
        for j in 0..d_v {
            let z: f64 = rng.sample(StandardNormal);
            node_feat.push(centroids[k * d_v + j] + 0.5 * z);
        }
    }
    EventLog::new(raw, Some(n), d_v, Some(node_feat))
}

fn pick_other<R: Rng>(rng: &mut R, n: usize, src: usize, mut draw: impl FnMut(&mut R) -> usize) -> usize {
    // Bounded retries keep self-loops rare without risking a spin.
    for _ in 0..16 {
        let v = draw(rng);
        if v != src {
            return v;
        }
    }
    (src + 1) % n
}

fn remember(list: &mut Vec<usize>, v: usize) {
    if let Some(pos) = list.iter().position(|&x| x == v) {
        list.remove(pos);
    }
    list.push(v);
    if list.len() > RECENT_PARTNERS {
        list.remove(0);
    }
}
