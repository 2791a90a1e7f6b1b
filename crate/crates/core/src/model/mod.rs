//! The CTDG link predictor: neighbor-sequence encoder, MLP-Mixer backbone
//! with mean pooling, and a two-layer link head trained with BCE.

mod time_encoding;

use rand::Rng;
use thiserror::Error;

use crate::graph::{EventLog, NeighborSample};
use crate::nn::{Activation, Linear, Mlp};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

pub use time_encoding::TimeEncoding;

/// Name prefix of every CTDG parameter.
pub const PREFIX: &str = "ctdg/";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("{pos} positive vs {neg} negative logits")]
    Unbalanced { pos: usize, neg: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq)]
pub struct CtdgConfig {
    pub d_v: usize,
    pub d_e: usize,
    pub d_t: usize,
    /// Model width `D`.
    pub dim: usize,
    /// Sequence length `L`.
    pub seq_len: usize,
    pub blocks: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    pub dropout: f64,
}

impl CtdgConfig {
    /// Defaults: two blocks, token hidden `L`, channel hidden `4D`.
    pub fn new(d_v: usize, d_e: usize, d_t: usize, dim: usize, seq_len: usize) -> Self {
        Self {
            d_v,
            d_e,
            d_t,
            dim,
            seq_len,
            blocks: 2,
            token_hidden: seq_len,
            channel_hidden: 4 * dim,
            dropout: 0.1,
        }
    }

    pub fn input_width(&self) -> usize {
        self.d_v + self.d_e + self.d_t
    }
}

#[derive(Clone, Debug)]
struct MixerBlock {
    token_ln: (ParamId, ParamId),
    token_in: (ParamId, ParamId),
    token_out: (ParamId, ParamId),
    channel_ln: (ParamId, ParamId),
    channel: Mlp,
}

#[derive(Clone, Debug)]
pub struct CtdgModel {
    pub config: CtdgConfig,
    time: TimeEncoding,
    encoder: Linear,
    blocks: Vec<MixerBlock>,
    head: Mlp,
}

fn affine_ln<S: Scalar>(store: &mut ParamStore<S>, name: &str, width: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}/gain"), Tensor::full([width], S::one())),
        store.add(format!("{name}/shift"), Tensor::zeros([width])),
    )
}

impl CtdgModel {
    /// Registers all weights under `ctdg/...`.
    pub fn new<S: Scalar, R: Rng + ?Sized>(config: CtdgConfig, store: &mut ParamStore<S>, rng: &mut R) -> Self {
        let (l, d) = (config.seq_len, config.dim);
        let encoder = Linear::new(store, "ctdg/enc", config.input_width(), d, rng);
        let blocks = (0..config.blocks)
            .map(|i| {
                let name = format!("ctdg/mixer{i}");
                let th = config.token_hidden;
                let token_ln = affine_ln(store, &format!("{name}/token_ln"), d);
                // Token-mixing weights act from the left on [L, D] rows.
                let token_in = (
                    store.add(format!("{name}/token_in/w"), crate::nn::glorot(rng, th, l, l, th)),
                    store.add(format!("{name}/token_in/b"), Tensor::zeros([th, 1])),
                );
                let token_out = (
                    store.add(format!("{name}/token_out/w"), crate::nn::glorot(rng, l, th, th, l)),
                    store.add(format!("{name}/token_out/b"), Tensor::zeros([l, 1])),
                );
                let channel_ln = affine_ln(store, &format!("{name}/channel_ln"), d);
                let channel = Mlp::new(
                    store,
                    &format!("{name}/channel"),
                    &[d, config.channel_hidden, d],
                    Activation::Gelu,
                    rng,
                );
                MixerBlock {
                    token_ln,
                    token_in,
                    token_out,
                    channel_ln,
                    channel,
                }
            })
            .collect();
        let head = Mlp::new(store, "ctdg/head", &[2 * d, d, 1], Activation::Relu, rng);
        Self {
            time: TimeEncoding::new(config.d_t),
            config,
            encoder,
            blocks,
            head,
        }
    }

    pub fn time_encoding(&self) -> &TimeEncoding {
        &self.time
    }

    /// Per-row `[node_feat ‖ edge_feat ‖ cos(Δt·w)]` for a batch of samples,
    /// shaped `[B, L, d_v + d_e + d_t]`. Padded rows carry zero features and Δt = 0.
    pub fn encoder_input<S: Scalar>(&self, log: &EventLog, samples: &[NeighborSample]) -> Result<Tensor<S>> {
        let c = &self.config;
        if log.d_v() != c.d_v {
            return Err(ModelError::Dimension {
                what: "node feature width",
                expected: c.d_v,
                got: log.d_v(),
            });
        }
        if log.d_e() != c.d_e {
            return Err(ModelError::Dimension {
                what: "edge feature width",
                expected: c.d_e,
                got: log.d_e(),
            });
        }
        let width = c.input_width();
        let mut data: Vec<S> = Vec::with_capacity(samples.len() * c.seq_len * width);
        for s in samples {
            if s.len() != c.seq_len {
                return Err(ModelError::Dimension {
                    what: "sequence length",
                    expected: c.seq_len,
                    got: s.len(),
                });
            }
            for l in 0..c.seq_len {
                if s.mask[l] {
                    data.extend(log.node_feat(s.neighbor_ids[l]).iter().map(|&x| S::of(x)));
                    data.extend(s.neighbor_edge_feats[l * c.d_e..(l + 1) * c.d_e].iter().map(|&x| S::of(x)));
                    self.time.encode_into(s.query_time - s.neighbor_times[l], &mut data);
                } else {
                    data.extend(std::iter::repeat_n(S::zero(), c.d_v + c.d_e));
                    self.time.encode_into(0.0, &mut data);
                }
            }
        }
        Ok(Tensor::new([samples.len(), c.seq_len, width], data)?)
    }

    /// Projects encoder rows to the historical-neighbor sequence `[B, L, D]`.
    pub fn encode_sequence<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, input: Var) -> Result<Var> {
        let shape = tape.shape(input);
        let width = self.config.input_width();
        if shape.len() != 3 || shape[2] != width {
            return Err(ModelError::Dimension {
                what: "encoder input width",
                expected: width,
                got: *shape.last().unwrap_or(&0),
            });
        }
        Ok(self.encoder.forward(tape, store, input)?)
    }

    /// Mixer blocks followed by mean pooling over the sequence: `[B, L, D] → [B, D]`.
    pub fn backbone<S: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        seq: Var,
        rng: &mut R,
    ) -> Result<Var> {
        let p = self.config.dropout;
        let mut x = seq;
        for b in &self.blocks {
            // token mixing: W_out · gelu(W_in · LN(x) + b_in) + b_out, per sequence
            let h = layer_norm_affine(tape, store, x, b.token_ln)?;
            let w_in = tape.param(store, b.token_in.0);
            let b_in = tape.param(store, b.token_in.1);
            let h = tape.matmul(w_in, h)?;
            let h = tape.add(h, b_in)?;
            let h = tape.gelu(h);
            let w_out = tape.param(store, b.token_out.0);
            let b_out = tape.param(store, b.token_out.1);
            let h = tape.matmul(w_out, h)?;
            let h = tape.add(h, b_out)?;
            let h = tape.dropout(h, p, rng)?;
            x = tape.add(x, h)?;

            let h = layer_norm_affine(tape, store, x, b.channel_ln)?;
            let h = b.channel.forward(tape, store, h)?;
            let h = tape.dropout(h, p, rng)?;
            x = tape.add(x, h)?;
        }
        Ok(tape.mean_axis(x, 1)?)
    }

    /// `MLP([h_u ‖ h_v])` → logits `[B]`.
    pub fn predict_link<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, hu: Var, hv: Var) -> Result<Var> {
        let x = tape.concat_last(&[hu, hv])?;
        let y = self.head.forward(tape, store, x)?;
        let b = tape.shape(y)[0];
        Ok(tape.reshape(y, &[b])?)
    }

    /// Full path from encoder rows to node representations `[B, D]`.
    pub fn represent<S: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        input: Var,
        rng: &mut R,
    ) -> Result<Var> {
        let s = self.encode_sequence(tape, store, input)?;
        self.backbone(tape, store, s, rng)
    }

    /// Zeros every backbone weight so each mixer block is the identity map.
    pub fn zero_backbone<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for b in &self.blocks {
            for id in [b.token_in.0, b.token_in.1, b.token_out.0, b.token_out.1] {
                store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = S::zero());
            }
            b.channel.zero(store);
        }
    }

    pub fn zero_head<S: Scalar>(&self, store: &mut ParamStore<S>) {
        self.head.zero(store);
    }
}

fn layer_norm_affine<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    x: Var,
    (gain, shift): (ParamId, ParamId),
) -> Result<Var> {
    let n = tape.layer_norm(x)?;
    let g = tape.param(store, gain);
    let s = tape.param(store, shift);
    let y = tape.mul(n, g)?;
    Ok(tape.add(y, s)?)
}

/// Mean BCE with label 1 for `pos` and 0 for `neg` logits.
pub fn ctdg_loss<S: Scalar>(tape: &mut Tape<S>, pos: Var, neg: Var) -> Result<Var> {
    let (np, nn) = (tape.value(pos).len(), tape.value(neg).len());
    if np == 0 && nn == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if np != nn {
        return Err(ModelError::Unbalanced { pos: np, neg: nn });
    }
    let pos = tape.reshape(pos, &[np])?;
    let neg = tape.reshape(neg, &[nn])?;
    let logits = tape.concat(&[pos, neg], 0)?;
    let mut labels = vec![S::one(); np];
    labels.extend(std::iter::repeat_n(S::zero(), nn));
    let labels = tape.constant(Tensor::new([np + nn], labels)?);
    Ok(tape.bce_with_logits(logits, labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{NeighborIndex, RawEvent};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> EventLog {
        let raw = vec![
            RawEvent::new(0, 1, 1.0),
            RawEvent::new(1, 2, 2.0),
            RawEvent::new(0, 2, 3.0),
            RawEvent::new(2, 3, 4.0),
        ];
        EventLog::new(raw, None, 2, Some((0..8).map(|v| v as f64 * 0.1).collect())).unwrap()
    }

    fn model(store: &mut ParamStore<f64>, l: usize) -> CtdgModel {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cfg = CtdgConfig::new(2, 0, 4, 8, l);
        cfg.dropout = 0.0;
        CtdgModel::new(cfg, store, &mut rng)
    }

    #[test]
    fn padded_rows_share_one_encoding() {
        let log = toy();
        let mut store = ParamStore::new();
        let m = model(&mut store, 3);
        let idx = NeighborIndex::full(&log);
        let s = idx.sample(&log, 3, 10.0, 3);
        assert_eq!(s.real_count, 1);
        let input: Tensor<f64> = m.encoder_input(&log, &[s]).unwrap();
        // padded rows: zeros then cos(0) = 1
        assert_eq!(&input.data()[6..12], &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let mut tape = Tape::eval();
        let x = tape.constant(input);
        let seq = m.encode_sequence(&mut tape, &store, x).unwrap();
        let v = tape.value(seq).data();
        assert_eq!(&v[8..16], &v[16..24]);
    }

    #[test]
    fn zero_delta_gives_ones_block() {
        let log = toy();
        let mut store = ParamStore::new();
        let m = model(&mut store, 2);
        let idx = NeighborIndex::full(&log);
        // node 2 at t = 4.0 + ε: latest partner at 4.0, but query exactly at a later time
        let mut s = idx.sample(&log, 2, 4.5, 2);
        s.query_time = s.neighbor_times[0];
        let input: Tensor<f64> = m.encoder_input(&log, &[s]).unwrap();
        assert_eq!(&input.data()[2..6], &[1.0; 4]);
    }

    #[test]
    fn identity_backbone_pools_constant_rows() {
        let mut store = ParamStore::new();
        let m = model(&mut store, 4);
        m.zero_backbone(&mut store);
        let c = [0.5, -1.0, 2.0, 0.0, 3.0, 1.0, -0.5, 0.25];
        let rows: Vec<f64> = (0..4).flat_map(|_| c).collect();
        let mut tape = Tape::eval();
        let x = tape.constant(Tensor::from_f64([1, 4, 8], &rows).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = m.backbone(&mut tape, &store, x, &mut rng).unwrap();
        for (a, b) in tape.value(h).data().iter().zip(c) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn token_mixing_is_order_sensitive() {
        let mut store = ParamStore::new();
        let m = model(&mut store, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut swapped = rows.clone();
        swapped[..8].copy_from_slice(&rows[8..16]);
        swapped[8..16].copy_from_slice(&rows[..8]);
        let run = |data: &[f64]| {
            let mut tape = Tape::eval();
            let x = tape.constant(Tensor::from_f64([1, 3, 8], data).unwrap());
            let h = m.backbone(&mut tape, &store, x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            tape.value(h).clone()
        };
        let (a, b) = (run(&rows), run(&swapped));
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(diff.sqrt() > 0.0);
    }

    #[test]
    fn zero_head_gives_even_odds() {
        let mut store = ParamStore::new();
        let m = model(&mut store, 2);
        m.zero_head(&mut store);
        let mut tape = Tape::eval();
        let hu = tape.constant(Tensor::full([3, 8], 1.5));
        let hv = tape.constant(Tensor::full([3, 8], -2.0));
        let logit = m.predict_link(&mut tape, &store, hu, hv).unwrap();
        assert_eq!(tape.value(logit).data(), &[0.0; 3]);
    }

    #[test]
    fn head_is_ordered() {
        let mut store = ParamStore::new();
        let m = model(&mut store, 2);
        let mut tape = Tape::eval();
        let hu = tape.constant(Tensor::from_f64([1, 8], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
        let hv = tape.constant(Tensor::from_f64([1, 8], &[-1., 0., 1., 0., -1., 0., 1., 0.]).unwrap());
        let a = m.predict_link(&mut tape, &store, hu, hv).unwrap();
        let b = m.predict_link(&mut tape, &store, hv, hu).unwrap();
        assert_ne!(tape.value(a).item(), tape.value(b).item());
    }

    #[test]
    fn loss_examples() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::zeros([2]));
        let n = tape.constant(Tensor::zeros([2]));
        let l = ctdg_loss(&mut tape, p, n).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let p = tape.constant(Tensor::scalar(2.0).reshaped([1]).unwrap());
        let n = tape.constant(Tensor::scalar(-2.0).reshaped([1]).unwrap());
        let l = ctdg_loss(&mut tape, p, n).unwrap();
        let softplus = (1.0f64 + (-2.0f64).exp()).ln();
        assert!((tape.value(l).item() - softplus).abs() < 1e-15);
        assert!((softplus - 0.1269).abs() < 1e-4);

        let e = tape.constant(Tensor::zeros([0]));
        assert!(matches!(ctdg_loss(&mut tape, e, e), Err(ModelError::EmptyBatch)));
        let one = tape.constant(Tensor::zeros([1]));
        assert!(ctdg_loss(&mut tape, one, p).is_ok());
        let two = tape.constant(Tensor::zeros([2]));
        assert!(matches!(ctdg_loss(&mut tape, one, two), Err(ModelError::Unbalanced { .. })));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let log = toy();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = CtdgModel::new(CtdgConfig::new(3, 0, 4, 8, 2), &mut store, &mut rng);
        let s = NeighborIndex::full(&log).sample(&log, 0, 5.0, 2);
        assert!(matches!(
            m.encoder_input::<f64>(&log, &[s]),
            Err(ModelError::Dimension { what: "node feature width", .. })
        ));
    }
}
