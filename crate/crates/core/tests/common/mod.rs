#![allow(dead_code)]

use conda_core::graph::synth::{generate, SynthConfig};
use conda_core::graph::{EventLog, RawEvent};
use conda_core::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use conda_core::train::{Augmenter, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-6;
pub const SMALL: f64 = 1e-3;

/// Relative error, or absolute error when both values are tiny.
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    if scale < SMALL {
        (analytic - numeric).abs() < ABS_TOL
    } else {
        (analytic - numeric).abs() / scale < REL_TOL
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

/// Worst mismatch description, or `None` when every input entry agrees.
///
/// `f` builds a scalar loss from leaves holding `inputs`; it must be
/// deterministic (seed any randomness inside it).
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F) -> Option<String>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        (tape.value(out).item(), tape, vars, out)
    };
    let (_, mut tape, vars, out) = eval(inputs);
    let grads = tape.backward(out).unwrap();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * H);
            let a = analytic.data()[j];
            if !grad_close(a, numeric) {
                return Some(format!("input {i} entry {j}: analytic {a:e} vs numeric {numeric:e}"));
            }
        }
    }
    None
}

/// Checks `∂loss/∂θ` for up to `max_entries` sampled entries of the given parameters.
pub fn check_params<F>(store: &mut ParamStore<f64>, ids: &[ParamId], max_entries: usize, seed: u64, f: F) -> Option<String>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store);
    let grads = tape.backward(out).unwrap();
    store.zero_grads();
    store.accumulate(&grads);
    let mut entries: Vec<(ParamId, usize)> = ids
        .iter()
        .flat_map(|&id| (0..store.value(id).len()).map(move |j| (id, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while entries.len() > max_entries {
        let k = rng.random_range(0..entries.len());
        entries.swap_remove(k);
    }
    let loss = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let out = f(&mut tape, store);
        tape.value(out).item()
    };
    for (id, j) in entries {
        let analytic = store.get(id).grad.as_ref().map_or(0.0, |g| g.data()[j]);
        let orig = store.value(id).data()[j];
        store.get_mut(id).value.data_mut()[j] = orig + H;
        let up = loss(store);
        store.get_mut(id).value.data_mut()[j] = orig - H;
        let down = loss(store);
        store.get_mut(id).value.data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * H);
        if !grad_close(analytic, numeric) {
            return Some(format!(
                "{}[{j}]: analytic {analytic:e} vs numeric {numeric:e}",
                store.get(id).name
            ));
        }
    }
    store.zero_grads();
    None
}

/// Four events over four nodes with 2-dim node and 1-dim edge features.
pub fn toy_log() -> EventLog {
    let mut raw = vec![
        RawEvent::new(0, 1, 1.0),
        RawEvent::new(1, 2, 2.0),
        RawEvent::new(0, 2, 3.5),
        RawEvent::new(2, 3, 4.0),
    ];
    for (i, e) in raw.iter_mut().enumerate() {
        e.edge_feat = vec![0.3 * i as f64 - 0.4];
    }
    let feats = vec![0.5, -0.2, 0.1, 0.9, -0.7, 0.3, 0.2, 0.2];
    EventLog::new(raw, Some(4), 2, Some(feats)).unwrap()
}

/// The 2-community, 200-node, 5k-event synthetic log.
pub fn community_log(seed: u64) -> EventLog {
    generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

/// Reduced widths and epochs used for end-to-end checks on one CPU core.
pub fn desk_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.seq_len = 16;
    c.dim = 32;
    c.time_dim = 16;
    c.r_ctdg = 10;
    c.r_conda = 60;
    c.lr = 3e-3;
    c.cycles = 2;
    c.conda_lr = 3e-3;
    c.timing = false;
    c.augmenter = Augmenter::Conda;
    c
}
