//! Alternating training of the CTDG model and the augmenter, with early
//! stopping on validation AP, JSON-lines reports and checkpoints.

mod config;
mod report;

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::augment::{draw_view, TrainView};
use crate::conda::{Conda, CondaError};
use crate::graph::{chrono_split, negatives_with, ChronoSplit, EventLog, GraphError, NeighborIndex};
use crate::metrics::{average_precision, roc_auc, MetricError, ScoredPrediction};
use crate::model::{ctdg_loss, CtdgModel, ModelError};
use crate::scalar::Scalar;
use crate::tensor::{checkpoint, Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

pub use config::{parse_pairs, AugMode, Augmenter, ConfigError, DiffLen, TrainConfig, KEYS};
pub use report::{EpochRecord, FinalRecord, Phase, PhaseRecord, Record, RunReport};

const CTDG: &str = crate::model::PREFIX;
const CONDA: &str = crate::conda::PREFIX;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Conda(#[from] CondaError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("non-finite {what} in {phase:?} phase, cycle {cycle}, epoch {epoch}")]
    NonFinite {
        what: String,
        phase: Phase,
        cycle: usize,
        epoch: usize,
    },
    #[error("parameters under `{0}` changed while frozen")]
    FreezeViolation(String),
    #[error("parameters under `{0}` must be frozen for this phase")]
    NotFrozen(String),
    #[error("augmentation requested before the augmenter was trained")]
    Untrained,
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Independent RNG streams derived from the master seed.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
enum Stream {
    Init = 1,
    Negatives = 2,
    EvalNegatives = 3,
    Dropout = 4,
    AugDropout = 5,
    Diffusion = 6,
    Augment = 7,
}

fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

struct Best<S> {
    val_ap: f64,
    epoch: usize,
    snapshot: Vec<(ParamId, Tensor<S>)>,
}

/// Mutable state of one run over a single event log.
pub struct Experiment<'a, S: Scalar> {
    pub config: TrainConfig,
    pub log: &'a EventLog,
    pub split: ChronoSplit,
    pub store: ParamStore<S>,
    pub model: CtdgModel,
    pub conda: Option<Conda>,
    pub report: RunReport,
    /// Written on every improvement of validation AP.
    pub checkpoint: Option<PathBuf>,
    ctdg_opt: Adam<S>,
    conda_opt: Adam<S>,
    index: NeighborIndex,
    val_negatives: Vec<(usize, usize, f64)>,
    test_negatives: Vec<(usize, usize, f64)>,
    neg_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    aug_dropout_rng: ChaCha8Rng,
    diffusion_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
    conda_trained: bool,
    ctdg_epochs: usize,
    best: Option<Best<S>>,
}

fn scored(pos: &[f64], neg: &[f64]) -> Vec<ScoredPrediction<f64>> {
    pos.iter()
        .map(|&s| ScoredPrediction::new(s, true))
        .chain(neg.iter().map(|&s| ScoredPrediction::new(s, false)))
        .collect()
}

fn ap_auc(pos: &[f64], neg: &[f64]) -> Result<(f64, f64)> {
    let p = scored(pos, neg);
    Ok((average_precision(&p)?, roc_auc(&p)?))
}

impl<'a, S: Scalar> Experiment<'a, S> {
    /// Validates the config, splits the log and initializes every parameter.
    pub fn new(config: TrainConfig, log: &'a EventLog) -> Result<Self> {
        config.validate()?;
        let split = chrono_split(log, config.ratios())?;
        let mut store = ParamStore::new();
        let mut init = stream(config.seed, Stream::Init);
        let model = CtdgModel::new(config.ctdg_config(log.d_v(), log.d_e()), &mut store, &mut init);
        let conda = if config.uses_conda() {
            Some(Conda::new(config.conda_config(), &mut store, &mut init)?)
        } else {
            None
        };
        let mut eval_rng = stream(config.seed, Stream::EvalNegatives);
        let val_negatives = negatives_with(log, split.val.clone(), &mut eval_rng);
        let test_negatives = negatives_with(log, split.test.clone(), &mut eval_rng);
        let seed = config.seed;
        Ok(Self {
            ctdg_opt: Adam::new(AdamConfig::with_lr(config.lr)),
            conda_opt: Adam::new(AdamConfig::with_lr(config.conda_lr)),
            config,
            log,
            split,
            store,
            model,
            conda,
            report: RunReport::default(),
            checkpoint: None,
            index: NeighborIndex::full(log),
            val_negatives,
            test_negatives,
            neg_rng: stream(seed, Stream::Negatives),
            dropout_rng: stream(seed, Stream::Dropout),
            aug_dropout_rng: stream(seed, Stream::AugDropout),
            diffusion_rng: stream(seed, Stream::Diffusion),
            augment_rng: stream(seed, Stream::Augment),
            conda_trained: false,
            ctdg_epochs: 0,
            best: None,
        })
    }

    pub fn conda_trained(&self) -> bool {
        self.conda_trained
    }

    fn encoder_input(&self, index: &NeighborIndex, nodes: &[(usize, f64)]) -> Result<Tensor<S>> {
        let l = self.config.seq_len;
        let samples: Vec<_> = nodes.iter().map(|&(v, t)| index.sample(self.log, v, t, l)).collect();
        Ok(self.model.encoder_input(self.log, &samples)?)
    }

    /// Inputs for `[src…, dst…, neg…]` of a batch of `(src, dst, neg, t)`.
    fn link_input(&self, index: &NeighborIndex, batch: &[(usize, usize, usize, f64)]) -> Result<Tensor<S>> {
        let nodes: Vec<(usize, f64)> = batch
            .iter()
            .map(|b| (b.0, b.3))
            .chain(batch.iter().map(|b| (b.1, b.3)))
            .chain(batch.iter().map(|b| (b.2, b.3)))
            .collect();
        self.encoder_input(index, &nodes)
    }

    fn link_logits<R: Rng + ?Sized>(&self, tape: &mut Tape<S>, seq: Var, b: usize, rng: &mut R) -> Result<(Var, Var)> {
        let h = self.model.backbone(tape, &self.store, seq, rng)?;
        let hu = tape.slice(h, 0, 0, b)?;
        let hv = tape.slice(h, 0, b, 2 * b)?;
        let hn = tape.slice(h, 0, 2 * b, 3 * b)?;
        let pos = self.model.predict_link(tape, &self.store, hu, hv)?;
        let neg = self.model.predict_link(tape, &self.store, hu, hn)?;
        Ok((pos, neg))
    }

    /// AP and AUC over `range` against the given negatives, in eval mode.
    pub fn evaluate(&self, range: Range<usize>, negatives: &[(usize, usize, f64)]) -> Result<(f64, f64)> {
        let events = &self.log.events()[range];
        let mut pos = Vec::with_capacity(events.len());
        let mut neg = Vec::with_capacity(events.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (chunk, negs) in events.chunks(self.config.batch_size).zip(negatives.chunks(self.config.batch_size)) {
            let batch: Vec<_> = chunk.iter().zip(negs).map(|(e, n)| (e.src, e.dst, n.1, e.t)).collect();
            let mut tape = Tape::eval();
            let x = tape.constant(self.link_input(&self.index, &batch)?);
            let seq = self.model.encode_sequence(&mut tape, &self.store, x)?;
            let (p, n) = self.link_logits(&mut tape, seq, batch.len(), &mut rng)?;
            pos.extend(tape.value(p).to_f64_vec());
            neg.extend(tape.value(n).to_f64_vec());
        }
        ap_auc(&pos, &neg)
    }

    pub fn evaluate_val(&self) -> Result<(f64, f64)> {
        self.evaluate(self.split.val.clone(), &self.val_negatives)
    }

    pub fn evaluate_test(&self) -> Result<(f64, f64)> {
        self.evaluate(self.split.test.clone(), &self.test_negatives)
    }

    fn freeze_for(&mut self, phase: Phase) {
        let ctdg_frozen = phase == Phase::Conda;
        self.store.set_frozen(CTDG, ctdg_frozen);
        self.store.set_frozen(CONDA, !ctdg_frozen);
    }

    fn fault(&self, what: &str, phase: Phase, cycle: usize, epoch: usize) -> TrainError {
        TrainError::NonFinite {
            what: what.into(),
            phase,
            cycle,
            epoch,
        }
    }

    /// One Adam step on a CTDG batch; returns the loss and the plain logits.
    fn ctdg_step(
        &mut self,
        index: &NeighborIndex,
        batch: &[(usize, usize, usize, f64)],
        augment: bool,
        at: (usize, usize),
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let b = batch.len();
        let mut tape = Tape::new();
        let x = tape.constant(self.link_input(index, batch)?);
        let seq = self.model.encode_sequence(&mut tape, &self.store, x)?;
        let aug_branch = augment && !(self.config.aug_mode == AugMode::Supplement && self.config.aug_weight == 0.0);
        let plain = if aug_branch && self.config.aug_mode == AugMode::Replace {
            None
        } else {
            let mut rng = self.dropout_rng.clone();
            let r = self.link_logits(&mut tape, seq, b, &mut rng)?;
            self.dropout_rng = rng;
            Some(r)
        };
        let augmented = if aug_branch {
            let conda = self.conda.as_ref().ok_or(TrainError::Untrained)?;
            let s_hat = conda.augment(&mut tape, &self.store, seq, &mut self.augment_rng)?;
            let mut rng = self.aug_dropout_rng.clone();
            let r = self.link_logits(&mut tape, s_hat, b, &mut rng)?;
            self.aug_dropout_rng = rng;
            Some(r)
        } else {
            None
        };
        let (loss, shown) = match (plain, augmented) {
            (Some((p, n)), None) => (ctdg_loss(&mut tape, p, n)?, (p, n)),
            (None, Some((p, n))) => (ctdg_loss(&mut tape, p, n)?, (p, n)),
            (Some((p, n)), Some((pa, na))) => {
                let l = ctdg_loss(&mut tape, p, n)?;
                let la = ctdg_loss(&mut tape, pa, na)?;
                let la = tape.scale(la, S::of(self.config.aug_weight));
                (tape.add(l, la)?, (p, n))
            }
            (None, None) => unreachable!("at least one branch runs"),
        };
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() || tape.fault().is_some() {
            return Err(self.fault("training loss", Phase::Ctdg, at.0, at.1));
        }
        let grads = tape.backward(loss)?;
        self.store.accumulate(&grads);
        self.ctdg_opt.step(&mut self.store)?;
        Ok((value, tape.value(shown.0).to_f64_vec(), tape.value(shown.1).to_f64_vec()))
    }

    /// Trains the CTDG model for up to `r_ctdg` epochs with the augmenter frozen.
    pub fn run_ctdg_phase(&mut self, cycle: usize, augment: bool) -> Result<PhaseRecord> {
        if augment && !self.conda_trained {
            return Err(TrainError::Untrained);
        }
        self.freeze_for(Phase::Ctdg);
        if augment && !self.store.is_frozen(CONDA) {
            return Err(TrainError::NotFrozen(CONDA.into()));
        }
        let frozen_start = self.store.checksum(CONDA);
        let policy = self.config.drop_policy();
        let mut since_best = 0;
        let mut epochs = 0;
        let mut stopped_early = false;
        for epoch in 1..=self.config.r_ctdg {
            let started = Instant::now();
            self.ctdg_epochs += 1;
            epochs = epoch;
            let train = self.split.train.clone();
            let (view, index) = match &policy {
                Some(p) => {
                    let view = draw_view(self.log, train.clone(), p, self.ctdg_epochs as u64);
                    let index = NeighborIndex::build(self.log, 0..self.log.len(), Some(&view.keep));
                    (view, Some(index))
                }
                None => (TrainView::identity(self.log, train.clone()), None),
            };
            let kept = view.kept();
            let n = self.log.num_nodes();
            let events: Vec<(usize, usize, usize, f64)> = kept
                .iter()
                .map(|&i| {
                    let e = &self.log.events()[i];
                    (e.src, e.dst, self.neg_rng.random_range(0..n), e.t)
                })
                .collect();
            let index = index.unwrap_or_else(|| self.index.clone());
            let (mut loss_sum, mut batches) = (0.0, 0);
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for chunk in events.chunks(self.config.batch_size) {
                let (l, p, q) = self.ctdg_step(&index, chunk, augment, (cycle, epoch))?;
                loss_sum += l;
                batches += 1;
                pos.extend(p);
                neg.extend(q);
            }
            let train_metrics = if pos.is_empty() { None } else { Some(ap_auc(&pos, &neg)?) };
            let (val_ap, val_auc) = self.evaluate_val()?;
            self.report.records.push(Record::Epoch(EpochRecord {
                cycle,
                phase: Phase::Ctdg,
                epoch,
                train_loss: if batches == 0 { 0.0 } else { loss_sum / batches as f64 },
                train_ap: train_metrics.map(|m| m.0),
                train_auc: train_metrics.map(|m| m.1),
                val_ap: Some(val_ap),
                val_auc: Some(val_auc),
                diffusion_loss: None,
                vae_loss: None,
                wall_ms: self.elapsed(started),
            }));
            if self.best.as_ref().is_none_or(|b| val_ap > b.val_ap) {
                self.best = Some(Best {
                    val_ap,
                    epoch: self.ctdg_epochs,
                    snapshot: self.store.snapshot(CTDG),
                });
                since_best = 0;
                if let Some(path) = self.checkpoint.clone() {
                    self.save_checkpoint(&path)?;
                }
            } else {
                since_best += 1;
            }
            if self.config.patience > 0 && since_best >= self.config.patience {
                stopped_early = epoch < self.config.r_ctdg;
                break;
            }
        }
        let frozen_end = self.store.checksum(CONDA);
        if frozen_end != frozen_start {
            return Err(TrainError::FreezeViolation(CONDA.into()));
        }
        let rec = PhaseRecord {
            cycle,
            phase: Phase::Ctdg,
            augmented: augment,
            epochs,
            stopped_early,
            frozen_start,
            frozen_end,
            init_loss_ratio: None,
        };
        self.report.records.push(Record::Phase(rec.clone()));
        Ok(rec)
    }

    /// Trains the augmenter for `r_conda` epochs on sequences from the frozen encoder.
    pub fn run_conda_phase(&mut self, cycle: usize) -> Result<PhaseRecord> {
        let conda = self.conda.clone().ok_or(TrainError::Untrained)?;
        self.freeze_for(Phase::Conda);
        if !self.store.is_frozen(CTDG) {
            return Err(TrainError::NotFrozen(CTDG.into()));
        }
        let frozen_start = self.store.checksum(CTDG);
        let mut init_loss_ratio = None;
        for epoch in 1..=self.config.r_conda {
            let started = Instant::now();
            let events = &self.log.events()[self.split.train.clone()];
            let (mut total, mut diff, mut vae, mut batches) = (0.0, 0.0, 0.0, 0);
            for chunk in events.chunks(self.config.batch_size) {
                let nodes: Vec<(usize, f64)> =
                    chunk.iter().map(|e| (e.src, e.t)).chain(chunk.iter().map(|e| (e.dst, e.t))).collect();
                let seq = {
                    let mut tape = Tape::eval();
                    let x = tape.constant(self.encoder_input(&self.index, &nodes)?);
                    let s = self.model.encode_sequence(&mut tape, &self.store, x)?;
                    tape.value(s).clone()
                };
                let mut tape = Tape::new();
                let s = tape.constant(seq);
                let parts = conda.loss(&mut tape, &self.store, s, &mut self.diffusion_rng)?;
                let (t, d, v) = (
                    tape.value(parts.total).item().as_f64(),
                    tape.value(parts.diffusion).item().as_f64(),
                    tape.value(parts.vae).item().as_f64(),
                );
                if !t.is_finite() || tape.fault().is_some() {
                    return Err(self.fault("augmenter loss", Phase::Conda, cycle, epoch));
                }
                if init_loss_ratio.is_none() && d > 0.0 {
                    init_loss_ratio = Some(v / d);
                }
                let grads = tape.backward(parts.total)?;
                self.store.accumulate(&grads);
                self.conda_opt.step(&mut self.store)?;
                total += t;
                diff += d;
                vae += v;
                batches += 1;
            }
            let m = batches.max(1) as f64;
            self.report.records.push(Record::Epoch(EpochRecord {
                cycle,
                phase: Phase::Conda,
                epoch,
                train_loss: total / m,
                train_ap: None,
                train_auc: None,
                val_ap: None,
                val_auc: None,
                diffusion_loss: Some(diff / m),
                vae_loss: Some(vae / m),
                wall_ms: self.elapsed(started),
            }));
            self.conda_trained = true;
        }
        let frozen_end = self.store.checksum(CTDG);
        if frozen_end != frozen_start {
            return Err(TrainError::FreezeViolation(CTDG.into()));
        }
        let rec = PhaseRecord {
            cycle,
            phase: Phase::Conda,
            augmented: false,
            epochs: self.config.r_conda,
            stopped_early: false,
            frozen_start,
            frozen_end,
            init_loss_ratio,
        };
        self.report.records.push(Record::Phase(rec.clone()));
        Ok(rec)
    }

    fn elapsed(&self, started: Instant) -> u64 {
        if self.config.timing {
            started.elapsed().as_millis() as u64
        } else {
            0
        }
    }

    fn augmenting(&self) -> bool {
        self.conda.is_some() && self.conda_trained && self.config.aug_mode != AugMode::Off
    }

    /// Runs every phase, restores the best-validation CTDG weights and scores the test range.
    pub fn run(&mut self) -> Result<FinalRecord> {
        for cycle in 0..self.config.cycles {
            self.run_ctdg_phase(cycle, self.augmenting())?;
            if self.conda.is_some() {
                self.run_conda_phase(cycle)?;
            }
        }
        if self.config.final_ctdg {
            self.run_ctdg_phase(self.config.cycles, self.augmenting())?;
        }
        self.finish()
    }

    fn finish(&mut self) -> Result<FinalRecord> {
        let (best_val_ap, best_epoch) = match &self.best {
            Some(b) => {
                self.store.restore(&b.snapshot);
                (b.val_ap, b.epoch)
            }
            None => (f64::NAN, 0),
        };
        let (test_ap, test_auc) = self.evaluate_test()?;
        let rec = FinalRecord {
            test_ap,
            test_auc,
            best_val_ap,
            best_epoch,
            config: self.config.clone(),
        };
        self.report.records.push(Record::Final(rec.clone()));
        Ok(rec)
    }

    /// Metadata tensors stored next to the weights.
    fn meta(&self) -> Vec<(String, Tensor<S>)> {
        let mut meta = vec![(
            "meta/run".to_string(),
            Tensor::from_f64([2], &[self.config.seed as f64, self.ctdg_epochs as f64]).expect("shape"),
        )];
        if let Some(c) = &self.conda {
            meta.push(("meta/schedule".to_string(), c.header()));
        }
        meta
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        Ok(checkpoint::save_store(path, &self.store, &self.meta())?)
    }

    /// Loads weights by name; `meta/` entries are skipped.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor<S>)> = checkpoint::load(path)?
            .into_iter()
            .filter(|(n, _)| !n.starts_with("meta/"))
            .collect();
        self.store.load_named(&tensors)?;
        Ok(())
    }
}

/// Builds an [`Experiment`] in `f64`, runs it and returns its report.
pub fn run_experiment(config: &TrainConfig, log: &EventLog) -> Result<RunReport> {
    run_experiment_with(config, log, None)
}

pub fn run_experiment_with(config: &TrainConfig, log: &EventLog, checkpoint: Option<&Path>) -> Result<RunReport> {
    let mut exp = Experiment::<f64>::new(config.clone(), log)?;
    exp.checkpoint = checkpoint.map(Path::to_path_buf);
    exp.run()?;
    Ok(exp.report)
}
