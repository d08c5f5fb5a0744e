//! Training loop for the four methods. One iteration of `arnet` runs
//! forward, memory read, cache push plus Sinkhorn targets, a joint Adam
//! step on encoder, classifier and prototypes, prototype renormalization
//! and the prototype-label write, in that order. The baselines skip the
//! steps they do not use.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::datagen::{batches, NoisyDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, purity};
use crate::kernel::{adam_step, derive_seed, l2_normalize_rows, AdamState, Matrix, Rng};
use crate::memory::{Memory, DEFAULT_CACHE_CAPACITY};
use crate::model::{backward, forward, Dims, ModelParams};
use crate::objective::{combined_loss, ClusterInputs, LossInputs, LossWeights, Method};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    /// Mixing weight of the retrieved label in the pseudo label.
    pub lambda: f64,
    /// Momentum of the prototype-label write.
    pub beta: f64,
    /// Weight of the agreement regularizer.
    pub alpha: f64,
    /// Entropic smoothing of the Sinkhorn targets.
    pub xi: f64,
    /// Softmax temperature of the memory attention.
    pub temperature: f64,
    pub slots: usize,
    pub sinkhorn_iters: usize,
    pub cache_capacity: usize,
    pub lr: f64,
    /// Learning rate of the prototypes; `None` shares `lr`.
    pub prototype_lr: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    /// Adds the clustering term for `arnet`.
    pub cluster_loss: bool,
    /// Lets the clustering gradient reach the encoder, not only the prototypes.
    pub cluster_to_encoder: bool,
    /// Writes prototype labels from a second forward pass after the update.
    pub post_update_labels: bool,
    pub bootstrap_weight: f64,
    pub elr_momentum: f64,
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Arnet,
            lambda: 0.8,
            beta: 0.8,
            alpha: 3.0,
            xi: 0.05,
            temperature: 1.0,
            slots: 64,
            sinkhorn_iters: 3,
            cache_capacity: DEFAULT_CACHE_CAPACITY,
            lr: 1e-4,
            prototype_lr: None,
            epochs: 50,
            batch_size: 128,
            seed: 0,
            hidden_dim: 32,
            latent_dim: 16,
            cluster_loss: true,
            cluster_to_encoder: true,
            post_update_labels: false,
            bootstrap_weight: 0.2,
            elr_momentum: 0.7,
            log_wall_time: false,
        }
    }
}

fn unit_interval(key: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(key, format!("must lie in [0, 1], got {v}")))
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be positive, got {v}")))
    }
}

fn at_least_one(key: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::config(key, "must be at least 1"))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        unit_interval("lambda", self.lambda)?;
        unit_interval("beta", self.beta)?;
        unit_interval("bootstrap_weight", self.bootstrap_weight)?;
        unit_interval("elr_momentum", self.elr_momentum)?;
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", format!("must be non-negative, got {}", self.alpha)));
        }
        positive("xi", self.xi)?;
        positive("temperature", self.temperature)?;
        positive("lr", self.lr)?;
        if let Some(p) = self.prototype_lr {
            positive("prototype_lr", p)?;
        }
        at_least_one("slots", self.slots)?;
        at_least_one("sinkhorn_iters", self.sinkhorn_iters)?;
        at_least_one("epochs", self.epochs)?;
        at_least_one("batch_size", self.batch_size)?;
        at_least_one("hidden_dim", self.hidden_dim)?;
        at_least_one("latent_dim", self.latent_dim)?;
        Ok(())
    }

    pub fn dims(&self, ds: &NoisyDataset) -> Dims {
        Dims {
            input: ds.input_dim(),
            hidden: self.hidden_dim,
            latent: self.latent_dim,
            classes: ds.classes,
        }
    }

    fn prototype_lr(&self) -> f64 {
        self.prototype_lr.unwrap_or(self.lr)
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub reg: f64,
    pub cluster: f64,
    /// Accuracy against the noisy training labels.
    pub train_acc: f64,
    /// Clean-label test accuracy and macro F1; 0 without test rows.
    pub test_acc: f64,
    pub test_f1: f64,
    /// Fraction of training rows whose target argmax is the clean label.
    pub purity: f64,
    /// Epoch wall time, 0 unless `log_wall_time` is set.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const LOG_HEADER: &str = "epoch,total,ce,reg,cluster,train_acc,test_acc,test_f1,purity,seconds";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.epoch, r.total, r.ce, r.reg, r.cluster, r.train_acc, r.test_acc, r.test_f1, r.purity, r.seconds
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Steps of one training iteration, reported to a [`PhaseObserver`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Forward,
    Read,
    Targets,
    Update,
    Renormalize,
    Write,
}

/// Instrumentation hooks; every method has an empty default.
pub trait PhaseObserver {
    fn phase(&mut self, _epoch: usize, _batch: usize, _phase: Phase) {}
    fn iteration_end(&mut self, _epoch: usize, _batch: usize, _memory: &Memory) {}
}

pub struct NoObserver;

impl PhaseObserver for NoObserver {}

/// Everything that evolves during training. Checkpoints store it whole so a
/// resumed run continues bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub method: Method,
    pub params: ModelParams,
    pub memory: Memory,
    /// Adam state per tensor of `params`, then one for the prototypes.
    pub optimizer: Vec<AdamState>,
    /// Per-row moving-average targets (`elr` only), indexed by dataset row.
    pub elr_targets: Option<Matrix>,
    pub log: TrainLog,
}

impl TrainState {
    pub fn epochs_done(&self) -> usize {
        self.log.records.len()
    }
}

/// Seed streams derived from the run seed.
const STREAM_PARAMS: u64 = 1;
const STREAM_MEMORY: u64 = 2;
const STREAM_BATCHES: u64 = 3;
const STREAM_RESEED: u64 = 4;

pub struct Trainer<'a> {
    cfg: TrainConfig,
    ds: &'a NoisyDataset,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, ds: &'a NoisyDataset) -> Result<Self> {
        cfg.validate()?;
        if ds.train_rows().is_empty() {
            return Err(Error::Data("dataset has no training rows".into()));
        }
        let dims = cfg.dims(ds);
        dims.validate()?;
        let params = ModelParams::init(&mut Rng::derived(cfg.seed, &[STREAM_PARAMS]), dims)?;
        let memory = Memory::new(
            &mut Rng::derived(cfg.seed, &[STREAM_MEMORY]),
            cfg.slots,
            cfg.latent_dim,
            ds.classes,
            cfg.cache_capacity,
            cfg.temperature,
        )?;
        let mut optimizer: Vec<AdamState> = params.tensors().iter().map(|t| AdamState::for_param(t)).collect();
        optimizer.push(AdamState::for_param(&memory.prototypes));
        let elr_targets = (cfg.method == Method::Elr).then(|| Matrix::zeros(ds.len(), ds.classes));
        Ok(Self {
            cfg: cfg.clone(),
            ds,
            state: TrainState {
                method: cfg.method,
                params,
                memory,
                optimizer,
                elr_targets,
                log: TrainLog::default(),
            },
        })
    }

    /// Continues from a saved state; the state must match `cfg` and `ds`.
    pub fn resume(cfg: &TrainConfig, ds: &'a NoisyDataset, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        state.params.check_dims(cfg.dims(ds))?;
        if state.method != cfg.method {
            return Err(Error::config(
                "method",
                format!("checkpoint was trained with {}, config asks for {}", state.method, cfg.method),
            ));
        }
        let m = &state.memory;
        if m.slots() != cfg.slots || m.latent_dim() != cfg.latent_dim || m.classes() != ds.classes {
            return Err(Error::shape(
                "Trainer::resume (memory)",
                format!("{}x{}/{}", cfg.slots, cfg.latent_dim, ds.classes),
                format!("{}x{}/{}", m.slots(), m.latent_dim(), m.classes()),
            ));
        }
        if state.optimizer.len() != 7 {
            return Err(Error::shape("Trainer::resume (optimizer)", 7, state.optimizer.len()));
        }
        if let Some(t) = &state.elr_targets {
            if t.shape() != (ds.len(), ds.classes) {
                return Err(Error::shape(
                    "Trainer::resume (targets)",
                    format!("{}x{}", ds.len(), ds.classes),
                    format!("{}x{}", t.rows(), t.cols()),
                ));
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            ds,
            state,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    /// Trains until `cfg.epochs` epochs are complete.
    pub fn run(&mut self, observer: &mut dyn PhaseObserver) -> Result<()> {
        while self.state.epochs_done() < self.cfg.epochs {
            self.run_epoch(observer)?;
        }
        Ok(())
    }

    pub fn run_epoch(&mut self, observer: &mut dyn PhaseObserver) -> Result<EpochRecord> {
        let started = Instant::now();
        let epoch = self.state.epochs_done();
        let plan = batches(self.ds, self.cfg.batch_size, derive_seed(self.cfg.seed, &[STREAM_BATCHES]), epoch)?;
        let mut sums = [0.0f64; 4];
        for (b, rows) in plan.iter().enumerate() {
            let r = self.step(epoch, b, rows, observer)?;
            for (s, v) in sums.iter_mut().zip(r) {
                *s += v;
            }
            observer.iteration_end(epoch, b, &self.state.memory);
        }
        let n = plan.len() as f64;
        let (train_acc, purity) = self.train_diagnostics()?;
        let (test_acc, test_f1) = if self.ds.rows_in(Split::Test).is_empty() {
            (0.0, 0.0)
        } else {
            let m = evaluate(&self.state.params, self.ds, Split::Test)?;
            (m.accuracy, m.macro_f1)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            total: sums[0] / n,
            ce: sums[1] / n,
            reg: sums[2] / n,
            cluster: sums[3] / n,
            train_acc,
            test_acc,
            test_f1,
            purity,
            seconds: if self.cfg.log_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        log::debug!(
            "epoch {} total={:.4} ce={:.4} reg={:.4} cluster={:.4} test_acc={:.4}",
            record.epoch,
            record.total,
            record.ce,
            record.reg,
            record.cluster,
            record.test_acc
        );
        self.state.log.records.push(record);
        Ok(record)
    }

    /// One iteration; returns `[total, ce, reg, cluster]`.
    fn step(&mut self, epoch: usize, batch: usize, rows: &[usize], obs: &mut dyn PhaseObserver) -> Result<[f64; 4]> {
        let cfg = &self.cfg;
        let st = &mut self.state;
        let x = self.ds.x.select_rows(rows)?;
        let labels: Vec<usize> = rows.iter().map(|&i| self.ds.y_noisy[i]).collect();

        obs.phase(epoch, batch, Phase::Forward);
        let trace = forward(&st.params, &x)?;

        let mut read = None;
        let mut assignments = None;
        let mut targets = None;
        match cfg.method {
            Method::Arnet => {
                obs.phase(epoch, batch, Phase::Read);
                let r = st.memory.read(&trace.latent, &trace.probs, cfg.lambda)?;
                targets = Some(r.targets.clone());
                read = Some(r);

                obs.phase(epoch, batch, Phase::Targets);
                let (normed, _) = l2_normalize_rows(&trace.latent);
                st.memory.cache_push(&normed)?;
                let b = normed.rows();
                // The cache now ends with this batch unless it is smaller than the batch.
                let all = if st.memory.cache_len() >= b {
                    let cached: Vec<&[f64]> = st.memory.cache_rows().collect();
                    Matrix::from_rows(&cached)?
                } else {
                    normed
                };
                let q = st.memory.sinkhorn_targets(&all, cfg.xi, cfg.sinkhorn_iters)?.assignments;
                let tail: Vec<usize> = (q.rows() - b..q.rows()).collect();
                assignments = Some(q.select_rows(&tail)?);
            }
            Method::Elr => {
                obs.phase(epoch, batch, Phase::Targets);
                let t = st.elr_targets.as_mut().ok_or_else(|| Error::Data("missing elr targets".into()))?;
                let m = cfg.elr_momentum;
                for (i, &row) in rows.iter().enumerate() {
                    for (tk, &rk) in t.row_mut(row).iter_mut().zip(trace.probs.row(i)) {
                        *tk = m * *tk + (1.0 - m) * rk;
                    }
                }
                targets = Some(t.select_rows(rows)?);
            }
            Method::Ce | Method::Bootstrap => {}
        }

        obs.phase(epoch, batch, Phase::Update);
        let cluster = match (&read, &assignments) {
            (Some(r), Some(q)) if cfg.cluster_loss => Some(ClusterInputs {
                latent: &trace.latent,
                prototypes: &st.memory.prototypes,
                attention: &r.attention,
                assignments: q,
                temperature: cfg.temperature,
                to_encoder: cfg.cluster_to_encoder,
            }),
            _ => None,
        };
        let (report, grads) = combined_loss(
            cfg.method,
            LossInputs {
                probs: &trace.probs,
                labels: &labels,
                targets: targets.as_ref(),
                cluster,
            },
            LossWeights {
                alpha: cfg.alpha,
                bootstrap_weight: cfg.bootstrap_weight,
            },
        )?;
        if !report.is_finite() {
            log::error!(
                "non-finite loss at epoch {epoch}, batch {batch}: total={} ce={} reg={} cluster={}",
                report.total,
                report.ce,
                report.reg,
                report.cluster
            );
            return Err(Error::NonFiniteLoss {
                epoch,
                batch,
                ce: report.ce,
                reg: report.reg,
                cluster: report.cluster,
            });
        }
        let d_latent = match grads.d_prototypes {
            Some(_) => grads.d_latent,
            None => Matrix::zeros(trace.latent.rows(), trace.latent.cols()),
        };
        let g = backward(&st.params, &trace, &grads.d_logits, &d_latent)?;
        let (param_opt, proto_opt) = st.optimizer.split_at_mut(6);
        for ((p, gr), opt) in st.params.tensors_mut().into_iter().zip(g.tensors()).zip(param_opt) {
            adam_step(p, gr, opt, cfg.lr)?;
        }
        if let Some(dc) = &grads.d_prototypes {
            adam_step(&mut st.memory.prototypes, dc, &mut proto_opt[0], cfg.prototype_lr())?;
        }

        if let Some(q) = &assignments {
            obs.phase(epoch, batch, Phase::Renormalize);
            let mut rng = Rng::derived(cfg.seed, &[STREAM_RESEED, epoch as u64, batch as u64]);
            st.memory.renormalize_prototypes(&mut rng);

            obs.phase(epoch, batch, Phase::Write);
            if cfg.post_update_labels {
                let after = forward(&st.params, &x)?;
                st.memory.write_labels(q, &after.probs, cfg.beta)?;
            } else {
                st.memory.write_labels(q, &trace.probs, cfg.beta)?;
            }
        }
        Ok([report.total, report.ce, report.reg, report.cluster])
    }

    /// Noisy-label training accuracy and target purity over all training rows.
    fn train_diagnostics(&self) -> Result<(f64, f64)> {
        let rows = self.ds.train_rows();
        let trace = forward(&self.state.params, &self.ds.x.select_rows(&rows)?)?;
        let pred = trace.probs.argmax_rows();
        let hits = rows.iter().zip(&pred).filter(|(&i, &p)| self.ds.y_noisy[i] == p).count();
        let train_acc = hits as f64 / rows.len() as f64;
        let clean: Vec<usize> = rows.iter().map(|&i| self.ds.y_clean[i]).collect();
        let targets = match self.cfg.method {
            Method::Ce => trace.probs,
            Method::Bootstrap => {
                let w = self.cfg.bootstrap_weight;
                let mut t = trace.probs.scale(w);
                for (i, &row) in rows.iter().enumerate() {
                    t[(i, self.ds.y_noisy[row])] += 1.0 - w;
                }
                t
            }
            Method::Elr => self
                .state
                .elr_targets
                .as_ref()
                .ok_or_else(|| Error::Data("missing elr targets".into()))?
                .select_rows(&rows)?,
            Method::Arnet => self.state.memory.read(&trace.latent, &trace.probs, self.cfg.lambda)?.targets,
        };
        Ok((train_acc, purity(&targets, &clean)?))
    }
}

/// Final state of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub memory: Memory,
    pub log: TrainLog,
}

pub fn train(cfg: &TrainConfig, ds: &NoisyDataset) -> Result<TrainOutcome> {
    train_observed(cfg, ds, &mut NoObserver)
}

pub fn train_observed(cfg: &TrainConfig, ds: &NoisyDataset, observer: &mut dyn PhaseObserver) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, ds)?;
    trainer.run(observer)?;
    let st = trainer.into_state();
    Ok(TrainOutcome {
        params: st.params,
        memory: st.memory,
        log: st.log,
    })
}
