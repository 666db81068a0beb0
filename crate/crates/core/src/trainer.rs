//! Seeded training loop, optimizers, loss history and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::data::{batch_indices, PairedDataset};
use crate::encoders::{encode, logit_scale, Activation, EncoderParams, Modality};
use crate::error::{Error, Result};
use crate::losses::{
    lambda_schedule, rankclip_total, rankclip_total_scaled, LossBreakdown, LossConfig, UNIT_NORM_TOLERANCE,
};
use crate::rng::{derive_seed, Stream};
use crate::tensor::{Graph, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RCLC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let OptimizerKind::Adam { beta1, beta2, eps } = *self {
            let ok = (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0;
            if !ok {
                return Err(Error::invalid(format!(
                    "adam needs beta1, beta2 in [0, 1) and eps > 0, got ({beta1}, {beta2}, {eps})"
                )));
            }
        }
        Ok(())
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::adam()
    }
}

/// Moment estimates and step count. Empty moments for SGD.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Applies one update in place.
///
/// SGD: `p ← p − lr·g`. Adam: bias-corrected first and second moments,
/// `p ← p − lr·m̂ / (√v̂ + ε)`.
pub fn optimizer_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    kind: OptimizerKind,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "optimizer_step",
            format!("{} parameters vs {} gradients", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "optimizer_step",
                format!("parameter {i} is {:?}, gradient is {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.t += 1;
    match kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                p.data_mut().iter_mut().zip(g.data()).for_each(|(p, g)| *p -= lr * g);
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            if state.m.is_empty() {
                state.m = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
                state.v = state.m.clone();
            }
            if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
                return Err(Error::shape(
                    "optimizer_step",
                    "optimizer state does not match parameters",
                ));
            }
            let t = state.t as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for ((p, g), (m, v)) in params
                .iter_mut()
                .zip(grads)
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
            {
                let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
                for (j, &g) in g.data().iter().enumerate() {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                    v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                    p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossConfig,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub history_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 256,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::adam(),
            loss: LossConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            history_path: None,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        // Surfaces a scheduled-mode epoch count error before any work is done.
        lambda_schedule(
            1,
            self.epochs,
            self.loss.lambda_mode,
            (self.loss.fixed_lambda1, self.loss.fixed_lambda2),
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based epoch.
    pub epoch: usize,
    /// 1-based global step.
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub wall_time_s: f64,
}

#[derive(Serialize)]
struct HistoryLine {
    epoch: usize,
    step: u64,
    l_clip: f64,
    l_in: f64,
    l_cross: f64,
    lambda1: f64,
    lambda2: f64,
    total: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
}

impl TrainHistory {
    /// Newline-delimited JSON, one object per step. Wall time is left out so that
    /// identical runs give identical files.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let b = &r.breakdown;
            let line = HistoryLine {
                epoch: r.epoch,
                step: r.step,
                l_clip: b.l_clip,
                l_in: b.l_in,
                l_cross: b.l_cross,
                lambda1: b.lambda1,
                lambda2: b.lambda2,
                total: b.total,
            };
            let json = serde_json::to_string(&line).expect("history records serialize");
            writeln!(out, "{json}").expect("writing to a String");
        }
        out
    }

    pub fn write_ndjson(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_ndjson())?;
        Ok(())
    }

    /// Mean total loss over the steps of `epoch`.
    pub fn epoch_mean_total(&self, epoch: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.breakdown.total)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }
}

pub fn checkpoint_to_bytes(params: &EncoderParams, state: &OptimizerState, step: u64) -> Vec<u8> {
    let named = params.named_tensors();
    let mut w = Writer::new();
    w.bytes(&CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    w.u64(step);
    w.u8(params.activation.to_code());
    w.u64(state.t);
    w.u8(u8::from(!state.m.is_empty()));
    w.u32(named.len() as u32);
    for (name, t) in &named {
        w.u16(name.len() as u16);
        w.bytes(name.as_bytes());
        w.u8(t.shape().len() as u8);
        for &d in t.shape() {
            w.u32(d as u32);
        }
    }
    for (_, t) in &named {
        w.f64s(t.data());
    }
    for t in state.m.iter().chain(&state.v) {
        w.f64s(t.data());
    }
    w.buf
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(EncoderParams, OptimizerState, u64)> {
    let malformed = |detail: String| Error::Malformed {
        what: "checkpoint",
        detail,
    };
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let step = r.u64()?;
    let code = r.u8()?;
    let activation = Activation::from_code(code).ok_or_else(|| malformed(format!("unknown activation code {code}")))?;
    let t = r.u64()?;
    let has_moments = match r.u8()? {
        0 => false,
        1 => true,
        f => return Err(malformed(format!("bad moment flag {f}"))),
    };
    let count = r.u32()? as usize;
    let mut directory = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| malformed("tensor name is not utf-8".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        directory.push((name, shape));
    }
    let numel = |shape: &[usize]| -> Result<usize> {
        shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| malformed(format!("shape {shape:?} overflows")))
    };
    let read_set = |r: &mut Reader| -> Result<Vec<Tensor>> {
        directory
            .iter()
            .map(|(_, shape)| Tensor::new(shape.clone(), r.f64s(numel(shape)?)?))
            .collect()
    };
    let values = read_set(&mut r)?;
    let (m, v) = if has_moments {
        (read_set(&mut r)?, read_set(&mut r)?)
    } else {
        (Vec::new(), Vec::new())
    };
    r.finish()?;
    let named = directory.into_iter().map(|(n, _)| n).zip(values).collect();
    let params = EncoderParams::from_named(activation, named)?;
    Ok((params, OptimizerState { t, m, v }, step))
}

pub fn save_checkpoint(
    params: &EncoderParams,
    state: &OptimizerState,
    step: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(params, state, step))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(EncoderParams, OptimizerState, u64)> {
    checkpoint_from_bytes(&fs::read(path)?)
}

fn unit_rows(x: &Tensor) -> bool {
    (0..x.rows()).all(|r| {
        let norm = x.row(r).iter().map(|a| a * a).sum::<f64>().sqrt();
        (norm - 1.0).abs() <= UNIT_NORM_TOLERANCE
    })
}

/// Training state that can be advanced step by step and resumed from a checkpoint.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: EncoderParams,
    pub optimizer: OptimizerState,
    /// Completed steps.
    pub step: u64,
    pub history: TrainHistory,
}

impl Trainer {
    /// Fresh run. With a learnable temperature, `τ` starts at the configured value.
    pub fn new(cfg: TrainConfig, mut params: EncoderParams) -> Result<Self> {
        cfg.validate()?;
        if cfg.loss.learnable_temperature {
            params.set_temperature(cfg.loss.temperature_tau)?;
        }
        Ok(Trainer {
            cfg,
            params,
            optimizer: OptimizerState::default(),
            step: 0,
            history: TrainHistory::default(),
        })
    }

    pub fn from_checkpoint(cfg: TrainConfig, path: impl AsRef<Path>) -> Result<Self> {
        cfg.validate()?;
        let (params, optimizer, step) = load_checkpoint(path)?;
        Ok(Trainer {
            cfg,
            params,
            optimizer,
            step,
            history: TrainHistory::default(),
        })
    }

    pub fn steps_per_epoch(&self, ds: &PairedDataset) -> Result<u64> {
        Ok(batch_indices(ds, self.cfg.batch_size, 0)?.len() as u64)
    }

    pub fn total_steps(&self, ds: &PairedDataset) -> Result<u64> {
        Ok(self.steps_per_epoch(ds)? * self.cfg.epochs as u64)
    }

    fn check_dims(&self, ds: &PairedDataset) -> Result<()> {
        let (pi, pt) = (
            self.params.input_dim(Modality::Image),
            self.params.input_dim(Modality::Text),
        );
        if pi != ds.image_dim() || pt != ds.text_dim() {
            return Err(Error::shape(
                "train",
                format!(
                    "encoders expect ({pi}, {pt}) input columns, dataset has ({}, {})",
                    ds.image_dim(),
                    ds.text_dim()
                ),
            ));
        }
        Ok(())
    }

    /// Trains until all epochs are done or `max_steps` total steps have completed.
    pub fn run(&mut self, ds: &PairedDataset, max_steps: Option<u64>) -> Result<()> {
        self.check_dims(ds)?;
        let spe = self.steps_per_epoch(ds)?;
        let end = self.total_steps(ds)?.min(max_steps.unwrap_or(u64::MAX));
        let started = Instant::now();
        let mut epoch_batches: Option<(u64, Vec<Vec<usize>>)> = None;
        while self.step < end {
            let epoch = self.step / spe + 1;
            let position = (self.step % spe) as usize;
            if epoch_batches.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let seed = derive_seed(self.cfg.seed, Stream::BatchShuffle, epoch, 0);
                epoch_batches = Some((epoch, batch_indices(ds, self.cfg.batch_size, seed)?));
            }
            let indices = &epoch_batches.as_ref().expect("set above").1[position];
            let batch = ds.batch(indices);
            let global_step = self.step + 1;

            let loss_cfg = &self.cfg.loss;
            let lambdas = lambda_schedule(
                epoch as usize,
                self.cfg.epochs,
                loss_cfg.lambda_mode,
                (loss_cfg.fixed_lambda1, loss_cfg.fixed_lambda2),
            )?;
            let mut step_cfg = loss_cfg.clone();
            step_cfg.rank =
                loss_cfg
                    .rank
                    .with_seed(derive_seed(self.cfg.seed, Stream::RankShuffle, epoch, global_step));

            let mut g = Graph::new();
            let bound = self.params.bind(&mut g, true);
            let images = g.constant(batch.image);
            let texts = g.constant(batch.text);
            let v = encode(&mut g, &bound, images, Modality::Image)?;
            let t = encode(&mut g, &bound, texts, Modality::Text)?;
            if !unit_rows(g.value(v)) || !unit_rows(g.value(t)) {
                return Err(Error::Divergence {
                    step: global_step,
                    what: "embeddings overflowed",
                });
            }
            let out = if step_cfg.learnable_temperature {
                let scale = logit_scale(&mut g, &bound)?;
                rankclip_total_scaled(&mut g, v, t, scale, &step_cfg, lambdas.0, lambdas.1)?
            } else {
                rankclip_total(&mut g, v, t, &step_cfg, lambdas.0, lambdas.1)?
            };
            if !out.breakdown.is_finite() {
                return Err(Error::Divergence {
                    step: global_step,
                    what: "non-finite loss",
                });
            }
            g.backward(out.total)?;

            let vars = bound.vars();
            let zeros: Vec<Tensor> = vars
                .iter()
                .map(|&x| Tensor::zeros(g.value(x).shape().to_vec()))
                .collect();
            let grads: Vec<&Tensor> = vars.iter().zip(&zeros).map(|(&x, z)| g.grad(x).unwrap_or(z)).collect();
            let mut params = self.params.tensors_mut();
            optimizer_step(
                &mut params,
                &grads,
                &mut self.optimizer,
                self.cfg.optimizer,
                self.cfg.learning_rate,
            )?;
            if !self.params.all_finite() {
                return Err(Error::Divergence {
                    step: global_step,
                    what: "non-finite parameters",
                });
            }

            self.step = global_step;
            self.history.records.push(StepRecord {
                epoch: epoch as usize,
                step: global_step,
                breakdown: out.breakdown,
                wall_time_s: started.elapsed().as_secs_f64(),
            });
            if let Some(path) = &self.cfg.checkpoint_path {
                if self.cfg.checkpoint_every > 0 && global_step.is_multiple_of(self.cfg.checkpoint_every) {
                    save_checkpoint(&self.params, &self.optimizer, self.step, path)?;
                }
            }
        }
        if let Some(path) = &self.cfg.history_path {
            self.history.write_ndjson(path)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.params, &self.optimizer, self.step, path)
    }
}

/// Runs every epoch from `init` and returns the trained parameters and the history.
pub fn train(cfg: &TrainConfig, ds: &PairedDataset, init: EncoderParams) -> Result<(EncoderParams, TrainHistory)> {
    if ds.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let mut trainer = Trainer::new(cfg.clone(), init)?;
    trainer.run(ds, None)?;
    Ok((trainer.params, trainer.history))
}
