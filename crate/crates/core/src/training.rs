//! Loss, Adam, target standardization and the epoch loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::jsonfmt;
use crate::layers::{Mode, ParamSet, BN_MOMENTUM};
use crate::model::{build_model, Model, ModelConfig, PreparedGraph, TargetNorm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Graphs per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub shuffle: bool,
    /// Write a checkpoint every this many epochs (the final one is always written).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    /// Global gradient-norm clip; off unless set.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 75,
            batch_size: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            shuffle: true,
            checkpoint_every: None,
            clip_norm: None,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed so that a run can be used as a pure forward probe.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be ≥ 0, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("Adam needs β₁, β₂ in [0, 1) and ε > 0".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Mean squared error over nodes.
pub fn mse_loss(y: &[f64], f: &[f64]) -> Result<f64> {
    if y.len() != f.len() || y.is_empty() {
        return Err(Error::Shape(format!(
            "mse_loss needs equal non-empty lengths, got {} and {}",
            y.len(),
            f.len()
        )));
    }
    Ok(y.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

/// Tape version of [`mse_loss`] for an `n × 1` prediction.
pub fn mse_loss_var<T: Real>(tape: &mut Tape<T>, prediction: Var, target: &[f64]) -> Result<Var> {
    let (n, c) = tape.shape(prediction);
    if c != 1 || n != target.len() || n == 0 {
        return Err(Error::Shape(format!(
            "prediction is {n}×{c}, target has {} values",
            target.len()
        )));
    }
    let t = tape.constant(Matrix::column(target.iter().map(|&v| T::from_f64(v)).collect()));
    let d = tape.sub(prediction, t)?;
    let sq = tape.square(d);
    tape.reduce_mean(sq)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.values().iter().map(|p| vec![0.0; p.data().len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [Matrix<f64>],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape("adam_step: parameter, gradient and state counts differ".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.data().len() != g.len() || state.m[i].len() != g.len() {
            return Err(Error::Shape(format!("adam_step: shape mismatch for parameter {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Population mean and standard deviation over every node of `targets`.
pub fn standardize_targets<'a>(targets: impl IntoIterator<Item = &'a [f64]>) -> Result<TargetNorm> {
    let all: Vec<f64> = targets.into_iter().flatten().copied().collect();
    if all.is_empty() {
        return Err(Error::InvalidInput("no target values to standardize".into()));
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::InvalidInput(format!(
            "targets are constant (std = {std}); standardization is undefined"
        )));
    }
    Ok(TargetNorm { mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
}

/// Single-precision optimizer loop around a model.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    state: AdamState,
}

impl Trainer {
    pub fn new(mut model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.train_config = Some(config.clone());
        let state = AdamState::new(&model.params);
        Ok(Self { model, config, state })
    }

    /// Loss on `batch` before the update, followed by one Adam step.
    pub fn step(&mut self, batch: &PreparedGraph) -> Result<f64> {
        let target = batch
            .target
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("{}: no target values", batch.name)))?;
        let norm = self.model.target_norm;
        let z: Vec<f64> = target.iter().map(|&v| norm.normalize(v)).collect();

        let mut tape = Tape::<f32>::new();
        let p = self.model.params.bind(&mut tape, true);
        let out = self.model.forward(&mut tape, &p, batch, Mode::Train)?;
        let loss_var = mse_loss_var(&mut tape, out.prediction, &z)?;
        let loss = tape.value(loss_var).data()[0].as_f64();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss on batch {}", batch.name)));
        }
        let grads = tape.backward(loss_var);
        let mut flat: Vec<Vec<f64>> = p
            .iter()
            .map(|&v| {
                grads
                    .get_or_zeros(v, &tape)
                    .data()
                    .iter()
                    .map(|g| g.as_f64())
                    .collect()
            })
            .collect();
        if let Some(limit) = self.config.clip_norm {
            let norm: f64 = flat.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if norm > limit {
                let s = limit / norm;
                flat.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        let c = &self.config;
        adam_step(
            self.model.params.values_mut(),
            &flat,
            &mut self.state,
            c.lr,
            c.beta1,
            c.beta2,
            c.eps,
        )?;
        self.model.apply_bn_stats(&out.bn_stats, BN_MOMENTUM);
        Ok(loss)
    }

    /// Shuffles (seed + epoch), batches by disjoint union and steps through once.
    pub fn run_epoch(&mut self, samples: &[PreparedGraph], epoch: usize) -> Result<EpochRecord> {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        if self.config.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(epoch as u64));
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let loss = if chunk.len() == 1 {
                self.step(&samples[chunk[0]])
            } else {
                let parts: Vec<&PreparedGraph> = chunk.iter().map(|&i| &samples[i]).collect();
                self.step(&PreparedGraph::union(&parts)?)
            };
            let loss = loss.map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, batch {b}: {msg}")),
                other => other,
            })?;
            total += loss;
            batches += 1;
        }
        Ok(EpochRecord {
            epoch,
            mean_loss: total / batches as f64,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for `history.json`, periodic and final checkpoints.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch{epoch:04}.ckpt")
}

/// Builds a model from `model_config` (seeded by the train seed), fits it to
/// `samples` and returns the trained model with its loss history.
pub fn train(
    model_config: &ModelConfig,
    config: &TrainConfig,
    samples: &[PreparedGraph],
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("train split is empty".into()));
    }
    let mut model = build_model(model_config, config.seed)?;
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        let t = s
            .target
            .as_deref()
            .ok_or_else(|| Error::InvalidInput(format!("{}: training shape has no target", s.name)))?;
        targets.push(t);
    }
    if config.standardize {
        model.target_norm = standardize_targets(targets)?;
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let record = trainer.run_epoch(samples, epoch)?;
        log::info!(
            "epoch {epoch}/{}: loss {:.6} ({:.1}s)",
            config.epochs,
            record.mean_loss,
            record.seconds
        );
        history.push(record);
        if let (Some(dir), Some(every)) = (&options.out_dir, config.checkpoint_every) {
            if epoch % every == 0 && epoch != config.epochs {
                trainer.model.save_checkpoint(&dir.join(checkpoint_name(epoch)))?;
            }
        }
    }
    if let Some(dir) = &options.out_dir {
        trainer.model.save_checkpoint(&dir.join(FINAL_CHECKPOINT))?;
        write_history(&dir.join("history.json"), &history)?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        history,
    })
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    jsonfmt::write_json_17(path, &history)
}
