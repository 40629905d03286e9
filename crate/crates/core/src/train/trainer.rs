//! Epoch loop: shuffled minibatches, MSE, Adam, plateau schedule, checkpoints.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Eager, Tape};
use crate::data::{ImageBuffer, InputMode};
use crate::error::{Error, Result};
use crate::model::{EraseNet, Mode, Variant};
use crate::nn;
use crate::tensor::Tensor;
use crate::train::checkpoint::{save_checkpoint, Checkpoint};
use crate::train::optim::{AdamState, PlateauState, DEFAULT_LR};
use crate::train::state;

/// A `(noisy, clean)` pair of `1 x 1 x h x w` tensors.
pub type Sample = (Tensor<f32>, Tensor<f32>);

pub fn to_samples(pairs: &[(ImageBuffer, ImageBuffer)]) -> Vec<Sample> {
    pairs
        .iter()
        .map(|(n, c)| (n.to_tensor(), c.to_tensor()))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub width_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub input_mode: InputMode,
    /// Write `latest.ckpt` every this many epochs (`best.ckpt` on improvement).
    pub checkpoint_every: usize,
    /// Directory for checkpoints and `loss.csv`; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::EraseNet4,
            width_scale: 1.0,
            epochs: 100,
            batch_size: 8,
            lr: DEFAULT_LR,
            seed: 0,
            input_mode: InputMode::Patch,
            checkpoint_every: 1,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint cadence must be at least 1".into());
        }
        Ok(())
    }
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean train-mode loss over the epoch's minibatches (sample weighted).
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},", self.epoch, self.train_mse)?;
        if let Some(v) = self.val_mse {
            write!(f, "{v}")?;
        }
        write!(f, ",{}", self.lr)
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: EraseNet<f32>,
    pub adam: AdamState<f32>,
    pub plateau: PlateauState,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochLog>,
    best_monitored: f64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = EraseNet::new(config.variant, config.width_scale, config.seed)?;
        let adam = AdamState::new(model.params(), config.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            model,
            adam,
            plateau: PlateauState::default(),
            epoch: 0,
            rng,
            history: Vec::new(),
            best_monitored: f64::INFINITY,
        })
    }

    /// Continues from a full training checkpoint.
    pub fn resume(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let model = state::restore_model(ckpt, Some(config.variant))?;
        let adam = state::restore_adam(ckpt, &model)?;
        let plateau = state::restore_plateau(ckpt)?;
        let rng = state::restore_rng(ckpt)?;
        let epoch = ckpt
            .require("train.epoch")?
            .as_u64()?
            .first()
            .copied()
            .unwrap_or(0) as usize;
        Ok(Self {
            config,
            model,
            adam,
            plateau,
            epoch,
            rng,
            history: Vec::new(),
            best_monitored: plateau.best,
        })
    }

    /// Model, optimizer, scheduler, epoch counter and generator state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = state::model_checkpoint(&self.model);
        c.entries
            .extend(state::adam_entries(&self.adam, &self.model));
        c.entries.extend(state::plateau_entries(&self.plateau));
        c.entries.extend(state::rng_entries(&self.rng));
        c.entries.push(crate::train::checkpoint::Entry::u64s(
            "train.epoch",
            &[self.epoch as u64],
        ));
        c
    }

    /// One Adam step on a minibatch; returns its train-mode loss. Nothing
    /// is modified when the loss or any gradient is non-finite.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<f64> {
        let x = Tensor::stack(&batch.iter().map(|s| &s.0).collect::<Vec<_>>())?;
        let y = Tensor::stack(&batch.iter().map(|s| &s.1).collect::<Vec<_>>())?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let yv = tape.leaf(y, false);
        let params = self.model.bind(&mut tape);
        let mut rng = self.rng.clone();
        let fwd = self
            .model
            .forward_with(&mut tape, &params, &xv, Mode::Train(&mut rng))?;
        let loss = tape.mse_loss(fwd.output, yv)?;
        let value = tape.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss ({value})")));
        }
        tape.backward(loss)?;
        let grads: Vec<Tensor<f32>> = params
            .iter()
            .zip(self.model.params().iter())
            .map(|(&v, p)| {
                tape.take_grad(v)
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect();
        drop(tape);
        self.adam.step(self.model.params_mut(), &grads)?;
        self.model.apply_moments(&fwd.moments);
        self.rng = rng;
        Ok(value)
    }

    /// Inference-mode mean per-pixel MSE over `samples`.
    pub fn evaluate(&self, samples: &[Sample]) -> Result<f64> {
        evaluate(&self.model, samples, self.config.batch_size)
    }

    /// Runs one epoch and feeds the scheduler.
    pub fn run_epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        let lr = self.adam.lr;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            total += self.train_step(&batch)? * batch.len() as f64;
        }
        let train_mse = total / train.len() as f64;
        let val_mse = if val.is_empty() {
            None
        } else {
            Some(self.evaluate(val)?)
        };
        let monitored = val_mse.unwrap_or(train_mse);
        if !monitored.is_finite() {
            return Err(Error::NonFinite(format!("validation loss ({monitored})")));
        }
        self.adam.lr = self.plateau.update(monitored, lr);
        self.epoch += 1;
        let log = EpochLog {
            epoch: self.epoch,
            train_mse,
            val_mse,
            lr,
        };
        self.history.push(log.clone());
        Ok(log)
    }

    /// Trains up to `config.epochs`. With an output directory, writes the
    /// loss log and checkpoints; a non-finite loss halts with the path of
    /// the last good checkpoint.
    pub fn fit(&mut self, train: &[Sample], val: &[Sample]) -> Result<()> {
        let dir = self.config.out_dir.clone();
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let latest = dir.as_ref().map(|d| d.join("latest.ckpt"));
        while self.epoch < self.config.epochs {
            let epoch = self.epoch + 1;
            let log = match self.run_epoch(train, val) {
                Ok(l) => l,
                Err(Error::NonFinite(what)) => {
                    log::error!("epoch {epoch}: non-finite {what}");
                    let last_good = latest.clone().filter(|p| p.exists());
                    return Err(Error::NumericalHalt { epoch, last_good });
                }
                Err(e) => return Err(e),
            };
            log::info!("{log}");
            if let Some(d) = &dir {
                self.write_log(&d.join("loss.csv"))?;
                let monitored = log.val_mse.unwrap_or(log.train_mse);
                let improved = monitored < self.best_monitored;
                if improved
                    || self.epoch % self.config.checkpoint_every == 0
                    || self.epoch == self.config.epochs
                {
                    let ckpt = self.checkpoint();
                    save_checkpoint(&ckpt, d.join("latest.ckpt"))?;
                    if improved {
                        self.best_monitored = monitored;
                        save_checkpoint(&ckpt, d.join("best.ckpt"))?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn loss_log(&self) -> String {
        self.history.iter().map(|l| format!("{l}\n")).collect()
    }

    fn write_log(&self, path: &Path) -> Result<()> {
        fs::write(path, self.loss_log()).map_err(|e| Error::io(path, e))
    }
}

/// Inference-mode mean per-pixel MSE of `model` over `samples`.
pub fn evaluate(model: &EraseNet<f32>, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let mut g = Eager;
    let params = model.bind(&mut g);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let x = Tensor::stack(&chunk.iter().map(|s| &s.0).collect::<Vec<_>>())?;
        let y = Tensor::stack(&chunk.iter().map(|s| &s.1).collect::<Vec<_>>())?;
        let out = model
            .forward_with(&mut g, &params, &Arc::new(x), Mode::Infer)?
            .output;
        total += nn::mse(&out, &y)?.item()? as f64 * y.len() as f64;
        count += y.len();
    }
    Ok(if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn samples(n: usize) -> Vec<Sample> {
        let s = Shape::new(1, 1, 16, 16).unwrap();
        (0..n)
            .map(|k| {
                let clean = Tensor::from_fn(s, |i| if (i / 16 + k) % 5 == 0 { 0.0 } else { 1.0 });
                let noisy = clean.map(|v| v * 0.7 + 0.2);
                (noisy, clean)
            })
            .collect()
    }

    fn config() -> TrainConfig {
        TrainConfig {
            variant: Variant::EraseNet4,
            width_scale: 0.0625,
            epochs: 2,
            batch_size: 2,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        assert!(Trainer::new(TrainConfig {
            epochs: 0,
            ..config()
        })
        .is_err());
        assert!(Trainer::new(TrainConfig {
            batch_size: 0,
            ..config()
        })
        .is_err());
    }

    #[test]
    fn identical_seeds_identical_logs() {
        let data = samples(3);
        let run = || {
            let mut t = Trainer::new(config()).unwrap();
            t.fit(&data, &data[..1]).unwrap();
            t.loss_log()
        };
        let a = run();
        assert_eq!(a.lines().count(), 2);
        assert_eq!(a, run());
    }

    #[test]
    fn resume_continues_identically() {
        let data = samples(3);
        let mut full = Trainer::new(config()).unwrap();
        full.fit(&data, &[]).unwrap();

        let mut first = Trainer::new(TrainConfig {
            epochs: 1,
            ..config()
        })
        .unwrap();
        first.fit(&data, &[]).unwrap();
        let ckpt = Checkpoint::decode(&first.checkpoint().encode()).unwrap();
        let mut second = Trainer::resume(config(), &ckpt).unwrap();
        second.fit(&data, &[]).unwrap();
        assert_eq!(second.history[0], full.history[1]);
        assert_eq!(
            state::model_entries(&second.model),
            state::model_entries(&full.model)
        );
    }

    #[test]
    fn evaluation_leaves_state_alone() {
        let data = samples(2);
        let mut t = Trainer::new(config()).unwrap();
        t.run_epoch(&data, &[]).unwrap();
        let before = t.checkpoint();
        t.evaluate(&data).unwrap();
        assert_eq!(t.checkpoint(), before);
    }

    #[test]
    fn nan_input_halts() {
        let mut data = samples(2);
        data[0].0.data_mut()[3] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(TrainConfig {
            out_dir: Some(dir.path().into()),
            ..config()
        })
        .unwrap();
        match t.fit(&data, &[]) {
            Err(Error::NumericalHalt {
                epoch: 1,
                last_good: None,
            }) => {}
            other => panic!("unexpected {:?}", other.err()),
        }
    }
}
