use std::io::Write;
use std::path::{Path, PathBuf};

use rainforge_tensor::{Tape, Tensor};

use crate::checkpoint::{Checkpoint, TrainState};
use crate::config::RunConfig;
use crate::data::dataset::build_split;
use crate::data::{Pair, PairedDataset};
use crate::error::{Error, Result};
use crate::losses::{psnr_var, total_loss, FeatureExtractor};
use crate::metrics::{psnr, ssim};
use crate::model::Derainer;
use crate::train::{AdamState, Schedule};

/// One optimization step's log entry.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
    /// PSNR of the stage-two output on the training batch.
    pub psnr: f64,
    pub contrastive: Option<f64>,
    pub validation: Option<Validation>,
}

/// Mean metrics over the held-out pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR of the unprocessed rainy inputs, for reference.
    pub rainy_psnr: f64,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Derainer<f32>,
    pub adam: AdamState<f32>,
    pub fx: FeatureExtractor<f32>,
    pub data: PairedDataset,
    pub val: Vec<Pair>,
    pub schedule: Schedule,
    pub state: TrainState,
}

fn stack(items: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let data: Vec<f32> = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::new(shape, data)?)
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Derainer::new(&config.model)?;
        let adam = AdamState::new(config.adam.clone());
        Self::assemble(config, model, adam, TrainState::default())
    }

    /// Continues from a checkpoint; the stored configuration is used.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        Self::assemble(ckpt.config.clone(), ckpt.model()?, ckpt.adam(), ckpt.state.clone())
    }

    fn assemble(config: RunConfig, model: Derainer<f32>, adam: AdamState<f32>, state: TrainState) -> Result<Self> {
        let fx = match &config.train.feature_weights {
            Some(path) => FeatureExtractor::load(path)?,
            None => FeatureExtractor::new(config.model.feature_seed),
        };
        let (data, val) = build_split(&config.data, &config.rain, config.model.data_seed)?;
        if data.batches_per_epoch(config.data.batch_size) == 0 {
            return Err(Error::Dataset(format!(
                "{} training pairs cannot fill a batch of {}",
                data.len(),
                config.data.batch_size
            )));
        }
        let schedule = config.train.schedule();
        Ok(Trainer { config, model, adam, fx, data, val, schedule, state })
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    /// Deep-supervised loss on a batch, without updating anything.
    /// Returns `(loss, stage-two psnr, contrastive term, gradients)`.
    fn loss_and_grads(&self, clean: &Tensor<f32>, rainy: &Tensor<f32>) -> Result<(f64, f64, Option<f64>, rainforge_tensor::Gradients<f32>)> {
        let tape = Tape::new();
        let out = self.model.forward(&tape.constant(rainy.clone()))?;
        let terms = total_loss(&out.stage2, clean, rainy, &self.fx, &self.config.model.loss())?;
        let stage1 = psnr_var(&out.stage1, &tape.constant(clean.clone()))?;
        let loss = terms.total.sub(&stage1)?;
        let value = loss.value().item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { what: "loss", iteration: self.state.iteration });
        }
        let grads = tape.backward(&loss)?;
        Ok((value, terms.psnr, terms.contrastive, grads))
    }

    /// Loss and its parts for the batch that `step` would use next.
    pub fn peek_loss(&self) -> Result<(f64, f64, Option<f64>)> {
        let batch = self.data.batch_at(self.state.iteration, self.config.data.batch_size)?;
        let (loss, p, cr, _) = self.loss_and_grads(&batch.clean, &batch.rainy)?;
        Ok((loss, p, cr))
    }

    /// One optimization step. A non-finite loss or gradient aborts
    /// before any parameter changes.
    pub fn step(&mut self) -> Result<StepRecord> {
        let it = self.state.iteration;
        let lr = self.schedule.lr_at(it.min(self.schedule.total_iters))?;
        let batch = self.data.batch_at(it, self.config.data.batch_size)?;
        let (loss, psnr, contrastive, grads) = self.loss_and_grads(&batch.clean, &batch.rainy)?;
        self.adam.update(&mut self.model, &grads, lr).map_err(|e| match e {
            Error::Optimizer(msg) if msg.starts_with("non-finite") => Error::NonFinite { what: "gradient", iteration: it },
            other => other,
        })?;
        self.state.iteration += 1;
        self.state.adam_step = self.adam.step;
        Ok(StepRecord { iteration: it, loss, lr, psnr, contrastive, validation: None })
    }

    pub fn validate(&self) -> Result<Validation> {
        validate_pairs(&self.model, &self.val)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, &self.model, Some(&self.adam), self.state.clone())
    }

    /// Trains until the configured iteration count, validating and
    /// checkpointing every `val_every` steps and at the end. When `out_dir`
    /// is given, `latest.ckpt` and `best.ckpt` are written there. Each step
    /// is appended to `log` as CSV (`iter,loss,lr,val_psnr,val_ssim`).
    pub fn run(&mut self, out_dir: Option<&Path>, log: &mut dyn Write) -> Result<Vec<StepRecord>> {
        let log_err = |e: std::io::Error| Error::io(PathBuf::from("<training log>"), e);
        if self.state.iteration == 0 {
            writeln!(log, "iter,loss,lr,val_psnr,val_ssim").map_err(log_err)?;
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let total = self.config.train.iterations;
        let mut records = Vec::new();
        while self.state.iteration < total {
            let mut rec = self.step()?;
            let done = self.state.iteration;
            if done % self.config.train.val_every == 0 || done == total {
                let val = if self.val.is_empty() { None } else { Some(self.validate()?) };
                rec.validation = val;
                let improved = match (val, self.state.best_val_psnr) {
                    (Some(v), Some(best)) => v.psnr > best,
                    (Some(_), None) => true,
                    (None, _) => false,
                };
                if improved {
                    self.state.best_val_psnr = val.map(|v| v.psnr);
                }
                if let Some(dir) = out_dir {
                    let ckpt = self.checkpoint();
                    ckpt.save(&dir.join("latest.ckpt"))?;
                    if improved {
                        ckpt.save(&dir.join("best.ckpt"))?;
                    }
                }
            }
            let (vp, vs) = match rec.validation {
                Some(v) => (format!("{:.4}", v.psnr), format!("{:.5}", v.ssim)),
                None => (String::new(), String::new()),
            };
            writeln!(log, "{},{:.6},{:.6e},{vp},{vs}", rec.iteration, rec.loss, rec.lr).map_err(log_err)?;
            records.push(rec);
        }
        Ok(records)
    }
}

/// Mean PSNR and SSIM of `model` on full-size pairs.
pub fn validate_pairs(model: &Derainer<f32>, pairs: &[Pair]) -> Result<Validation> {
    if pairs.is_empty() {
        return Err(Error::Dataset("no validation pairs".into()));
    }
    let (mut p, mut s, mut r) = (0.0, 0.0, 0.0);
    for pair in pairs {
        let rainy = stack(std::slice::from_ref(&pair.rainy))?;
        let clean = stack(std::slice::from_ref(&pair.clean))?;
        let out = model.derain(&rainy)?;
        p += psnr(&out, &clean, 1.0)?;
        s += ssim(&out, &clean, 1.0)?;
        r += psnr(&rainy, &clean, 1.0)?;
    }
    let n = pairs.len() as f64;
    Ok(Validation { psnr: p / n, ssim: s / n, rainy_psnr: r / n })
}
