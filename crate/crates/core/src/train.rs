//! Mini-batch training with Adam, an append-only step log and periodic
//! checkpoints.
//!
//! Each sample gets its own graph; gradients are seeded with `1/B` and
//! summed into the parameter store, so a batch step equals the gradient of
//! the batch-mean loss. Parameters are rounded to 32-bit floats after every
//! update, which makes checkpoints an exact snapshot of the training state.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AdamState, Graph, OptimConfig, Tensor};
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::formats::save_checkpoint;
use crate::losses::{LossBreakdown, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;

/// Mixed into the seed of the shuffling generator so it is independent of
/// the initialization stream.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ptxc";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ptxc";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub epochs: usize,
    pub optim: OptimConfig,
    pub weights: LossWeights,
    pub model: ModelConfig,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            epochs: 40,
            optim: OptimConfig::default(),
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            checkpoint_every: 1,
            seed: 0,
        }
    }
}

impl TrainRun {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        self.optim.validate()?;
        self.weights.validate()?;
        self.model.validate()
    }
}

/// A decoded training image with its multi-hot target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub image: Tensor,
    pub target: Vec<f64>,
}

/// Decodes every image of the manifest at the model's input size.
pub fn load_samples(manifest: &DatasetManifest, config: &ModelConfig) -> Result<Vec<Sample>> {
    if manifest.num_classes() != config.classes {
        return Err(Error::Config(format!(
            "model has {} classes but the manifest vocabulary has {}",
            config.classes,
            manifest.num_classes()
        )));
    }
    let (h, w) = (config.backbone.input_height, config.backbone.input_width);
    manifest
        .records
        .iter()
        .map(|r| {
            Ok(Sample {
                image_id: r.image_id.clone(),
                image: manifest.load_tensor(r, h, w)?,
                target: manifest.target(r),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub cls: f64,
    pub loc: f64,
    pub div: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub run: TrainRun,
    pub model: Model,
    pub adam: AdamState,
    step: usize,
    rng: ChaCha8Rng,
    /// Parameters of the latest batch whose loss was finite.
    last_good: ParamStore,
}

impl Trainer {
    pub fn new(run: TrainRun) -> Result<Self> {
        run.validate()?;
        let model = Model::new(run.model, run.seed)?;
        Ok(Trainer::from_model(run, model))
    }

    pub fn from_model(run: TrainRun, mut model: Model) -> Self {
        model.store.round_to_f32();
        Trainer {
            run,
            last_good: model.store.clone(),
            model,
            adam: AdamState::new(),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(run.seed ^ SHUFFLE_STREAM),
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn last_good(&self) -> &ParamStore {
        &self.last_good
    }

    /// One optimizer step on the batch mean. A non-finite loss aborts before
    /// the parameters are touched.
    pub fn train_batch(&mut self, batch: &[&Sample]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        self.step += 1;
        self.model.store.zero_grad();
        let seed = 1.0 / batch.len() as f64;
        let mut parts = Vec::with_capacity(batch.len());
        for s in batch {
            let mut g = Graph::new();
            let p = self.model.store.bind(&mut g, true);
            let x = g.constant(s.image.shape(), s.image.data().to_vec())?;
            let t = g.constant(&[s.target.len()], s.target.clone())?;
            let fwd = self.model.forward(&mut g, &p, x)?;
            let l = self.model.loss(&mut g, &fwd, t, &self.run.weights)?;
            let b = l.breakdown(&g);
            if !b.is_finite() {
                self.model.store.zero_grad();
                return Err(Error::NonFiniteLoss { step: self.step });
            }
            g.backward_scaled(l.total, seed)?;
            self.model.store.accumulate_grads(&g, &p);
            parts.push(b);
        }
        self.last_good.clone_from(&self.model.store);
        self.adam.step(self.model.store.tensors_mut(), &self.run.optim)?;
        self.model.store.round_to_f32();
        Ok(LossBreakdown::mean(&parts))
    }

    /// One pass over a freshly shuffled order; the last partial batch is kept.
    pub fn train_epoch(
        &mut self,
        samples: &[Sample],
        epoch: usize,
        on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
    ) -> Result<LossBreakdown> {
        if samples.is_empty() {
            return Err(Error::Invalid("no training samples".into()));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut seen = Vec::new();
        for chunk in order.chunks(self.run.optim.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let b = self.train_batch(&batch)?;
            on_step(&StepRecord {
                step: self.step,
                epoch,
                cls: b.cls,
                loc: b.loc,
                div: b.div,
                total: b.total,
            })?;
            // weight by batch size so the epoch figure is a per-sample mean
            seen.extend(std::iter::repeat_n(b, batch.len()));
        }
        Ok(LossBreakdown::mean(&seen))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub epoch_losses: Vec<LossBreakdown>,
    pub steps: usize,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs all epochs. With an output directory, appends one JSON line per step
/// to [`LOG_FILE`] and writes checkpoints per the run's cadence plus
/// [`FINAL_CHECKPOINT`]. On a non-finite loss the parameters of the last
/// batch with a finite loss go to [`LAST_GOOD_CHECKPOINT`] and the error is
/// returned.
pub fn train(run: TrainRun, samples: &[Sample], out_dir: Option<&Path>) -> Result<TrainOutput> {
    train_from(Trainer::new(run)?, samples, out_dir)
}

pub fn train_from(mut trainer: Trainer, samples: &[Sample], out_dir: Option<&Path>) -> Result<TrainOutput> {
    if samples.is_empty() {
        return Err(Error::Invalid("training manifest is empty".into()));
    }
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut epoch_losses = Vec::with_capacity(trainer.run.epochs);
    let mut checkpoints = Vec::new();
    for epoch in 1..=trainer.run.epochs {
        let mut on_step = |r: &StepRecord| -> Result<()> {
            if let Some((f, path)) = log.as_mut() {
                let line = serde_json::to_string(r).expect("step record serializes");
                writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            Ok(())
        };
        let mean = match trainer.train_epoch(samples, epoch, &mut on_step) {
            Ok(m) => m,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                if let Some(dir) = out_dir {
                    save_checkpoint(&dir.join(LAST_GOOD_CHECKPOINT), trainer.last_good())?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        log::info!(
            "epoch {epoch}: total {:.6} (cls {:.6}, loc {:.6}, div {:.6})",
            mean.total,
            mean.cls,
            mean.loc,
            mean.div
        );
        epoch_losses.push(mean);
        let every = trainer.run.checkpoint_every;
        if let Some(dir) = out_dir {
            if every > 0 && epoch % every == 0 {
                let path = dir.join(format!("checkpoint_epoch{epoch:03}.ptxc"));
                save_checkpoint(&path, &trainer.model.store)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join(FINAL_CHECKPOINT);
        save_checkpoint(&path, &trainer.model.store)?;
        checkpoints.push(path);
    }
    Ok(TrainOutput {
        steps: trainer.steps(),
        model: trainer.model,
        epoch_losses,
        checkpoints,
    })
}
