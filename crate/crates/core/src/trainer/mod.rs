//! End-to-end training: one variational Adam update and one adversarial
//! update per step, the learning-rate schedule, metrics records and
//! checkpoints.

mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::{clip_global_norm, sum_grads, Adam};
use crate::autodiff::ParamStore;
use crate::cloud::PointCloud;
use crate::config::{DataConfig, RunConfig};
use crate::datasets::{load_archive, synth_shapes, CompletionSample};
use crate::error::{Error, Result};
use crate::fusion::FusionBranch;
use crate::model::{derive_seed, CompletionBundle, DualGenerator};
use crate::objectives::LossReport;
use crate::stylegan::{gan_step, GanOptim, GanRates};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling for every optimizer.
    pub clip: f64,
    /// Adversarial learning rate relative to [`lr_at`].
    pub gan_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            lr_decay: 0.7,
            lr_decay_every: 40,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 8,
            epochs: 1,
            seed: 0,
            clip: 10.0,
            gan_lr_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("train.lr0", "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("train.lr_decay", "must lie in (0, 1]"));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::config("train.lr_decay_every", "must be at least 1"));
        }
        if !((0.0..1.0).contains(&self.beta1)) {
            return Err(Error::config("train.beta1", "must lie in [0, 1)"));
        }
        if !((0.0..1.0).contains(&self.beta2)) {
            return Err(Error::config("train.beta2", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.clip > 0.0) {
            return Err(Error::config("train.clip", "must be positive"));
        }
        if !(self.gan_lr_scale >= 0.0 && self.gan_lr_scale.is_finite()) {
            return Err(Error::config("train.gan_lr_scale", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// `lr0 · lr_decay^⌊epoch / lr_decay_every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
    /// Deviation score per sample, batch order.
    pub s: Vec<f64>,
    pub branch: Vec<FusionBranch>,
    pub g_loss: f64,
    pub d_loss: f64,
    /// Variational gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepRecord {
    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("step records serialize");
        s.push('\n');
        s
    }
}

/// Parameters, optimizer state and position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: DualGenerator,
    pub store: ParamStore,
    pub var_opt: Adam,
    pub gan_opt: GanOptim,
    pub epoch: usize,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = DualGenerator::new(&mut store, &config.model, config.train.seed)?;
        let t = &config.train;
        Ok(Self {
            var_opt: Adam::new(t.beta1, t.beta2),
            gan_opt: GanOptim::new(t.beta1, t.beta2),
            config,
            model,
            store,
            epoch: 0,
            step: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.epoch, &self.config.train)
    }

    /// One variational update from the weighted total loss, then one
    /// adversarial update. Per-sample work runs in parallel; gradients are
    /// summed in batch order so results do not depend on thread count.
    pub fn train_step(&mut self, batch: &[CompletionSample]) -> Result<StepRecord> {
        self.train_step_with_lr(batch, self.lr())
    }

    /// [`Trainer::train_step`] with an explicit variational learning rate.
    pub fn train_step_with_lr(&mut self, batch: &[CompletionSample], lr: f64) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::domain("training step needs a non-empty batch"));
        }
        let (seed, step, epoch) = (self.config.train.seed, self.step, self.epoch);
        let model = &self.model;
        let store = &self.store;
        let weights = &self.config.loss;
        let passes = batch
            .par_iter()
            .enumerate()
            .map(|(i, s)| model.training_pass(store, s, weights, epoch, derive_seed(&[seed, step, i as u64])))
            .collect::<Result<Vec<_>>>()?;

        let n = passes.len() as f64;
        let mut grads = sum_grads(passes.iter().map(|p| p.grads.clone()).collect());
        for g in grads.values_mut() {
            g.scale_in_place(1.0 / n);
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.train.clip);
        if !grad_norm.is_finite() {
            return Err(Error::non_finite("variational gradients"));
        }
        self.var_opt.step(&mut self.store, &grads, lr);

        let examples: Vec<_> = passes.iter().map(|p| p.gan.clone()).collect();
        let gan_lr = lr * self.config.train.gan_lr_scale;
        let rates = GanRates {
            gen: gan_lr,
            disc: gan_lr,
            clip: self.config.train.clip,
        };
        let gl = gan_step(&mut self.store, &self.model.gan, &mut self.gan_opt, &examples, rates)?;
        if !(gl.g_loss.is_finite() && gl.d_loss.is_finite()) {
            return Err(Error::non_finite("adversarial losses"));
        }
        self.step += 1;
        Ok(StepRecord {
            step,
            epoch,
            lr,
            loss: LossReport::mean(&passes.iter().map(|p| p.report.clone()).collect::<Vec<_>>()),
            s: passes.iter().map(|p| p.deviation).collect(),
            branch: passes.iter().map(|p| p.branch).collect(),
            g_loss: gl.g_loss,
            d_loss: gl.d_loss,
            grad_norm,
        })
    }

    /// Sample order for the current epoch.
    pub fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.config.train.seed, self.epoch as u64, 0xE]));
        idx.shuffle(&mut rng);
        idx
    }

    /// One pass over `data` in shuffled batches. `on_step` sees every record.
    pub fn run_epoch(&mut self, data: &[CompletionSample], mut on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        let order = self.epoch_order(data.len());
        for chunk in order.chunks(self.config.train.batch_size) {
            let batch: Vec<CompletionSample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let rec = self.train_step(&batch)?;
            on_step(&rec)?;
        }
        self.epoch += 1;
        Ok(())
    }

    /// Completes a partial cloud with the current parameters.
    pub fn infer(&self, x: &PointCloud, seed: u64) -> Result<CompletionBundle> {
        self.model.infer(&self.store, x, self.epoch, seed)
    }

    /// Parameters whose values differ from `other`, for diagnostics.
    pub fn changed_params(&self, other: &ParamStore) -> Vec<String> {
        self.store
            .iter()
            .filter(|(k, v)| other.get(k) != Some(*v))
            .map(|(k, _)| k.to_string())
            .collect()
    }
}

/// Samples for training: the configured archive, or synthetic shapes.
pub fn training_set(cfg: &RunConfig) -> Result<Vec<CompletionSample>> {
    load_split(&cfg.data, cfg.data.train.as_deref(), &cfg.data.train_split, cfg.train.seed)
}

/// Samples for evaluation. Without an archive this is the synthetic
/// training set.
pub fn evaluation_set(cfg: &RunConfig) -> Result<Vec<CompletionSample>> {
    load_split(&cfg.data, cfg.data.eval.as_deref(), &cfg.data.eval_split, cfg.train.seed)
}

fn load_split(d: &DataConfig, path: Option<&std::path::Path>, split: &str, seed: u64) -> Result<Vec<CompletionSample>> {
    match path {
        Some(p) => load_archive(p, split)?.map(|s| s.map(|s| s.normalized())).collect(),
        None => synth_shapes(d.synthetic_count, &d.synthetic_kinds, d.synthetic_resolution, seed),
    }
}

/// Element-wise maximum absolute difference between two stores with the
/// same names.
pub fn max_param_delta(a: &ParamStore, b: &ParamStore) -> f64 {
    a.iter()
        .filter_map(|(k, v)| b.get(k).map(|w| v.zip_map(w, |x, y| (x - y).abs()).max_abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 1e-4);
        assert!((lr_at(39, &c) - 1e-4).abs() < 1e-20);
        assert!((lr_at(40, &c) - 7e-5).abs() < 1e-18);
        assert!((lr_at(85, &c) - 4.9e-5).abs() < 1e-18);
    }

    #[test]
    fn invalid_train_config() {
        let mut c = TrainConfig::default();
        c.lr0 = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.lr_decay = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.lr_decay = 1.0;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let t = Trainer::new(RunConfig::toy()).unwrap();
        let mut a = t.epoch_order(10);
        assert_eq!(a, t.epoch_order(10));
        a.sort_unstable();
        assert_eq!(a, (0..10).collect::<Vec<_>>());
    }
}
