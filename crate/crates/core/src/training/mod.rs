//! Training, voting evaluation, metrics and the experiment harnesses.
//!
//! Gradients of a batch are computed per sample (optionally in parallel)
//! and summed in sample order, so results do not depend on the number of
//! worker threads.

mod data;
mod experiments;
mod metrics;
mod optimizer;

pub use data::{cylinder_segmentation, desk_classification, Dataset, DeskSpec, Sample, DESK_CLASSES};
pub use experiments::{robustness_csv, run_ablation, run_robustness, AblationRow, AblationTable, AblationToggles, RobustnessMode};
pub use metrics::{argmax, miou, shape_miou, EvalReport};
pub use optimizer::{LrSchedule, Optimizer, OptimizerConfig};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gdanet, Task};
use crate::pointcloud::{augment, AugmentSpec, PointCloud};
use crate::tensor::{ParamStore, Real, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// Compute a batch on the calling thread only.
    pub deterministic: bool,
    /// Per-sample augmentation; its seed is replaced per sample and epoch.
    pub augment: Option<AugmentSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            epochs: 50,
            batch_size: 16,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
            deterministic: false,
            augment: Some(AugmentSpec {
                scale_range: [0.8, 1.25],
                translate_range: 0.1,
                ..AugmentSpec::identity(0)
            }),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
}

/// Returned by the per-epoch callback of [`train_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// `epoch,loss,acc` rows.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,acc\n");
    for e in log {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.acc));
    }
    out
}

fn seed_for(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    for v in [a, b] {
        h ^= v.wrapping_mul(0xd6e8_feb8_6659_fd93);
        h = (h ^ (h >> 32)).wrapping_mul(0xd6e8_feb8_6659_fd93);
        h ^= h >> 32;
    }
    h
}

fn check_dataset(model: &Gdanet, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    let cfg = model.config();
    for (i, s) in data.samples.iter().enumerate() {
        let bad = match cfg.task {
            Task::Classification => s.label >= cfg.n_classes,
            Task::Segmentation => {
                s.category >= cfg.n_seg_heads
                    || s.cloud
                        .point_labels()
                        .is_none_or(|l| l.iter().any(|&p| p >= cfg.n_classes))
            }
        };
        if bad {
            return Err(Error::InvalidInput(format!(
                "sample {i} has labels outside the model's {} outputs",
                cfg.n_classes
            )));
        }
    }
    Ok(())
}

struct SampleResult<T> {
    loss: f64,
    correct: usize,
    count: usize,
    grads: Vec<Option<Tensor<T>>>,
}

fn sample_step<T: Real>(model: &Gdanet, store: &ParamStore<T>, sample: &Sample, cloud: &PointCloud) -> Result<SampleResult<T>> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let coords = cloud.coords_tensor::<T>();
    let (loss, correct, count) = match model.config().task {
        Task::Classification => {
            let logits = model.classify_vars(&tape, &bound, &coords, None)?;
            let pred = argmax(&tape.value(logits).to_f64_vec());
            let loss = tape.cross_entropy(logits, &[sample.label])?;
            (loss, usize::from(pred == sample.label), 1)
        }
        Task::Segmentation => {
            let labels = cloud.point_labels().expect("checked by check_dataset");
            let logits = model.segment_vars(&tape, &bound, &coords, sample.category, None)?;
            let value = tape.value(logits).to_f64_vec();
            let parts = model.config().n_classes;
            let correct = value
                .chunks_exact(parts)
                .zip(labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            let loss = tape.cross_entropy(logits, labels)?;
            (loss, correct, labels.len())
        }
    };
    let loss_value = tape.value(loss).data()[0].as_f64();
    let mut grads = tape.backward(loss)?;
    Ok(SampleResult {
        loss: loss_value,
        correct,
        count,
        grads: bound.vars().iter().map(|&v| grads.take(v)).collect(),
    })
}

/// Trains in place and returns the per-epoch log.
pub fn train<T: Real>(model: &Gdanet, store: &mut ParamStore<T>, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    train_with(model, store, data, cfg, |_, _| Ok(Control::Continue))
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with<T, F>(
    model: &Gdanet,
    store: &mut ParamStore<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>>
where
    T: Real,
    F: FnMut(&EpochLog, &ParamStore<T>) -> Result<Control>,
{
    cfg.validate()?;
    check_dataset(model, data)?;
    let mut opt = Optimizer::new(cfg.optimizer, store)?;
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let base_lr = cfg.optimizer.lr();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(cfg.seed, 1, epoch as u64));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut count) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let work = |&i: &usize| -> Result<SampleResult<T>> {
                let sample = &data.samples[i];
                let cloud = match &cfg.augment {
                    Some(a) => augment(
                        &sample.cloud,
                        &AugmentSpec {
                            seed: seed_for(cfg.seed, 2 + epoch as u64, i as u64),
                            ..a.clone()
                        },
                    )?,
                    None => sample.cloud.clone(),
                };
                sample_step(model, store, sample, &cloud)
            };
            let results: Vec<Result<SampleResult<T>>> = if cfg.deterministic {
                batch.iter().map(work).collect()
            } else {
                batch.par_iter().map(work).collect()
            };

            let mut sum: Vec<Option<Tensor<T>>> = vec![None; store.len()];
            let mut batch_loss = 0.0;
            for r in results {
                let r = r?;
                batch_loss += r.loss;
                correct += r.correct;
                count += r.count;
                for (acc, g) in sum.iter_mut().zip(r.grads) {
                    match (acc.as_mut(), g) {
                        (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, &g)| *a += g),
                        (None, Some(g)) => *acc = Some(g),
                        _ => {}
                    }
                }
            }
            let batch_loss = batch_loss / batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { step, loss: batch_loss });
            }
            let inv = T::from_f64_lossy(1.0 / batch.len() as f64);
            for g in sum.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            let lr = cfg.lr_schedule.rate(base_lr, step, total_steps);
            opt.step(store, &sum, lr)?;
            loss_sum += batch_loss * batch.len() as f64;
            step += 1;
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            loss: loss_sum / data.len() as f64,
            acc: correct as f64 / count.max(1) as f64,
        };
        log.push(entry);
        if on_epoch(&entry, store)? == Control::Stop {
            break;
        }
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteConfig {
    pub votes: usize,
    pub scale_range: [f64; 2],
    pub seed: u64,
}

impl Default for VoteConfig {
    fn default() -> Self {
        Self {
            votes: 10,
            scale_range: [0.8, 1.2],
            seed: 0,
        }
    }
}

impl VoteConfig {
    /// A single pass over the unmodified input.
    pub fn plain() -> Self {
        Self {
            votes: 1,
            scale_range: [1.0, 1.0],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if self.votes == 0 || !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("invalid voting settings {self:?}")));
        }
        Ok(())
    }
}

/// Logits of one sample averaged over `votes` rescaled copies, as f64.
/// Classification gives `[n_classes]`, segmentation `[N · n_parts]`.
pub fn vote_logits<T: Real>(model: &Gdanet, store: &ParamStore<T>, sample: &Sample, index: usize, votes: &VoteConfig) -> Result<Vec<f64>> {
    votes.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(votes.seed, 3, index as u64));
    let [lo, hi] = votes.scale_range;
    let mut mean: Vec<f64> = Vec::new();
    for v in 0..votes.votes {
        let s = if lo < hi { rng.random_range(lo..hi) } else { lo };
        let mut cloud = sample.cloud.clone();
        if s != 1.0 {
            cloud.map_xyz(|p| p.map(|c| c * s));
        }
        let logits = match model.config().task {
            Task::Classification => model.forward_classify(store, &cloud)?,
            Task::Segmentation => model.forward_segment(store, &cloud, sample.category)?,
        }
        .to_f64_vec();
        // Running mean: identical votes reproduce the single-vote logits exactly.
        if v == 0 {
            mean = logits;
        } else {
            let w = 1.0 / (v + 1) as f64;
            mean.iter_mut().zip(&logits).for_each(|(m, l)| *m += (l - *m) * w);
        }
    }
    Ok(mean)
}

/// Evaluates `data` with logit voting.
pub fn evaluate<T: Real>(model: &Gdanet, store: &ParamStore<T>, data: &Dataset, votes: &VoteConfig) -> Result<EvalReport> {
    votes.validate()?;
    check_dataset(model, data)?;
    let logits: Vec<Vec<f64>> = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| vote_logits(model, store, s, i, votes))
        .collect::<Result<_>>()?;
    let n_out = model.config().n_classes;
    match model.config().task {
        Task::Classification => {
            let preds: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
            let labels: Vec<usize> = data.samples.iter().map(|s| s.label).collect();
            EvalReport::from_predictions(&preds, &labels, n_out)
        }
        Task::Segmentation => {
            let preds: Vec<Vec<usize>> = logits.iter().map(|l| l.chunks_exact(n_out).map(argmax).collect()).collect();
            let labels: Vec<Vec<usize>> = data
                .samples
                .iter()
                .map(|s| s.cloud.point_labels().expect("checked").to_vec())
                .collect();
            let categories: Vec<usize> = data.samples.iter().map(|s| s.category).collect();
            let mut report = EvalReport::from_predictions(&preds.concat(), &labels.concat(), n_out)?;
            let part_sets = if data.part_sets.is_empty() {
                vec![(0..n_out).collect(); model.config().n_seg_heads]
            } else {
                data.part_sets.clone()
            };
            let (inst, class) = miou(&preds, &labels, &categories, &part_sets)?;
            report.instance_miou = Some(inst);
            report.class_miou = Some(class);
            Ok(report)
        }
    }
}
